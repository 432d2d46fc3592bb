//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ATRIUM_CRITERIA=1,2,8` to run a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atrium::baselines::{build_baseline, ModelSpec};
use atrium::evaluation::{
    aggregate, dice, iou, morph_close, morph_open, render_overlay, tint_counts, MetricReport,
    Overlap, PatientMetrics, StructuringElement,
};
use atrium::experiments::{
    emit_plots, plot_series, read_plot_csv, read_rows, write_rows, CellResult, ComparisonRow,
    ExperimentResult, Mode, Provenance, SweepRow, SweepValue,
};
use atrium::head::{self, HeadConfig, SegHead};
use atrium::imaging::{
    extract_slices, generate_phantom, split_patients, write_manifests, BaselinePreprocess,
    DatasetSplit, PhantomSpec, SliceSample, VitPreprocess,
};
use atrium::training::{bce_with_logits, SampleSet};
use atrium::vit::{patchify, untile, BackboneVariant, VitBackbone, PATCH_SIZE};
use atrium::{Architecture, Segmenter};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn phantom(n: usize, side: usize, slices: usize, seed: u64) -> Vec<atrium::imaging::Volume> {
    generate_phantom(&PhantomSpec {
        n_volumes: n,
        height: side,
        width: side,
        n_slices: slices,
        noise_sigma: 0.05,
        seed,
    })
    .unwrap()
}

fn vit_batch(slices: &[SliceSample], dtype: DType) -> (Tensor, Tensor) {
    let prep = VitPreprocess::default();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in slices {
        let (img, mask) = prep.apply(s);
        let (c, h, w) = img.dim();
        xs.push(Tensor::from_iter(img.iter().copied(), &Device::Cpu).unwrap().reshape((c, h, w)).unwrap());
        ys.push(SampleSet::mask_to_tensor(&mask).unwrap());
    }
    (
        Tensor::stack(&xs, 0).unwrap().to_dtype(dtype).unwrap(),
        Tensor::stack(&ys, 0).unwrap().to_dtype(dtype).unwrap(),
    )
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

// ---------------------------------------------------------------------------

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for k in 0..100 {
        let p_a = rng.random_range(0.0..1.0);
        let p_b = rng.random_range(0.0..1.0);
        let a = Array2::from_shape_fn((16, 16), |_| u8::from(rng.random_bool(p_a)));
        let b = Array2::from_shape_fn((16, 16), |_| u8::from(rng.random_bool(p_b)));
        let (mut inter, mut na, mut nb, mut union) = (0u64, 0u64, 0u64, 0u64);
        for (&x, &y) in a.iter().zip(b.iter()) {
            inter += u64::from(x == 1 && y == 1);
            na += u64::from(x == 1);
            nb += u64::from(y == 1);
            union += u64::from(x == 1 || y == 1);
        }
        let (bd, bi) = if na + nb == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * inter as f64 / (na + nb) as f64, inter as f64 / union as f64)
        };
        let d = dice(&a, &b).map_err(e2s)?;
        let j = iou(&a, &b).map_err(e2s)?;
        worst = worst.max((d - bd).abs()).max((j - bi).abs());
        // Exact rational identity: iou = I/(A+B-I) and dice/(2-dice) = 2I/(2(A+B)-2I).
        let o = Overlap::of(&a, &b).map_err(e2s)?;
        let (i, s) = (o.intersection, o.a + o.b);
        if s > 0 {
            ensure(
                i * (2 * s - 2 * i) == 2 * i * (s - i),
                format!("pair {k}: rational identity broken"),
            )?;
        }
        worst_identity = worst_identity.max((j - d / (2.0 - d)).abs());
    }
    ensure(worst <= 1e-9, format!("max abs error {worst:e}"))?;
    ensure(worst_identity <= 4.0 * f64::EPSILON, format!("identity off by {worst_identity:e}"))?;
    Ok(format!("max abs error {worst:e}, identity residual {worst_identity:e}"))
}

fn patchify_round_trip() -> Check {
    let img = Tensor::randn(0f32, 1.0, (1, 3, 448, 448), &Device::Cpu).map_err(e2s)?;
    let p = patchify(&img, PATCH_SIZE).map_err(e2s)?;
    ensure(p.dims() == [1, 1024, 3 * 14 * 14], format!("patch shape {:?}", p.dims()))?;
    let back = untile(&p, 32, 32, PATCH_SIZE).map_err(e2s)?;
    let err = scalar(&(back - &img).map_err(e2s)?.abs().map_err(e2s)?.max_all().map_err(e2s)?);
    ensure(err == 0.0, format!("reassembly error {err}"))?;
    let odd = Tensor::zeros((1, 3, 450, 448), DType::F32, &Device::Cpu).map_err(e2s)?;
    ensure(patchify(&odd, PATCH_SIZE).is_err(), "450x448 accepted")?;
    Ok("1024 patches of 14x14, error 0, 450x448 rejected".into())
}

fn frozen_backbone_audit() -> Check {
    let variant = BackboneVariant::tiny_test(32, 1, 2).map_err(e2s)?;
    let backbone = VitBackbone::new(variant, 3, DType::F32).map_err(e2s)?.freeze();
    let head = SegHead::new(HeadConfig::new(32).with_channels(16), 4, DType::F32).map_err(e2s)?;
    let vols = phantom(1, 64, 4, 11);
    let (x, y) = vit_batch(&extract_slices(&vols[0])[..2], DType::F32);

    let before_bb = backbone.store().state().map_err(e2s)?;
    let before_head = head.store().state().map_err(e2s)?;
    let mut vars = backbone.store().trainable_vars();
    vars.extend(head.store().trainable_vars());
    let trainable: usize = vars.iter().map(|v| v.elem_count()).sum();
    let mut opt = AdamW::new(vars, ParamsAdamW { lr: 1e-3, weight_decay: 0.0, ..Default::default() })
        .map_err(e2s)?;
    for _ in 0..5 {
        let logits = head::forward(&x, &backbone, &head).map_err(e2s)?;
        opt.backward_step(&bce_with_logits(&logits, &y).map_err(e2s)?).map_err(e2s)?;
    }
    let bits = |t: &Tensor| -> Vec<u64> { to_vec(t).iter().map(|v| v.to_bits()).collect() };
    for ((name, a), (_, b)) in before_bb.iter().zip(backbone.store().state().map_err(e2s)?) {
        ensure(bits(a) == bits(&b), format!("backbone tensor {name} changed"))?;
    }
    let changed = before_head
        .iter()
        .zip(head.store().state().map_err(e2s)?)
        .filter(|((_, a), (_, b))| bits(a) != bits(b))
        .count();
    ensure(changed >= 1, "no head parameter changed")?;
    let head_only = head.store().weight_count();
    ensure(trainable == head_only, format!("trainable {trainable} vs head {head_only}"))?;
    Ok(format!(
        "{} backbone tensors bitwise unchanged, {changed} head tensors changed, trainable = head = {head_only}",
        before_bb.len()
    ))
}

fn gradient_correctness() -> Check {
    // Loss gradient: N * d(mean BCE)/dl = sigmoid(l) - y.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 64;
    let l: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let yt = Tensor::from_vec(y.clone(), n, &Device::Cpu).map_err(e2s)?;
    let loss_at = |v: &[f64]| -> f64 {
        let t = Tensor::from_vec(v.to_vec(), n, &Device::Cpu).unwrap();
        scalar(&bce_with_logits(&t, &yt).unwrap()) * n as f64
    };
    let lv = Var::from_vec(l.clone(), n, &Device::Cpu).map_err(e2s)?;
    let grads = bce_with_logits(lv.as_tensor(), &yt).map_err(e2s)?.backward().map_err(e2s)?;
    let g = to_vec(grads.get(&lv).ok_or("no gradient for logits")?);
    let mut worst_loss: f64 = 0.0;
    for i in 0..n {
        let analytic = 1.0 / (1.0 + (-l[i]).exp()) - y[i];
        let eps = 1e-6;
        let (mut up, mut down) = (l.clone(), l.clone());
        up[i] += eps;
        down[i] -= eps;
        let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * eps);
        worst_loss = worst_loss.max((analytic - fd).abs()).max((analytic - g[i] * n as f64).abs());
    }
    ensure(worst_loss <= 1e-6, format!("loss gradient off by {worst_loss:e}"))?;

    // Whole tiny model, backbone unfrozen, in f64.
    let variant = BackboneVariant::tiny_test(16, 1, 2).map_err(e2s)?;
    let backbone = VitBackbone::new(variant, 5, DType::F64).map_err(e2s)?;
    let head = SegHead::new(HeadConfig::new(16).with_channels(8), 6, DType::F64).map_err(e2s)?;
    for (name, var) in head.store().weights() {
        if name.ends_with("bias") {
            let b = Tensor::randn(0f64, 0.1, var.shape(), &Device::Cpu).map_err(e2s)?;
            var.set(&b).map_err(e2s)?;
        }
    }
    let vols = phantom(1, 32, 3, 12);
    let (x, y) = vit_batch(&extract_slices(&vols[0])[1..2], DType::F64);
    let loss = || -> f64 {
        let z = backbone.encode(&x).unwrap();
        scalar(&bce_with_logits(&head.forward_grid(&z).unwrap(), &y).unwrap())
    };
    let z = backbone.encode(&x).map_err(e2s)?;
    let grads = bce_with_logits(&head.forward_grid(&z).map_err(e2s)?, &y)
        .map_err(e2s)?
        .backward()
        .map_err(e2s)?;
    let mut params = backbone.store().weights();
    params.extend(head.store().weights());
    let mut worst_rel: f64 = 0.0;
    let mut probed = Vec::new();
    for _ in 0..10 {
        let (name, var) = &params[rng.random_range(0..params.len())];
        let idx = rng.random_range(0..var.elem_count());
        let g = to_vec(grads.get(var).ok_or(format!("no gradient for {name}"))?)[idx];
        let orig = var.as_tensor().copy().map_err(e2s)?;
        let mut flat = to_vec(&orig);
        let eps = 1e-5;
        flat[idx] += eps;
        var.set(&Tensor::from_vec(flat.clone(), orig.shape(), &Device::Cpu).map_err(e2s)?).map_err(e2s)?;
        let up = loss();
        flat[idx] -= 2.0 * eps;
        var.set(&Tensor::from_vec(flat, orig.shape(), &Device::Cpu).map_err(e2s)?).map_err(e2s)?;
        let down = loss();
        var.set(&orig).map_err(e2s)?;
        let fd = (up - down) / (2.0 * eps);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-9);
        worst_rel = worst_rel.max(rel);
        probed.push(name.clone());
    }
    ensure(worst_rel <= 1e-3, format!("model gradient relative error {worst_rel:e} ({probed:?})"))?;
    Ok(format!("loss gradient error {worst_loss:e}, model relative error {worst_rel:e} over 10 parameters"))
}

fn fit(model: &dyn Segmenter, x: &Tensor, y: &Tensor, steps: usize, lr: f64) -> Result<(f64, f64), String> {
    let mut opt = AdamW::new(
        model.store().trainable_vars(),
        ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() },
    )
    .map_err(e2s)?;
    let first = scalar(&bce_with_logits(&model.forward(x, false).map_err(e2s)?, y).map_err(e2s)?);
    for _ in 0..steps {
        let loss = bce_with_logits(&model.forward(x, true).map_err(e2s)?, y).map_err(e2s)?;
        opt.backward_step(&loss).map_err(e2s)?;
    }
    let last = scalar(&bce_with_logits(&model.forward(x, false).map_err(e2s)?, y).map_err(e2s)?);
    Ok((first, last))
}

fn logits_dice(logits: &Tensor, y: &Tensor) -> f64 {
    let p: Vec<u8> = logits.ge(0.0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let t: Vec<u8> = y.to_dtype(DType::U8).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    dice(&ndarray::Array1::from(p), &ndarray::Array1::from(t)).unwrap()
}

fn loss_descent() -> Check {
    // Transformer head on a fixed 4-slice batch of cached token grids.
    let variant = BackboneVariant::tiny_test(64, 2, 4).map_err(e2s)?;
    let backbone = VitBackbone::new(variant, 0, DType::F32).map_err(e2s)?.freeze();
    let head = SegHead::new(HeadConfig::new(64).with_channels(64), 1, DType::F32).map_err(e2s)?;
    let vols = phantom(2, 64, 8, 21);
    let slices: Vec<SliceSample> = vols.iter().flat_map(|v| extract_slices(v)[3..5].to_vec()).collect();
    let (x, y) = vit_batch(&slices, DType::F32);
    let grids = backbone.encode(&x).map_err(e2s)?.0;
    let (first, last) = fit(&head, &grids, &y, 200, 1e-3)?;
    let drop = 1.0 - last / first;
    ensure(drop >= 0.5, format!("head BCE {first:.4} -> {last:.4} ({:.1}% drop)", 100.0 * drop))?;
    let mut lines = vec![format!("head BCE {first:.4} -> {last:.4} (-{:.1}%)", 100.0 * drop)];

    // Each baseline memorises one slice at its native size. Res50 gets 64 px
    // so its deepest stage is 2x2 rather than a single pixel, which batch
    // norm cannot normalise in train mode.
    for (arch, side) in [
        (Architecture::Unet, 32),
        (Architecture::AttentionUnet, 32),
        (Architecture::Res50Unet, 64),
    ] {
        let slice = &extract_slices(&phantom(1, side, 8, 22)[0])[4];
        let prep = BaselinePreprocess { pad_target: side, target: side, ..Default::default() };
        let (img, mask) = prep.apply(slice).map_err(e2s)?;
        let y = SampleSet::mask_to_tensor(&mask).map_err(e2s)?.unsqueeze(0).map_err(e2s)?.to_dtype(DType::F32).map_err(e2s)?;
        let spec = ModelSpec::new(arch).with_input_size(side).with_base_channels(8);
        let model = build_baseline(&spec, 0, DType::F32, None).map_err(e2s)?;
        let plane = Tensor::from_iter(img.iter().copied(), &Device::Cpu)
            .map_err(e2s)?
            .reshape((1, 1, side, side))
            .map_err(e2s)?;
        let x = if spec.in_channels() == 3 { plane.repeat((1, 3, 1, 1)).map_err(e2s)? } else { plane };
        fit(model.as_ref(), &x, &y, 300, 3e-3)?;
        let d = logits_dice(&model.forward(&x, false).map_err(e2s)?, &y);
        ensure(d >= 0.99, format!("{arch} reached Dice {d:.4}"))?;
        lines.push(format!("{arch} Dice {d:.4}"));
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_atrium")
}

fn run(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ATRIUM_PROBE_CACHE")
        .output()
        .map_err(e2s)?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "`atrium {}` failed: {}{}",
            args.join(" "),
            stdout,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(stdout)
}

/// Writes a phantom corpus through the CLI and fixed train/val/test
/// manifests taken in id order.
fn cli_corpus(dir: &Path, n: [usize; 3], seed: u64) -> Result<(PathBuf, PathBuf), String> {
    let data = dir.join("data");
    let total = n.iter().sum::<usize>().to_string();
    let seed = seed.to_string();
    run(&["phantom", "--out", data.to_str().unwrap(), "--n", &total, "--size", "64x64x8", "--noise", "0.05", "--seed", &seed])?;
    let ids: Vec<String> = (0..n.iter().sum()).map(|i| format!("phantom_{i:03}")).collect();
    let split = DatasetSplit {
        train_ids: ids[..n[0]].to_vec(),
        val_ids: ids[n[0]..n[0] + n[1]].to_vec(),
        test_ids: ids[n[0] + n[1]..].to_vec(),
        seed: 0,
    };
    let split_dir = dir.join("split");
    write_manifests(&split_dir, &split).map_err(e2s)?;
    Ok((data, split_dir))
}

const MODEL: &str = r#"
[model]
variant = "tiny-test"
tiny_embed_dim = 64
tiny_depth = 2
tiny_heads = 4
head_channels = 64
base_channels = 8
baseline_input_size = 64
baseline_pad_target = 64
vit_norm = { kind = "slice_z_score" }
"#;

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let (data, split) = cli_corpus(dir.path(), [40, 5, 10], 3)?;
    let cfg = format!(
        r#"
[data]
root = "{}"
split_dir = "{}"

[experiment]
methods = ["unet", "vit_head"]
{MODEL}
[train]
batch_size = 8

[train.method.unet]
learning_rate = 0.003
max_epochs = 3

[train.method.vit_head]
learning_rate = 0.001
max_epochs = 4
"#,
        data.display(),
        split.display()
    );
    let cfg_path = dir.path().join("compare.toml");
    std::fs::write(&cfg_path, cfg).map_err(e2s)?;
    let out = dir.path().join("out");
    run(&["compare", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
    let rows: Vec<ComparisonRow> = read_rows(&out.join("comparison.csv")).map_err(e2s)?;
    ensure(rows.len() == 2, format!("{} comparison rows", rows.len()))?;
    let mut parts = Vec::new();
    for r in &rows {
        let d = r.dice_mean.ok_or(format!("{} failed: {:?}", r.method, r.error))?;
        let j = r.iou_mean.unwrap_or(f64::NAN);
        ensure((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j), format!("{} metrics out of range", r.method))?;
        ensure(d >= 0.70, format!("{} test Dice {d:.4} < 0.70", r.method))?;
        parts.push(format!("{} Dice {d:.4} IoU {j:.4}", r.method));
    }
    Ok(parts.join(", "))
}

fn fewshot_integrity() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let (data, split) = cli_corpus(dir.path(), [12, 2, 4], 5)?;
    let base = |experiment: &str| {
        format!(
            r#"
[data]
root = "{}"
split_dir = "{}"

[experiment]
methods = ["unet"]
fewshot_max_epochs = 4
{experiment}
{MODEL}
[train]
batch_size = 8
learning_rate = 0.003
max_epochs = 4
"#,
            data.display(),
            split.display()
        )
    };
    let mut outs = Vec::new();
    for (name, cmd, exp) in [
        ("full", "compare", ""),
        ("fraction", "fewshot", "mode = \"fraction_sweep\"\nvalues = [0.1, 1.0]"),
        ("patients", "fewshot", "mode = \"patient_sweep\"\nvalues = [1, \"all\"]"),
    ] {
        let cfg = dir.path().join(format!("{name}.toml"));
        std::fs::write(&cfg, base(exp)).map_err(e2s)?;
        let out = dir.path().join(name);
        run(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
        outs.push(out);
    }
    let full: Vec<ComparisonRow> = read_rows(&outs[0].join("comparison.csv")).map_err(e2s)?;
    let mut sweep: Vec<SweepRow> = read_rows(&outs[1].join("fewshot.csv")).map_err(e2s)?;
    sweep.extend(read_rows::<SweepRow>(&outs[2].join("fewshot.csv")).map_err(e2s)?);
    ensure(sweep.len() == 4, format!("{} sweep cells", sweep.len()))?;
    for r in &sweep {
        ensure(r.error.is_none(), format!("cell {} failed: {:?}", r.value, r.error))?;
    }

    let hashes: BTreeSet<&str> = sweep
        .iter()
        .filter_map(|r| r.test_split_hash.as_deref())
        .chain(full[0].test_split_hash.as_deref())
        .collect();
    ensure(hashes.len() == 1, format!("{} distinct test-split hashes", hashes.len()))?;

    let full_report = MetricReport::read_csv(&outs[0].join("reports/unet_seed0.csv")).map_err(e2s)?;
    let one = MetricReport::read_csv(&outs[1].join("reports/unet_1_seed0.csv")).map_err(e2s)?;
    ensure(one == full_report, "fraction 1.0 cell differs from the full run")?;
    let cell = |mode: Mode, v: &str| {
        sweep.iter().find(|r| r.mode == mode && r.value == v).and_then(|r| r.dice_mean)
    };
    let d10 = cell(Mode::FractionSweep, "0.1").ok_or("no 0.1 cell")?;
    let d100 = cell(Mode::FractionSweep, "1").ok_or("no 1.0 cell")?;
    ensure(d100 >= d10 - 0.02, format!("full-data Dice {d100:.4} < 10% Dice {d10:.4} - 0.02"))?;
    let p1 = cell(Mode::PatientSweep, "1").ok_or("no 1-patient cell")?;
    let pall = cell(Mode::PatientSweep, "all").ok_or("no all-patient cell")?;
    Ok(format!(
        "fraction 1.0 == full run (Dice {d100:.4}), 10% Dice {d10:.4}, patients 1/all Dice {p1:.4}/{pall:.4}, one test hash"
    ))
}

// ---------------------------------------------------------------------------

fn morphology_suite() -> Check {
    let k = StructuringElement::default();
    let mut speck = Array2::<u8>::zeros((9, 9));
    speck[[4, 4]] = 1;
    ensure(morph_open(speck.view(), &k).iter().all(|&v| v == 0), "opening kept an isolated pixel")?;
    let mut holed = Array2::<u8>::zeros((9, 9));
    holed.slice_mut(ndarray::s![2..7, 2..7]).fill(1);
    holed[[4, 4]] = 0;
    let closed = morph_close(holed.view(), &k);
    ensure(closed[[4, 4]] == 1, "closing left the hole")?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 0..50 {
        let p = rng.random_range(0.05..0.95);
        let (h, w) = (rng.random_range(3..24), rng.random_range(3..24));
        let m = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(p)));
        let o = morph_open(m.view(), &k);
        let c = morph_close(m.view(), &k);
        for ((&a, &b), &d) in o.iter().zip(m.iter()).zip(c.iter()) {
            ensure(a <= b && b <= d, format!("mask {n}: open <= m <= close violated"))?;
        }
        ensure(morph_open(o.view(), &k) == o, format!("mask {n}: opening not idempotent"))?;
        ensure(morph_close(c.view(), &k) == c, format!("mask {n}: closing not idempotent"))?;
    }
    Ok("speck removed, hole filled, 50 random masks ordered and idempotent".into())
}

fn split_determinism() -> Check {
    let ids: Vec<String> = (0..130).map(|i| format!("p{i:03}")).collect();
    let a = split_patients(&ids, 42).map_err(e2s)?;
    let b = split_patients(&ids, 42).map_err(e2s)?;
    let sizes = (a.train_ids.len(), a.val_ids.len(), a.test_ids.len());
    ensure(sizes == (91, 13, 26), format!("sizes {sizes:?}"))?;
    ensure(a == b, "repeated split differs")?;
    let all: BTreeSet<&String> = a.all_ids().collect();
    ensure(all.len() == 130, "sets overlap or lose ids")?;
    Ok("91/13/26, disjoint, repeatable".into())
}

fn reporting_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let rows: Vec<PatientMetrics> = (0..5)
        .map(|i| {
            let d = 0.5 + 0.1 * f64::from(i) / 3.0;
            PatientMetrics { patient_id: format!("p{i}"), dice: d, iou: d / (2.0 - d) }
        })
        .collect();
    let report = aggregate("vit_head", rows).map_err(e2s)?;
    let table = dir.path().join("table.csv");
    report.write_csv(&table).map_err(e2s)?;
    ensure(MetricReport::read_csv(&table).map_err(e2s)? == report, "per-patient table differs")?;

    let cells: Vec<CellResult> = [0.1, 0.5, 1.0]
        .iter()
        .flat_map(|&x| [Architecture::Unet, Architecture::VitHead].map(|m| (m, x)))
        .map(|(method, x)| CellResult {
            method,
            value: Some(SweepValue::Number(x)),
            seed: 0,
            x,
            n_train_slices: (x * 100.0) as usize,
            report: Some(report.clone()),
            test_split_hash: Some("abc".into()),
            error: None,
        })
        .collect();
    let result = ExperimentResult {
        mode: Mode::FractionSweep,
        cells,
        provenance: Provenance { config_hash: "h".into(), started_unix: 0, finished_unix: 1 },
    };
    let comp = dir.path().join("comparison.csv");
    write_rows(&comp, &result.comparison_rows()).map_err(e2s)?;
    ensure(read_rows::<ComparisonRow>(&comp).map_err(e2s)? == result.comparison_rows(), "comparison table differs")?;
    let sweep = dir.path().join("fewshot.csv");
    write_rows(&sweep, &result.sweep_rows()).map_err(e2s)?;
    ensure(read_rows::<SweepRow>(&sweep).map_err(e2s)? == result.sweep_rows(), "sweep table differs")?;
    let files = emit_plots(&result, dir.path()).map_err(e2s)?;
    let plotted: Vec<_> = plot_series(&result.sweep_rows()).into_iter().flat_map(|s| s.points).collect();
    ensure(read_plot_csv(&files.csv).map_err(e2s)? == plotted, "plot table differs")?;

    let image = Array2::from_shape_fn((20, 20), |(r, c)| (r * 20 + c) as f32);
    let pred = Array2::from_shape_fn((20, 20), |(r, c)| u8::from((3..12).contains(&r) && (4..14).contains(&c)));
    let gt = Array2::from_shape_fn((20, 20), |(r, c)| u8::from((6..16).contains(&r) && (2..10).contains(&c)));
    let (mut po, mut go, mut both) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        po += usize::from(p == 1 && g == 0);
        go += usize::from(p == 0 && g == 1);
        both += usize::from(p == 1 && g == 1);
    }
    let counts = tint_counts(&render_overlay(image.view(), pred.view(), gt.view()).map_err(e2s)?);
    ensure(counts == (po, go, both), format!("tints {counts:?} vs {:?}", (po, go, both)))?;
    Ok(format!("tables and plot CSV exact, tints {counts:?}"))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "metric oracle equivalence", limit: Duration::from_secs(1), run: metric_oracle },
        Criterion { id: 2, name: "patchify round trip", limit: Duration::from_secs(1), run: patchify_round_trip },
        Criterion { id: 3, name: "frozen-backbone audit", limit: Duration::from_secs(30), run: frozen_backbone_audit },
        Criterion { id: 4, name: "gradient correctness", limit: Duration::from_secs(60), run: gradient_correctness },
        Criterion { id: 5, name: "loss descent / capacity", limit: Duration::from_secs(300), run: loss_descent },
        Criterion { id: 6, name: "end-to-end phantom run", limit: Duration::from_secs(900), run: end_to_end },
        Criterion { id: 7, name: "few-shot protocol integrity", limit: Duration::from_secs(1200), run: fewshot_integrity },
        Criterion { id: 8, name: "morphology definitional suite", limit: Duration::from_secs(1), run: morphology_suite },
        Criterion { id: 9, name: "split determinism", limit: Duration::from_secs(1), run: split_determinism },
        Criterion { id: 10, name: "reporting round trip", limit: Duration::from_secs(60), run: reporting_round_trip },
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("ATRIUM_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = t.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > c.limit => Err(format!("took {elapsed:.1?}, limit {:?}", c.limit)),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {:>2} {}: PASS ({detail}; {elapsed:.1?})", c.id, c.name),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {}: FAIL ({why}; {elapsed:.1?})", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
