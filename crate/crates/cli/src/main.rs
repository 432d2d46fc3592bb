use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use atrium::experiments::{
    evaluate_run, resolve_split, run_fewshot, run_full_comparison, train_method, Corpus,
    DataSection, ExperimentConfig, Mode, ModelSection, TrainSection,
};
use atrium::imaging::{generate_phantom, split_patients, write_manifests, write_phantom, PhantomSpec};
use atrium::training::TrainConfig;
use atrium::vit::VariantName;
use atrium::Architecture;

#[derive(Parser)]
#[command(name = "atrium", version, about = "Left-atrium segmentation: frozen ViT probing and CNN baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled corpus.
    Phantom(PhantomArgs),
    /// Split patients 70/10/20 and write manifests.
    Split(SplitArgs),
    /// Train one method and save its run directory.
    Train(TrainArgs),
    /// Score a run on the test split.
    Eval(EvalArgs),
    /// Sweep training-set size.
    Fewshot(ExperimentArgs),
    /// Train and score every method on the full training split.
    Compare(ExperimentArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Volume size as HxWxS.
    #[arg(long, default_value = "64x64x8", value_parser = parse_size)]
    size: (usize, usize, usize),
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    method: Architecture,
    #[arg(long)]
    variant: Option<VariantName>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with optional [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overlays: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    let [h, w, d] = parts.as_slice() else {
        return Err(format!("expected HxWxS, got `{s}`"));
    };
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(h)?, p(w)?, p(d)?))
}

fn data_section(root: &Path, split: &Path) -> DataSection {
    let mut d = DataSection::new(root);
    d.split_dir = Some(split.to_owned());
    d
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let (height, width, n_slices) = a.size;
    let vols = generate_phantom(&PhantomSpec {
        n_volumes: a.n,
        height,
        width,
        n_slices,
        noise_sigma: a.noise,
        seed: a.seed,
    })?;
    write_phantom(&a.out, &vols)?;
    println!("wrote {} volumes to {}", vols.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let corpus = Corpus::load(&DataSection::new(&a.data))?;
    let s = split_patients(&corpus.ids(), a.seed)?;
    write_manifests(&a.out, &s)?;
    println!(
        "train {} / val {} / test {} -> {}",
        s.train_ids.len(),
        s.val_ids.len(),
        s.test_ids.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut file = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<RunFile>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunFile::default(),
    };
    if let Some(v) = a.variant {
        file.model.variant = v;
    }
    let mut cfg = TrainConfig::defaults(a.method);
    file.train.common().apply(&mut cfg);
    if let Some(o) = file.train.method.get(&a.method) {
        o.apply(&mut cfg);
    }
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
    cfg.max_epochs = a.epochs.unwrap_or(cfg.max_epochs);
    cfg.patience = a.patience.unwrap_or(cfg.patience);
    cfg.seed = a.seed.unwrap_or(cfg.seed);

    let data = data_section(&a.data, &a.split);
    let corpus = Corpus::load(&data)?;
    let split = resolve_split(&data, &corpus)?;
    let slices = corpus.slices(&split.train_ids)?;
    let out = train_method(
        a.method, &data, &file.model, &corpus, &split, &slices, &cfg, None, Some(&a.out),
    )?;
    println!(
        "{}: best epoch {} ({:?} = {:.4}), run saved to {}",
        a.method,
        out.checkpoint.best_epoch,
        out.checkpoint.metric,
        out.checkpoint.best_val_metric,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_run(&a.run, &data_section(&a.data, &a.split), a.overlays.as_deref())?;
    report.write_csv(&a.out)?;
    println!(
        "{}: dice {:.4} +- {:.4}, iou {:.4} +- {:.4} over {} patients",
        report.method,
        report.dice_mean,
        report.dice_sd,
        report.iou_mean,
        report.iou_sd,
        report.per_patient.len()
    );
    Ok(())
}

fn experiment(a: ExperimentArgs, sweep: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let result = if sweep {
        if cfg.experiment.mode == Mode::Full {
            bail!("fewshot needs mode = \"fraction_sweep\" or \"patient_sweep\"");
        }
        run_fewshot(&cfg, Some(&a.out))?
    } else {
        run_full_comparison(&cfg, Some(&a.out))?
    };
    for c in &result.cells {
        let value = c.value.map(|v| v.label()).unwrap_or_else(|| "full".into());
        match (&c.report, &c.error) {
            (Some(r), _) => println!(
                "{} {value} seed {}: dice {:.4} +- {:.4}",
                c.method, c.seed, r.dice_mean, r.dice_sd
            ),
            (None, Some(e)) => println!("{} {value} seed {}: failed: {e}", c.method, c.seed),
            (None, None) => {}
        }
    }
    println!("results in {}", a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Phantom(a) => phantom(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Fewshot(a) => experiment(a, true),
        Command::Compare(a) => experiment(a, false),
    }
}
