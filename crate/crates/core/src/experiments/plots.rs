use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::runner::{read_rows, write_rows, ExperimentResult, SweepRow};
use crate::error::{Error, Result};
use crate::model::Architecture;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

/// One plotted point: seed-averaged Dice at one sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub method: Architecture,
    pub value: String,
    pub x: f64,
    pub n_seeds: usize,
    pub dice_mean: f64,
    pub dice_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub method: Architecture,
    /// Sorted by `x`.
    pub points: Vec<PlotPoint>,
}

/// Groups successful sweep rows into one series per method, averaging
/// seeds cell-wise.
pub fn plot_series(rows: &[SweepRow]) -> Vec<PlotSeries> {
    let mut cells: BTreeMap<(Architecture, String), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.dice_mean.is_some()) {
        cells.entry((r.method, r.value.clone())).or_default().push(r);
    }
    let mut series: BTreeMap<Architecture, Vec<PlotPoint>> = BTreeMap::new();
    for ((method, value), rs) in cells {
        let n = rs.len() as f64;
        series.entry(method).or_default().push(PlotPoint {
            method,
            value,
            x: rs[0].x,
            n_seeds: rs.len(),
            dice_mean: rs.iter().filter_map(|r| r.dice_mean).sum::<f64>() / n,
            dice_sd: rs.iter().filter_map(|r| r.dice_sd).sum::<f64>() / n,
        });
    }
    series
        .into_iter()
        .map(|(method, mut points)| {
            points.sort_by(|a, b| a.x.total_cmp(&b.x));
            PlotSeries { method, points }
        })
        .collect()
}

/// Maps data coordinates onto the raster.
#[derive(Debug, Clone, Copy)]
pub struct PlotLayout {
    x_min: f64,
    x_max: f64,
}

impl PlotLayout {
    pub fn fit(series: &[PlotSeries]) -> Self {
        let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.x));
        let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
        if lo.is_finite() && hi > lo {
            Self { x_min: lo, x_max: hi }
        } else {
            let c = if lo.is_finite() { lo } else { 0.0 };
            Self { x_min: c - 1.0, x_max: c + 1.0 }
        }
    }

    /// Pixel position of `(x, dice)`; dice spans `[0, 1]` bottom to top.
    pub fn project(&self, x: f64, y: f64) -> (i64, i64) {
        let w = f64::from(WIDTH - 2 * MARGIN);
        let h = f64::from(HEIGHT - 2 * MARGIN);
        let px = f64::from(MARGIN) + (x - self.x_min) / (self.x_max - self.x_min) * w;
        let py = f64::from(HEIGHT - MARGIN) - y.clamp(0.0, 1.0) * h;
        (px.round() as i64, py.round() as i64)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn segment(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 as f64 + t * (b.0 - a.0) as f64).round() as i64;
        let y = (a.1 as f64 + t * (b.1 - a.1) as f64).round() as i64;
        for d in -1..=1 {
            put(img, x, y + d, c);
        }
    }
}

fn tint(base: Rgb<u8>, c: [u8; 3]) -> Rgb<u8> {
    Rgb(std::array::from_fn(|i| ((u16::from(base.0[i]) * 3 + u16::from(c[i])) / 4) as u8))
}

/// Mean Dice line per method over a translucent mean +- SD band.
pub fn render_plot(series: &[PlotSeries]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let layout = PlotLayout::fit(series);
    let black = Rgb([0, 0, 0]);
    let (x0, y0) = (i64::from(MARGIN), i64::from(HEIGHT - MARGIN));
    segment(&mut img, (x0, y0), (i64::from(WIDTH - MARGIN), y0), black);
    segment(&mut img, (x0, y0), (x0, i64::from(MARGIN)), black);

    for (k, s) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for w in s.points.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let (pa, pb) = (layout.project(a.x, 0.0).0, layout.project(b.x, 0.0).0);
            for px in pa..=pb {
                let t = if pb == pa { 0.0 } else { (px - pa) as f64 / (pb - pa) as f64 };
                let m = a.dice_mean + t * (b.dice_mean - a.dice_mean);
                let sd = a.dice_sd + t * (b.dice_sd - a.dice_sd);
                let top = layout.project(0.0, m + sd).1;
                let bottom = layout.project(0.0, m - sd).1;
                for py in top..=bottom {
                    if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
                        let base = *img.get_pixel(px as u32, py as u32);
                        img.put_pixel(px as u32, py as u32, tint(base, c));
                    }
                }
            }
        }
    }
    for (k, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = s.points.iter().map(|p| layout.project(p.x, p.dice_mean)).collect();
        for w in pts.windows(2) {
            segment(&mut img, w[0], w[1], c);
        }
        for &(x, y) in &pts {
            for dx in -3..=3 {
                for dy in -3..=3 {
                    put(&mut img, x + dx, y + dy, c);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub png: PathBuf,
    pub csv: PathBuf,
}

/// Writes `<mode>.png` and the plotted values as `<mode>_plot.csv`.
pub fn emit_plots(result: &ExperimentResult, dir: &Path) -> Result<PlotFiles> {
    if result.mode == Mode::Full {
        return Err(Error::invalid("plots need a sweep result"));
    }
    let series = plot_series(&result.sweep_rows());
    let files = PlotFiles {
        png: dir.join(format!("{}.png", result.mode)),
        csv: dir.join(format!("{}_plot.csv", result.mode)),
    };
    let points: Vec<PlotPoint> = series.iter().flat_map(|s| s.points.clone()).collect();
    write_rows(&files.csv, &points)?;
    render_plot(&series).save_with_format(&files.png, image::ImageFormat::Png)?;
    Ok(files)
}

pub fn read_plot_csv(path: &Path) -> Result<Vec<PlotPoint>> {
    read_rows(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::runner::{CellResult, Provenance};
    use crate::evaluation::{aggregate, PatientMetrics};
    use crate::experiments::config::SweepValue;

    fn cell(method: Architecture, x: f64, seed: u64, d: f64) -> CellResult {
        let rows = vec![
            PatientMetrics { patient_id: "p".into(), dice: d, iou: d / (2.0 - d) },
            PatientMetrics { patient_id: "q".into(), dice: d * 0.9, iou: 0.0 },
        ];
        CellResult {
            method,
            value: Some(SweepValue::Number(x)),
            seed,
            x,
            n_train_slices: 1,
            report: Some(aggregate(method.as_str(), rows).unwrap()),
            test_split_hash: Some("h".into()),
            error: None,
        }
    }

    fn sweep(cells: Vec<CellResult>) -> ExperimentResult {
        ExperimentResult {
            mode: Mode::FractionSweep,
            cells,
            provenance: Provenance { config_hash: "c".into(), started_unix: 0, finished_unix: 0 },
        }
    }

    #[test]
    fn two_methods_three_values() {
        let mut cells = Vec::new();
        for m in [Architecture::Unet, Architecture::VitHead] {
            for (i, x) in [0.1, 0.5, 1.0].into_iter().enumerate() {
                for seed in 0..2 {
                    cells.push(cell(m, x, seed, 0.3 + 0.2 * i as f64 + 0.01 * seed as f64));
                }
            }
        }
        let r = sweep(cells);
        let series = plot_series(&r.sweep_rows());
        assert_eq!(series.len(), 2);
        assert!(series.iter().all(|s| s.points.len() == 3 && s.points.iter().all(|p| p.n_seeds == 2)));

        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&r, dir.path()).unwrap();
        let back = read_plot_csv(&files.csv).unwrap();
        let flat: Vec<PlotPoint> = series.iter().flat_map(|s| s.points.clone()).collect();
        assert_eq!(back, flat);
        let png = image::open(&files.png).unwrap().to_rgb8();
        assert_eq!(png.dimensions(), (WIDTH, HEIGHT));

        let full = ExperimentResult { mode: Mode::Full, ..r };
        assert!(emit_plots(&full, dir.path()).is_err());
    }

    #[test]
    fn monotone_input_gives_monotone_pixels() {
        let cells: Vec<CellResult> = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0]
            .into_iter()
            .enumerate()
            .map(|(i, x)| cell(Architecture::Unet, x, 0, 0.2 + 0.12 * i as f64))
            .collect();
        let series = plot_series(&sweep(cells).sweep_rows());
        let layout = PlotLayout::fit(&series);
        let px: Vec<(i64, i64)> =
            series[0].points.iter().map(|p| layout.project(p.x, p.dice_mean)).collect();
        for w in px.windows(2) {
            assert!(w[1].0 > w[0].0 && w[1].1 < w[0].1, "{w:?}");
        }
        let img = render_plot(&series);
        for &(x, y) in &px {
            assert_eq!(img.get_pixel(x as u32, y as u32).0, PALETTE[0]);
        }
    }

    #[test]
    fn failed_cells_are_not_plotted() {
        let mut bad = cell(Architecture::Unet, 0.5, 0, 0.5);
        bad.report = None;
        bad.error = Some("x".into());
        let s = plot_series(&sweep(vec![cell(Architecture::Unet, 0.1, 0, 0.4), bad]).sweep_rows());
        assert_eq!(s[0].points.len(), 1);
    }
}
