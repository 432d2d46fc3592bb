//! Synthetic left-atrium phantoms: an ellipsoidal blood pool with tubular
//! vein stubs, a thin dark wall, and an adjacent structure whose intensity
//! sits just below the pool's.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_volume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_volumes: usize,
    pub height: usize,
    pub width: usize,
    pub n_slices: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_volumes == 0 {
            return Err(Error::invalid("phantom corpus needs at least one volume"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "phantom slices must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.n_slices == 0 {
            return Err(Error::invalid("phantom needs at least one slice"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

struct Tube {
    dir: (f64, f64),
    length: f64,
    radius: f64,
    z_half: f64,
}

struct Anatomy {
    centre: (f64, f64, f64),
    axes: (f64, f64, f64),
    tubes: Vec<Tube>,
    neighbour_centre: (f64, f64),
    neighbour_axes: (f64, f64),
    body_axes: (f64, f64),
    pool: f32,
    neighbour: f32,
}

const AIR: f32 = 0.02;
const TISSUE: f32 = 0.3;
const WALL: f32 = 0.38;
const WALL_PX: f64 = 1.5;

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, h: f64, w: f64, s: f64) -> Self {
        let centre = (
            h * rng.random_range(0.42..0.58),
            w * rng.random_range(0.42..0.58),
            s * rng.random_range(0.45..0.55),
        );
        let axes = (
            h * rng.random_range(0.12..0.2),
            w * rng.random_range(0.12..0.2),
            (s * rng.random_range(0.28..0.4)).max(0.75),
        );
        let n_tubes = rng.random_range(1..=3);
        let tubes = (0..n_tubes)
            .map(|_| {
                let theta = rng.random_range(0.0..2.0 * PI);
                let r_dir = 1.0
                    / ((theta.cos() / axes.0).powi(2) + (theta.sin() / axes.1).powi(2)).sqrt();
                Tube {
                    dir: (theta.cos(), theta.sin()),
                    length: r_dir * rng.random_range(1.35..1.7),
                    radius: (h.min(w) * rng.random_range(0.03..0.05)).max(1.0),
                    z_half: (axes.2 * rng.random_range(0.3..0.6)).max(0.5),
                }
            })
            .collect();
        let phi = rng.random_range(0.0..2.0 * PI);
        let neighbour_axes = (axes.0 * 0.75, axes.1 * 0.75);
        let reach = axes.0.max(axes.1) + neighbour_axes.0.max(neighbour_axes.1) + 2.0 * WALL_PX;
        let neighbour_centre = (centre.0 + reach * phi.cos(), centre.1 + reach * phi.sin());
        let pool = rng.random_range(0.72..0.82);
        let neighbour = pool - rng.random_range(0.06..0.12);
        Self {
            centre,
            axes,
            tubes,
            neighbour_centre,
            neighbour_axes,
            body_axes: (h * 0.47, w * 0.47),
            pool,
            neighbour,
        }
    }

    /// Signed "outside distance" of a voxel from the pool, in pixels
    /// (<= 0 inside).
    fn pool_distance(&self, y: f64, x: f64, z: f64) -> f64 {
        let (cy, cx, cz) = self.centre;
        let (ay, ax, az) = self.axes;
        let (dy, dx, dz) = (y - cy, x - cx, z - cz);
        let rho = ((dy / ay).powi(2) + (dx / ax).powi(2) + (dz / az).powi(2)).sqrt();
        let mut d = (rho - 1.0) * ay.min(ax);
        for t in &self.tubes {
            if dz.abs() > t.z_half {
                continue;
            }
            let along = (dy * t.dir.0 + dx * t.dir.1).clamp(0.0, t.length);
            let (py, px) = (dy - along * t.dir.0, dx - along * t.dir.1);
            d = d.min((py * py + px * px).sqrt() - t.radius);
        }
        d
    }

    fn intensity(&self, y: f64, x: f64, z: f64) -> (f32, u8) {
        let d = self.pool_distance(y, x, z);
        if d <= 0.0 {
            return (self.pool, 1);
        }
        if d <= WALL_PX {
            return (WALL, 0);
        }
        let (ny, nx) = self.neighbour_centre;
        let (by, bx) = self.neighbour_axes;
        if ((y - ny) / by).powi(2) + ((x - nx) / bx).powi(2) <= 1.0 {
            return (self.neighbour, 0);
        }
        let (cy, cx, _) = self.centre;
        let (ey, ex) = self.body_axes;
        if ((y - cy) / ey).powi(2) + ((x - cx) / ex).powi(2) <= 1.0 {
            (TISSUE, 0)
        } else {
            (AIR, 0)
        }
    }
}

/// Generates `spec.n_volumes` phantoms named `phantom_000`, `phantom_001`, ...
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<Volume>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let (h, w, s) = (spec.height, spec.width, spec.n_slices);
    (0..spec.n_volumes)
        .map(|v| {
            let anatomy = Anatomy::sample(&mut rng, h as f64, w as f64, s as f64);
            let mut voxels = Array3::<f32>::zeros((h, w, s));
            let mut labels = Array3::<u8>::zeros((h, w, s));
            for ((i, j, k), vox) in voxels.indexed_iter_mut() {
                let (val, lab) =
                    anatomy.intensity(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng) as f32
                } else {
                    0.0
                };
                *vox = val + n;
                labels[[i, j, k]] = lab;
            }
            Volume::new(format!("phantom_{v:03}"), voxels, labels, Some([1.0, 1.0, 2.5]))
        })
        .collect()
}

/// Writes `<id>_image.nii.gz` / `<id>_label.nii.gz` for each volume.
pub fn write_phantom(dir: &Path, volumes: &[Volume]) -> Result<Vec<(PathBuf, PathBuf)>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    volumes
        .iter()
        .map(|v| {
            let img = dir.join(format!("{}_image.nii.gz", v.patient_id()));
            let lbl = dir.join(format!("{}_label.nii.gz", v.patient_id()));
            save_volume(v, &img, &lbl)?;
            Ok((img, lbl))
        })
        .collect()
}
