//! Synthetic four-channel brain volumes with nested ellipsoidal tumours and
//! exact labels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mix_seed, Dims};
use crate::volume::{write_case, write_manifest, CasePaths, LabelVolume, MultiModalVolume, Split, N_CHANNELS, N_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// `[nx, ny, nz]`.
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    /// Brain semi-axes as fractions of the volume extent per axis.
    pub brain_radii: [f64; 3],
    /// Maximum brain-centre shift as a fraction of the extent.
    pub brain_jitter: f64,
    /// Range of the mean edema semi-axis, in voxels.
    pub tumor_radius: [f64; 2],
    /// Each tumour semi-axis is the mean times a factor drawn from this range.
    pub tumor_elongation: [f64; 2],
    /// Core and enhancing ellipsoid sizes relative to the edema ellipsoid.
    pub core_ratio: f64,
    pub enhancing_ratio: f64,
    /// Baseline intensity of healthy tissue per modality (T1, T1ce, T2, FLAIR).
    pub base_intensity: [f32; N_CHANNELS],
    /// `contrast[modality][class]` multiplies the baseline.
    pub contrast: [[f64; N_CLASSES]; N_CHANNELS],
    /// Gaussian noise standard deviation relative to the baseline.
    pub noise_std: f64,
    pub rotate: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 64],
            spacing: [1.0; 3],
            brain_radii: [0.42, 0.45, 0.40],
            brain_jitter: 0.03,
            tumor_radius: [9.0, 13.0],
            tumor_elongation: [0.8, 1.2],
            core_ratio: 0.65,
            enhancing_ratio: 0.35,
            base_intensity: [400.0, 450.0, 300.0, 350.0],
            // Columns: healthy, necrotic core, edema, enhancing.
            contrast: [
                [1.0, 0.6, 0.8, 0.9],
                [1.0, 0.55, 0.9, 1.8],
                [1.0, 1.6, 1.5, 1.3],
                [1.0, 1.5, 1.8, 1.6],
            ],
            noise_std: 0.05,
            rotate: true,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if self.shape.iter().any(|&n| n < 4) {
            return bad("phantom shape must be at least 4 voxels per axis");
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("spacing must be positive");
        }
        if self.brain_radii.iter().any(|r| !(*r > 0.0 && *r <= 0.5)) {
            return bad("brain radii must lie in (0, 0.5]");
        }
        if !(0.0..0.5).contains(&self.brain_jitter) {
            return bad("brain jitter must lie in [0, 0.5)");
        }
        let [r0, r1] = self.tumor_radius;
        let [e0, e1] = self.tumor_elongation;
        if !(r0 > 0.0 && r0 <= r1) || !(e0 > 0.0 && e0 <= e1) {
            return bad("tumour radius and elongation ranges must be positive and ordered");
        }
        if !(0.0 < self.enhancing_ratio && self.enhancing_ratio < self.core_ratio && self.core_ratio < 1.0) {
            return bad("need 0 < enhancing_ratio < core_ratio < 1");
        }
        let contrasts_ok = self.contrast.iter().flatten().all(|c| c.is_finite() && *c > 0.0);
        if !contrasts_ok || self.base_intensity.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad("intensities must be finite and positive");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise std must be finite and non-negative");
        }
        Ok(())
    }

    /// Noise-free intensity of `class` in `modality`.
    pub fn class_intensity(&self, modality: usize, class: usize) -> f32 {
        self.base_intensity[modality] * self.contrast[modality][class] as f32
    }
}

type Mat3 = [[f64; 3]; 3];

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid axes in grid coordinates.
    axes: Mat3,
}

impl Ellipsoid {
    /// `Σ (⟨p − c, axisᵢ⟩ / rᵢ)²`; inside when ≤ 1.
    fn level(&self, p: [usize; 3]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|a| p[a] as f64 - self.center[a]);
        (0..3)
            .map(|i| {
                let proj: f64 = (0..3).map(|a| self.axes[i][a] * d[a]).sum();
                (proj / self.radii[i]).powi(2)
            })
            .sum()
    }
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Generates one case. Classes: 0 healthy/background, 2 edema shell,
/// 1 core shell, 3 innermost enhancing ellipsoid.
pub fn generate_phantom(spec: &PhantomSpec, case_seed: u64) -> Result<(MultiModalVolume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let dims = Dims(spec.shape);
    let ext = spec.shape.map(|n| n as f64);

    let brain = Ellipsoid {
        center: std::array::from_fn(|a| {
            (ext[a] - 1.0) / 2.0 + rng.gen_range(-spec.brain_jitter..=spec.brain_jitter) * ext[a]
        }),
        radii: std::array::from_fn(|a| spec.brain_radii[a] * ext[a]),
        axes: IDENTITY,
    };
    let mean_r = rng.gen_range(spec.tumor_radius[0]..=spec.tumor_radius[1]);
    let radii: [f64; 3] = std::array::from_fn(|_| mean_r * rng.gen_range(spec.tumor_elongation[0]..=spec.tumor_elongation[1]));
    let axes = if spec.rotate { random_rotation(&mut rng) } else { IDENTITY };
    let r_max = radii.iter().copied().fold(0.0, f64::max);

    // Brain voxels and their levels, computed once.
    let brain_level: Vec<f64> = (0..dims.len()).map(|i| brain.level(dims.coords(i))).collect();

    let mut tumor = None;
    for _ in 0..64 {
        let center: [f64; 3] = std::array::from_fn(|a| {
            let room = (brain.radii[a] - r_max).max(0.0) * 0.7;
            brain.center[a] + rng.gen_range(-room..=room)
        });
        let t = Ellipsoid { center, radii, axes };
        let fits = (0..dims.len()).all(|i| brain_level[i] <= 1.0 || t.level(dims.coords(i)) > 1.0);
        if fits {
            tumor = Some(t);
            break;
        }
    }
    let Some(tumor) = tumor else {
        return Err(Error::Spec(format!(
            "a tumour of semi-axes {radii:?} does not fit inside the brain ellipsoid {:?}",
            brain.radii
        )));
    };

    let n = dims.len();
    let mut labels = vec![0u8; n];
    let core2 = spec.core_ratio * spec.core_ratio;
    let et2 = spec.enhancing_ratio * spec.enhancing_ratio;
    let mut data = vec![0f32; N_CHANNELS * n];
    let noise = Normal::new(0.0f32, spec.noise_std as f32).map_err(|e| Error::Spec(e.to_string()))?;
    for i in 0..n {
        if brain_level[i] > 1.0 {
            continue;
        }
        let s = tumor.level(dims.coords(i));
        let class = if s <= et2 {
            3
        } else if s <= core2 {
            1
        } else if s <= 1.0 {
            2
        } else {
            0
        };
        labels[i] = class as u8;
        for c in 0..N_CHANNELS {
            let base = spec.base_intensity[c];
            let mean = spec.class_intensity(c, class);
            let e = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            // Keep brain voxels strictly positive so the brain mask is exact.
            data[c * n + i] = (mean + base * e).max(base * 1e-3);
        }
    }
    let volume = MultiModalVolume::from_channels(dims, data, spec.spacing)?;
    let labels = LabelVolume::new(dims, labels)?;
    Ok((volume, labels))
}

/// Case id of the `i`-th generated phantom.
pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

/// Writes `n_train + n_val` cases under `root` plus a manifest; the first
/// `n_train` ids form the training split.
pub fn generate_dataset(
    spec: &PhantomSpec,
    root: &Path,
    n_train: usize,
    n_val: usize,
    master_seed: u64,
) -> Result<Vec<(String, Split)>> {
    if n_train + n_val == 0 {
        return Err(Error::Usage("at least one phantom case is required".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries: Vec<(String, Split)> = (0..n_train + n_val)
        .map(|i| (phantom_id(i), if i < n_train { Split::Train } else { Split::Val }))
        .collect();
    entries.par_iter().enumerate().try_for_each(|(i, (id, _))| {
        let (v, l) = generate_phantom(spec, mix_seed(master_seed, i as u64))?;
        write_case(&CasePaths::new(root, id), &v, Some(&l))
    })?;
    write_manifest(root, &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec { shape: [32, 32, 32], tumor_radius: [4.0, 6.0], ..PhantomSpec::default() }
    }

    #[test]
    fn noiseless_intensities_follow_table() {
        let spec = PhantomSpec { noise_std: 0.0, ..small() };
        let (v, l) = generate_phantom(&spec, 5).unwrap();
        let n = v.dims.len();
        for i in 0..n {
            for c in 0..N_CHANNELS {
                let x = v.data[c * n + i];
                if v.brain_mask[i] {
                    assert_eq!(x, spec.class_intensity(c, l.labels[i] as usize));
                } else {
                    assert_eq!(x, 0.0);
                    assert_eq!(l.labels[i], 0);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_phantom(&small(), 11).unwrap();
        let b = generate_phantom(&small(), 11).unwrap();
        let c = generate_phantom(&small(), 12).unwrap();
        assert_eq!(a.0.data, b.0.data);
        assert_eq!(a.1, b.1);
        assert_ne!(a.0.data, c.0.data);
    }

    #[test]
    fn all_classes_present() {
        let (_, l) = generate_phantom(&small(), 3).unwrap();
        for class in 0..4u8 {
            assert!(l.labels.contains(&class), "class {class} missing");
        }
    }

    #[test]
    fn oversized_tumor_is_spec_error() {
        let spec = PhantomSpec { tumor_radius: [30.0, 30.0], ..small() };
        assert!(matches!(generate_phantom(&spec, 1), Err(Error::Spec(_))));
        let spec = PhantomSpec { core_ratio: 0.2, enhancing_ratio: 0.3, ..small() };
        assert!(matches!(generate_phantom(&spec, 1), Err(Error::Spec(_))));
    }
}
