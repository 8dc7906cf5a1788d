use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// 0.958 × 0.958 × 3 mm voxels (thick axial slices).
pub const ANISOTROPIC_SPACING: [f32; 3] = [0.958, 0.958, 3.0];

/// Nested-ellipsoid phantom: class 0 is background, class 1 the tissue
/// ellipsoid, and classes `2..` successively nested lesion shells.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub modalities: usize,
    pub extents: [usize; 3],
    pub num_classes: usize,
    /// Mean intensity per `[class][modality]`; `None` selects
    /// [`default_intensity_table`].
    pub intensities: Option<Vec<Vec<f64>>>,
    /// Gaussian noise added to foreground voxels.
    pub noise_sigma: f64,
    pub spacing: [f32; 3],
    /// Tissue semi-axes as a fraction of the grid extent.
    pub tissue_scale: (f64, f64),
    /// Outermost lesion semi-axes as a fraction of the tissue semi-axes.
    pub lesion_scale: (f64, f64),
    /// Each inner shell's semi-axes as a fraction of the enclosing shell's.
    pub shell_ratio: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            modalities: 4,
            extents: [32; 3],
            num_classes: 5,
            intensities: None,
            noise_sigma: 0.15,
            spacing: [1.0; 3],
            tissue_scale: (0.36, 0.44),
            lesion_scale: (0.45, 0.6),
            shell_ratio: (0.6, 0.75),
            seed: 0,
        }
    }
}

/// Tissue is 1 everywhere; each lesion class brightens exactly one modality
/// relative to the class it sits in, cycling through the modalities. Adjacent
/// classes therefore agree in every modality but one.
pub fn default_intensity_table(num_classes: usize, modalities: usize) -> Vec<Vec<f64>> {
    let mut table = vec![vec![0.0; modalities]];
    if num_classes > 1 {
        table.push(vec![1.0; modalities]);
    }
    for c in 2..num_classes {
        let mut row = table[c - 1].clone();
        row[(c - 2) % modalities] += 1.0;
        table.push(row);
    }
    table
}

impl PhantomConfig {
    pub fn table(&self) -> Vec<Vec<f64>> {
        self.intensities
            .clone()
            .unwrap_or_else(|| default_intensity_table(self.num_classes, self.modalities))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.modalities == 0 || self.num_classes < 2 || self.num_classes > 256 {
            return fail("phantom needs at least one modality and 2..=256 classes".into());
        }
        if self.extents.iter().any(|&e| e == 0 || e % 16 != 0) {
            return fail(format!(
                "phantom extents {:?} must be positive multiples of 16",
                self.extents
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!(
                "noise sigma {} must be non-negative",
                self.noise_sigma
            ));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return fail(format!("spacing {:?} must be positive", self.spacing));
        }
        for (name, (lo, hi)) in [
            ("tissue_scale", self.tissue_scale),
            ("lesion_scale", self.lesion_scale),
            ("shell_ratio", self.shell_ratio),
        ] {
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return fail(format!(
                    "{name} range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
                ));
            }
        }
        if self.tissue_scale.1 > 0.5 {
            return fail("tissue_scale above 0.5 does not fit in the grid".into());
        }
        let table = self.table();
        if table.len() != self.num_classes || table.iter().any(|r| r.len() != self.modalities) {
            return fail(format!(
                "intensity table must be {} classes × {} modalities",
                self.num_classes, self.modalities
            ));
        }
        if table[0].iter().any(|&v| v != 0.0) {
            return fail("background intensities must be 0".into());
        }
        for c in 0..self.num_classes - 1 {
            let separable = (0..self.modalities).any(|m| {
                (table[c + 1][m] - table[c][m]).abs() >= 3.0 * self.noise_sigma
                    && table[c + 1][m] != table[c][m]
            });
            if !separable {
                return fail(format!(
                    "classes {c} and {} differ by less than 3 sigma in every modality",
                    c + 1
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// A child with semi-axes `scale ×` ours, shifted by at most half the slack.
    fn child(&self, rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> Ellipsoid {
        let mut center = [0.0; 3];
        let mut semi = [0.0; 3];
        for a in 0..3 {
            semi[a] = self.semi[a] * rng.gen_range(lo..=hi);
            let slack = 0.5 * (self.semi[a] - semi[a]);
            center[a] = self.center[a] + rng.gen_range(-slack..=slack);
        }
        Ellipsoid { center, semi }
    }
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<VolumeSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ext = cfg.extents.map(|e| e as f64);

    let mut tissue = Ellipsoid {
        center: [0.0; 3],
        semi: [0.0; 3],
    };
    for (a, &e) in ext.iter().enumerate() {
        tissue.semi[a] = e * rng.gen_range(cfg.tissue_scale.0..=cfg.tissue_scale.1);
        let slack = (0.5 * e - tissue.semi[a] - 1.0).max(0.0);
        tissue.center[a] = 0.5 * (e - 1.0) + rng.gen_range(-slack..=slack) * 0.5;
    }
    let mut shells = vec![tissue];
    for c in 2..cfg.num_classes {
        let scale = if c == 2 {
            cfg.lesion_scale
        } else {
            cfg.shell_ratio
        };
        let next = shells[c - 2].child(&mut rng, scale);
        shells.push(next);
    }

    let [w, h, d] = cfg.extents;
    let mut labels = vec![0u8; w * h * d];
    let mut counts = vec![0usize; cfg.num_classes];
    for (i, l) in labels.iter_mut().enumerate() {
        let p = [(i / (h * d)) as f64, ((i / d) % h) as f64, (i % d) as f64];
        // A voxel's class is the depth of the innermost shell whose whole
        // enclosing chain contains it, which makes nesting exact.
        let depth = shells.iter().take_while(|e| e.contains(p)).count();
        *l = depth as u8;
        counts[depth] += 1;
    }
    if let Some(c) = (1..cfg.num_classes).find(|&c| counts[c] == 0) {
        return Err(Error::Config(format!(
            "class {c} is empty: shells cannot be nested within the placement ranges at extents {:?}",
            cfg.extents
        )));
    }

    let table = cfg.table();
    let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let v = labels.len();
    let mut data = vec![0f32; cfg.modalities * v];
    for m in 0..cfg.modalities {
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let noise = if cfg.noise_sigma > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            };
            data[m * v + i] = (table[l as usize][m] + noise) as f32;
        }
    }
    let spacing = cfg.spacing.map(|s| s as f64);
    VolumeSample::new(
        Tensor::new(vec![cfg.modalities, w, h, d], data)?,
        LabelVolume::new(cfg.extents, spacing, labels)?,
    )
}

/// `count` phantoms, sample `i` seeded independently from `cfg.seed`.
pub fn generate_dataset(cfg: &PhantomConfig, count: usize) -> Result<Vec<VolumeSample>> {
    (0..count)
        .map(|i| {
            generate_phantom(&PhantomConfig {
                seed: derive_seed(cfg.seed, &format!("phantom{i}")),
                ..cfg.clone()
            })
        })
        .collect()
}
