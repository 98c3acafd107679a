//! Synthetic two-class segmentation data: textured, noisy grayscale backgrounds with a few
//! small bright ellipses or polygons, some crossing the patch border, many patches empty.

use alloc::format;
use alloc::vec::Vec;

use core::f64::consts::PI;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub n_patches: usize,
    /// Probability that a patch contains objects at all.
    pub object_rate: f64,
    /// Objects per non-empty patch are drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
    /// Object radius range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    pub ellipses: bool,
    pub polygons: bool,
    /// Fraction of objects centred close enough to a border to be clipped by it.
    pub edge_clipping: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_patches: 512,
            object_rate: 0.6,
            max_objects: 3,
            min_radius: 3.0,
            max_radius: 7.0,
            ellipses: true,
            polygons: true,
            edge_clipping: 0.25,
            noise: 0.05,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: alloc::string::String| Err(Error::DatasetConfig(m));
        if self.height < 16 || self.width < 16 {
            return err(format!("patches must be at least 16x16, got {}x{}", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.object_rate) || !(0.0..=1.0).contains(&self.edge_clipping) {
            return err("object_rate and edge_clipping must lie in [0, 1]".into());
        }
        if !(self.min_radius >= 1.0) || self.min_radius > self.max_radius {
            return err(format!("radius range [{}, {}] is invalid", self.min_radius, self.max_radius));
        }
        if 2.0 * self.max_radius > self.height.min(self.width) as f64 {
            return err(format!(
                "objects of radius {} do not fit in a {}x{} patch",
                self.max_radius, self.height, self.width
            ));
        }
        if !self.ellipses && !self.polygons {
            return err("at least one shape family must be enabled".into());
        }
        if self.object_rate > 0.0 && self.max_objects == 0 {
            return err("max_objects must be positive when objects are enabled".into());
        }
        if !(self.noise >= 0.0) {
            return err("noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Valid,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 3] = [SplitRole::Train, SplitRole::Valid, SplitRole::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Valid => "valid",
            SplitRole::Test => "test",
        }
    }

    /// Seed of this split derived from a run seed, so splits never share a stream.
    pub fn derive_seed(self, seed: u64) -> u64 {
        let tag = match self {
            SplitRole::Train => 0x7472_6169_6e00_0001u64,
            SplitRole::Valid => 0x7661_6c69_6400_0002,
            SplitRole::Test => 0x7465_7374_0000_0003,
        };
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    /// `H * W` grayscale values, roughly in `[0, 1]`.
    pub image: Vec<f32>,
    /// `H * W` labels in `{0, 1}`.
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub patches: Vec<Patch>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Images `(B, 1, H, W)` and masks `(B, H, W)` of the given patch indices.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<u8>)> {
        let hw = self.height * self.width;
        let mut img = Vec::with_capacity(idx.len() * hw);
        let mut mask = Vec::with_capacity(idx.len() * hw);
        for &i in idx {
            let p = self.patches.get(i).ok_or_else(|| crate::error::invalid(format!("patch {i} out of range")))?;
            img.extend(p.image.iter().map(|&v| T::of(v as f64)));
            mask.extend_from_slice(&p.mask);
        }
        Ok((Tensor::new(&[idx.len(), 1, self.height, self.width], img)?, mask))
    }

    /// All masks concatenated in patch order.
    pub fn masks(&self) -> Vec<u8> {
        self.patches.iter().flat_map(|p| p.mask.iter().copied()).collect()
    }

    pub fn foreground_fraction(&self) -> f64 {
        let total = (self.len() * self.height * self.width).max(1);
        self.patches.iter().map(|p| p.mask.iter().filter(|&&m| m != 0).count()).sum::<usize>() as f64 / total as f64
    }
}

pub fn generate_synthetic_dataset(cfg: &DatasetConfig, role: SplitRole, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = (0..cfg.n_patches).map(|_| generate_patch(cfg, &mut rng)).collect();
    Ok(DatasetSplit {
        role,
        seed,
        height: cfg.height,
        width: cfg.width,
        patches,
    })
}

/// Train/valid/test splits with the given sizes, each on its own derived seed.
pub fn generate_splits(cfg: &DatasetConfig, sizes: [usize; 3], seed: u64) -> Result<[DatasetSplit; 3]> {
    let make = |role: SplitRole, n: usize| {
        let c = DatasetConfig {
            n_patches: n,
            ..cfg.clone()
        };
        generate_synthetic_dataset(&c, role, role.derive_seed(seed))
    };
    Ok([
        make(SplitRole::Train, sizes[0])?,
        make(SplitRole::Valid, sizes[1])?,
        make(SplitRole::Test, sizes[2])?,
    ])
}

enum Shape {
    Ellipse { a: f64, b: f64, rot: f64 },
    Polygon { verts: Vec<(f64, f64)> },
}

impl Shape {
    /// Whether the offset `(dx, dy)` from the centre is inside.
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Ellipse { a, b, rot } => {
                let (s, c) = libm::sincos(*rot);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
            }
            Shape::Polygon { verts } => {
                let mut inside = false;
                let n = verts.len();
                for i in 0..n {
                    let (xi, yi) = verts[i];
                    let (xj, yj) = verts[(i + n - 1) % n];
                    if (yi > dy) != (yj > dy) && dx < (xj - xi) * (dy - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    Float::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
}

fn generate_patch<R: Rng>(cfg: &DatasetConfig, rng: &mut R) -> Patch {
    let (h, w) = (cfg.height, cfg.width);
    let level = rng.gen_range(0.25..0.45);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.02..0.07),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.0..PI),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut image: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            level
                + waves
                    .iter()
                    .map(|&(amp, freq, dir, phase)| {
                        let (s, c) = libm::sincos(dir);
                        amp * libm::sin(freq * (c * x + s * y) + phase)
                    })
                    .sum::<f64>()
        })
        .collect();
    let mut mask = alloc::vec![0u8; h * w];

    let n_obj = if rng.gen_bool(cfg.object_rate) {
        rng.gen_range(1..=cfg.max_objects)
    } else {
        0
    };
    for _ in 0..n_obj {
        let r = rng.gen_range(cfg.min_radius..=cfg.max_radius);
        let use_ellipse = match (cfg.ellipses, cfg.polygons) {
            (true, true) => rng.gen_bool(0.5),
            (e, _) => e,
        };
        let shape = if use_ellipse {
            Shape::Ellipse {
                a: r,
                b: r * rng.gen_range(0.5..1.0),
                rot: rng.gen_range(0.0..PI),
            }
        } else {
            let k = rng.gen_range(3..=6);
            let start = rng.gen_range(0.0..2.0 * PI);
            let verts = (0..k)
                .map(|i| {
                    let ang = start + 2.0 * PI * (i as f64 + rng.gen_range(-0.25..0.25)) / k as f64;
                    let rr = r * rng.gen_range(0.7..1.0);
                    (rr * libm::cos(ang), rr * libm::sin(ang))
                })
                .collect();
            Shape::Polygon { verts }
        };
        let (cy, cx) = if rng.gen_bool(cfg.edge_clipping) {
            // centre within r/2 of a random border, so part of the object falls outside
            let along_y = rng.gen_range(0.0..h as f64);
            let along_x = rng.gen_range(0.0..w as f64);
            let off = rng.gen_range(-r / 2.0..r / 2.0);
            match rng.gen_range(0..4) {
                0 => (off, along_x),
                1 => (h as f64 - 1.0 + off, along_x),
                2 => (along_y, off),
                _ => (along_y, w as f64 - 1.0 + off),
            }
        } else {
            (rng.gen_range(r..h as f64 - r), rng.gen_range(r..w as f64 - r))
        };
        let contrast = rng.gen_range(0.3..0.5);
        let y0 = Float::floor(cy - r - 1.0).max(0.0) as usize;
        let y1 = (Float::ceil(cy + r + 1.0).max(0.0) as usize).min(h);
        let x0 = Float::floor(cx - r - 1.0).max(0.0) as usize;
        let x1 = (Float::ceil(cx + r + 1.0).max(0.0) as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                if shape.contains(x as f64 - cx, y as f64 - cy) {
                    let p = y * w + x;
                    if mask[p] == 0 {
                        image[p] += contrast;
                    }
                    mask[p] = 1;
                }
            }
        }
    }
    let image = image.into_iter().map(|v| (v + cfg.noise * gaussian(rng)) as f32).collect();
    Patch { image, mask }
}
