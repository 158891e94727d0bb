//! Procedural outdoor scenes with exact segmentations.
//!
//! Each scene is a pure function of its seed: a sky gradient over a ground
//! plane, usually a building with an optional dome and door, and up to two
//! trees painted in front. Scenes stand in for a photo collection with known
//! object masks.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum SceneClass {
    Sky = 0,
    Ground = 1,
    Building = 2,
    Tree = 3,
    Dome = 4,
    Door = 5,
}

pub const NUM_CLASSES: usize = 6;

impl SceneClass {
    pub const ALL: [SceneClass; NUM_CLASSES] = [
        SceneClass::Sky,
        SceneClass::Ground,
        SceneClass::Building,
        SceneClass::Tree,
        SceneClass::Dome,
        SceneClass::Door,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneClass::Sky => "sky",
            SceneClass::Ground => "ground",
            SceneClass::Building => "building",
            SceneClass::Tree => "tree",
            SceneClass::Dome => "dome",
            SceneClass::Door => "door",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error("scene size must be a positive multiple of 8, got {0}")]
    BadSize(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub cx: f32,
    pub crown_cy: f32,
    pub radius: f32,
    pub trunk_half_width: f32,
    pub trunk_bottom: f32,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub x0: f32,
    pub x1: f32,
    pub top: f32,
    pub bottom: f32,
    pub color: [f32; 3],
    /// Dome radius and color; centred on the roof line.
    pub dome: Option<(f32, [f32; 3])>,
    /// Door half width, top edge and color; centred at the base.
    pub door: Option<(f32, f32, [f32; 3])>,
}

/// Layout parameters in unit coordinates (`[0, 1]` spans the image side).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub horizon: f32,
    pub sky_top: [f32; 3],
    pub sky_bottom: [f32; 3],
    pub ground_near: [f32; 3],
    pub ground_far: [f32; 3],
    pub building: Option<Building>,
    pub trees: Vec<Tree>,
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let mut c = base;
    for v in &mut c {
        *v = (*v + rng.random_range(-amount..amount)).clamp(0.0, 1.0);
    }
    c
}

impl SceneSpec {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon: f32 = rng.random_range(0.55..0.75);
        let sky_top = jitter(&mut rng, [0.25, 0.45, 0.85], 0.12);
        let sky_bottom = jitter(&mut rng, [0.70, 0.82, 0.95], 0.08);
        let ground_near = if rng.random_bool(0.5) {
            jitter(&mut rng, [0.25, 0.50, 0.20], 0.10)
        } else {
            jitter(&mut rng, [0.50, 0.42, 0.30], 0.10)
        };
        let ground_far = jitter(&mut rng, ground_near, 0.06);

        let building = if rng.random_bool(0.9) {
            let width: f32 = rng.random_range(0.25..0.45);
            let x0 = rng.random_range(0.15..(0.85 - width));
            let top = rng.random_range(0.30..0.48);
            let bottom = (horizon + rng.random_range(0.05..0.12)).min(0.97);
            let color = jitter(&mut rng, [0.72, 0.66, 0.58], 0.15);
            let dome = rng.random_bool(0.6).then(|| {
                let r = width * rng.random_range(0.25..0.45);
                let c = if rng.random_bool(0.5) {
                    jitter(&mut rng, [0.20, 0.45, 0.45], 0.10)
                } else {
                    jitter(&mut rng, [0.80, 0.65, 0.25], 0.10)
                };
                (r, c)
            });
            let door = rng.random_bool(0.8).then(|| {
                let half = width * rng.random_range(0.08..0.14);
                let door_top = bottom - (bottom - top) * rng.random_range(0.25..0.45);
                (half, door_top, jitter(&mut rng, [0.30, 0.18, 0.10], 0.08))
            });
            Some(Building { x0, x1: x0 + width, top, bottom, color, dome, door })
        } else {
            None
        };

        let n_trees = rng.random_range(0..3usize);
        let mut trees = Vec::with_capacity(n_trees);
        for i in 0..n_trees {
            let left = (i == 0) == rng.random_bool(0.5);
            let cx = if left { rng.random_range(0.05..0.25) } else { rng.random_range(0.75..0.95) };
            let radius: f32 = rng.random_range(0.08..0.15);
            let trunk_bottom = (horizon + rng.random_range(0.05..0.2)).min(0.99);
            let crown_cy = trunk_bottom - radius - rng.random_range(0.08..0.18);
            trees.push(Tree {
                cx,
                crown_cy,
                radius,
                trunk_half_width: rng.random_range(0.012..0.025),
                trunk_bottom,
                color: jitter(&mut rng, [0.15, 0.42, 0.15], 0.10),
            });
        }

        Self { seed, horizon, sky_top, sky_bottom, ground_near, ground_far, building, trees }
    }

    /// Class id of the point `(u, v)` in unit coordinates.
    fn classify(&self, u: f32, v: f32) -> SceneClass {
        for t in &self.trees {
            let (du, dv) = (u - t.cx, v - t.crown_cy);
            if du * du + dv * dv <= t.radius * t.radius {
                return SceneClass::Tree;
            }
            if du.abs() <= t.trunk_half_width && v >= t.crown_cy && v <= t.trunk_bottom {
                return SceneClass::Tree;
            }
        }
        if let Some(b) = &self.building {
            let cx = 0.5 * (b.x0 + b.x1);
            if let Some((half, door_top, _)) = b.door {
                if (u - cx).abs() <= half && v >= door_top && v <= b.bottom {
                    return SceneClass::Door;
                }
            }
            if let Some((r, _)) = b.dome {
                let (du, dv) = (u - cx, v - b.top);
                if v < b.top && du * du + dv * dv <= r * r {
                    return SceneClass::Dome;
                }
            }
            if u >= b.x0 && u <= b.x1 && v >= b.top && v <= b.bottom {
                return SceneClass::Building;
            }
        }
        if v < self.horizon {
            SceneClass::Sky
        } else {
            SceneClass::Ground
        }
    }

    fn base_color(&self, class: SceneClass, u: f32, v: f32) -> [f32; 3] {
        let lerp = |a: [f32; 3], b: [f32; 3], t: f32| {
            [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
        };
        match class {
            SceneClass::Sky => lerp(self.sky_top, self.sky_bottom, (v / self.horizon).clamp(0.0, 1.0)),
            SceneClass::Ground => lerp(
                self.ground_far,
                self.ground_near,
                ((v - self.horizon) / (1.0 - self.horizon).max(1e-3)).clamp(0.0, 1.0),
            ),
            SceneClass::Building => {
                let b = self.building.as_ref().expect("building pixel implies building");
                // faint horizontal courses
                let stripe = if ((v * 40.0).floor() as i32) % 2 == 0 { 0.0 } else { -0.05 };
                let shade = 0.1 * (u - b.x0) / (b.x1 - b.x0).max(1e-3);
                b.color.map(|c| c - shade + stripe)
            }
            SceneClass::Dome => {
                let b = self.building.as_ref().expect("dome implies building");
                let (r, col) = b.dome.expect("dome pixel implies dome");
                let cx = 0.5 * (b.x0 + b.x1);
                let t = ((u - cx) / r).clamp(-1.0, 1.0);
                col.map(|c| c + 0.12 * (0.3 - t))
            }
            SceneClass::Door => {
                let b = self.building.as_ref().expect("door implies building");
                b.door.expect("door pixel implies door").2
            }
            SceneClass::Tree => {
                let t = self
                    .trees
                    .iter()
                    .find(|t| {
                        let (du, dv) = (u - t.cx, v - t.crown_cy);
                        du * du + dv * dv <= t.radius * t.radius
                            || (du.abs() <= t.trunk_half_width && v >= t.crown_cy && v <= t.trunk_bottom)
                    })
                    .expect("tree pixel implies tree");
                let (du, dv) = (u - t.cx, v - t.crown_cy);
                if du * du + dv * dv <= t.radius * t.radius {
                    let lit = -0.15 * (du + dv) / t.radius;
                    t.color.map(|c| c + lit)
                } else {
                    [0.35, 0.22, 0.12]
                }
            }
        }
    }

    /// Renders at `size × size`; returns the image with its segmentation.
    pub fn render(&self, size: usize) -> Image {
        let mut seg = Array2::<u8>::zeros((size, size));
        let mut pixels = Array3::<f32>::zeros((3, size, size));
        let s = size as f32;
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
                let class = self.classify(u, v);
                seg[[y, x]] = class.id();
                let col = self.base_color(class, u, v);
                for (c, &val) in col.iter().enumerate() {
                    let noise = 0.03 * texture_noise(self.seed, x as u32, y as u32, c as u32);
                    pixels[[c, y, x]] = ((val + noise).clamp(0.0, 1.0)) * 2.0 - 1.0;
                }
            }
        }
        Image { pixels, segmentation: Some(seg) }
    }
}

/// Deterministic per-pixel noise in `[-1, 1)`.
fn texture_noise(seed: u64, x: u32, y: u32, c: u32) -> f32 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x as u64, y as u64, c as u64] {
        h = splitmix64(h ^ v.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    }
    ((h >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of scene `index` in the dataset seeded by `dataset_seed`.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix64(dataset_seed.wrapping_mul(0x1000_0000_01B3) ^ splitmix64(index as u64))
}

pub fn make_synthetic_dataset(seed: u64, count: usize, size: usize) -> Result<Vec<Image>, SceneError> {
    if count == 0 {
        return Err(SceneError::EmptyDataset);
    }
    if size == 0 || !size.is_multiple_of(8) {
        return Err(SceneError::BadSize(size));
    }
    Ok((0..count).map(|i| SceneSpec::from_seed(scene_seed(seed, i)).render(size)).collect())
}

pub fn class_histogram(seg: &Array2<u8>) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    for &c in seg {
        h[c as usize] += 1;
    }
    h
}

/// Fraction of each grid cell covered by each class: `(classes, gh, gw)`.
pub fn class_coverage(seg: &Array2<u8>, grid_h: usize, grid_w: usize) -> Array3<f32> {
    let (h, w) = seg.dim();
    let (bh, bw) = (h / grid_h, w / grid_w);
    let mut cov = Array3::<f32>::zeros((NUM_CLASSES, grid_h, grid_w));
    for ((y, x), &c) in seg.indexed_iter() {
        cov[[c as usize, y / bh, x / bw]] += 1.0;
    }
    cov.mapv_inplace(|v| v / (bh * bw) as f32);
    cov
}
