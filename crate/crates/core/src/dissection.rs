//! Unit dissection: which latent channels localize which scene class.
//!
//! Channel maps are compared with class masks at image resolution after
//! nearest-neighbour upsampling. Because that upsampling replicates each cell
//! into an equal-sized pixel block, quantiles and class-conditional means can
//! be computed on the cells with per-cell pixel counts as weights; the result
//! is identical to working on the upsampled maps.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{hex_digest, Archive, ArchiveError};
use crate::generator::{GeneratorError, LatentCode, LayeredGenerator};
use crate::scenes::{SceneClass, SceneSpec, NUM_CLASSES};
use crate::training::LatentLayout;

pub const CATALOG_KIND: &str = "catalog";

#[derive(Debug, thiserror::Error)]
pub enum DissectionError {
    #[error("class `{0}` does not appear in any segmentation")]
    ClassAbsent(String),
    #[error("class `{0}` is not in the catalog")]
    UnknownClass(String),
    #[error("segmentation {index} is {found:?}, not a multiple of the {grid:?} grid")]
    Dims { index: usize, found: (usize, usize), grid: (usize, usize) },
    #[error("{activations} activation maps but {segmentations} segmentations")]
    Count { activations: usize, segmentations: usize },
    #[error("latent has {found} channels, catalog has {expected}")]
    Channels { expected: usize, found: usize },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissectionConfig {
    /// Per-channel binarization quantile.
    pub quantile: f64,
    pub iou_floor: f32,
    pub top_k: usize,
    /// Seed and size of the sample the catalog was built from.
    pub sample_seed: u64,
    pub sample_size: usize,
    /// Layer boundary whose channels are dissected.
    pub boundary: usize,
}

impl Default for DissectionConfig {
    fn default() -> Self {
        Self { quantile: 0.99, iou_floor: 0.03, top_k: 16, sample_seed: 0xD15EC7, sample_size: 512, boundary: 0 }
    }
}

impl DissectionConfig {
    pub fn digest(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn check_inputs(acts: &[Array3<f32>], segs: &[Array2<u8>]) -> Result<(usize, usize), DissectionError> {
    if acts.len() != segs.len() {
        return Err(DissectionError::Count { activations: acts.len(), segmentations: segs.len() });
    }
    let Some(first) = acts.first() else { return Ok((1, 1)) };
    let (_, gh, gw) = first.dim();
    let (h, w) = segs[0].dim();
    for (i, (a, s)) in acts.iter().zip(segs).enumerate() {
        let (_, ah, aw) = a.dim();
        if s.dim() != (h, w) || ah != gh || aw != gw || h % gh != 0 || w % gw != 0 {
            return Err(DissectionError::Dims { index: i, found: s.dim(), grid: (ah, aw) });
        }
    }
    Ok((h / gh, w / gw))
}

/// Nearest-rank quantile threshold of every channel over all cells.
fn channel_thresholds(acts: &[Array3<f32>], q: f64) -> Vec<(f32, f32)> {
    let c = acts.first().map_or(0, |a| a.dim().0);
    (0..c)
        .map(|ch| {
            let mut v: Vec<f32> = acts.iter().flat_map(|a| a.index_axis(Axis(0), ch).iter().copied().collect::<Vec<_>>()).collect();
            v.sort_by(f32::total_cmp);
            let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            (v[rank], v[0])
        })
        .collect()
}

/// Mean IoU of every channel's binarized map against the mask of `class`.
///
/// A pixel is active when its value reaches the channel's quantile threshold
/// and exceeds the channel minimum, so a constant channel is never active.
/// Images where both the active set and the mask are empty are skipped.
pub fn channel_iou(acts: &[Array3<f32>], segs: &[Array2<u8>], class: u8, quantile: f64) -> Result<Vec<f32>, DissectionError> {
    let (bh, bw) = check_inputs(acts, segs)?;
    if !segs.iter().any(|s| s.iter().any(|&v| v == class)) {
        let name = SceneClass::from_id(class).map_or_else(|| format!("#{class}"), |c| c.name().to_string());
        return Err(DissectionError::ClassAbsent(name));
    }
    let thresholds = channel_thresholds(acts, quantile);
    // Activations are constant over each cell's pixel block, so per-cell
    // class pixel counts give exact pixel-level intersections and unions.
    let counts: Vec<(Array2<usize>, usize)> = segs
        .iter()
        .map(|s| {
            let (h, w) = s.dim();
            let mut c = Array2::<usize>::zeros((h / bh, w / bw));
            for ((y, x), &lab) in s.indexed_iter() {
                c[[y / bh, x / bw]] += usize::from(lab == class);
            }
            let total = c.sum();
            (c, total)
        })
        .collect();
    let block = bh * bw;
    let mut out = Vec::with_capacity(thresholds.len());
    for (ch, &(t, lo)) in thresholds.iter().enumerate() {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (a, (cnt, total)) in acts.iter().zip(&counts) {
            let (mut inter, mut on_area) = (0usize, 0usize);
            for (&v, &k) in a.index_axis(Axis(0), ch).iter().zip(cnt.iter()) {
                if v >= t && v > lo {
                    inter += k;
                    on_area += block;
                }
            }
            let union = on_area + total - inter;
            if union > 0 {
                sum += inter as f64 / union as f64;
                n += 1;
            }
        }
        out.push(if n == 0 { 0.0 } else { (sum / n as f64) as f32 });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassUnits {
    pub class: u8,
    pub name: String,
    /// 0/1 indicator over channels.
    pub indicator: Vec<f32>,
    /// Class activation vector; zero where the indicator is zero.
    pub activation: Vec<f32>,
    pub iou: Vec<f32>,
}

impl ClassUnits {
    pub fn selected(&self) -> Vec<usize> {
        self.indicator.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitCatalog {
    pub classes: Vec<ClassUnits>,
    pub channels: usize,
    pub grid: (usize, usize),
    pub checkpoint_id: String,
    pub config: DissectionConfig,
}

/// Picks channels by IoU floor and top-k, then averages their activations
/// over pixels of each class.
pub fn build_catalog(
    acts: &[Array3<f32>],
    segs: &[Array2<u8>],
    config: &DissectionConfig,
    checkpoint_id: &str,
) -> Result<UnitCatalog, DissectionError> {
    let (bh, bw) = check_inputs(acts, segs)?;
    let (channels, gh, gw) = acts.first().map_or((0, 0, 0), |a| a.dim());
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for class in SceneClass::ALL {
        let id = class.id();
        let iou = match channel_iou(acts, segs, id, config.quantile) {
            Ok(s) => s,
            Err(DissectionError::ClassAbsent(_)) => vec![0.0; channels],
            Err(e) => return Err(e),
        };
        let mut order: Vec<usize> = (0..channels).filter(|&c| iou[c] >= config.iou_floor && iou[c] > 0.0).collect();
        order.sort_by(|&a, &b| iou[b].total_cmp(&iou[a]).then(a.cmp(&b)));
        order.truncate(config.top_k);
        if order.is_empty() {
            log::warn!("no channel passes selection for class `{}`", class.name());
        }
        let mut indicator = vec![0.0; channels];
        order.iter().for_each(|&c| indicator[c] = 1.0);
        let activation = class_means(acts, segs, id, &order, (bh, bw), channels);
        classes.push(ClassUnits { class: id, name: class.name().to_string(), indicator, activation, iou });
    }
    Ok(UnitCatalog { classes, channels, grid: (gh, gw), checkpoint_id: checkpoint_id.to_string(), config: config.clone() })
}

fn class_means(
    acts: &[Array3<f32>],
    segs: &[Array2<u8>],
    class: u8,
    selected: &[usize],
    block: (usize, usize),
    channels: usize,
) -> Vec<f32> {
    let mut sums = vec![0.0f64; channels];
    let mut count = 0usize;
    for (a, s) in acts.iter().zip(segs) {
        for ((y, x), &lab) in s.indexed_iter() {
            if lab != class {
                continue;
            }
            count += 1;
            for &c in selected {
                sums[c] += a[[c, y / block.0, x / block.1]] as f64;
            }
        }
    }
    if count == 0 {
        return vec![0.0; channels];
    }
    sums.iter().map(|s| (s / count as f64) as f32).collect()
}

/// Activations at the dissected boundary for codes at any earlier boundary.
pub fn activations_at(g: &LayeredGenerator, codes: &[LatentCode], boundary: usize) -> Result<Vec<Array3<f32>>, DissectionError> {
    codes.iter().map(|z| Ok(g.forward_to(z, boundary)?.values)).collect()
}

/// Seeded dissection sample: latents drawn from the generator's training
/// layout, paired with the segmentation of the scene they were laid out from.
pub fn layout_sample(layout: &LatentLayout, seed: u64, count: usize, image_size: usize) -> (Vec<LatentCode>, Vec<Array2<u8>>) {
    (0..count)
        .map(|i| {
            let s = crate::scenes::scene_seed(seed, i);
            let seg = SceneSpec::from_seed(s).render(image_size).segmentation.expect("scenes carry segmentation");
            (layout.sample(s, image_size), seg)
        })
        .unzip()
}

impl UnitCatalog {
    pub fn class(&self, id: u8) -> Result<&ClassUnits, DissectionError> {
        self.classes.iter().find(|c| c.class == id).ok_or_else(|| DissectionError::UnknownClass(format!("#{id}")))
    }

    pub fn class_by_name(&self, name: &str) -> Result<&ClassUnits, DissectionError> {
        self.classes.iter().find(|c| c.name == name).ok_or_else(|| DissectionError::UnknownClass(name.to_string()))
    }

    pub fn to_archive(&self) -> Archive {
        let names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        let ids: Vec<u8> = self.classes.iter().map(|c| c.class).collect();
        let mut a = Archive::new(
            CATALOG_KIND,
            json!({
                "checkpoint_id": self.checkpoint_id,
                "config": self.config,
                "config_digest": self.config.digest(),
                "channels": self.channels,
                "grid": [self.grid.0, self.grid.1],
                "classes": names,
                "class_ids": ids,
            }),
        );
        for c in &self.classes {
            a.insert(format!("{}.indicator", c.name), vec![self.channels], c.indicator.clone());
            a.insert(format!("{}.activation", c.name), vec![self.channels], c.activation.clone());
            a.insert(format!("{}.iou", c.name), vec![self.channels], c.iou.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self, DissectionError> {
        a.expect_kind(CATALOG_KIND)?;
        let bad = |k: &str| ArchiveError::Manifest(format!("missing or invalid `{k}`"));
        let m = &a.meta;
        let config: DissectionConfig = serde_json::from_value(m["config"].clone()).map_err(|_| bad("config"))?;
        if m["config_digest"].as_str() != Some(config.digest().as_str()) {
            return Err(bad("config_digest").into());
        }
        let channels = m["channels"].as_u64().ok_or_else(|| bad("channels"))? as usize;
        let grid: [usize; 2] = serde_json::from_value(m["grid"].clone()).map_err(|_| bad("grid"))?;
        let names: Vec<String> = serde_json::from_value(m["classes"].clone()).map_err(|_| bad("classes"))?;
        let ids: Vec<u8> = serde_json::from_value(m["class_ids"].clone()).map_err(|_| bad("class_ids"))?;
        if ids.len() != names.len() {
            return Err(bad("class_ids").into());
        }
        let vec_of = |name: String| -> Result<Vec<f32>, ArchiveError> {
            let arr = a.get(&name)?;
            if arr.shape != [channels] {
                return Err(ArchiveError::Shape(format!("{name} is {:?}, expected [{channels}]", arr.shape)));
            }
            Ok(arr.data.clone())
        };
        let classes = names
            .into_iter()
            .zip(ids)
            .map(|(name, class)| {
                Ok(ClassUnits {
                    class,
                    indicator: vec_of(format!("{name}.indicator"))?,
                    activation: vec_of(format!("{name}.activation"))?,
                    iou: vec_of(format!("{name}.iou"))?,
                    name,
                })
            })
            .collect::<Result<Vec<_>, ArchiveError>>()?;
        Ok(Self {
            classes,
            channels,
            grid: (grid[0], grid[1]),
            checkpoint_id: m["checkpoint_id"].as_str().ok_or_else(|| bad("checkpoint_id"))?.to_string(),
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DissectionError> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DissectionError> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Content digest, used to key replay caches.
    pub fn digest(&self) -> String {
        self.to_archive().digest()
    }
}

/// Appearance vector from a reference latent: for each selected channel,
/// the mean of its strictly positive activations (0 if none).
pub fn reference_style_vector(z_ref: &LatentCode, catalog: &UnitCatalog, class: u8) -> Result<Vec<f32>, DissectionError> {
    let units = catalog.class(class)?;
    let c = z_ref.values.dim().0;
    if c != catalog.channels {
        return Err(DissectionError::Channels { expected: catalog.channels, found: c });
    }
    let mut p = vec![0.0; c];
    for ch in units.selected() {
        let (s, n) = z_ref
            .values
            .index_axis(Axis(0), ch)
            .iter()
            .filter(|&&v| v > 0.0)
            .fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
        p[ch] = if n == 0 { 0.0 } else { (s / n as f64) as f32 };
    }
    Ok(p)
}
