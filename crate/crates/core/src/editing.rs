//! Latent edit algebra.
//!
//! An edit overwrites the coordinates selected by `α = U ⊗ i_c` with `s·p_c`
//! and leaves every other coordinate untouched (bit for bit). Edits are kept
//! in an ordered stack; removing one replays the survivors from the base code,
//! since overwrites cannot be undone.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dissection::{reference_style_vector, DissectionError, UnitCatalog};
use crate::generator::LatentCode;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EditError {
    #[error("mask is {found:?}, expected {expected:?}")]
    Dims { expected: (usize, usize), found: (usize, usize) },
    #[error("malformed run-length row {row}: {reason}")]
    Rle { row: usize, reason: String },
    #[error("class {0} is not in the catalog")]
    UnknownClass(u8),
    #[error("class `{0}` has no dissected units")]
    NoUnits(String),
    #[error("latent is {found:?} but the catalog describes {expected:?}")]
    CatalogMismatch { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("invalid edit: {0}")]
    Invalid(String),
    #[error("style source `{0}` not found")]
    UnknownStyle(String),
    #[error("no edit with id {0}")]
    UnknownEdit(u64),
}

impl From<DissectionError> for EditError {
    fn from(e: DissectionError) -> Self {
        match e {
            DissectionError::UnknownClass(n) => EditError::Invalid(format!("unknown class {n}")),
            other => EditError::Invalid(other.to_string()),
        }
    }
}

/// Row-wise run-length encoding of a binary mask. Each row alternates run
/// lengths of zeros and ones, starting with zeros (possibly a zero-length run).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<Vec<u32>>,
}

impl Rle {
    pub fn encode(mask: &Array2<u8>) -> Self {
        let (height, width) = mask.dim();
        let rows = mask
            .rows()
            .into_iter()
            .map(|row| {
                let mut runs = Vec::new();
                let mut cur = 0u8;
                let mut len = 0u32;
                for &v in row {
                    let v = u8::from(v != 0);
                    if v != cur {
                        runs.push(len);
                        cur = v;
                        len = 0;
                    }
                    len += 1;
                }
                runs.push(len);
                runs
            })
            .collect();
        Self { height, width, rows }
    }

    pub fn decode(&self) -> Result<Array2<u8>, EditError> {
        if self.rows.len() != self.height {
            return Err(EditError::Rle { row: self.rows.len(), reason: format!("expected {} rows", self.height) });
        }
        let mut out = Array2::zeros((self.height, self.width));
        for (y, runs) in self.rows.iter().enumerate() {
            let mut x = 0usize;
            for (k, &len) in runs.iter().enumerate() {
                let end = x + len as usize;
                if end > self.width {
                    return Err(EditError::Rle { row: y, reason: format!("runs exceed width {}", self.width) });
                }
                if k % 2 == 1 {
                    out.slice_mut(ndarray::s![y, x..end]).fill(1);
                }
                x = end;
            }
            if x != self.width {
                return Err(EditError::Rle { row: y, reason: format!("runs cover {x} of {} columns", self.width) });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    Draw,
    Erase,
    Restyle,
}

/// Pixel-resolution brush mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeMask {
    #[serde(with = "rle_serde")]
    pub mask: Array2<u8>,
    #[serde(default)]
    pub radius: f32,
    pub mode: EditMode,
}

/// Latent-grid selection `U`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionMask(#[serde(with = "rle_serde")] pub Array2<u8>);

impl RegionMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self(Array2::zeros((h, w)))
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self(Array2::ones((h, w)))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    /// Nearest-neighbour block footprint at pixel resolution, dilated by
    /// `dilation` pixels (square structuring element).
    pub fn footprint(&self, height: usize, width: usize, dilation: usize) -> Array2<f32> {
        let (gh, gw) = self.dims();
        let (bh, bw) = (height / gh.max(1), width / gw.max(1));
        let mut m = Array2::<f32>::zeros((height, width));
        for ((cy, cx), &v) in self.0.indexed_iter() {
            if v == 0 {
                continue;
            }
            let y0 = (cy * bh).saturating_sub(dilation);
            let x0 = (cx * bw).saturating_sub(dilation);
            let y1 = ((cy + 1) * bh + dilation).min(height);
            let x1 = ((cx + 1) * bw + dilation).min(width);
            m.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(1.0);
        }
        m
    }

    pub fn union(&self, other: &Self) -> Self {
        Self(ndarray::Zip::from(&self.0).and(&other.0).map_collect(|&a, &b| u8::from(a != 0 || b != 0)))
    }
}

mod rle_serde {
    use super::Rle;
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<u8>, s: S) -> Result<S::Ok, S::Error> {
        Rle::encode(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<u8>, D::Error> {
        Rle::deserialize(d)?.decode().map_err(serde::de::Error::custom)
    }
}

/// Grid cell is set when the stroke covers at least `coverage_fraction`
/// of its pixel block (any overlap when 0).
pub fn stroke_to_region(stroke: &StrokeMask, grid: (usize, usize), coverage_fraction: f32) -> Result<RegionMask, EditError> {
    let (h, w) = stroke.mask.dim();
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(EditError::Invalid(format!("stroke {h}x{w} does not divide into a {gh}x{gw} grid")));
    }
    let (bh, bw) = (h / gh, w / gw);
    let block = (bh * bw) as f32;
    Ok(RegionMask(Array2::from_shape_fn(grid, |(cy, cx)| {
        let n = stroke
            .mask
            .slice(ndarray::s![cy * bh..(cy + 1) * bh, cx * bw..(cx + 1) * bw])
            .iter()
            .filter(|&&v| v != 0)
            .count();
        u8::from(n > 0 && n as f32 / block >= coverage_fraction)
    })))
}

/// `α = U ⊗ i_c`, shaped (channels, gh, gw).
pub fn channel_mask(catalog: &UnitCatalog, class: u8, region: &RegionMask) -> Result<Array3<f32>, EditError> {
    let units = catalog.class(class).map_err(|_| EditError::UnknownClass(class))?;
    if units.selected().is_empty() {
        return Err(EditError::NoUnits(units.name.clone()));
    }
    let (gh, gw) = region.dims();
    Ok(Array3::from_shape_fn((catalog.channels, gh, gw), |(c, y, x)| units.indicator[c] * f32::from(region.0[[y, x]])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrengthLevel {
    Low,
    Med,
    High,
}

pub fn strength_preset(level: StrengthLevel, mode: EditMode) -> f32 {
    match (mode, level) {
        (EditMode::Erase, _) => 0.0,
        (_, StrengthLevel::Low) => 0.5,
        (_, StrengthLevel::Med) => 1.0,
        (_, StrengthLevel::High) => 2.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOp {
    #[serde(default)]
    pub id: u64,
    pub mode: EditMode,
    pub class: u8,
    pub region: RegionMask,
    pub strength: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_source: Option<String>,
}

/// Reference latents available to restyle edits, keyed by style id.
pub type StyleGallery = BTreeMap<String, LatentCode>;

impl EditOp {
    pub fn validate(&self, catalog: &UnitCatalog, styles: &StyleGallery) -> Result<(), EditError> {
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(EditError::Invalid(format!("strength {} must be finite and non-negative", self.strength)));
        }
        if self.mode == EditMode::Erase && self.strength != 0.0 {
            return Err(EditError::Invalid("erase requires strength 0".into()));
        }
        match (&self.mode, &self.style_source) {
            (EditMode::Restyle, None) => return Err(EditError::Invalid("restyle requires a style source".into())),
            (EditMode::Restyle, Some(s)) if !styles.contains_key(s) => return Err(EditError::UnknownStyle(s.clone())),
            _ => {}
        }
        if self.region.dims() != catalog.grid {
            return Err(EditError::Dims { expected: catalog.grid, found: self.region.dims() });
        }
        catalog.class(self.class).map_err(|_| EditError::UnknownClass(self.class))?;
        Ok(())
    }
}

/// `z_e = (1 − α) ⊙ z + α ⊙ (s·p)`, evaluated only where `α = 1`.
pub fn apply_edit(z: &LatentCode, op: &EditOp, catalog: &UnitCatalog, styles: &StyleGallery) -> Result<LatentCode, EditError> {
    op.validate(catalog, styles)?;
    let dims = z.values.dim();
    let expected = (catalog.channels, catalog.grid.0, catalog.grid.1);
    if dims != expected {
        return Err(EditError::CatalogMismatch { expected, found: dims });
    }
    let units = catalog.class(op.class).map_err(|_| EditError::UnknownClass(op.class))?;
    let selected = units.selected();
    if selected.is_empty() {
        return Err(EditError::NoUnits(units.name.clone()));
    }
    let p = match (&op.mode, &op.style_source) {
        (EditMode::Restyle, Some(src)) => reference_style_vector(&styles[src], catalog, op.class)?,
        _ => units.activation.clone(),
    };
    let mut out = z.clone();
    for ((y, x), &u) in op.region.0.indexed_iter() {
        if u == 0 {
            continue;
        }
        for &c in &selected {
            out.values[[c, y, x]] = op.strength * p[c];
        }
    }
    Ok(out)
}

/// Ordered, replayable list of edits over a fixed base code.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditStack {
    #[serde(skip)]
    base: Option<LatentCode>,
    ops: Vec<EditOp>,
    next_id: u64,
    #[serde(skip)]
    cache: Option<(String, LatentCode)>,
}

impl EditStack {
    pub fn new(base: LatentCode) -> Self {
        Self { base: Some(base), ops: Vec::new(), next_id: 1, cache: None }
    }

    /// Rebuilds a stack from exported history, validating every op.
    pub fn from_history(base: LatentCode, ops: Vec<EditOp>, catalog: &UnitCatalog, styles: &StyleGallery) -> Result<Self, EditError> {
        let next_id = ops.iter().map(|o| o.id).max().unwrap_or(0) + 1;
        let mut s = Self { base: Some(base), ops, next_id, cache: None };
        s.replay(catalog, styles)?;
        Ok(s)
    }

    /// Like `from_history` but keeps a saved id counter, so ids of deleted
    /// edits are not handed out again.
    pub fn restore(
        base: LatentCode,
        ops: Vec<EditOp>,
        next_id: u64,
        catalog: &UnitCatalog,
        styles: &StyleGallery,
    ) -> Result<Self, EditError> {
        let mut s = Self::from_history(base, ops, catalog, styles)?;
        s.next_id = s.next_id.max(next_id);
        Ok(s)
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn base(&self) -> &LatentCode {
        self.base.as_ref().expect("stack has a base code")
    }

    pub fn ops(&self) -> &[EditOp] {
        &self.ops
    }

    /// Appends `op` (assigning the next id) if it applies cleanly.
    pub fn push(&mut self, mut op: EditOp, catalog: &UnitCatalog, styles: &StyleGallery) -> Result<u64, EditError> {
        let current = self.replay(catalog, styles)?;
        op.id = self.next_id;
        let next = apply_edit(&current, &op, catalog, styles)?;
        self.ops.push(op);
        self.next_id += 1;
        self.cache = Some((self.digest(catalog), next));
        Ok(self.next_id - 1)
    }

    pub fn remove(&mut self, id: u64) -> Result<EditOp, EditError> {
        let pos = self.ops.iter().position(|o| o.id == id).ok_or(EditError::UnknownEdit(id))?;
        self.cache = None;
        Ok(self.ops.remove(pos))
    }

    /// Digest of (base code, op list, catalog).
    pub fn digest(&self, catalog: &UnitCatalog) -> String {
        let mut h = Sha256::new();
        for v in self.base().values.iter() {
            h.update(v.to_le_bytes());
        }
        h.update(format!("{:?}", self.base().values.dim()).as_bytes());
        h.update(serde_json::to_vec(&self.ops).expect("ops serialize"));
        h.update(catalog.digest().as_bytes());
        hex::encode(h.finalize())
    }

    /// Folds the ops over the base code; cached by digest.
    pub fn replay(&mut self, catalog: &UnitCatalog, styles: &StyleGallery) -> Result<LatentCode, EditError> {
        let key = self.digest(catalog);
        if let Some((k, z)) = &self.cache {
            if *k == key {
                return Ok(z.clone());
            }
        }
        let z = replay_ops(self.base(), &self.ops, catalog, styles)?;
        self.cache = Some((key, z.clone()));
        Ok(z)
    }

    /// Union of all op regions.
    pub fn edited_region(&self) -> Option<RegionMask> {
        self.ops.iter().map(|o| o.region.clone()).reduce(|a, b| a.union(&b))
    }
}

pub fn replay_ops(base: &LatentCode, ops: &[EditOp], catalog: &UnitCatalog, styles: &StyleGallery) -> Result<LatentCode, EditError> {
    ops.iter().try_fold(base.clone(), |z, op| apply_edit(&z, op, catalog, styles))
}
