//! Layered convolutional generator with a semantic/fine split.
//!
//! A generator is an ordered stack `g_1 … g_n`; layer `i` maps boundary
//! `i-1` to boundary `i` (boundary 0 is the latent input). Layers `1..=h` are
//! the high-level part, `h+1..=n` the fine part, so that
//! `forward == forward_fine ∘ forward_high`. Each layer is
//! `activation(conv(upsample(x)))`.
//!
//! The fine part can run with per-layer perturbations on the outputs of
//! layers `h+1..n-1`; those are applied between the layer's activation and
//! the next layer.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, ArchiveError, NamedArray};
use crate::image::Image;
use crate::nn::{upsample_nearest, upsample_nearest_backward, Activation, Conv2d, ConvGrads};
use crate::tensor::{cast1, cast2, Real};

pub const GENERATOR_KIND: &str = "generator";
pub const LATENT_KIND: &str = "latent";

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("latent at boundary {boundary} has shape {found:?}, generator expects {expected:?}")]
    Shape { boundary: usize, expected: [usize; 3], found: [usize; 3] },
    #[error("boundary {boundary} is not valid here: {reason}")]
    Boundary { boundary: usize, reason: String },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Conv2d,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub op: LayerOp,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub upsample: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, upsample: usize, activation: Activation) -> Self {
        Self { op: LayerOp::Conv2d, in_channels, out_channels, kernel, upsample, activation }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenLayer<T> {
    pub spec: LayerSpec,
    pub conv: Conv2d<T>,
}

/// Where perturbations act: multiply by `1 + δ` or add `δ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    #[default]
    Multiplicative,
    Additive,
}

/// Borrowed view of perturbation tensors for layers `h+1..n-1`.
#[derive(Clone, Copy, Debug)]
pub struct Perturb<'a, T> {
    pub mode: PerturbMode,
    pub deltas: &'a [Array3<T>],
}

/// A latent activation grid sitting at a generator boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    /// `(channels, height, width)`.
    pub values: Array3<f32>,
    pub boundary: usize,
}

impl LatentCode {
    pub fn new(values: Array3<f32>, boundary: usize) -> Self {
        Self { values, boundary }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.values.dim();
        [c, h, w]
    }

    pub fn as_slice(&self) -> &[f32] {
        self.values.as_slice().expect("latents are contiguous")
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(LATENT_KIND, json!({ "boundary": self.boundary }));
        a.insert3("z", &self.values);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self, ArchiveError> {
        a.expect_kind(LATENT_KIND)?;
        let boundary = a.meta["boundary"]
            .as_u64()
            .ok_or_else(|| ArchiveError::Manifest("latent boundary missing".into()))? as usize;
        Ok(Self { values: a.get("z")?.to_array3()?, boundary })
    }
}

#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    cols: Array2<T>,
    pre: Array3<T>,
    out: Array3<T>,
    in_dims: (usize, usize, usize),
}

/// Forward activations kept for a backward pass over layers `from+1..=to`.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub from: usize,
    pub to: usize,
    layers: Vec<LayerTrace<T>>,
    pub output: Array3<T>,
}

#[derive(Clone, Debug, Default)]
pub struct BackwardRequest {
    /// Produce the gradient w.r.t. the input of the traced range.
    pub input: bool,
    /// Accumulate weight gradients for layers with index `>= weights_from`
    /// (1-based); `None` skips weight gradients entirely.
    pub weights_from: Option<usize>,
    /// Produce gradients w.r.t. the perturbation tensors.
    pub deltas: bool,
}

#[derive(Clone, Debug)]
pub struct GeneratorGrads<T> {
    /// Indexed by 0-based layer; `None` for layers without gradients.
    pub layers: Vec<Option<ConvGrads<T>>>,
}

impl<T: Real> GeneratorGrads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, f: T) {
        for g in self.layers.iter_mut().flatten() {
            g.scale(f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackwardResult<T> {
    pub input: Option<Array3<T>>,
    pub weights: Option<GeneratorGrads<T>>,
    pub deltas: Option<Vec<Array3<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredGenerator<T = f32> {
    pub layers: Vec<GenLayer<T>>,
    split: usize,
    latent_shape: [usize; 3],
    pub name: String,
    pub seed: u64,
    /// Free-form metadata persisted with the checkpoint.
    pub extra: serde_json::Value,
    /// Named auxiliary arrays persisted as `aux.<name>`.
    pub aux: BTreeMap<String, NamedArray>,
}

/// The desk-scale generator: 128×4×4 latent, six layers, 64×64 RGB output,
/// split after layer 1 so the fine part spans four ×2 scales.
pub fn toy_architecture() -> (Vec<LayerSpec>, usize, [usize; 3]) {
    let specs = vec![
        LayerSpec::conv(128, 128, 1, 1, Activation::LeakyRelu),
        LayerSpec::conv(128, 64, 3, 2, Activation::LeakyRelu),
        LayerSpec::conv(64, 32, 3, 2, Activation::LeakyRelu),
        LayerSpec::conv(32, 16, 3, 2, Activation::LeakyRelu),
        LayerSpec::conv(16, 8, 3, 2, Activation::LeakyRelu),
        LayerSpec::conv(8, 3, 3, 1, Activation::Tanh),
    ];
    (specs, 1, [128, 4, 4])
}

impl<T: Real> LayeredGenerator<T> {
    /// Builds a generator with all-zero weights and biases.
    pub fn zeros(specs: Vec<LayerSpec>, split: usize, latent_shape: [usize; 3]) -> Result<Self, GeneratorError> {
        validate_specs(&specs, split, latent_shape)?;
        let layers = specs
            .into_iter()
            .map(|spec| GenLayer { conv: Conv2d::zeros(spec.in_channels, spec.out_channels, spec.kernel), spec })
            .collect();
        Ok(Self { layers, split, latent_shape, name: String::new(), seed: 0, extra: serde_json::Value::Null, aux: BTreeMap::new() })
    }

    /// He-initialized weights from `seed`.
    pub fn random(specs: Vec<LayerSpec>, split: usize, latent_shape: [usize; 3], seed: u64) -> Result<Self, GeneratorError> {
        validate_specs(&specs, split, latent_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let gain = match spec.activation {
                    Activation::Relu | Activation::LeakyRelu => 2.0f64.sqrt(),
                    _ => 1.0,
                };
                GenLayer { conv: Conv2d::init(spec.in_channels, spec.out_channels, spec.kernel, gain, &mut rng), spec }
            })
            .collect();
        Ok(Self { layers, split, latent_shape, name: String::new(), seed, extra: serde_json::Value::Null, aux: BTreeMap::new() })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// The split index `h`.
    pub fn split(&self) -> usize {
        self.split
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.latent_shape
    }

    /// Shape `(C, H, W)` at `boundary` (0 = input, `n` = image).
    pub fn boundary_shape(&self, boundary: usize) -> [usize; 3] {
        let [mut c, mut h, mut w] = self.latent_shape;
        for l in &self.layers[..boundary.min(self.layers.len())] {
            c = l.spec.out_channels;
            h *= l.spec.upsample;
            w *= l.spec.upsample;
        }
        [c, h, w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.boundary_shape(self.n_layers())
    }

    /// 0-based layer indices carrying a perturbation tensor.
    pub fn perturbed_layers(&self) -> std::ops::Range<usize> {
        self.split..self.n_layers() - 1
    }

    /// Zero perturbation tensors, one per perturbed layer output.
    pub fn zero_deltas(&self) -> Vec<Array3<T>> {
        self.perturbed_layers()
            .map(|i| {
                let [c, h, w] = self.boundary_shape(i + 1);
                Array3::zeros((c, h, w))
            })
            .collect()
    }

    pub fn check_input(&self, x: &Array3<T>, boundary: usize) -> Result<(), GeneratorError> {
        if boundary > self.n_layers() {
            return Err(GeneratorError::Boundary { boundary, reason: format!("generator has {} layers", self.n_layers()) });
        }
        let (c, h, w) = x.dim();
        let expected = self.boundary_shape(boundary);
        if [c, h, w] != expected {
            return Err(GeneratorError::Shape { boundary, expected, found: [c, h, w] });
        }
        Ok(())
    }

    fn check_perturb(&self, p: &Perturb<'_, T>) -> Result<(), GeneratorError> {
        let expected = self.perturbed_layers().len();
        if p.deltas.len() != expected {
            return Err(GeneratorError::Architecture(format!(
                "expected {expected} perturbation tensors, got {}",
                p.deltas.len()
            )));
        }
        for (j, i) in self.perturbed_layers().enumerate() {
            let (c, h, w) = p.deltas[j].dim();
            let expected = self.boundary_shape(i + 1);
            if [c, h, w] != expected {
                return Err(GeneratorError::Shape { boundary: i + 1, expected, found: [c, h, w] });
            }
        }
        Ok(())
    }

    fn delta_for(&self, layer: usize, perturb: Option<&Perturb<'_, T>>) -> Option<(PerturbMode, usize)> {
        let p = perturb?;
        if self.perturbed_layers().contains(&layer) {
            Some((p.mode, layer - self.split))
        } else {
            None
        }
    }

    /// Runs layers `from+1..=to` on a map at boundary `from`.
    pub fn forward_range(
        &self,
        x: &Array3<T>,
        from: usize,
        to: usize,
        perturb: Option<&Perturb<'_, T>>,
    ) -> Result<Array3<T>, GeneratorError> {
        self.check_range(x, from, to, perturb)?;
        let mut cur = x.clone();
        for i in from..to {
            let layer = &self.layers[i];
            let up = upsample_nearest(&cur, layer.spec.upsample);
            let pre = layer.conv.forward(&up);
            cur = layer.spec.activation.apply(&pre);
            if let Some((mode, j)) = self.delta_for(i, perturb) {
                apply_delta(&mut cur, &perturb.unwrap().deltas[j], mode);
            }
        }
        Ok(cur)
    }

    fn check_range(&self, x: &Array3<T>, from: usize, to: usize, perturb: Option<&Perturb<'_, T>>) -> Result<(), GeneratorError> {
        if from > to || to > self.n_layers() {
            return Err(GeneratorError::Boundary { boundary: to, reason: format!("cannot run from boundary {from} to {to}") });
        }
        self.check_input(x, from)?;
        if let Some(p) = perturb {
            self.check_perturb(p)?;
        }
        Ok(())
    }

    pub fn forward_traced(
        &self,
        x: &Array3<T>,
        from: usize,
        to: usize,
        perturb: Option<&Perturb<'_, T>>,
    ) -> Result<Trace<T>, GeneratorError> {
        self.check_range(x, from, to, perturb)?;
        let mut cur = x.clone();
        let mut layers = Vec::with_capacity(to - from);
        for i in from..to {
            let layer = &self.layers[i];
            let in_dims = cur.dim();
            let up = upsample_nearest(&cur, layer.spec.upsample);
            let (_, h, w) = up.dim();
            let cols = crate::nn::im2col(&up, layer.spec.kernel);
            let pre = layer.conv.forward_cols(&cols, h, w);
            let out = layer.spec.activation.apply(&pre);
            cur = out.clone();
            if let Some((mode, j)) = self.delta_for(i, perturb) {
                apply_delta(&mut cur, &perturb.unwrap().deltas[j], mode);
            }
            layers.push(LayerTrace { cols, pre, out, in_dims });
        }
        Ok(Trace { from, to, layers, output: cur })
    }

    /// Backpropagates `dout` (gradient w.r.t. `trace.output`).
    pub fn backward(
        &self,
        trace: &Trace<T>,
        dout: &Array3<T>,
        perturb: Option<&Perturb<'_, T>>,
        req: &BackwardRequest,
    ) -> BackwardResult<T> {
        let mut weights = req.weights_from.map(|_| GeneratorGrads { layers: vec![None; self.n_layers()] });
        let mut deltas = if req.deltas && perturb.is_some() { Some(self.zero_deltas()) } else { None };
        let mut grad = dout.clone();
        let lowest_needed = |i: usize| -> bool {
            // Gradient must keep flowing below layer i when anything beneath
            // it still needs one.
            if i > trace.from {
                return true;
            }
            req.input
        };
        for (k, lt) in trace.layers.iter().enumerate().rev() {
            let i = trace.from + k;
            let layer = &self.layers[i];
            if let Some((mode, j)) = self.delta_for(i, perturb) {
                let delta = &perturb.unwrap().deltas[j];
                if let Some(ds) = deltas.as_mut() {
                    match mode {
                        PerturbMode::Multiplicative => ds[j] += &(&grad * &lt.out),
                        PerturbMode::Additive => ds[j] += &grad,
                    }
                }
                if mode == PerturbMode::Multiplicative {
                    ndarray::Zip::from(&mut grad).and(delta).for_each(|g, &d| *g *= T::one() + d);
                }
            }
            layer.spec.activation.backward(&lt.pre, &lt.out, &mut grad);
            let wgrad = match (&mut weights, req.weights_from) {
                (Some(w), Some(from)) if i + 1 >= from => {
                    w.layers[i] = Some(ConvGrads::zeros_like(&layer.conv));
                    w.layers[i].as_mut()
                }
                _ => None,
            };
            let need_input = lowest_needed(i);
            let dup = layer.conv.backward(&lt.cols, &grad, wgrad, need_input);
            match dup {
                Some(d) => {
                    grad = upsample_nearest_backward(&d, layer.spec.upsample);
                    debug_assert_eq!(grad.dim(), lt.in_dims);
                }
                None => break,
            }
        }
        BackwardResult { input: if req.input { Some(grad) } else { None }, weights, deltas }
    }

    /// Flat mutable views of every layer's weight and bias, layers `>= from` (1-based).
    pub fn params_mut(&mut self, from: usize) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| i + 1 >= from)
            .flat_map(|(_, l)| {
                [l.conv.weight.as_slice_mut().unwrap(), l.conv.bias.as_slice_mut().unwrap()]
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> LayeredGenerator<U> {
        LayeredGenerator {
            layers: self
                .layers
                .iter()
                .map(|l| GenLayer {
                    spec: l.spec.clone(),
                    conv: Conv2d {
                        weight: cast2(&l.conv.weight),
                        bias: cast1(&l.conv.bias),
                        in_channels: l.conv.in_channels,
                        out_channels: l.conv.out_channels,
                        kernel: l.conv.kernel,
                    },
                })
                .collect(),
            split: self.split,
            latent_shape: self.latent_shape,
            name: self.name.clone(),
            seed: self.seed,
            extra: self.extra.clone(),
            aux: self.aux.clone(),
        }
    }
}

/// Flat gradient views matching [`LayeredGenerator::params_mut`] order.
pub fn grad_slices<T: Real>(g: &GeneratorGrads<T>, from: usize) -> Vec<&[T]> {
    g.layers
        .iter()
        .enumerate()
        .filter(|(i, _)| i + 1 >= from)
        .flat_map(|(_, l)| {
            let l = l.as_ref().expect("gradients present for requested layers");
            [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()]
        })
        .collect()
}

fn apply_delta<T: Real>(x: &mut Array3<T>, delta: &Array3<T>, mode: PerturbMode) {
    match mode {
        PerturbMode::Multiplicative => ndarray::Zip::from(x).and(delta).for_each(|v, &d| *v *= T::one() + d),
        PerturbMode::Additive => *x += delta,
    }
}

fn validate_specs(specs: &[LayerSpec], split: usize, latent_shape: [usize; 3]) -> Result<(), GeneratorError> {
    if specs.len() < 2 {
        return Err(GeneratorError::Architecture("need at least two layers".into()));
    }
    if split < 1 || split >= specs.len() {
        return Err(GeneratorError::Architecture(format!("split {split} must satisfy 1 <= h < n = {}", specs.len())));
    }
    let mut c = latent_shape[0];
    for (i, s) in specs.iter().enumerate() {
        if s.in_channels != c {
            return Err(GeneratorError::Architecture(format!(
                "layer {} expects {} input channels but boundary {i} has {c}",
                i + 1,
                s.in_channels
            )));
        }
        if s.kernel % 2 == 0 || s.upsample == 0 {
            return Err(GeneratorError::Architecture(format!("layer {} has kernel {} / upsample {}", i + 1, s.kernel, s.upsample)));
        }
        c = s.out_channels;
    }
    if c != 3 {
        return Err(GeneratorError::Architecture(format!("final layer must emit 3 channels, emits {c}")));
    }
    Ok(())
}

impl LayeredGenerator<f32> {
    /// Full forward pass from boundary 0, or only the fine part when `z`
    /// sits at the split boundary.
    pub fn forward(&self, z: &LatentCode) -> Result<Image, GeneratorError> {
        if z.boundary != 0 && z.boundary != self.split {
            return Err(GeneratorError::Boundary {
                boundary: z.boundary,
                reason: format!("forward accepts boundary 0 or the split boundary {}", self.split),
            });
        }
        let out = self.forward_range(&z.values, z.boundary, self.n_layers(), None)?;
        Ok(Image { pixels: out, segmentation: None })
    }

    pub fn forward_high(&self, z: &LatentCode) -> Result<LatentCode, GeneratorError> {
        if z.boundary != 0 {
            return Err(GeneratorError::Boundary { boundary: z.boundary, reason: "forward_high needs boundary 0".into() });
        }
        Ok(LatentCode::new(self.forward_range(&z.values, 0, self.split, None)?, self.split))
    }

    pub fn forward_fine(&self, z_h: &LatentCode) -> Result<Image, GeneratorError> {
        if z_h.boundary != self.split {
            return Err(GeneratorError::Boundary {
                boundary: z_h.boundary,
                reason: format!("forward_fine needs the split boundary {}", self.split),
            });
        }
        let out = self.forward_range(&z_h.values, self.split, self.n_layers(), None)?;
        Ok(Image { pixels: out, segmentation: None })
    }

    /// Pushes `z` forward to a later boundary.
    pub fn forward_to(&self, z: &LatentCode, boundary: usize) -> Result<LatentCode, GeneratorError> {
        Ok(LatentCode::new(self.forward_range(&z.values, z.boundary, boundary, None)?, boundary))
    }

    pub fn to_archive(&self) -> Archive {
        let specs: Vec<&LayerSpec> = self.layers.iter().map(|l| &l.spec).collect();
        let meta = json!({
            "name": self.name,
            "seed": self.seed,
            "split": self.split,
            "latent_shape": self.latent_shape,
            "output_shape": self.output_shape(),
            "layers": specs,
            "extra": self.extra,
        });
        let mut a = Archive::new(GENERATOR_KIND, meta);
        for (i, l) in self.layers.iter().enumerate() {
            let k = l.spec.kernel;
            a.insert(
                format!("layers.{i}.weight"),
                vec![l.spec.out_channels, l.spec.in_channels, k, k],
                l.conv.weight.iter().copied().collect(),
            );
            a.insert1(format!("layers.{i}.bias"), &l.conv.bias);
        }
        for (name, arr) in &self.aux {
            a.insert(format!("aux.{name}"), arr.shape.clone(), arr.data.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self, GeneratorError> {
        a.expect_kind(GENERATOR_KIND)?;
        let bad = |what: &str| GeneratorError::Archive(ArchiveError::Manifest(format!("missing or invalid `{what}`")));
        let specs: Vec<LayerSpec> = serde_json::from_value(a.meta["layers"].clone()).map_err(|_| bad("layers"))?;
        let split = a.meta["split"].as_u64().ok_or_else(|| bad("split"))? as usize;
        let latent_shape: [usize; 3] =
            serde_json::from_value(a.meta["latent_shape"].clone()).map_err(|_| bad("latent_shape"))?;
        let mut g = LayeredGenerator::<f32>::zeros(specs, split, latent_shape)
            .map_err(|e| GeneratorError::Archive(ArchiveError::Shape(e.to_string())))?;
        if let Ok(out) = serde_json::from_value::<[usize; 3]>(a.meta["output_shape"].clone()) {
            if out != g.output_shape() {
                return Err(GeneratorError::Archive(ArchiveError::Shape(format!(
                    "manifest output shape {out:?} disagrees with layers ({:?})",
                    g.output_shape()
                ))));
            }
        }
        for (i, l) in g.layers.iter_mut().enumerate() {
            let w = a.get(&format!("layers.{i}.weight"))?;
            let k = l.spec.kernel;
            let expected = vec![l.spec.out_channels, l.spec.in_channels, k, k];
            if w.shape != expected {
                return Err(GeneratorError::Archive(ArchiveError::Shape(format!(
                    "layers.{i}.weight has shape {:?}, manifest implies {expected:?}",
                    w.shape
                ))));
            }
            l.conv.weight = Array2::from_shape_vec(l.conv.weight.dim(), w.data.clone()).expect("checked shape");
            let b = a.get(&format!("layers.{i}.bias"))?;
            if b.shape != vec![l.spec.out_channels] {
                return Err(GeneratorError::Archive(ArchiveError::Shape(format!(
                    "layers.{i}.bias has shape {:?}, expected [{}]",
                    b.shape, l.spec.out_channels
                ))));
            }
            l.conv.bias = b.to_array1()?;
        }
        g.name = a.meta["name"].as_str().unwrap_or_default().to_string();
        g.seed = a.meta["seed"].as_u64().unwrap_or(0);
        g.extra = a.meta["extra"].clone();
        for name in a.names().filter_map(|n| n.strip_prefix("aux.")) {
            g.aux.insert(name.to_string(), a.get(&format!("aux.{name}"))?.clone());
        }
        Ok(g)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<(), GeneratorError> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<Self, GeneratorError> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Digest of the weights only; identifies a checkpoint.
    pub fn weights_digest(&self) -> String {
        self.to_archive().weights_digest()
    }

    /// Pixel radius over which a change in one boundary-0 cell can leak
    /// beyond that cell's own pixel block.
    pub fn receptive_spill(&self) -> usize {
        // A k×k conv at a boundary with scale factor f spreads by (k/2)*f pixels.
        let total_up: usize = self.layers.iter().map(|l| l.spec.upsample).product();
        let mut scale = total_up;
        let mut spill = 0;
        for l in &self.layers {
            scale /= l.spec.upsample;
            spill += (l.spec.kernel / 2) * scale;
        }
        spill
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn micro() -> LayeredGenerator<f64> {
        let specs = vec![
            LayerSpec::conv(4, 6, 1, 1, Activation::LeakyRelu),
            LayerSpec::conv(6, 5, 3, 2, Activation::LeakyRelu),
            LayerSpec::conv(5, 3, 3, 1, Activation::Tanh),
        ];
        LayeredGenerator::random(specs, 1, [4, 2, 2], 7).unwrap()
    }

    fn rand_like(shape: [usize; 3], seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weight_generator_outputs_activated_bias() {
        let (specs, split, shape) = toy_architecture();
        let mut g = LayeredGenerator::<f32>::zeros(specs, split, shape).unwrap();
        let last = g.n_layers() - 1;
        g.layers[last].conv.bias = ndarray::arr1(&[0.5, -0.25, 0.0]);
        let z = LatentCode::new(Array3::from_elem((128, 4, 4), 3.0), 0);
        let img = g.forward(&z).unwrap();
        assert_eq!(img.dims(), (64, 64));
        for (c, b) in [0.5f32, -0.25, 0.0].iter().enumerate() {
            assert!(img.pixels.index_axis(ndarray::Axis(0), c).iter().all(|&v| v == b.tanh()));
        }
    }

    #[test]
    fn split_composition_matches_full_forward() {
        let (specs, split, shape) = toy_architecture();
        let g = LayeredGenerator::<f32>::random(specs, split, shape, 1).unwrap();
        let z = LatentCode::new(rand_like(shape, 2).mapv(|v| v as f32), 0);
        let full = g.forward(&z).unwrap();
        let composed = g.forward_fine(&g.forward_high(&z).unwrap()).unwrap();
        assert!(full.max_abs_diff(&composed) <= 1e-6);
        // forward also accepts a code sitting at the split boundary
        let via = g.forward(&g.forward_high(&z).unwrap()).unwrap();
        assert_eq!(via, composed);
    }

    #[test]
    fn degenerate_split_runs_a_single_fine_layer() {
        let specs = vec![
            LayerSpec::conv(2, 4, 1, 1, Activation::LeakyRelu),
            LayerSpec::conv(4, 3, 3, 2, Activation::Tanh),
        ];
        let g = LayeredGenerator::<f32>::random(specs, 1, [2, 2, 2], 3).unwrap();
        assert_eq!(g.split(), g.n_layers() - 1);
        let z = LatentCode::new(Array3::from_elem((2, 2, 2), 0.3), 0);
        let zh = g.forward_high(&z).unwrap();
        let manual = {
            let l = &g.layers[1];
            l.spec.activation.apply(&l.conv.forward(&upsample_nearest(&zh.values, 2)))
        };
        assert_eq!(g.forward_fine(&zh).unwrap().pixels, manual);
        assert!(g.perturbed_layers().is_empty());
    }

    #[test]
    fn shape_mismatch_names_boundary() {
        let g = micro().cast::<f32>();
        let z = LatentCode::new(Array3::zeros((3, 2, 2)), 0);
        let err = g.forward(&z).unwrap_err().to_string();
        assert!(err.contains("boundary 0"), "{err}");
        let z = LatentCode::new(Array3::zeros((4, 2, 2)), 2);
        assert!(matches!(g.forward(&z), Err(GeneratorError::Boundary { boundary: 2, .. })));
        assert!(g.forward_fine(&LatentCode::new(Array3::zeros((4, 2, 2)), 0)).is_err());
    }

    #[test]
    fn bad_split_rejected() {
        let (specs, _, shape) = toy_architecture();
        assert!(LayeredGenerator::<f32>::zeros(specs.clone(), 0, shape).is_err());
        assert!(LayeredGenerator::<f32>::zeros(specs, 6, shape).is_err());
    }

    #[test]
    fn output_dims_follow_upsampling() {
        let (specs, split, shape) = toy_architecture();
        let g = LayeredGenerator::<f32>::zeros(specs, split, shape).unwrap();
        assert_eq!(g.output_shape(), [3, 64, 64]);
        assert_eq!(g.boundary_shape(1), [128, 4, 4]);
        assert_eq!(g.zero_deltas().len(), 4);
    }

    #[test]
    fn backward_matches_finite_differences_everywhere() {
        let g = micro();
        let z = rand_like([4, 2, 2], 5);
        let mut deltas = g.zero_deltas();
        for (j, d) in deltas.iter_mut().enumerate() {
            *d = rand_like([d.dim().0, d.dim().1, d.dim().2], 20 + j as u64).mapv(|v| 0.3 * v);
        }
        let probe = rand_like(g.output_shape(), 6);
        for mode in [PerturbMode::Multiplicative, PerturbMode::Additive] {
            let p = Perturb { mode, deltas: &deltas };
            let loss = |g: &LayeredGenerator<f64>, z: &Array3<f64>, ds: &[Array3<f64>]| {
                let p = Perturb { mode, deltas: ds };
                (&g.forward_range(z, 0, 3, Some(&p)).unwrap() * &probe).sum()
            };
            let tr = g.forward_traced(&z, 0, 3, Some(&p)).unwrap();
            let req = BackwardRequest { input: true, weights_from: Some(1), deltas: true };
            let res = g.backward(&tr, &probe, Some(&p), &req);
            let h = 1e-6;
            let dz = res.input.unwrap();
            for idx in [[0usize, 0usize, 1usize], [3, 1, 0]] {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[idx] += h;
                zm[idx] -= h;
                let fd = (loss(&g, &zp, &deltas) - loss(&g, &zm, &deltas)) / (2.0 * h);
                assert!((fd - dz[idx]).abs() < 1e-6, "z {fd} vs {}", dz[idx]);
            }
            let dd = res.deltas.unwrap();
            for idx in [[0usize, 0usize, 0usize], [4, 3, 2]] {
                let (mut p1, mut m1) = (deltas.clone(), deltas.clone());
                p1[0][idx] += h;
                m1[0][idx] -= h;
                let fd = (loss(&g, &z, &p1) - loss(&g, &z, &m1)) / (2.0 * h);
                assert!((fd - dd[0][idx]).abs() < 1e-6, "delta {fd} vs {}", dd[0][idx]);
            }
            let wg = res.weights.unwrap();
            for layer in 0..3 {
                let (mut gp, mut gm) = (g.clone(), g.clone());
                gp.layers[layer].conv.weight[[1, 2]] += h;
                gm.layers[layer].conv.weight[[1, 2]] -= h;
                let fd = (loss(&gp, &z, &deltas) - loss(&gm, &z, &deltas)) / (2.0 * h);
                let an = wg.layers[layer].as_ref().unwrap().weight[[1, 2]];
                assert!((fd - an).abs() < 1e-6, "w{layer} {fd} vs {an}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let (specs, split, shape) = toy_architecture();
        let mut g = LayeredGenerator::<f32>::random(specs, split, shape, 9).unwrap();
        g.name = "rt".into();
        let bytes = g.to_archive().to_bytes();
        let back = LayeredGenerator::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, g);

        // Editing a manifest channel count must surface as a shape error.
        let mut a = Archive::from_bytes(&bytes).unwrap();
        a.meta["layers"][2]["out_channels"] = json!(31);
        a.meta["layers"][3]["in_channels"] = json!(31);
        let err = LayeredGenerator::from_archive(&a).unwrap_err();
        assert!(matches!(err, GeneratorError::Archive(ArchiveError::Shape(_))), "{err}");
    }

    #[test]
    fn spill_of_toy_generator() {
        let (specs, split, shape) = toy_architecture();
        let g = LayeredGenerator::<f32>::zeros(specs, split, shape).unwrap();
        // 1x1 at 4x4, then 3x3 convs at 8, 16, 32, 64 and 64 px scales.
        assert_eq!(g.receptive_spill(), 8 + 4 + 2 + 1 + 1);
    }
}
