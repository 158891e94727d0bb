//! Reconstruction loss: pixel L1 plus weighted feature-space L1.
//!
//! `L(x, y) = mean|x - y| + λ · Σ_i mean|F_i(x) - F_i(y)|`
//!
//! The L1 terms are means over elements, so the per-stage `1/M_i`
//! normalization is built in. Feature stages come from a
//! [`PerceptualExtractor`]; the hermetic default is a fixed-seed random
//! convolutional stack, and trained weights can be loaded from an archive.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, ArchiveError};
use crate::nn::{avg_pool2, avg_pool2_backward, im2col, Activation, Conv2d};
use crate::tensor::{cast1, cast2, cst, sign, Real};

pub const EXTRACTOR_KIND: &str = "extractor";
pub const DEFAULT_LAMBDA_VGG: f64 = 10.0;
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_F00D;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize, usize), (usize, usize, usize)),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub pool_before: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStage<T> {
    pub spec: StageSpec,
    pub conv: Conv2d<T>,
}

/// Ordered feature stages `F^(1)..F^(N)`; stage `i` consumes stage `i-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor<T = f32> {
    pub stages: Vec<FeatureStage<T>>,
}

struct StageTrace<T> {
    cols: Array2<T>,
    pre: Array3<T>,
    out: Array3<T>,
    pooled_dims: (usize, usize),
}

impl<T: Real> PerceptualExtractor<T> {
    pub fn empty() -> Self {
        Self { stages: Vec::new() }
    }

    /// Three random 3×3 stages (8, 16, 32 channels; pooling before stages 2
    /// and 3). Deterministic in `seed`.
    pub fn random(seed: u64) -> Self {
        let specs = [
            StageSpec { pool_before: false, in_channels: 3, out_channels: 8 },
            StageSpec { pool_before: true, in_channels: 8, out_channels: 16 },
            StageSpec { pool_before: true, in_channels: 16, out_channels: 32 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = specs
            .into_iter()
            .map(|spec| FeatureStage {
                conv: Conv2d::init(spec.in_channels, spec.out_channels, 3, 2.0f64.sqrt(), &mut rng),
                spec,
            })
            .collect();
        Self { stages }
    }

    pub fn forward(&self, img: &Array3<T>) -> Vec<Array3<T>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = img.clone();
        for s in &self.stages {
            if s.spec.pool_before {
                cur = avg_pool2(&cur);
            }
            cur = Activation::LeakyRelu.apply(&s.conv.forward(&cur));
            feats.push(cur.clone());
        }
        feats
    }

    fn forward_traced(&self, img: &Array3<T>) -> Vec<StageTrace<T>> {
        let mut traces = Vec::with_capacity(self.stages.len());
        let mut cur = img.clone();
        for s in &self.stages {
            if s.spec.pool_before {
                cur = avg_pool2(&cur);
            }
            let (_, h, w) = cur.dim();
            let cols = im2col(&cur, 3);
            let pre = s.conv.forward_cols(&cols, h, w);
            let out = Activation::LeakyRelu.apply(&pre);
            cur = out.clone();
            traces.push(StageTrace { cols, pre, out, pooled_dims: (h, w) });
        }
        traces
    }

    /// Backpropagates per-stage feature gradients to the image.
    fn backward(&self, traces: &[StageTrace<T>], mut dfeats: Vec<Array3<T>>, img_dims: (usize, usize, usize)) -> Array3<T> {
        let mut carry: Option<Array3<T>> = None;
        for (i, (s, tr)) in self.stages.iter().zip(traces).enumerate().rev() {
            let mut g = std::mem::replace(&mut dfeats[i], Array3::zeros((0, 0, 0)));
            if let Some(c) = carry.take() {
                g += &c;
            }
            Activation::LeakyRelu.backward(&tr.pre, &tr.out, &mut g);
            let mut dx = s.conv.backward(&tr.cols, &g, None, true).expect("input grad requested");
            debug_assert_eq!((dx.dim().1, dx.dim().2), tr.pooled_dims);
            if s.spec.pool_before {
                dx = avg_pool2_backward(&dx);
            }
            carry = Some(dx);
        }
        carry.unwrap_or_else(|| Array3::zeros(img_dims))
    }

    pub fn cast<U: Real>(&self) -> PerceptualExtractor<U> {
        PerceptualExtractor {
            stages: self
                .stages
                .iter()
                .map(|s| FeatureStage {
                    spec: s.spec.clone(),
                    conv: Conv2d {
                        weight: cast2(&s.conv.weight),
                        bias: cast1(&s.conv.bias),
                        in_channels: s.conv.in_channels,
                        out_channels: s.conv.out_channels,
                        kernel: s.conv.kernel,
                    },
                })
                .collect(),
        }
    }
}

impl PerceptualExtractor<f32> {
    pub fn to_archive(&self) -> Archive {
        let specs: Vec<&StageSpec> = self.stages.iter().map(|s| &s.spec).collect();
        let mut a = Archive::new(EXTRACTOR_KIND, json!({ "stages": specs }));
        for (i, s) in self.stages.iter().enumerate() {
            a.insert2(format!("stages.{i}.weight"), &s.conv.weight);
            a.insert1(format!("stages.{i}.bias"), &s.conv.bias);
        }
        a
    }

    /// Loads 3×3 stages from an archive, e.g. weights converted from a
    /// pretrained classifier.
    pub fn from_archive(a: &Archive) -> Result<Self, ArchiveError> {
        a.expect_kind(EXTRACTOR_KIND)?;
        let specs: Vec<StageSpec> = serde_json::from_value(a.meta["stages"].clone())
            .map_err(|e| ArchiveError::Manifest(format!("stages: {e}")))?;
        let mut stages = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let mut conv = Conv2d::<f32>::zeros(spec.in_channels, spec.out_channels, 3);
            let w = a.get(&format!("stages.{i}.weight"))?.to_array2()?;
            if w.dim() != conv.weight.dim() {
                return Err(ArchiveError::Shape(format!("stages.{i}.weight is {:?}", w.dim())));
            }
            conv.weight = w;
            conv.bias = a.get(&format!("stages.{i}.bias"))?.to_array1()?;
            if conv.bias.len() != spec.out_channels {
                return Err(ArchiveError::Shape(format!("stages.{i}.bias has {} entries", conv.bias.len())));
            }
            stages.push(FeatureStage { spec, conv });
        }
        Ok(Self { stages })
    }
}

/// Target image with its features precomputed for repeated evaluation.
pub struct PreparedTarget<T> {
    pub pixels: Array3<T>,
    feats: Vec<Array3<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionLoss<T = f32> {
    pub extractor: PerceptualExtractor<T>,
    pub lambda_vgg: f64,
}

impl<T: Real> ReconstructionLoss<T> {
    pub fn new(extractor: PerceptualExtractor<T>) -> Self {
        Self { extractor, lambda_vgg: DEFAULT_LAMBDA_VGG }
    }

    pub fn pixel_only() -> Self {
        Self { extractor: PerceptualExtractor::empty(), lambda_vgg: DEFAULT_LAMBDA_VGG }
    }

    pub fn prepare(&self, target: &Array3<T>) -> PreparedTarget<T> {
        PreparedTarget { pixels: target.clone(), feats: self.extractor.forward(target) }
    }

    pub fn loss(&self, x: &Array3<T>, y: &Array3<T>) -> Result<T, LossError> {
        if x.dim() != y.dim() {
            return Err(LossError::Shape(x.dim(), y.dim()));
        }
        Ok(self.eval(&self.prepare(x), y, false).0)
    }

    /// Loss against a prepared target and, when `want_grad`, its gradient
    /// with respect to `y`.
    pub fn eval(&self, target: &PreparedTarget<T>, y: &Array3<T>, want_grad: bool) -> (T, Option<Array3<T>>) {
        let n = cst::<T>(y.len() as f64);
        let mut loss = T::zero();
        let mut grad = want_grad.then(|| Array3::<T>::zeros(y.dim()));
        for (a, b) in y.iter().zip(target.pixels.iter()) {
            loss += (*a - *b).abs();
        }
        loss /= n;
        if let Some(g) = grad.as_mut() {
            ndarray::Zip::from(g)
                .and(y)
                .and(&target.pixels)
                .for_each(|g, &a, &b| *g = sign(a - b) / n);
        }
        if self.extractor.stages.is_empty() {
            return (loss, grad);
        }
        let lambda = cst::<T>(self.lambda_vgg);
        if want_grad {
            let traces = self.extractor.forward_traced(y);
            let mut dfeats = Vec::with_capacity(traces.len());
            for (tr, tf) in traces.iter().zip(&target.feats) {
                let m = cst::<T>(tr.out.len() as f64);
                let mut s = T::zero();
                let mut d = Array3::<T>::zeros(tr.out.dim());
                ndarray::Zip::from(&mut d).and(&tr.out).and(tf).for_each(|d, &a, &b| {
                    s += (a - b).abs();
                    *d = lambda * sign(a - b) / m;
                });
                loss += lambda * s / m;
                dfeats.push(d);
            }
            let dimg = self.extractor.backward(&traces, dfeats, y.dim());
            if let Some(g) = grad.as_mut() {
                *g += &dimg;
            }
        } else {
            for (f, tf) in self.extractor.forward(y).iter().zip(&target.feats) {
                let m = cst::<T>(f.len() as f64);
                let s: T = f.iter().zip(tf.iter()).map(|(a, b)| (*a - *b).abs()).sum();
                loss += lambda * s / m;
            }
        }
        (loss, grad)
    }

    pub fn cast<U: Real>(&self) -> ReconstructionLoss<U> {
        ReconstructionLoss { extractor: self.extractor.cast(), lambda_vgg: self.lambda_vgg }
    }
}
