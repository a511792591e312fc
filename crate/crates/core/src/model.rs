//! Pooled-MLP encoder with a classification head and a training-only projection head.
//!
//! ```text
//! fbank (T x mels) -> [mean ++ std over time] -> Linear+ReLU ... -> Linear -> e (d)
//!     e -> classifier Linear -> logits
//!     e -> Linear+ReLU -> Linear -> projection (d_proj)   (training only)
//! ```
//!
//! Parameters are stored as `f32` (the checkpoint precision); all arithmetic
//! runs in `f64`.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PafaError, Result};
use crate::features::{write_atomic, FbankMatrix};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub mels: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mels: 128,
            hidden: vec![256, 128],
            embed_dim: 128,
            n_classes: 4,
            proj_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mels == 0
            || self.embed_dim == 0
            || self.n_classes == 0
            || self.proj_dim == 0
            || self.hidden.iter().any(|w| *w == 0)
        {
            return Err(PafaError::invalid(format!("all model widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        2 * self.mels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases.
    fn init<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect()
        };
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let w: Vec<f64> = self.weight.iter().map(|v| *v as f64).collect();
        let mut out = Array2::zeros((x.nrows(), self.out_dim));
        for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
            let xs = xr.as_slice().expect("row-major activations");
            for o in 0..self.out_dim {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias[o] as f64;
                for (a, b) in row.iter().zip(xs) {
                    acc += a * b;
                }
                or[o] = acc;
            }
        }
        out
    }

    /// Returns the parameter gradient and the gradient with respect to `x`.
    fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>) -> (LinearGrad, Array2<f64>) {
        let mut g = LinearGrad::zeros(self.in_dim, self.out_dim);
        let mut grad_x = Array2::zeros((x.nrows(), self.in_dim));
        let w: Vec<f64> = self.weight.iter().map(|v| *v as f64).collect();
        for ((xr, gr), mut gxr) in x.rows().into_iter().zip(grad_out.rows()).zip(grad_x.rows_mut()) {
            let xs = xr.as_slice().expect("row-major activations");
            let gx = gxr.as_slice_mut().expect("row-major gradient");
            for o in 0..self.out_dim {
                let go = gr[o];
                if go == 0.0 {
                    continue;
                }
                g.bias[o] += go;
                let gw = &mut g.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let wr = &w[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    gw[i] += go * xs[i];
                    gx[i] += go * wr[i];
                }
            }
        }
        (g, grad_x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearGrad {
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub encoder: Vec<Linear>,
    pub classifier: Linear,
    /// Present during training; removed for inference.
    pub projection: Option<[Linear; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub encoder: Vec<LinearGrad>,
    pub classifier: LinearGrad,
    pub projection: Option<[LinearGrad; 2]>,
}

fn layer_dims(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let mut dims = Vec::new();
    let mut width = cfg.pooled_dim();
    for &h in &cfg.hidden {
        dims.push((width, h));
        width = h;
    }
    dims.push((width, cfg.embed_dim));
    dims
}

impl ParamSet {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = layer_dims(cfg)
            .into_iter()
            .map(|(i, o)| Linear::init(&mut rng, i, o))
            .collect();
        let classifier = Linear::init(&mut rng, cfg.embed_dim, cfg.n_classes);
        let projection = [
            Linear::init(&mut rng, cfg.embed_dim, cfg.embed_dim),
            Linear::init(&mut rng, cfg.embed_dim, cfg.proj_dim),
        ];
        Ok(ParamSet {
            encoder,
            classifier,
            projection: Some(projection),
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ParamSet {
            encoder: layer_dims(cfg)
                .into_iter()
                .map(|(i, o)| Linear::zeros(i, o))
                .collect(),
            classifier: Linear::zeros(cfg.embed_dim, cfg.n_classes),
            projection: Some([
                Linear::zeros(cfg.embed_dim, cfg.embed_dim),
                Linear::zeros(cfg.embed_dim, cfg.proj_dim),
            ]),
        })
    }

    pub fn config(&self) -> ModelConfig {
        let last = self.encoder.last().expect("encoder has layers");
        ModelConfig {
            mels: self.encoder[0].in_dim / 2,
            hidden: self.encoder[..self.encoder.len() - 1]
                .iter()
                .map(|l| l.out_dim)
                .collect(),
            embed_dim: last.out_dim,
            n_classes: self.classifier.out_dim,
            proj_dim: self
                .projection
                .as_ref()
                .map_or(last.out_dim, |p| p[1].out_dim),
        }
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    pub fn ensure_trainable(&self) -> Result<()> {
        if self.projection.is_none() {
            return Err(PafaError::invalid(
                "parameter set has no projection head (stripped for inference); it cannot be trained",
            ));
        }
        Ok(())
    }

    /// Inference parameters: the projection head is dropped, nothing else changes.
    pub fn strip_projection(&self) -> ParamSet {
        ParamSet {
            encoder: self.encoder.clone(),
            classifier: self.classifier.clone(),
            projection: None,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(|(_, l)| l.weight.len() + l.bias.len()).sum()
    }

    /// Every layer in checkpoint order, with its tensor-name prefix.
    pub fn layers(&self) -> impl Iterator<Item = (String, &Linear)> {
        let enc = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("encoder.{i}"), l));
        let cls = std::iter::once(("classifier".to_string(), &self.classifier));
        let proj = self
            .projection
            .iter()
            .flat_map(|p| p.iter().enumerate().map(|(i, l)| (format!("projection.{i}"), l)));
        enc.chain(cls).chain(proj)
    }

    /// Mutable parameter slices in checkpoint order (weight then bias per layer).
    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut layers: Vec<&mut Linear> = self.encoder.iter_mut().collect();
        layers.push(&mut self.classifier);
        if let Some(p) = &mut self.projection {
            layers.extend(p.iter_mut());
        }
        layers
            .into_iter()
            .flat_map(|l| [&mut l.weight[..], &mut l.bias[..]])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|(_, l)| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"PAFC");
        out.extend_from_slice(&1u32.to_le_bytes());
        let layers: Vec<(String, &Linear)> = self.layers().collect();
        out.extend_from_slice(&((layers.len() * 2) as u32).to_le_bytes());
        for (prefix, l) in layers {
            for (suffix, dims, data) in [
                ("weight", vec![l.out_dim, l.in_dim], &l.weight),
                ("bias", vec![l.out_dim], &l.bias),
            ] {
                let name = format!("{prefix}.{suffix}");
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                for d in dims {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in data.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != b"PAFC" {
            return Err(ckpt_err("missing PAFC magic"));
        }
        if r.u32()? != 1 {
            return Err(ckpt_err("unsupported checkpoint version"));
        }
        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ckpt_err("tensor name is not utf-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, dims, data));
        }
        if r.pos != bytes.len() {
            return Err(ckpt_err("trailing bytes after last tensor"));
        }

        let take_layer = |prefix: &str| -> Result<Option<Linear>> {
            let w = tensors.iter().position(|t| t.0 == format!("{prefix}.weight"));
            let b = tensors.iter().position(|t| t.0 == format!("{prefix}.bias"));
            match (w, b) {
                (Some(w), Some(b)) => {
                    let (_, wd, wv) = tensors[w].clone();
                    let (_, bd, bv) = tensors[b].clone();
                    if wd.len() != 2 || bd != [wd[0]] {
                        return Err(ckpt_err(&format!("inconsistent shapes for {prefix}")));
                    }
                    Ok(Some(Linear {
                        in_dim: wd[1],
                        out_dim: wd[0],
                        weight: wv,
                        bias: bv,
                    }))
                }
                (None, None) => Ok(None),
                _ => Err(ckpt_err(&format!("{prefix} is missing a weight or bias"))),
            }
        };
        let mut encoder = Vec::new();
        while let Some(l) = take_layer(&format!("encoder.{}", encoder.len()))? {
            encoder.push(l);
        }
        let classifier = take_layer("classifier")?.ok_or_else(|| ckpt_err("no classifier"))?;
        let projection = match (take_layer("projection.0")?, take_layer("projection.1")?) {
            (Some(a), Some(b)) => Some([a, b]),
            (None, None) => None,
            _ => return Err(ckpt_err("partial projection head")),
        };
        let params = ParamSet {
            encoder,
            classifier,
            projection,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        if self.encoder.is_empty() || self.encoder[0].in_dim % 2 != 0 {
            return Err(ckpt_err("encoder must start from a pooled (mean ++ std) input"));
        }
        for pair in self.encoder.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(ckpt_err("encoder layer widths do not chain"));
            }
        }
        let d = self.encoder.last().unwrap().out_dim;
        if self.classifier.in_dim != d {
            return Err(ckpt_err("classifier input does not match embedding width"));
        }
        if let Some([a, b]) = &self.projection {
            if a.in_dim != d || b.in_dim != a.out_dim {
                return Err(ckpt_err("projection head widths do not chain"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PafaError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

fn ckpt_err(message: &str) -> PafaError {
    PafaError::parse("checkpoint", 0, message)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Temporal mean and (population) standard deviation per mel bin.
pub fn pool(features: &FbankMatrix) -> Vec<f64> {
    let (t, m) = (features.frames(), features.mels());
    let mut mean = vec![0.0; m];
    for f in 0..t {
        for (acc, v) in mean.iter_mut().zip(features.row(f)) {
            *acc += *v as f64;
        }
    }
    for v in &mut mean {
        *v /= t as f64;
    }
    let mut var = vec![0.0; m];
    for f in 0..t {
        for ((acc, v), mu) in var.iter_mut().zip(features.row(f)).zip(&mean) {
            let d = *v as f64 - mu;
            *acc += d * d;
        }
    }
    mean.extend(var.into_iter().map(|v| (v / t as f64).sqrt()));
    mean
}

pub fn pool_batch(features: &[FbankMatrix]) -> Result<Array2<f64>> {
    let first = features
        .first()
        .ok_or_else(|| PafaError::invalid("empty feature batch"))?;
    let m = first.mels();
    let mut out = Array2::zeros((features.len(), 2 * m));
    for (i, f) in features.iter().enumerate() {
        if f.mels() != m {
            return Err(PafaError::invalid("mixed mel widths in one batch"));
        }
        if f.data().iter().any(|v| !v.is_finite()) {
            return Err(PafaError::Numeric(format!("non-finite feature in batch row {i}")));
        }
        for (dst, v) in out.row_mut(i).iter_mut().zip(pool(f)) {
            *dst = v;
        }
    }
    Ok(out)
}

fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Zeroes gradient entries whose ReLU output was not positive (derivative 0 at 0).
fn relu_backward(grad: &mut Array2<f64>, activated: &Array2<f64>) {
    for (g, a) in grad.iter_mut().zip(activated.iter()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub projection: Option<Array2<f64>>,
    pub encoder_out: Array2<f64>,
    /// Inputs to each encoder layer (pooled input, then post-ReLU activations).
    encoder_inputs: Vec<Array2<f64>>,
    projection_hidden: Option<Array2<f64>>,
}

pub fn forward(params: &ParamSet, features: &[FbankMatrix]) -> Result<ForwardOutput> {
    forward_pooled(params, pool_batch(features)?.view())
}

pub fn forward_pooled(params: &ParamSet, pooled: ArrayView2<f64>) -> Result<ForwardOutput> {
    let encoder_out_dim = params.encoder[0].in_dim;
    if pooled.ncols() != encoder_out_dim {
        return Err(PafaError::invalid(format!(
            "pooled input has width {}, encoder expects {encoder_out_dim}",
            pooled.ncols()
        )));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(PafaError::Numeric("non-finite encoder input".into()));
    }
    let (encoder_out, encoder_inputs) = encode(params, pooled);
    let logits = params.classifier.forward(&encoder_out);
    let (projection, projection_hidden) = match &params.projection {
        Some([first, second]) => {
            let mut hidden = first.forward(&encoder_out);
            relu(&mut hidden);
            (Some(second.forward(&hidden)), Some(hidden))
        }
        None => (None, None),
    };
    Ok(ForwardOutput {
        logits,
        projection,
        encoder_out,
        encoder_inputs,
        projection_hidden,
    })
}

fn encode(params: &ParamSet, pooled: ArrayView2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
    let mut inputs = Vec::with_capacity(params.encoder.len());
    let mut x = pooled.as_standard_layout().into_owned();
    let last = params.encoder.len() - 1;
    for (i, layer) in params.encoder.iter().enumerate() {
        let mut y = layer.forward(&x);
        if i < last {
            relu(&mut y);
        }
        inputs.push(x);
        x = y;
    }
    (x, inputs)
}

/// Classification path only; identical arithmetic to [`forward_pooled`].
pub fn logits(params: &ParamSet, pooled: ArrayView2<f64>) -> Result<Array2<f64>> {
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(PafaError::Numeric("non-finite encoder input".into()));
    }
    let (e, _) = encode(params, pooled);
    Ok(params.classifier.forward(&e))
}

/// Mean negative log-softmax at the true class, and its gradient `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(PafaError::invalid(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let b = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        if y >= row.len() {
            return Err(PafaError::invalid(format!("label {y} out of range")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[y] - max);
        for (k, (gk, v)) in g.iter_mut().zip(row.iter()).enumerate() {
            let p = (v - max).exp() / sum;
            *gk = (p - if k == y { 1.0 } else { 0.0 }) / b;
        }
    }
    Ok((loss / b, grad))
}

/// Reverse pass; the two heads' gradients meet at the encoder output.
pub fn backward(
    params: &ParamSet,
    out: &ForwardOutput,
    grad_logits: &Array2<f64>,
    grad_projection: Option<&Array2<f64>>,
) -> Result<ParamGrads> {
    if grad_logits.raw_dim() != out.logits.raw_dim() {
        return Err(PafaError::invalid("grad_logits shape does not match logits"));
    }
    let (classifier, mut grad_e) = params.classifier.backward(&out.encoder_out, grad_logits);

    let projection = match (&params.projection, grad_projection) {
        (Some([first, second]), Some(gp)) => {
            let hidden = out
                .projection_hidden
                .as_ref()
                .expect("forward ran with the projection head");
            if gp.raw_dim() != out.projection.as_ref().unwrap().raw_dim() {
                return Err(PafaError::invalid("grad_projection shape does not match projection"));
            }
            let (g_second, mut g_hidden) = second.backward(hidden, gp);
            relu_backward(&mut g_hidden, hidden);
            let (g_first, g_e) = first.backward(&out.encoder_out, &g_hidden);
            grad_e += &g_e;
            Some([g_first, g_second])
        }
        (Some([first, second]), None) => Some([
            LinearGrad::zeros(first.in_dim, first.out_dim),
            LinearGrad::zeros(second.in_dim, second.out_dim),
        ]),
        (None, Some(_)) => {
            return Err(PafaError::invalid(
                "projection gradient given but the projection head was stripped",
            ))
        }
        (None, None) => None,
    };

    let mut encoder = Vec::with_capacity(params.encoder.len());
    let mut grad = grad_e;
    for (i, layer) in params.encoder.iter().enumerate().rev() {
        let input = &out.encoder_inputs[i];
        let (g, mut g_in) = layer.backward(input, &grad);
        encoder.push(g);
        if i > 0 {
            // input of layer i is the ReLU output of layer i-1
            relu_backward(&mut g_in, input);
        }
        grad = g_in;
    }
    encoder.reverse();
    Ok(ParamGrads {
        encoder,
        classifier,
        projection,
    })
}

impl ParamGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut grads: Vec<&LinearGrad> = self.encoder.iter().collect();
        grads.push(&self.classifier);
        if let Some(p) = &self.projection {
            grads.extend(p.iter());
        }
        grads
            .into_iter()
            .flat_map(|g| [&g.weight[..], &g.bias[..]])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn tiny() -> ModelConfig {
        ModelConfig {
            mels: 4,
            hidden: vec![6, 5],
            embed_dim: 4,
            n_classes: 4,
            proj_dim: 3,
        }
    }

    fn random_features(seed: u64, n: usize, frames: usize, mels: usize) -> Vec<FbankMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..frames * mels).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                FbankMatrix::new(frames, mels, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let p = ParamSet::zeros(&ModelConfig::default()).unwrap();
        let out = forward(&p, &random_features(1, 2, 498, 128)).unwrap();
        assert!(out.logits.iter().all(|v| *v == 0.0));
        let (loss, _) = cross_entropy(&out.logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shapes_for_single_sample() {
        let p = ParamSet::init(&ModelConfig::default(), 3).unwrap();
        let out = forward(&p, &random_features(2, 1, 498, 128)).unwrap();
        assert_eq!(out.logits.dim(), (1, 4));
        assert_eq!(out.projection.as_ref().unwrap().dim(), (1, 128));
        assert_eq!(out.encoder_out.dim(), (1, 128));
    }

    #[test]
    fn identical_inputs_identical_rows() {
        let p = ParamSet::init(&tiny(), 5).unwrap();
        let f = random_features(3, 1, 10, 4);
        let out = forward(&p, &[f[0].clone(), f[0].clone()]).unwrap();
        assert_eq!(out.logits.row(0), out.logits.row(1));
        let proj = out.projection.unwrap();
        assert_eq!(proj.row(0), proj.row(1));
        assert_eq!(out.encoder_out.row(0), out.encoder_out.row(1));
    }

    #[test]
    fn nan_features_are_rejected() {
        let p = ParamSet::init(&tiny(), 5).unwrap();
        let bad = FbankMatrix::new(1, 4, vec![0.0; 4]).unwrap();
        let pooled = ndarray::arr2(&[[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        assert!(forward_pooled(&p, pooled.view()).unwrap_err().is_numeric());
        assert!(forward(&p, &[bad]).is_ok());
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&Array2::zeros((3, 4)), &[0, 1, 2]).unwrap();
        assert!((l - 1.386_294_4).abs() < 1e-7);
        let confident = ndarray::arr2(&[[60.0, 0.0, 0.0, 0.0]]);
        assert!(cross_entropy(&confident, &[0]).unwrap().0 < 1e-20);

        // naive softmax oracle
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Array2::from_shape_fn((5, 4), |_| rng.random_range(-3.0..3.0));
        let labels = [0, 3, 1, 2, 2];
        let (l, g) = cross_entropy(&logits, &labels).unwrap();
        let mut naive = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z: f64 = (0..4).map(|k| logits[[r, k]].exp()).sum();
            naive += -(logits[[r, y]].exp() / z).ln();
            for k in 0..4 {
                let expect = (logits[[r, k]].exp() / z - if k == y { 1.0 } else { 0.0 }) / 5.0;
                assert!((g[[r, k]] - expect).abs() < 1e-12);
            }
        }
        assert!((l - naive / 5.0).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
        assert!(cross_entropy(&logits, &[0, 1, 2, 3, 4]).is_err());
    }

    proptest! {
        #[test]
        fn cross_entropy_shift_invariant(vals in proptest::collection::vec(-10.0f64..10.0, 4), c in -50.0f64..50.0, y in 0usize..4) {
            let a = Array2::from_shape_vec((1, 4), vals).unwrap();
            let b = &a + c;
            let (la, _) = cross_entropy(&a, &[y]).unwrap();
            let (lb, _) = cross_entropy(&b, &[y]).unwrap();
            prop_assert!((la - lb).abs() <= 1e-9 * la.abs().max(1.0));
        }
    }

    /// `CE(logits) + sum(projection * probe)` so `grad_projection = probe`.
    fn objective(p: &ParamSet, pooled: &Array2<f64>, labels: &[usize], probe: &Array2<f64>) -> f64 {
        let out = forward_pooled(p, pooled.view()).unwrap();
        let (ce, _) = cross_entropy(&out.logits, labels).unwrap();
        ce + (out.projection.unwrap() * probe).sum()
    }

    #[test]
    fn full_model_matches_finite_differences() {
        let cfg = tiny();
        let p = ParamSet::init(&cfg, 21).unwrap();
        assert!(p.n_params() <= 5_000);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pooled = Array2::from_shape_fn((6, cfg.pooled_dim()), |_| rng.random_range(-1.5..1.5));
        let labels = [0, 1, 2, 3, 1, 0];
        let probe = Array2::from_shape_fn((6, cfg.proj_dim), |_| rng.random_range(-1.0..1.0));

        let out = forward_pooled(&p, pooled.view()).unwrap();
        let (_, gl) = cross_entropy(&out.logits, &labels).unwrap();
        let grads = backward(&p, &out, &gl, Some(&probe)).unwrap();
        let analytic: Vec<f64> = grads.slices().concat();

        let h = 1e-3;
        let mut worst: f64 = 0.0;
        let mut probe_params = p.clone();
        let n_slices = probe_params.slices_mut().len();
        let mut flat = 0;
        for s in 0..n_slices {
            let len = probe_params.slices_mut()[s].len();
            for j in 0..len {
                let orig = probe_params.slices_mut()[s][j];
                let up = (orig as f64 + h) as f32;
                let dn = (orig as f64 - h) as f32;
                probe_params.slices_mut()[s][j] = up;
                let fu = objective(&probe_params, &pooled, &labels, &probe);
                probe_params.slices_mut()[s][j] = dn;
                let fd = objective(&probe_params, &pooled, &labels, &probe);
                probe_params.slices_mut()[s][j] = orig;
                let numeric = (fu - fd) / (up as f64 - dn as f64);
                let a = analytic[flat];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
                // coordinates with |g| near roundoff are compared absolutely
                let err = if a.abs().max(numeric.abs()) < 1e-8 { (a - numeric).abs() } else { rel };
                worst = worst.max(err);
                flat += 1;
            }
        }
        assert_eq!(flat, analytic.len());
        assert!(worst <= 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn zero_projection_gradient_equals_ce_only() {
        let cfg = tiny();
        let p = ParamSet::init(&cfg, 4).unwrap();
        let feats = random_features(5, 3, 10, 4);
        let out = forward(&p, &feats).unwrap();
        let (_, gl) = cross_entropy(&out.logits, &[0, 1, 2]).unwrap();
        let zero = Array2::zeros((3, cfg.proj_dim));
        let with_zero = backward(&p, &out, &gl, Some(&zero)).unwrap();
        let ce_only = backward(&p, &out, &gl, None).unwrap();
        assert_eq!(with_zero, ce_only);
        let none = backward(&p, &out, &Array2::zeros((3, 4)), Some(&zero)).unwrap();
        assert!(none.is_zero());
    }

    #[test]
    fn strip_keeps_logits_bitwise() {
        let p = ParamSet::init(&tiny(), 8).unwrap();
        let s = p.strip_projection();
        assert!(!s.has_projection());
        assert!(s.ensure_trainable().is_err());
        let feats = random_features(6, 10, 12, 4);
        let a = forward(&p, &feats).unwrap().logits;
        let b = forward(&s, &feats).unwrap().logits;
        assert_eq!(a, b);
        let pooled = pool_batch(&feats).unwrap();
        assert_eq!(logits(&s, pooled.view()).unwrap(), a);

        let back = ParamSet::from_checkpoint_bytes(&s.to_checkpoint_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(forward(&back, &feats).unwrap().logits, a);

        let out = forward(&s, &feats).unwrap();
        let err = backward(&s, &out, &Array2::zeros((10, 4)), Some(&Array2::zeros((10, 3))));
        assert!(err.is_err());
    }

    #[test]
    fn checkpoint_layout() {
        let p = ParamSet::init(&tiny(), 1).unwrap();
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"PAFC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 12);
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"encoder.0.weight");
        let back = ParamSet::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.config(), tiny());
        assert!(ParamSet::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ParamSet::init(&tiny(), 1).unwrap();
        assert_eq!(a, ParamSet::init(&tiny(), 1).unwrap());
        assert_ne!(a, ParamSet::init(&tiny(), 2).unwrap());
        assert!(ParamSet::init(&ModelConfig { hidden: vec![0], ..tiny() }, 1).is_err());
    }
}
