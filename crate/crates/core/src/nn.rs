//! Feedforward ReLU regressors fit by empirical mean squared error, and the
//! per-source CATE estimator built from one network per treatment arm.
//!
//! Inputs are standardized with stored per-feature statistics; targets are
//! fit on their original scale and predictions are hard-clipped to
//! `[-B0/2, B0/2]`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{ensure_finite, Error, Result};
use crate::matrix::Matrix;
use crate::optim::{AdamHyper, AdamState};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Batches are full when `n <= full_batch_limit`, otherwise `minibatch` rows.
    pub full_batch_limit: usize,
    pub minibatch: usize,
    /// Symmetric output bound `B0`; predictions lie in `[-B0/2, B0/2]`.
    pub output_bound: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 500,
            learning_rate: 1e-3,
            full_batch_limit: 4096,
            minibatch: 256,
            output_bound: 200.0,
            seed: 0,
        }
    }
}

/// Per-feature affine standardization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(p: usize) -> Self {
        Self { mean: vec![0.0; p], scale: vec![1.0; p] }
    }

    pub fn fit(x: &Matrix) -> Self {
        let (n, p) = (x.nrows(), x.ncols());
        let mut mean = vec![0.0; p];
        for row in x.rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; p];
        for row in x.rows() {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2));
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, v), (m, s)) in out.iter_mut().zip(x).zip(self.mean.iter().zip(&self.scale)) {
            *o = (v - m) / s;
        }
    }
}

/// A fitted network. `weights[l]` is row-major `widths[l+1] x widths[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub output_clip: f64,
    pub input_scaler: Standardizer,
}

impl MlpModel {
    /// All-zero network; predicts 0 everywhere.
    pub fn zeros(layer_widths: Vec<usize>, output_clip: f64) -> Self {
        let layout = Layout::new(&layer_widths);
        let params = vec![0.0; layout.len];
        Self::from_flat(&layout, &params, output_clip, Standardizer::identity(layer_widths[0]))
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    fn from_flat(
        layout: &Layout,
        params: &[f64],
        output_clip: f64,
        input_scaler: Standardizer,
    ) -> Self {
        let weights = layout.layers.iter().map(|l| params[l.w..l.w + l.fan_in * l.fan_out].to_vec()).collect();
        let biases = layout.layers.iter().map(|l| params[l.b..l.b + l.fan_out].to_vec()).collect();
        Self {
            layer_widths: layout.widths.clone(),
            weights,
            biases,
            output_clip,
            input_scaler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.layer_widths;
        if w.len() < 2 || *w.last().unwrap() != 1 || w.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("invalid layer widths {w:?}")));
        }
        if self.weights.len() != w.len() - 1 || self.biases.len() != w.len() - 1 {
            return Err(Error::Input("layer count does not match widths".into()));
        }
        for l in 0..w.len() - 1 {
            if self.weights[l].len() != w[l] * w[l + 1] || self.biases[l].len() != w[l + 1] {
                return Err(Error::Input(format!("layer {l} has incompatible shapes")));
            }
        }
        if self.input_scaler.mean.len() != w[0] || self.input_scaler.scale.len() != w[0] {
            return Err(Error::Input("standardizer does not match input width".into()));
        }
        if !(self.output_clip > 0.0) {
            return Err(Error::Input("output clip must be positive".into()));
        }
        Ok(())
    }

    /// Prediction for one covariate vector.
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!("expected {} covariates, got {}", self.input_dim(), x.len())));
        }
        let mut cur = vec![0.0; x.len()];
        self.input_scaler.apply(x, &mut cur);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let fan_in = cur.len();
            let mut next: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(j, bj)| bj + dot(&w[j * fan_in..(j + 1) * fan_in], &cur))
                .collect();
            if l < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = next;
        }
        let half = self.output_clip / 2.0;
        Ok(cur[0].clamp(-half, half))
    }
}

/// Forward pass over every row of `x`.
pub fn predict(model: &MlpModel, x: &Matrix) -> Result<Vec<f64>> {
    if x.ncols() != model.input_dim() {
        return Err(Error::Dimension(format!("expected {} covariates, got {}", model.input_dim(), x.ncols())));
    }
    x.rows().map(|r| model.predict_one(r)).collect()
}

pub fn fit_mlp(x: &Matrix, y: &[f64], config: &MlpConfig) -> Result<MlpModel> {
    fit_mlp_with_history(x, y, config, None).map(|(m, _)| m)
}

/// Fits a network and returns the per-epoch training loss.
/// `scaler` overrides the covariate statistics computed from `x`.
pub fn fit_mlp_with_history(
    x: &Matrix,
    y: &[f64],
    config: &MlpConfig,
    scaler: Option<&Standardizer>,
) -> Result<(MlpModel, Vec<f64>)> {
    let (n, p) = (x.nrows(), x.ncols());
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 rows to fit a network, got {n}")));
    }
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} covariate rows but {} targets", y.len())));
    }
    if p == 0 {
        return Err(Error::Input("covariate matrix has no columns".into()));
    }
    ensure_finite(x.as_slice(), "covariates")?;
    ensure_finite(y, "targets")?;
    if config.hidden.iter().any(|&h| h == 0) || config.epochs == 0 || config.minibatch == 0 {
        return Err(Error::Parameter(format!("invalid network config {config:?}")));
    }
    let hyper = AdamHyper::with_learning_rate(config.learning_rate);
    hyper.validate()?;

    let input_scaler = match scaler {
        Some(s) if s.mean.len() == p => s.clone(),
        Some(_) => return Err(Error::Dimension("standardizer width does not match covariates".into())),
        None => Standardizer::fit(x),
    };

    let mut xs = vec![0.0; n * p];
    for (i, row) in x.rows().enumerate() {
        input_scaler.apply(row, &mut xs[i * p..(i + 1) * p]);
    }

    let mut widths = vec![p];
    widths.extend_from_slice(&config.hidden);
    widths.push(1);
    let layout = Layout::new(&widths);

    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let mut params = vec![0.0; layout.len];
    for l in &layout.layers {
        let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
        for w in &mut params[l.w..l.w + l.fan_in * l.fan_out] {
            *w = init_rng.random_range(-bound..bound);
        }
    }
    // Hidden biases start at zero; the output bias starts at the mean target.
    let out = layout.layers.last().expect("at least one layer");
    params[out.b] = y.iter().sum::<f64>() / n as f64;

    let batch = if n <= config.full_batch_limit { n } else { config.minibatch };
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut state = AdamState::new(params);
    let mut grad = vec![0.0; layout.len];
    let mut scratch = Scratch::new(&layout);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if batch < n {
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = layout.accumulate(&state.params, &xs, y, chunk, &mut grad, &mut scratch);
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
            }
            state.step(&grad, &hyper).map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    ensure_finite(&state.params, "network weights").map_err(|e| Error::Training(e.to_string()))?;

    let model = MlpModel::from_flat(&layout, &state.params, config.output_bound, input_scaler);
    Ok((model, history))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Offsets of each layer's weights and biases inside one flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    widths: Vec<usize>,
    layers: Vec<LayerSlot>,
    len: usize,
}

struct Scratch {
    /// Post-activation values per layer (index 0 is the input).
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(layout: &Layout) -> Self {
        Self {
            acts: layout.widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: layout.widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

impl Layout {
    fn new(widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut off = 0;
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layers.push(LayerSlot { fan_in, fan_out, w: off, b: off + fan_in * fan_out });
            off += fan_in * fan_out + fan_out;
        }
        Self { widths: widths.to_vec(), layers, len: off }
    }

    /// Adds the gradient of the batch MSE into `grad` and returns the batch MSE.
    fn accumulate(
        &self,
        params: &[f64],
        xs: &[f64],
        ys: &[f64],
        rows: &[usize],
        grad: &mut [f64],
        s: &mut Scratch,
    ) -> f64 {
        let p = self.widths[0];
        let last = self.layers.len() - 1;
        let scale = 2.0 / rows.len() as f64;
        let mut loss = 0.0;
        for &i in rows {
            s.acts[0].copy_from_slice(&xs[i * p..(i + 1) * p]);
            for (l, slot) in self.layers.iter().enumerate() {
                let (head, tail) = s.acts.split_at_mut(l + 1);
                let input = &head[l];
                let out = &mut tail[0];
                let w = &params[slot.w..slot.w + slot.fan_in * slot.fan_out];
                let b = &params[slot.b..slot.b + slot.fan_out];
                for j in 0..slot.fan_out {
                    let z = b[j] + dot(&w[j * slot.fan_in..(j + 1) * slot.fan_in], input);
                    out[j] = if l < last { z.max(0.0) } else { z };
                }
            }
            let resid = s.acts[last + 1][0] - ys[i];
            loss += resid * resid;
            s.deltas[last + 1][0] = scale * resid;

            for l in (0..self.layers.len()).rev() {
                let slot = &self.layers[l];
                let (dhead, dtail) = s.deltas.split_at_mut(l + 1);
                let delta = &dtail[0];
                let input = &s.acts[l];
                {
                    let gw = &mut grad[slot.w..slot.w + slot.fan_in * slot.fan_out];
                    for j in 0..slot.fan_out {
                        let d = delta[j];
                        if d != 0.0 {
                            gw[j * slot.fan_in..(j + 1) * slot.fan_in]
                                .iter_mut()
                                .zip(input)
                                .for_each(|(g, a)| *g += d * a);
                        }
                    }
                    grad[slot.b..slot.b + slot.fan_out].iter_mut().zip(delta).for_each(|(g, d)| *g += d);
                }
                if l > 0 {
                    let w = &params[slot.w..slot.w + slot.fan_in * slot.fan_out];
                    let prev = &mut dhead[l];
                    prev.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..slot.fan_out {
                        let d = delta[j];
                        if d != 0.0 {
                            prev.iter_mut()
                                .zip(&w[j * slot.fan_in..(j + 1) * slot.fan_in])
                                .for_each(|(pv, wv)| *pv += d * wv);
                        }
                    }
                    // ReLU derivative: zero where the activation was clamped.
                    prev.iter_mut().zip(input).for_each(|(pv, a)| {
                        if *a <= 0.0 {
                            *pv = 0.0
                        }
                    });
                }
            }
        }
        loss / rows.len() as f64
    }
}

/// Outcome regressions for one source; the CATE is `f1(x) - f0(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCate {
    pub f1: MlpModel,
    pub f0: MlpModel,
}

impl SourceCate {
    pub fn new(f1: MlpModel, f0: MlpModel) -> Result<Self> {
        if f1.input_dim() != f0.input_dim() {
            return Err(Error::Dimension("treated and control networks disagree on input width".into()));
        }
        Ok(Self { f1, f0 })
    }

    pub fn input_dim(&self) -> usize {
        self.f1.input_dim()
    }

    pub fn cate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.f1.predict_one(x)? - self.f0.predict_one(x)?)
    }
}

/// Fits `f1` on treated rows and `f0` on control rows, sharing covariate
/// statistics computed from all rows of the source.
pub fn estimate_source_cate(data: &Dataset, config: &MlpConfig) -> Result<SourceCate> {
    let treated: Vec<usize> = (0..data.len()).filter(|&i| data.a[i] == 1).collect();
    let control: Vec<usize> = (0..data.len()).filter(|&i| data.a[i] == 0).collect();
    if treated.len() < 2 || control.len() < 2 {
        return Err(Error::ArmCoverage(format!(
            "need at least 2 treated and 2 control rows, got {} and {}",
            treated.len(),
            control.len()
        )));
    }
    let scaler = Standardizer::fit(&data.x);
    let fit_arm = |idx: &[usize], seed: u64| {
        let x = data.x.select_rows(idx);
        let y: Vec<f64> = idx.iter().map(|&i| data.y[i]).collect();
        let cfg = MlpConfig { seed, ..config.clone() };
        fit_mlp_with_history(&x, &y, &cfg, Some(&scaler)).map(|(m, _)| m)
    };
    let (f1, f0) = rayon::join(
        || fit_arm(&treated, config.seed.wrapping_mul(2).wrapping_add(1)),
        || fit_arm(&control, config.seed.wrapping_mul(2)),
    );
    SourceCate::new(f1?, f0?)
}
