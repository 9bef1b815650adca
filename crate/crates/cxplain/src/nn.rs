//! A small feed-forward network engine.
//!
//! Supports dense layers with relu hidden activations and a softmax or
//! sigmoid head. The three supported training losses (KL divergence against
//! a target distribution, categorical cross-entropy, binary cross-entropy)
//! all share the same output-layer gradient, `(output - target) / batch`,
//! which keeps backpropagation uniform across uses.
//!
//! All randomness is drawn from a caller-seeded ChaCha8 stream, so training
//! is reproducible bit for bit.

use crate::data::{FeatureMatrix, PredictionMatrix, TargetMatrix};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Probabilities below this are clamped before any `ln` in a training loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the *post*-activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Transformation applied to the final layer's pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Outputs form a probability distribution over classes.
    Softmax,
    /// Outputs are independent probabilities.
    Sigmoid,
}

/// Loss minimized by `train`. Each is paired with the head that makes its
/// pre-activation gradient equal `output - target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLoss {
    /// KL(target || output); requires a softmax head.
    KlDivergence,
    /// Cross-entropy against a class distribution; requires a softmax head.
    CategoricalCrossentropy,
    /// Summed binary cross-entropy per output; requires a sigmoid head.
    BinaryCrossentropy,
}

impl TrainLoss {
    fn compatible_with(self, head: OutputHead) -> bool {
        match self {
            TrainLoss::KlDivergence | TrainLoss::CategoricalCrossentropy => {
                head == OutputHead::Softmax
            }
            TrainLoss::BinaryCrossentropy => head == OutputHead::Sigmoid,
        }
    }

    /// Per-sample loss value.
    pub fn evaluate(self, target: &[f64], output: &[f64]) -> f64 {
        match self {
            TrainLoss::KlDivergence => kl_divergence(target, output),
            TrainLoss::CategoricalCrossentropy => {
                let mut acc = 0.0;
                for (t, p) in target.iter().zip(output) {
                    if *t > 0.0 {
                        acc -= t * p.max(LOG_FLOOR).ln();
                    }
                }
                acc
            }
            TrainLoss::BinaryCrossentropy => {
                let mut acc = 0.0;
                for (t, p) in target.iter().zip(output) {
                    let p = p.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
                    acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                }
                acc
            }
        }
    }
}

/// KL(target || predicted) with `0 ln 0 = 0` and predictions floored at
/// `LOG_FLOOR` before the log. Non-negative, zero only at equality.
pub fn kl_divergence(target: &[f64], predicted: &[f64]) -> f64 {
    debug_assert_eq!(target.len(), predicted.len());
    let mut acc = 0.0;
    for (t, p) in target.iter().zip(predicted) {
        if *t > 0.0 {
            acc += t * (t.ln() - p.max(LOG_FLOOR).ln());
        }
    }
    acc
}

/// Applies softmax in place with the usual max-shift for stability.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out_dim x in_dim`, row-major: `weights[o * in_dim + i]`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights in `[-sqrt(6/(in+out)), sqrt(6/(in+out))]`,
    /// zero biases.
    fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weights,
            biases: vec![0.0; out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// A fully connected network: relu hidden layers, identity final layer,
/// head applied on top of the final pre-activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
    head: OutputHead,
}

impl MlpNetwork {
    /// Builds `input_dim -> hidden[0] -> ... -> output_dim` with seeded
    /// Glorot initialization.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        head: OutputHead,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::contract("network dimensions must be positive"));
        }
        if hidden.contains(&0) {
            return Err(Error::contract("hidden layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(DenseLayer::glorot(prev, h, Activation::Relu, &mut rng));
            prev = h;
        }
        layers.push(DenseLayer::glorot(
            prev,
            output_dim,
            Activation::Identity,
            &mut rng,
        ));
        Ok(Self { layers, head })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// All parameters flattened: per layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in `params` order.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: flat.len(),
                context: "flat parameter vector".into(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn max_abs_param(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Forward pass keeping every layer's post-activation values; returns
    /// `(activations, outputs)` where `activations[0]` is the input batch.
    fn forward_full(&self, x: &FeatureMatrix) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.cols(),
                context: "network input width".into(),
            });
        }
        let b = x.rows();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.as_slice().to_vec());
        for l in &self.layers {
            let prev = acts.last().unwrap();
            let mut cur = vec![0.0; b * l.out_dim];
            for s in 0..b {
                let a_in = &prev[s * l.in_dim..(s + 1) * l.in_dim];
                let a_out = &mut cur[s * l.out_dim..(s + 1) * l.out_dim];
                let neurons = l.weights.chunks_exact(l.in_dim).zip(&l.biases);
                for ((w, bias), out) in neurons.zip(a_out.iter_mut()) {
                    let mut z = *bias;
                    for (wi, ai) in w.iter().zip(a_in) {
                        z += wi * ai;
                    }
                    *out = l.activation.apply(z);
                }
            }
            acts.push(cur);
        }
        let k = self.output_dim();
        let mut outputs = acts.last().unwrap().clone();
        for s in 0..b {
            let row = &mut outputs[s * k..(s + 1) * k];
            match self.head {
                OutputHead::Softmax => softmax_in_place(row),
                OutputHead::Sigmoid => {
                    for v in row.iter_mut() {
                        *v = sigmoid(*v);
                    }
                }
            }
        }
        Ok((acts, outputs))
    }

    /// Head outputs for a batch, one row per input row.
    pub fn forward(&self, x: &FeatureMatrix) -> Result<PredictionMatrix> {
        let (_, outputs) = self.forward_full(x)?;
        PredictionMatrix::new(outputs, x.rows(), self.output_dim())
    }

    /// Mean per-sample `loss` on a labeled batch.
    pub fn mean_loss(&self, loss: TrainLoss, x: &FeatureMatrix, y: &TargetMatrix) -> Result<f64> {
        let out = self.forward(x)?;
        let mut acc = 0.0;
        for s in 0..x.rows() {
            acc += loss.evaluate(y.row(s), out.row(s));
        }
        Ok(acc / x.rows() as f64)
    }

    /// Gradient of the mean batch loss with respect to every parameter, in
    /// `params` order, plus the head outputs.
    pub fn backward(
        &self,
        x: &FeatureMatrix,
        y: &TargetMatrix,
        loss: TrainLoss,
    ) -> Result<(Vec<f64>, PredictionMatrix)> {
        if !loss.compatible_with(self.head) {
            return Err(Error::contract(format!(
                "loss {loss:?} is incompatible with head {:?}",
                self.head
            )));
        }
        if y.rows() != x.rows() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                actual: y.rows(),
                context: "target rows vs input rows".into(),
            });
        }
        if y.cols() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                actual: y.cols(),
                context: "target width vs network output".into(),
            });
        }
        let b = x.rows();
        let k = self.output_dim();
        let (acts, outputs) = self.forward_full(x)?;

        // Pre-activation gradient at the head: (output - target) / batch.
        let mut delta = vec![0.0; b * k];
        for s in 0..b {
            let t = y.row(s);
            for j in 0..k {
                delta[s * k + j] = (outputs[s * k + j] - t[j]) / b as f64;
            }
        }

        let mut grads_rev: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate().rev() {
            let a_in = &acts[li];
            let mut g = vec![0.0; l.num_params()];
            let (gw, gb) = g.split_at_mut(l.weights.len());
            for s in 0..b {
                let d = &delta[s * l.out_dim..(s + 1) * l.out_dim];
                let a = &a_in[s * l.in_dim..(s + 1) * l.in_dim];
                for o in 0..l.out_dim {
                    let row = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                    let dv = d[o];
                    for (r, ai) in row.iter_mut().zip(a) {
                        *r += dv * ai;
                    }
                    gb[o] += dv;
                }
            }
            if li > 0 {
                let prev_act = self.layers[li - 1].activation;
                let mut new_delta = vec![0.0; b * l.in_dim];
                for s in 0..b {
                    let d = &delta[s * l.out_dim..(s + 1) * l.out_dim];
                    let a = &a_in[s * l.in_dim..(s + 1) * l.in_dim];
                    let nd = &mut new_delta[s * l.in_dim..(s + 1) * l.in_dim];
                    for (w, &dv) in l.weights.chunks_exact(l.in_dim).zip(d) {
                        for (ndi, wi) in nd.iter_mut().zip(w) {
                            *ndi += wi * dv;
                        }
                    }
                    for (ndi, ai) in nd.iter_mut().zip(a) {
                        *ndi *= prev_act.derivative_from_output(*ai);
                    }
                }
                delta = new_delta;
            }
            grads_rev.push(g);
        }

        let mut flat = Vec::with_capacity(self.num_params());
        for g in grads_rev.into_iter().rev() {
            flat.extend_from_slice(&g);
        }
        let outputs = PredictionMatrix::new(outputs, b, k)?;
        Ok((flat, outputs))
    }
}

/// Optimizer and schedule settings for `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hidden layer widths used when the caller builds the network.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop after this many epochs without improvement; `None` disables.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            epochs: 500,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: Some(20),
        }
    }
}

/// Bias-corrected Adam accumulator over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// One Adam update of `net` from a flat gradient.
    pub fn step(&mut self, net: &mut MlpNetwork, grad: &[f64], cfg: &TrainConfig) -> Result<()> {
        if grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                actual: grad.len(),
                context: "gradient vs Adam state".into(),
            });
        }
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut params = net.params();
        for i in 0..grad.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        net.set_params(&params)
    }
}

/// One epoch's losses. Epoch 0 is recorded before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Full loss trajectory of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters the network holds after training.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Loss that was monitored for checkpointing at the best epoch.
    pub fn best_loss(&self) -> f64 {
        let r = &self.records[self.best_epoch];
        r.val_loss.unwrap_or(r.train_loss)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.records.last().unwrap().train_loss
    }
}

/// Trains `net` with mini-batch Adam.
///
/// Each epoch shuffles sample order from the seeded stream. The monitored
/// loss (validation when provided, otherwise full training loss) is recorded
/// once per epoch; the parameters from the best epoch are restored into
/// `net` before returning. A non-finite batch loss aborts with the epoch,
/// batch, and parameter magnitude for diagnosis.
pub fn train(
    net: &mut MlpNetwork,
    loss: TrainLoss,
    x: &FeatureMatrix,
    y: &TargetMatrix,
    validation: Option<(&FeatureMatrix, &TargetMatrix)>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if !loss.compatible_with(net.head()) {
        return Err(Error::contract(format!(
            "loss {loss:?} is incompatible with head {:?}",
            net.head()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            actual: y.rows(),
            context: "training rows".into(),
        });
    }

    let eval_val = |net: &MlpNetwork| -> Result<Option<f64>> {
        match validation {
            Some((vx, vy)) => Ok(Some(net.mean_loss(loss, vx, vy)?)),
            None => Ok(None),
        }
    };

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let initial_train = net.mean_loss(loss, x, y)?;
    let initial_val = eval_val(net)?;
    records.push(EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
    });

    let monitored = |r: &EpochRecord| r.val_loss.unwrap_or(r.train_loss);
    let mut best_epoch = 0;
    let mut best_loss = monitored(&records[0]);
    let mut best_params = net.params();
    let mut since_best = 0usize;
    let mut stopped_early = false;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net.num_params());
    let mut indices: Vec<usize> = (0..x.rows()).collect();

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        for (bi, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let bx = x.gather_rows(chunk)?;
            let by = y.gather_rows(chunk)?;
            let (grad, outputs) = net.backward(&bx, &by, loss)?;
            let mut batch_loss = 0.0;
            for s in 0..bx.rows() {
                batch_loss += loss.evaluate(by.row(s), outputs.row(s));
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    max_abs_param: net.max_abs_param(),
                });
            }
            adam.step(net, &grad, cfg)?;
        }

        let train_loss = net.mean_loss(loss, x, y)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                max_abs_param: net.max_abs_param(),
            });
        }
        let val_loss = eval_val(net)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        let m = monitored(&record);
        records.push(record);
        if m < best_loss {
            best_loss = m;
            best_epoch = epoch;
            best_params = net.params();
            since_best = 0;
        } else {
            since_best += 1;
            if let Some(patience) = cfg.patience {
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    net.set_params(&best_params)?;
    Ok(TrainHistory {
        records,
        best_epoch,
        stopped_early,
    })
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
}

/// Checks every parameter's analytic gradient against a central finite
/// difference of the mean batch loss with step `h`. The error is relative
/// with an absolute floor of 1e-4 in the denominator, so near-zero
/// gradients are compared absolutely at 1e-8 scale.
pub fn finite_difference_check(
    net: &mut MlpNetwork,
    loss: TrainLoss,
    x: &FeatureMatrix,
    y: &TargetMatrix,
    h: f64,
) -> Result<GradCheckReport> {
    let (analytic, _) = net.backward(x, y, loss)?;
    let base = net.params();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        net.set_params(&plus)?;
        let lp = net.mean_loss(loss, x, y)?;
        let mut minus = base.clone();
        minus[i] -= h;
        net.set_params(&minus)?;
        let lm = net.mean_loss(loss, x, y)?;
        let numeric = (lp - lm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    net.set_params(&base)?;
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        params_checked: base.len(),
    })
}

pub const NETWORK_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    schema_version: u32,
    network: MlpNetwork,
}

/// Saves a network as JSON. Values round-trip exactly, so a loaded network
/// predicts bit-identically.
pub fn save_network(net: &MlpNetwork, path: &Path) -> Result<()> {
    let file = NetworkFile {
        schema_version: NETWORK_SCHEMA_VERSION,
        network: net.clone(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::format(path, format!("serialize network: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: &Path) -> Result<MlpNetwork> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: NetworkFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.schema_version != NETWORK_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: file.schema_version,
            supported: NETWORK_SCHEMA_VERSION,
        });
    }
    Ok(file.network)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simplex_rows(rows: usize, k: usize, seed: u64) -> TargetMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            for v in &mut row {
                *v /= s;
            }
            data.extend(row);
        }
        TargetMatrix::new(data, rows, k).unwrap()
    }

    fn random_inputs(rows: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(data, rows, d).unwrap()
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let net = MlpNetwork::new(10, &[20], 5, OutputHead::Softmax, 7).unwrap();
        let b0 = (6.0 / 30.0f64).sqrt();
        for w in &net.layers[0].weights {
            assert!(w.abs() <= b0);
        }
        assert!(net.layers[0].weights.iter().any(|w| w.abs() > b0 * 0.5));
        assert!(net
            .layers
            .iter()
            .all(|l| l.biases.iter().all(|&b| b == 0.0)));
        // Same seed, same init; different seed, different init.
        let net2 = MlpNetwork::new(10, &[20], 5, OutputHead::Softmax, 7).unwrap();
        assert_eq!(net, net2);
        let net3 = MlpNetwork::new(10, &[20], 5, OutputHead::Softmax, 8).unwrap();
        assert_ne!(net, net3);
    }

    #[test]
    fn softmax_outputs_form_a_distribution() {
        let net = MlpNetwork::new(4, &[8], 3, OutputHead::Softmax, 1).unwrap();
        let x = random_inputs(6, 4, 2);
        let out = net.forward(&x).unwrap();
        for s in 0..6 {
            let row = out.row(s);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_stable() {
        let mut a = vec![1000.0, 1001.0, 999.0];
        softmax_in_place(&mut a);
        let mut b = vec![0.0, 1.0, -1.0];
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_divergence_basics() {
        let t = [0.5, 0.5];
        assert_eq!(kl_divergence(&t, &t), 0.0);
        // Hand-computed: 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75).
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
        let expect = 0.5 * (2.0f64).ln() + 0.5 * (2.0 / 3.0f64).ln();
        assert!((v - expect).abs() < 1e-12);
        // Zero target mass contributes nothing even against zero prediction.
        assert_eq!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        // Prediction floor keeps the value finite.
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let combos = [
            (TrainLoss::KlDivergence, OutputHead::Softmax, 5, vec![7], 4),
            (
                TrainLoss::CategoricalCrossentropy,
                OutputHead::Softmax,
                4,
                vec![6, 5],
                3,
            ),
            (
                TrainLoss::BinaryCrossentropy,
                OutputHead::Sigmoid,
                3,
                vec![8],
                2,
            ),
        ];
        for (i, (loss, head, d, hidden, k)) in combos.iter().enumerate() {
            let mut net = MlpNetwork::new(*d, hidden, *k, *head, 100 + i as u64).unwrap();
            let x = random_inputs(6, *d, 200 + i as u64);
            let y = match loss {
                TrainLoss::BinaryCrossentropy => {
                    let mut rng = ChaCha8Rng::seed_from_u64(300 + i as u64);
                    let data = (0..6 * *k)
                        .map(|_| {
                            if rng.random_range(0.0..1.0) > 0.5 {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    TargetMatrix::new(data, 6, *k).unwrap()
                }
                _ => simplex_rows(6, *k, 300 + i as u64),
            };
            let report = finite_difference_check(&mut net, *loss, &x, &y, 1e-5).unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "combo {i}: rel error {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn incompatible_loss_head_pairs_are_rejected() {
        let mut net = MlpNetwork::new(2, &[4], 2, OutputHead::Sigmoid, 0).unwrap();
        let x = random_inputs(2, 2, 0);
        let y = simplex_rows(2, 2, 0);
        assert!(net.backward(&x, &y, TrainLoss::KlDivergence).is_err());
        assert!(train(
            &mut net,
            TrainLoss::KlDivergence,
            &x,
            &y,
            None,
            &TrainConfig::default()
        )
        .is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let x = random_inputs(32, 3, 11);
        let y = simplex_rows(32, 4, 12);
        let cfg = TrainConfig {
            hidden: vec![16],
            epochs: 60,
            batch_size: 8,
            learning_rate: 5e-3,
            seed: 5,
            patience: None,
            ..TrainConfig::default()
        };
        let mut net1 = MlpNetwork::new(3, &cfg.hidden, 4, OutputHead::Softmax, cfg.seed).unwrap();
        let h1 = train(&mut net1, TrainLoss::KlDivergence, &x, &y, None, &cfg).unwrap();
        assert_eq!(h1.records[0].epoch, 0);
        assert!(h1.records.len() == 61);
        assert!(h1.best_loss() < h1.records[0].train_loss);

        let mut net2 = MlpNetwork::new(3, &cfg.hidden, 4, OutputHead::Softmax, cfg.seed).unwrap();
        let h2 = train(&mut net2, TrainLoss::KlDivergence, &x, &y, None, &cfg).unwrap();
        assert_eq!(net1, net2);
        assert_eq!(h1.records, h2.records);
    }

    #[test]
    fn best_checkpoint_is_restored() {
        let x = random_inputs(16, 2, 3);
        let y = simplex_rows(16, 3, 4);
        let cfg = TrainConfig {
            hidden: vec![8],
            epochs: 30,
            batch_size: 4,
            learning_rate: 5e-2,
            seed: 9,
            patience: None,
            ..TrainConfig::default()
        };
        let mut net = MlpNetwork::new(2, &cfg.hidden, 3, OutputHead::Softmax, cfg.seed).unwrap();
        let h = train(&mut net, TrainLoss::KlDivergence, &x, &y, None, &cfg).unwrap();
        // The restored network reproduces the best recorded loss exactly.
        let loss_now = net.mean_loss(TrainLoss::KlDivergence, &x, &y).unwrap();
        assert_eq!(loss_now, h.best_loss());
    }

    #[test]
    fn early_stopping_respects_patience() {
        let x = random_inputs(8, 2, 21);
        let y = simplex_rows(8, 2, 22);
        // Huge learning rate so progress stalls or diverges quickly.
        let cfg = TrainConfig {
            hidden: vec![4],
            epochs: 500,
            batch_size: 8,
            learning_rate: 1.0,
            seed: 2,
            patience: Some(5),
            ..TrainConfig::default()
        };
        let mut net = MlpNetwork::new(2, &cfg.hidden, 2, OutputHead::Softmax, cfg.seed).unwrap();
        let h = train(&mut net, TrainLoss::KlDivergence, &x, &y, None, &cfg).unwrap();
        assert!(h.stopped_early);
        assert!(h.records.len() < 501);
    }

    #[test]
    fn validation_split_drives_checkpointing() {
        let x = random_inputs(24, 3, 31);
        let y = simplex_rows(24, 3, 32);
        let vx = random_inputs(8, 3, 33);
        let vy = simplex_rows(8, 3, 34);
        let cfg = TrainConfig {
            hidden: vec![8],
            epochs: 20,
            batch_size: 8,
            seed: 1,
            patience: None,
            ..TrainConfig::default()
        };
        let mut net = MlpNetwork::new(3, &cfg.hidden, 3, OutputHead::Softmax, cfg.seed).unwrap();
        let h = train(
            &mut net,
            TrainLoss::KlDivergence,
            &x,
            &y,
            Some((&vx, &vy)),
            &cfg,
        )
        .unwrap();
        assert!(h.records.iter().all(|r| r.val_loss.is_some()));
        let best = h.records[h.best_epoch].val_loss.unwrap();
        assert!(h.records.iter().all(|r| best <= r.val_loss.unwrap()));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let net = MlpNetwork::new(5, &[9, 7], 4, OutputHead::Softmax, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&net, &path).unwrap();
        let back = load_network(&path).unwrap();
        assert_eq!(net, back);
        let x = random_inputs(3, 5, 1);
        assert_eq!(
            net.forward(&x).unwrap().as_slice(),
            back.forward(&x).unwrap().as_slice()
        );
    }

    #[test]
    fn load_rejects_future_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = MlpNetwork::new(2, &[], 2, OutputHead::Softmax, 0).unwrap();
        let mut file = serde_json::to_value(NetworkFile {
            schema_version: NETWORK_SCHEMA_VERSION,
            network: net,
        })
        .unwrap();
        file["schema_version"] = serde_json::json!(42);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(
            load_network(&path),
            Err(Error::SchemaVersion { found: 42, .. })
        ));
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(MlpNetwork::new(0, &[4], 2, OutputHead::Softmax, 0).is_err());
        assert!(MlpNetwork::new(4, &[0], 2, OutputHead::Softmax, 0).is_err());
        assert!(MlpNetwork::new(4, &[4], 0, OutputHead::Softmax, 0).is_err());
        let net = MlpNetwork::new(4, &[4], 2, OutputHead::Softmax, 0).unwrap();
        let x = random_inputs(2, 3, 0);
        assert!(net.forward(&x).is_err());
    }
}
