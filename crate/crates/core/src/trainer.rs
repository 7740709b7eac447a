//! Teacher-forced training with Adam, and step-wise / autoregressive
//! evaluation for both tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tasks::{child_seed, CotInstance, LatentSpace, LatentTask, MeanCalcDraw, MeanCalcSample, Split};

const DATA_STREAM: u64 = 0xDA7A;
const EPOCH_STREAM: u64 = 0xE90C;
const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            n_steps: 1000,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_steps == 0 {
            return Err(Error::Config("batch_size and n_steps must be at least 1".into()));
        }
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("learning rate must be >= 0 and adam_eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam moment buffers, one per parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.buffers().iter().map(|b| vec![0.0; b.numel()]).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update over every buffer.
pub fn adam_step(buffers: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != buffers.len() || state.m.len() != buffers.len() {
        return Err(Error::Shape("gradient and parameter buffer counts differ".into()));
    }
    for (k, g) in grads.iter().enumerate() {
        if g.len() != buffers[k].numel() {
            return Err(Error::Shape(format!("gradient {k} has {} entries, buffer has {}", g.len(), buffers[k].numel())));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at buffer {k} entry {pos} (step {})",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (k, buf) in buffers.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (j, w) in buf.data_mut().iter_mut().enumerate() {
            let gj = grads[k][j];
            m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
            v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
    norm
}

/// Anything that maps a scalar sequence to one next-value prediction per
/// position.
pub trait Predictor {
    fn predict(&self, seq: &[f64]) -> Result<Vec<f64>>;

    fn autoregress(&self, prompt: &[f64], n_steps: usize) -> Result<Vec<f64>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let next = *self
                .predict(&seq)?
                .last()
                .ok_or_else(|| Error::Contract("empty prediction".into()))?;
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

impl Predictor for ModelParams {
    fn predict(&self, seq: &[f64]) -> Result<Vec<f64>> {
        self.forward(seq)
    }

    fn autoregress(&self, prompt: &[f64], n_steps: usize) -> Result<Vec<f64>> {
        self.predict_autoregressive(prompt, n_steps)
    }
}

/// A teacher-forced training example: `input` is fed in full and the outputs
/// at `positions` are regressed onto `targets`. The example's loss is
/// `weight * mean((out[positions] - targets)^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub positions: Vec<usize>,
    pub targets: Vec<f64>,
    pub weight: f64,
}

impl Example {
    /// `x0 x1 x2 x3 y0`, supervised at the two positions predicting y0 and y1.
    /// The weight makes the loss the sum of the two squared errors.
    pub fn mean_calc(s: &MeanCalcSample) -> Self {
        Example { input: s.sequence().to_vec(), positions: vec![3, 4], targets: vec![s.y0, s.y1], weight: 2.0 }
    }

    /// All demonstrations and the test chain; every position predicts its
    /// successor.
    pub fn cot(inst: &CotInstance) -> Self {
        let seq = inst.full_sequence();
        let n = seq.len() - 1;
        Example { input: seq[..n].to_vec(), positions: (0..n).collect(), targets: seq[1..].to_vec(), weight: 1.0 }
    }

    /// Loss computed from raw forward outputs, without the tape.
    pub fn loss_of(&self, outputs: &[f64]) -> f64 {
        let sq: f64 = self.positions.iter().zip(&self.targets).map(|(&p, t)| (outputs[p] - t).powi(2)).sum();
        self.weight * sq / self.positions.len() as f64
    }
}

/// Loss of one example and the gradient for every parameter buffer.
pub fn example_loss_grad(params: &ModelParams, ex: &Example) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let (leaves, out) = params.record(&mut tape, &ex.input)?;
    let picked = tape.select_rows(out, &ex.positions)?;
    let target = tape.leaf(Tensor::matrix(ex.targets.len(), 1, ex.targets.clone())?);
    let mse = tape.mse(picked, target)?;
    let loss = tape.scale(mse, ex.weight);
    tape.backward(loss)?;
    let grads = leaves
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

/// Mean loss over a batch, from forward passes only.
pub fn batch_loss(model: &impl Predictor, batch: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        total += ex.loss_of(&model.predict(&ex.input)?);
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch-mean loss at each step, measured before that step's update.
    pub curve: Vec<f64>,
}

impl TrainReport {
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        smooth(&self.curve, window)
    }
}

/// Trailing moving average; early entries average what is available.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Generic loop: `batch_at(step)` supplies the examples for each step.
pub fn train_loop(params: &mut ModelParams, cfg: &TrainConfig, mut batch_at: impl FnMut(usize) -> Vec<Example>) -> Result<TrainReport> {
    cfg.validate()?;
    let mut state = OptimizerState::new(params);
    let mut curve = Vec::with_capacity(cfg.n_steps);
    for step in 0..cfg.n_steps {
        let batch = batch_at(step);
        let mut grads: Vec<Vec<f64>> = state.m.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut loss = 0.0;
        for ex in &batch {
            let (l, g) = example_loss_grad(params, ex)?;
            loss += l;
            for (acc, gk) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gk).for_each(|(a, v)| *a += v);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grads.iter_mut().flatten().for_each(|v| *v *= inv);
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at step {step}: {loss}")));
        }
        curve.push(loss);
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        adam_step(&mut params.buffers_mut(), &grads, &mut state, cfg)?;
        if !params.is_finite() {
            return Err(Error::Training(format!("parameters became non-finite at step {step}")));
        }
    }
    Ok(TrainReport { curve })
}

/// Fixed training set plus per-epoch shuffles, all derived from the seed.
#[derive(Debug, Clone)]
pub struct MeanCalcData {
    pub samples: Vec<MeanCalcSample>,
    batch_size: usize,
    seed: u64,
    order: Vec<usize>,
    epoch: Option<usize>,
}

impl MeanCalcData {
    pub fn new(n_samples: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Config("mean-calc training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, DATA_STREAM));
        let samples = (0..n_samples)
            .map(|_| MeanCalcDraw::sample(&mut rng).realize(0, Split::Train))
            .collect::<Result<Vec<_>>>()?;
        Ok(MeanCalcData { samples, batch_size, seed, order: Vec::new(), epoch: None })
    }

    pub fn batch(&mut self, step: usize) -> Vec<MeanCalcSample> {
        let n = self.samples.len();
        (0..self.batch_size)
            .map(|j| {
                let flat = step * self.batch_size + j;
                let epoch = flat / n;
                if self.epoch != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(self.seed, EPOCH_STREAM + epoch as u64));
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut rng);
                    self.epoch = Some(epoch);
                }
                self.samples[self.order[flat % n]]
            })
            .collect()
    }
}

pub fn train_meancalc(params: &mut ModelParams, n_samples: usize, cfg: &TrainConfig) -> Result<(TrainReport, MeanCalcData)> {
    let mut data = MeanCalcData::new(n_samples, cfg.batch_size, cfg.seed)?;
    let report = train_loop(params, cfg, |step| data.batch(step).iter().map(Example::mean_calc).collect())?;
    Ok((report, data))
}

/// Instances for one training step: tasks uniform over `theta`, fresh noise.
pub fn cot_batch(theta: &[LatentTask], n_demos: usize, batch_size: usize, seed: u64, step: usize) -> Vec<CotInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, step as u64));
    (0..batch_size)
        .map(|_| {
            let t = &theta[rng.random_range(0..theta.len())];
            CotInstance::sample(t, n_demos, &mut rng)
        })
        .collect()
}

pub fn train_cot(params: &mut ModelParams, theta: &[LatentTask], space: &LatentSpace, n_demos: usize, cfg: &TrainConfig) -> Result<TrainReport> {
    if theta.is_empty() {
        return Err(Error::Contract("training task set is empty".into()));
    }
    if theta.iter().any(|t| t.steps() != space.h + 1) {
        return Err(Error::Shape("task length does not match the latent space".into()));
    }
    let needed = (n_demos + 1) * (space.h + 1) - 1;
    if needed > params.config.max_seq_len {
        return Err(Error::Length { len: needed, max: params.config.max_seq_len });
    }
    train_loop(params, cfg, |step| {
        cot_batch(theta, n_demos, cfg.batch_size, cfg.seed, step).iter().map(Example::cot).collect()
    })
}

/// Evaluation instances: tasks drawn uniformly from `theta`.
pub fn cot_eval_instances(theta: &[LatentTask], n_demos: usize, n_instances: usize, seed: u64) -> Vec<CotInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, EVAL_STREAM));
    (0..n_instances)
        .map(|_| {
            let t = &theta[rng.random_range(0..theta.len())];
            CotInstance::sample(t, n_demos, &mut rng)
        })
        .collect()
}

/// `L_test(h)` for `h = 1..=H`: the squared error of predicting the test
/// chain's `z_h` from the demonstrations and the true `z_0 .. z_{h-1}`.
pub fn eval_stepwise_instances(model: &impl Predictor, instances: &[CotInstance]) -> Result<Vec<f64>> {
    let first = instances.first().ok_or_else(|| Error::Contract("no evaluation instances".into()))?;
    let h_max = first.test.z.len() - 1;
    let mut sums = vec![0.0; h_max];
    for inst in instances {
        let seq = inst.full_sequence();
        let out = model.predict(&seq[..seq.len() - 1])?;
        let base = inst.demos.len() * (h_max + 1);
        for h in 1..=h_max {
            // The output at the position of z_{h-1} predicts z_h.
            sums[h - 1] += (out[base + h - 1] - inst.test.z[h]).powi(2);
        }
    }
    Ok(sums.into_iter().map(|s| s / instances.len() as f64).collect())
}

pub fn eval_stepwise(model: &impl Predictor, theta: &[LatentTask], n_demos: usize, n_instances: usize, seed: u64) -> Result<Vec<f64>> {
    if theta.is_empty() || n_instances == 0 {
        return Err(Error::Contract("evaluation needs tasks and instances".into()));
    }
    eval_stepwise_instances(model, &cot_eval_instances(theta, n_demos, n_instances, seed))
}

/// Autoregressive two-step generation from `x0 x1 x2 x3`; squared error of
/// the second generated value against `y1`, averaged.
pub fn eval_meancalc_samples(model: &impl Predictor, samples: &[MeanCalcSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("no evaluation samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let gen = model.autoregress(&s.x, 2)?;
        total += (gen[1] - s.y1).powi(2);
    }
    Ok(total / samples.len() as f64)
}

pub fn meancalc_eval_samples(i: u32, split: Split, n_samples: usize, seed: u64) -> Result<Vec<MeanCalcSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, EVAL_STREAM + i as u64));
    (0..n_samples).map(|_| MeanCalcDraw::sample(&mut rng).realize(i, split)).collect()
}

pub fn eval_meancalc(model: &impl Predictor, i: u32, n_samples: usize, seed: u64) -> Result<f64> {
    eval_meancalc_samples(model, &meancalc_eval_samples(i, Split::Test, n_samples, seed)?)
}
