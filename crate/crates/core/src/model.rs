//! Decoder-only transformer over scalar tokens.
//!
//! Each scalar `z` is lifted to `z * w_emb + b_emb`, a learned positional row
//! is added, and the result passes through pre-norm residual blocks of causal
//! multi-head attention and a GeLU feedforward. A linear head maps every
//! position back to one scalar: the prediction of the next value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference, max_relative_error, mse, Tape, Tensor, Var, LN_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            ln_eps: LN_EPS,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("ln_eps and init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of scalars in [`ModelParams`] for this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + self.d_ff + d + 4 * d;
        2 * d + self.max_seq_len * d + self.n_layers * per_layer + d + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub emb_w: Tensor,
    pub emb_b: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

enum Fill {
    Normal,
    Zeros,
    Ones,
}

impl ModelParams {
    /// Weights from N(0, init_std^2) in declaration order; biases and
    /// layer-norm shifts zero, layer-norm gains one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut make = |shape: Vec<usize>, fill: Fill| -> Tensor {
            let mut t = Tensor::zeros(shape);
            match fill {
                Fill::Normal => t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
                Fill::Ones => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
                Fill::Zeros => {}
            }
            t
        };
        let (d, ff) = (config.d_model, config.d_ff);
        let emb_w = make(vec![1, d], Fill::Normal);
        let emb_b = make(vec![d], Fill::Zeros);
        let pos = make(vec![config.max_seq_len, d], Fill::Normal);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: make(vec![d], Fill::Ones),
                ln1_beta: make(vec![d], Fill::Zeros),
                w_q: make(vec![d, d], Fill::Normal),
                w_k: make(vec![d, d], Fill::Normal),
                w_v: make(vec![d, d], Fill::Normal),
                w_o: make(vec![d, d], Fill::Normal),
                ln2_gamma: make(vec![d], Fill::Ones),
                ln2_beta: make(vec![d], Fill::Zeros),
                ff_w1: make(vec![d, ff], Fill::Normal),
                ff_b1: make(vec![ff], Fill::Zeros),
                ff_w2: make(vec![ff, d], Fill::Normal),
                ff_b2: make(vec![d], Fill::Zeros),
            })
            .collect();
        let head_w = make(vec![d, 1], Fill::Normal);
        let head_b = make(vec![1], Fill::Zeros);
        Ok(ModelParams { config: config.clone(), emb_w, emb_b, pos, layers, head_w, head_b })
    }

    /// All parameter buffers in declaration order.
    pub fn buffers(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.emb_w, &self.emb_b, &self.pos];
        for l in &self.layers {
            out.extend([
                &l.ln1_gamma, &l.ln1_beta, &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ln2_gamma,
                &l.ln2_beta, &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2,
            ]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.emb_w, &mut self.emb_b, &mut self.pos];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gamma, &mut l.ln1_beta, &mut l.w_q, &mut l.w_k, &mut l.w_v,
                &mut l.w_o, &mut l.ln2_gamma, &mut l.ln2_beta, &mut l.ff_w1, &mut l.ff_b1,
                &mut l.ff_w2, &mut l.ff_b2,
            ]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.buffers().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Records the forward pass on `tape`. Returns the parameter leaves (in
    /// [`ModelParams::buffers`] order) and the `T×1` output node.
    pub fn record(&self, tape: &mut Tape, prompt: &[f64]) -> Result<(Vec<Var>, Var)> {
        let t_len = prompt.len();
        if t_len == 0 {
            return Err(Error::Contract("forward needs at least one position".into()));
        }
        let cfg = &self.config;
        if t_len > cfg.max_seq_len {
            return Err(Error::Length { len: t_len, max: cfg.max_seq_len });
        }
        let leaves: Vec<Var> = self.buffers().into_iter().map(|b| tape.leaf(b.clone())).collect();
        let (emb_w, emb_b, pos) = (leaves[0], leaves[1], leaves[2]);

        let z = tape.leaf(Tensor::matrix(t_len, 1, prompt.to_vec())?);
        let x = tape.matmul(z, emb_w)?;
        let x = tape.add_row(x, emb_b)?;
        let p = tape.slice_rows(pos, 0, t_len)?;
        let mut h = tape.add(x, p)?;

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for li in 0..cfg.n_layers {
            let l = &leaves[3 + 12 * li..3 + 12 * (li + 1)];
            let (ln1_g, ln1_b, w_q, w_k, w_v, w_o) = (l[0], l[1], l[2], l[3], l[4], l[5]);
            let (ln2_g, ln2_b, w1, b1, w2, b2) = (l[6], l[7], l[8], l[9], l[10], l[11]);

            let a = tape.layer_norm(h, ln1_g, ln1_b, cfg.ln_eps)?;
            let q = tape.matmul(a, w_q)?;
            let k = tape.matmul(a, w_k)?;
            let v = tape.matmul(a, w_v)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, scale);
                let s = tape.causal_mask(s)?;
                let w = tape.softmax_rows(s);
                heads.push(tape.matmul(w, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let o = tape.matmul(cat, w_o)?;
            h = tape.add(h, o)?;

            let f = tape.layer_norm(h, ln2_g, ln2_b, cfg.ln_eps)?;
            let f = tape.matmul(f, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            h = tape.add(h, f)?;
        }
        let n = leaves.len();
        let out = tape.matmul(h, leaves[n - 2])?;
        let out = tape.add_row(out, leaves[n - 1])?;
        Ok((leaves, out))
    }

    /// One output per position: position `t` predicts the value at `t + 1`.
    pub fn forward(&self, prompt: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (_, out) = self.record(&mut tape, prompt)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Feeds each prediction back as the next input, `n_steps` times.
    pub fn predict_autoregressive(&self, prompt: &[f64], n_steps: usize) -> Result<Vec<f64>> {
        if prompt.len() + n_steps > self.config.max_seq_len {
            return Err(Error::Length {
                len: prompt.len() + n_steps,
                max: self.config.max_seq_len,
            });
        }
        let mut seq = prompt.to_vec();
        let mut generated = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let next = *self.forward(&seq)?.last().unwrap();
            generated.push(next);
            seq.push(next);
        }
        Ok(generated)
    }
}

/// Step and relative-error floor of [`gradient_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between tape and central-difference gradients of
/// `mse(forward(prompt), target)`, per parameter buffer.
pub fn gradient_check(params: &ModelParams, prompt: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if target.len() != prompt.len() {
        return Err(Error::Shape("gradient check needs one target per position".into()));
    }
    let mut tape = Tape::new();
    let (leaves, out) = params.record(&mut tape, prompt)?;
    let tv = tape.leaf(Tensor::matrix(target.len(), 1, target.to_vec())?);
    let loss = tape.mse(out, tv)?;
    tape.backward(loss)?;
    let mut errs = Vec::with_capacity(leaves.len());
    for (b, &leaf) in leaves.iter().enumerate() {
        let base = params.buffers()[b].data().to_vec();
        let numeric = finite_difference(
            |x| {
                let mut p = params.clone();
                p.buffers_mut()[b].data_mut().copy_from_slice(x);
                p.forward(prompt).map(|o| mse(&o, target)).unwrap_or(f64::NAN)
            },
            &base,
            GRAD_CHECK_STEP,
        );
        let analytic = tape.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; base.len()]);
        errs.push(max_relative_error(&analytic, &numeric, GRAD_CHECK_FLOOR));
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, max_seq_len: 16, ..Default::default() }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::init(&small()).unwrap();
        let b = ModelParams::init(&small()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.w_q_first(), c.w_q_first());
    }

    impl ModelParams {
        fn w_q_first(&self) -> Vec<f64> {
            self.layers[0].w_q.data().to_vec()
        }
    }

    #[test]
    fn init_fills() {
        let p = ModelParams::init(&small()).unwrap();
        assert!(p.layers[0].ln1_gamma.data().iter().all(|&v| v == 1.0));
        assert!(p.layers[1].ff_b1.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.head_b.data(), &[0.0]);
    }

    #[test]
    fn parameter_count_matches_hand_inventory() {
        // emb 8+8, pos 16*8, per layer: ln 8+8, qkvo 4*64, ff 8*16+16+16*8+8, ln 8+8, head 8+1
        let per_layer = 16 + 256 + (128 + 16 + 128 + 8) + 16;
        let expected = 16 + 128 + 2 * per_layer + 9;
        let p = ModelParams::init(&small()).unwrap();
        assert_eq!(p.param_count(), expected);
        assert_eq!(small().param_count(), expected);
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelParams::init(&ModelConfig { n_heads: 3, ..small() }).is_err());
        assert!(ModelParams::init(&ModelConfig { d_ff: 0, ..small() }).is_err());
    }

    #[test]
    fn forward_shapes_and_length_error() {
        let p = ModelParams::init(&small()).unwrap();
        assert_eq!(p.forward(&[0.3]).unwrap().len(), 1);
        assert_eq!(p.forward(&[0.1; 9]).unwrap().len(), 9);
        assert!(matches!(p.forward(&[0.0; 17]), Err(Error::Length { .. })));
        assert!(p.forward(&[]).is_err());
        assert!(p.predict_autoregressive(&[0.0; 15], 2).is_err());
        assert!(p.predict_autoregressive(&[1.0, 2.0], 0).unwrap().is_empty());
    }

    #[test]
    fn forward_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..5 {
            let p = ModelParams::init(&ModelConfig { seed, init_std: 0.5, ..small() }).unwrap();
            let prompt: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
            let base = p.forward(&prompt).unwrap();
            for t in 0..12 {
                let mut q = prompt.clone();
                q[t] += 1.7;
                let out = p.forward(&q).unwrap();
                assert_eq!(&out[..t], &base[..t]);
                assert_ne!(out[t], base[t]);
            }
        }
    }

    #[test]
    fn forward_finite_on_large_inputs() {
        let p = ModelParams::init(&ModelConfig { max_seq_len: 64, ..ModelConfig::default() }).unwrap();
        let prompt: Vec<f64> = (0..61).map(|i| if i % 2 == 0 { 100.0 } else { -100.0 }).collect();
        assert!(p.forward(&prompt).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn autoregression_matches_manual_loop() {
        let p = ModelParams::init(&ModelConfig { init_std: 0.3, ..small() }).unwrap();
        let prompt = [0.5, -1.0, 2.0, 0.25];
        let gen = p.predict_autoregressive(&prompt, 3).unwrap();
        let mut seq = prompt.to_vec();
        for g in &gen {
            let next = *p.forward(&seq).unwrap().last().unwrap();
            assert_eq!(next.to_bits(), g.to_bits());
            seq.push(next);
        }
    }

    #[test]
    fn every_parameter_group_matches_finite_differences() {
        let p0 = ModelParams::init(&ModelConfig { init_std: 0.3, ..small() }).unwrap();
        let prompt: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
        let target: Vec<f64> = (0..9).map(|i| (i as f64 * 0.3).cos()).collect();
        let errs = gradient_check(&p0, &prompt, &target).unwrap();
        assert_eq!(errs.len(), p0.buffers().len());
        for (b, err) in errs.iter().enumerate() {
            assert!(*err <= 1e-4, "buffer {b}: rel err {err}");
        }
    }
}
