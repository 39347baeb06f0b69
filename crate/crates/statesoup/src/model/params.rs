//! Learned parameters and their deterministic initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::ModelError;
use crate::kernels::Mat;

/// Parameters of one gated-linear recurrent block.
///
/// The block computes, for residual input h_t:
///   x_t  = rmsnorm(h_t) * norm_scale
///   p_t  = w_in x_t                      (pre-conv signal, enters conv buffer)
///   c_t  = depthwise causal conv over the last W pre-conv signals
///   u_t  = silu(c_t)
///   dt_t = softplus(w_delta ⊙ u_t + b_delta)          (per-channel step size)
///   B_t  = w_b u_t,  C_t = w_c u_t
///   A_t[n,d] = exp(-dt_t[d] * exp(a_log[n]))
///   s_t  = A_t ⊙ s_{t-1} + (dt_t ⊙ u_t) ⊗ B_t
///   y_t[d] = Σ_n C_t[n] s_t[n,d]
///   out  = w_out (y_t ⊙ silu(w_gate x_t))
///   h_{t+1 layer input} = h_t + out
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// RMSNorm gain, `[D]`.
    pub norm_scale: Vec<f32>,
    /// Input projection, `[D, D]`.
    pub w_in: Mat,
    /// Depthwise causal kernel, `[W, D]`, row w applies to the input w-from-oldest.
    pub conv_kernel: Vec<f32>,
    /// Per-channel slope of the step-size map, `[D]`.
    pub w_delta: Vec<f32>,
    /// Per-channel bias of the step-size map, `[D]`.
    pub b_delta: Vec<f32>,
    /// Input-dependent B projection, `[N, D]`.
    pub w_b: Mat,
    /// Readout C projection, `[N, D]`.
    pub w_c: Mat,
    /// Log transition rates, `[N]`; rate_n = exp(a_log[n]) > 0, so every
    /// per-step transition coefficient exp(-dt * rate) lies in (0, 1].
    pub a_log: Vec<f32>,
    /// Gate projection, `[D, D]`.
    pub w_gate: Mat,
    /// Output projection, `[D, D]`.
    pub w_out: Mat,
}

/// All learned parameters. Immutable after training or loading.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    /// Token embedding, `[vocab, D]`; also the tied output head.
    pub embedding: Mat,
    pub layers: Vec<LayerParams>,
    /// Final RMSNorm gain before the head, `[D]`.
    pub final_norm: Vec<f32>,
}

impl ModelParams {
    pub fn model_hash(&self) -> u64 {
        self.config.stable_hash()
    }

    /// Visit every parameter tensor as (name, row-major values).
    pub fn for_each_tensor<F: FnMut(&str, &[f32])>(&self, mut f: F) {
        f("embedding", &self.embedding.w);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.norm_scale"), &l.norm_scale);
            f(&format!("layers.{i}.w_in"), &l.w_in.w);
            f(&format!("layers.{i}.conv_kernel"), &l.conv_kernel);
            f(&format!("layers.{i}.w_delta"), &l.w_delta);
            f(&format!("layers.{i}.b_delta"), &l.b_delta);
            f(&format!("layers.{i}.w_b"), &l.w_b.w);
            f(&format!("layers.{i}.w_c"), &l.w_c.w);
            f(&format!("layers.{i}.a_log"), &l.a_log);
            f(&format!("layers.{i}.w_gate"), &l.w_gate.w);
            f(&format!("layers.{i}.w_out"), &l.w_out.w);
        }
        f("final_norm", &self.final_norm);
    }

    /// Visit every parameter tensor mutably. Callers that touch a `Mat`'s
    /// rows must call `refresh_transposes` afterwards.
    pub fn for_each_tensor_mut<F: FnMut(&str, &mut [f32])>(&mut self, mut f: F) {
        f("embedding", &mut self.embedding.w);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.norm_scale"), &mut l.norm_scale);
            f(&format!("layers.{i}.w_in"), &mut l.w_in.w);
            f(&format!("layers.{i}.conv_kernel"), &mut l.conv_kernel);
            f(&format!("layers.{i}.w_delta"), &mut l.w_delta);
            f(&format!("layers.{i}.b_delta"), &mut l.b_delta);
            f(&format!("layers.{i}.w_b"), &mut l.w_b.w);
            f(&format!("layers.{i}.w_c"), &mut l.w_c.w);
            f(&format!("layers.{i}.a_log"), &mut l.a_log);
            f(&format!("layers.{i}.w_gate"), &mut l.w_gate.w);
            f(&format!("layers.{i}.w_out"), &mut l.w_out.w);
        }
        f("final_norm", &mut self.final_norm);
    }

    pub fn refresh_transposes(&mut self) {
        self.embedding.refresh_transpose();
        for l in &mut self.layers {
            l.w_in.refresh_transpose();
            l.w_b.refresh_transpose();
            l.w_c.refresh_transpose();
            l.w_gate.refresh_transpose();
            l.w_out.refresh_transpose();
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// Shape of a named tensor, as recorded in serialized manifests.
    pub fn tensor_shape(&self, name: &str) -> Option<Vec<usize>> {
        let c = &self.config;
        let (d, n, w) = (c.embed_dim, c.state_dim, c.conv_width);
        if name == "embedding" {
            return Some(vec![c.vocab_size, d]);
        }
        if name == "final_norm" {
            return Some(vec![d]);
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, field) = rest.split_once('.')?;
        let idx: usize = idx.parse().ok()?;
        if idx >= c.num_layers {
            return None;
        }
        Some(match field {
            "norm_scale" | "w_delta" | "b_delta" => vec![d],
            "w_in" | "w_gate" | "w_out" => vec![d, d],
            "conv_kernel" => vec![w, d],
            "w_b" | "w_c" => vec![n, d],
            "a_log" => vec![n],
            _ => return None,
        })
    }
}

/// Deterministically initialize a model from a seed.
///
/// The transition rates are set so that at the mean initial step size the
/// per-step transitions span [0.9, 0.999] across the N state channels
/// (long-memory initialization); step-size biases are drawn so that
/// softplus(b_delta) is log-uniform in [1e-3, 1e-1].
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let (v, d, n, l, w) = (
        config.vocab_size,
        config.embed_dim,
        config.state_dim,
        config.num_layers,
        config.conv_width,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let proj_std = 1.0 / (d as f64).sqrt();
    let conv_std = 1.0 / (w as f64).sqrt();

    let embedding = Mat::from_rows(v, d, embedding_init(&mut rng, v, d));

    let mut layers = Vec::with_capacity(l);
    for _ in 0..l {
        let norm_scale = vec![1.0f32; d];
        let w_in = Mat::from_rows(d, d, normal_vec(&mut rng, d * d, proj_std));
        let conv_kernel = normal_vec(&mut rng, w * d, conv_std);
        let w_delta = normal_vec(&mut rng, d, proj_std);

        // softplus(b_delta) log-uniform in [1e-3, 1e-1]
        let mut b_delta = vec![0.0f32; d];
        let mut dt_sum = 0.0f64;
        for b in b_delta.iter_mut() {
            let u: f64 = rng.gen::<f64>();
            let dt = (1e-3f64).ln() + u * ((1e-1f64).ln() - (1e-3f64).ln());
            let dt = dt.exp();
            dt_sum += dt;
            *b = inv_softplus(dt) as f32;
        }
        let dt_mean = dt_sum / d as f64;

        let w_b = Mat::from_rows(n, d, normal_vec(&mut rng, n * d, proj_std));
        let w_c = Mat::from_rows(n, d, normal_vec(&mut rng, n * d, proj_std));

        // rates spaced geometrically so exp(-dt_mean * rate) covers [0.9, 0.999]
        let r_min = -(0.999f64.ln()) / dt_mean;
        let r_max = -(0.9f64.ln()) / dt_mean;
        let mut a_log = vec![0.0f32; n];
        for (k, a) in a_log.iter_mut().enumerate() {
            let t = if n > 1 {
                k as f64 / (n - 1) as f64
            } else {
                0.0
            };
            let rate = r_min * (r_max / r_min).powf(t);
            *a = rate.ln() as f32;
        }

        let w_gate = Mat::from_rows(d, d, normal_vec(&mut rng, d * d, proj_std));
        let w_out = Mat::zeros(d, d);

        layers.push(LayerParams {
            norm_scale,
            w_in,
            conv_kernel,
            w_delta,
            b_delta,
            w_b,
            w_c,
            a_log,
            w_gate,
            w_out,
        });
    }

    Ok(ModelParams {
        config: config.clone(),
        seed,
        embedding,
        layers,
        final_norm: vec![1.0f32; d],
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f32> {
    (0..len).map(|_| (std * box_muller(rng)) as f32).collect()
}

/// Token embeddings: random Gaussian plus low-frequency sine/cosine pairs
/// over the non-reserved alphabet (the last two ids are separators). The
/// cyclic structure gives token arithmetic a linear geometry from the
/// start; training is free to reshape it.
fn embedding_init(rng: &mut ChaCha8Rng, vocab: usize, d: usize) -> Vec<f32> {
    let mut e = normal_vec(rng, vocab * d, 0.02);
    let period = vocab.saturating_sub(2).max(1);
    let pairs = (d / 4).min(16);
    for t in 0..period {
        let row = &mut e[t * d..(t + 1) * d];
        for j in 0..pairs {
            let angle = 2.0 * std::f64::consts::PI * ((j + 1) * t) as f64 / period as f64;
            row[2 * j] = (0.02 * angle.cos()) as f32;
            row[2 * j + 1] = (0.02 * angle.sin()) as f32;
        }
    }
    e
}

/// Standard normal via Box-Muller on two uniform draws.
fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Inverse of softplus: x such that ln(1 + e^x) = y.
fn inv_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}
