//! Next-token training of the toy model over a mixture of ICL demonstration
//! streams and sequential-corpus text.

pub(crate) mod backward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::engine::layer_rates;
use crate::model::{init_model, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tasks::{icl_training_sequence, TaskSpec};

use backward::{backward_row, forward_row, BackwardScratch, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("loss became non-finite at step {step} (loss {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Gradient-clipping threshold on the global norm.
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of batches drawn from ICL demonstration streams; the rest
    /// come from the sequential corpus.
    pub mixture: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 32,
            seq_len: 128,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mixture: 0.7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.mixture) {
            return Err(TrainError::Invalid(format!(
                "mixture {} not in [0, 1]",
                self.mixture
            )));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::Invalid(format!("lr {} must be > 0", self.lr)));
        }
        if self.steps == 0 || self.batch == 0 || self.seq_len < 2 {
            return Err(TrainError::Invalid(
                "steps and batch must be >= 1, seq_len >= 2".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-layer gradient tensors, row-major, shaped like `LayerParams`.
#[derive(Debug, Clone)]
pub struct LayerGrads<F> {
    pub norm_scale: Vec<F>,
    pub w_in: Vec<F>,
    pub conv_kernel: Vec<F>,
    pub w_delta: Vec<F>,
    pub b_delta: Vec<F>,
    pub w_b: Vec<F>,
    pub w_c: Vec<F>,
    pub a_log: Vec<F>,
    pub w_gate: Vec<F>,
    pub w_out: Vec<F>,
}

/// Gradients shaped like `ModelParams`.
#[derive(Debug, Clone)]
pub struct Gradients<F = f32> {
    pub embedding: Vec<F>,
    pub layers: Vec<LayerGrads<F>>,
    pub final_norm: Vec<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, n, l, w) = (
            config.vocab_size,
            config.embed_dim,
            config.state_dim,
            config.num_layers,
            config.conv_width,
        );
        Gradients {
            embedding: vec![F::ZERO; v * d],
            layers: (0..l)
                .map(|_| LayerGrads {
                    norm_scale: vec![F::ZERO; d],
                    w_in: vec![F::ZERO; d * d],
                    conv_kernel: vec![F::ZERO; w * d],
                    w_delta: vec![F::ZERO; d],
                    b_delta: vec![F::ZERO; d],
                    w_b: vec![F::ZERO; n * d],
                    w_c: vec![F::ZERO; n * d],
                    a_log: vec![F::ZERO; n],
                    w_gate: vec![F::ZERO; d * d],
                    w_out: vec![F::ZERO; d * d],
                })
                .collect(),
            final_norm: vec![F::ZERO; d],
        }
    }

    /// Tensors in the same fixed order as `ModelParams::for_each_tensor`.
    pub fn tensors(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.norm_scale"), &l.norm_scale));
            out.push((format!("layers.{i}.w_in"), &l.w_in));
            out.push((format!("layers.{i}.conv_kernel"), &l.conv_kernel));
            out.push((format!("layers.{i}.w_delta"), &l.w_delta));
            out.push((format!("layers.{i}.b_delta"), &l.b_delta));
            out.push((format!("layers.{i}.w_b"), &l.w_b));
            out.push((format!("layers.{i}.w_c"), &l.w_c));
            out.push((format!("layers.{i}.a_log"), &l.a_log));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_out"), &l.w_out));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> =
            vec![("embedding".to_string(), self.embedding.as_mut_slice())];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layers.{i}.norm_scale"),
                l.norm_scale.as_mut_slice(),
            ));
            out.push((format!("layers.{i}.w_in"), l.w_in.as_mut_slice()));
            out.push((
                format!("layers.{i}.conv_kernel"),
                l.conv_kernel.as_mut_slice(),
            ));
            out.push((format!("layers.{i}.w_delta"), l.w_delta.as_mut_slice()));
            out.push((format!("layers.{i}.b_delta"), l.b_delta.as_mut_slice()));
            out.push((format!("layers.{i}.w_b"), l.w_b.as_mut_slice()));
            out.push((format!("layers.{i}.w_c"), l.w_c.as_mut_slice()));
            out.push((format!("layers.{i}.a_log"), l.a_log.as_mut_slice()));
            out.push((format!("layers.{i}.w_gate"), l.w_gate.as_mut_slice()));
            out.push((format!("layers.{i}.w_out"), l.w_out.as_mut_slice()));
        }
        out.push(("final_norm".to_string(), self.final_norm.as_mut_slice()));
        out
    }

    /// Reset every entry to zero.
    pub fn zero_in_place(&mut self) {
        for (_, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = F::ZERO;
            }
        }
    }

    /// dst += src, entrywise, fixed order.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for (_, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Global L2 norm, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        let mut ss = 0.0f64;
        for (_, t) in self.tensors() {
            for &x in t {
                ss += x.to_f64() * x.to_f64();
            }
        }
        ss.sqrt()
    }
}

fn validate_batch(model: &ModelParams, batch: &[Vec<u32>]) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Invalid("empty batch".to_string()));
    }
    let len = batch[0].len();
    if len < 2 {
        return Err(TrainError::Invalid(
            "sequences must have at least 2 tokens".to_string(),
        ));
    }
    for row in batch {
        if row.len() != len {
            return Err(TrainError::Invalid(
                "sequences must share one length".to_string(),
            ));
        }
        for &t in row {
            if t as usize >= model.config.vocab_size {
                return Err(crate::model::ModelError::TokenOutOfRange {
                    token: t,
                    vocab: model.config.vocab_size,
                }
                .into());
            }
        }
    }
    Ok(())
}

/// Mean next-token NLL and parameter gradients over a batch of equal-length
/// sequences, each processed from the zero state.
///
/// Rows are differentiated independently (in parallel) and reduced in batch
/// order, so results are bit-reproducible regardless of thread scheduling.
pub fn compute_gradients(
    model: &ModelParams,
    batch: &[Vec<u32>],
) -> Result<(f64, Gradients<f32>), TrainError> {
    compute_gradients_generic::<f32>(model, batch)
}

/// f64 twin of `compute_gradients`, for oracle-grade gradient checks.
pub fn compute_gradients_f64(
    model: &ModelParams,
    batch: &[Vec<u32>],
) -> Result<(f64, Gradients<f64>), TrainError> {
    compute_gradients_generic::<f64>(model, batch)
}

/// Batch loss only, evaluated in 64-bit end to end (states included), as a
/// finite-difference target.
pub fn batch_loss_f64(model: &ModelParams, batch: &[Vec<u32>]) -> Result<f64, TrainError> {
    validate_batch(model, batch)?;
    let cfg = &model.config;
    let rates: Vec<Vec<f64>> = model.layers.iter().map(layer_rates).collect();
    let steps = batch[0].len() - 1;
    let mut tape = Tape::<f64>::new(cfg, steps);
    let mut ssm = state_bufs::<f64>(cfg);
    let mut conv = conv_bufs::<f64>(cfg);
    let mut logits = Vec::new();
    let mut total = 0.0f64;
    for row in batch {
        total += forward_row(
            model,
            &rates,
            row,
            &mut tape,
            &mut ssm,
            &mut conv,
            &mut logits,
        );
    }
    Ok(total / batch.len() as f64)
}

fn state_bufs<F: Scalar>(cfg: &ModelConfig) -> Vec<Vec<F>> {
    (0..cfg.num_layers)
        .map(|_| vec![F::ZERO; cfg.state_dim * cfg.embed_dim])
        .collect()
}

fn conv_bufs<F: Scalar>(cfg: &ModelConfig) -> Vec<Vec<F>> {
    (0..cfg.num_layers)
        .map(|_| vec![F::ZERO; cfg.conv_width * cfg.embed_dim])
        .collect()
}

/// Rows per parallel work item. Fixed by data, not thread count, so the
/// gradient reduction order (and therefore every bit of the result) is
/// independent of scheduling.
const ROWS_PER_CHUNK: usize = 4;

struct Workspace<F: Scalar> {
    key: (usize, usize, usize, usize, usize, usize),
    tape: Tape<F>,
    scratch: BackwardScratch<F>,
    ssm: Vec<Vec<F>>,
    conv: Vec<Vec<F>>,
    logits: Vec<F>,
    row_grads: Gradients<F>,
}

thread_local! {
    static WORKSPACE: std::cell::RefCell<Option<Box<dyn std::any::Any>>> =
        const { std::cell::RefCell::new(None) };
}

fn with_workspace<F: Scalar, R>(
    cfg: &ModelConfig,
    steps: usize,
    f: impl FnOnce(&mut Workspace<F>) -> R,
) -> R {
    let key = (
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.state_dim,
        cfg.num_layers,
        cfg.conv_width,
        steps,
    );
    WORKSPACE.with(|cell| {
        let mut slot = cell.borrow_mut();
        let reusable = slot
            .as_mut()
            .and_then(|b| b.downcast_mut::<Workspace<F>>())
            .map(|ws| ws.key == key)
            .unwrap_or(false);
        if !reusable {
            *slot = Some(Box::new(Workspace::<F> {
                key,
                tape: Tape::new(cfg, steps),
                scratch: BackwardScratch::new(cfg),
                ssm: state_bufs::<F>(cfg),
                conv: conv_bufs::<F>(cfg),
                logits: Vec::new(),
                row_grads: Gradients::zeros(cfg),
            }));
        }
        let ws = slot
            .as_mut()
            .and_then(|b| b.downcast_mut::<Workspace<F>>())
            .expect("workspace type");
        f(ws)
    })
}

fn compute_gradients_generic<F: Scalar>(
    model: &ModelParams,
    batch: &[Vec<u32>],
) -> Result<(f64, Gradients<F>), TrainError> {
    validate_batch(model, batch)?;
    let cfg = &model.config;
    let rates: Vec<Vec<F>> = model.layers.iter().map(layer_rates).collect();
    let steps = batch[0].len() - 1;

    let partials: Vec<(f64, Gradients<F>)> = batch
        .par_chunks(ROWS_PER_CHUNK)
        .map(|chunk| {
            with_workspace::<F, _>(cfg, steps, |ws| {
                // rows are differentiated independently so identical rows
                // contribute bit-identical terms
                let mut grads = Gradients::<F>::zeros(cfg);
                let mut loss = 0.0f64;
                for row in chunk {
                    loss += forward_row(
                        model,
                        &rates,
                        row,
                        &mut ws.tape,
                        &mut ws.ssm,
                        &mut ws.conv,
                        &mut ws.logits,
                    );
                    ws.row_grads.zero_in_place();
                    backward_row(
                        model,
                        &rates,
                        row,
                        &ws.tape,
                        &mut ws.scratch,
                        &mut ws.row_grads,
                    );
                    grads.add_assign(&ws.row_grads);
                }
                (loss, grads)
            })
        })
        .collect();

    let mut total = Gradients::<F>::zeros(cfg);
    let mut loss_sum = 0.0f64;
    for (loss, g) in &partials {
        loss_sum += loss;
        total.add_assign(g);
    }
    let inv_b = F::from_f64(1.0 / batch.len() as f64);
    total.scale(inv_b);
    Ok((loss_sum / batch.len() as f64, total))
}

/// One training-step record, written as JSONL by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

struct Adam {
    m: Gradients<f32>,
    v: Gradients<f32>,
    t: usize,
}

impl Adam {
    fn new(config: &ModelConfig) -> Self {
        Adam {
            m: Gradients::zeros(config),
            v: Gradients::zeros(config),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &Gradients<f32>, tcfg: &TrainConfig) {
        self.t += 1;
        let b1 = tcfg.beta1 as f32;
        let b2 = tcfg.beta2 as f32;
        let bc1 = 1.0 - (tcfg.beta1).powi(self.t as i32);
        let bc2 = 1.0 - (tcfg.beta2).powi(self.t as i32);
        let lr = (tcfg.lr * bc2.sqrt() / bc1) as f32;
        let eps = tcfg.eps as f32;

        let g_tensors = grads.tensors();
        let m_tensors = self.m.tensors_mut();
        let v_tensors = self.v.tensors_mut();
        let mut mv: Vec<(&mut [f32], &mut [f32], &[f32])> = m_tensors
            .into_iter()
            .zip(v_tensors)
            .zip(g_tensors)
            .map(|(((mn, m), (vn, v)), (gn, g))| {
                debug_assert!(mn == vn && vn == gn);
                (m, v, g)
            })
            .collect();

        let mut idx = 0;
        params.for_each_tensor_mut(|_, w| {
            let (m, v, g) = &mut mv[idx];
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
            idx += 1;
        });
        params.refresh_transposes();
    }
}

/// Train a fresh model. Deterministic for fixed seeds; emits one metrics
/// record per step. Aborts with diagnostics when the loss diverges.
pub fn train(
    config: &ModelConfig,
    tcfg: &TrainConfig,
    tasks: &[TaskSpec],
    corpus: &[Vec<u32>],
) -> Result<(ModelParams, Vec<StepMetrics>), TrainError> {
    tcfg.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::Invalid("need at least one task".to_string()));
    }
    if corpus.is_empty() && tcfg.mixture < 1.0 {
        return Err(TrainError::Invalid(
            "mixture < 1 needs a non-empty corpus".to_string(),
        ));
    }
    if config.vocab_size < 256 && tcfg.mixture > 0.0 {
        return Err(TrainError::Invalid(
            "ICL streams use separator tokens 254/255, need vocab_size >= 256".to_string(),
        ));
    }
    for row in corpus {
        if row.len() < tcfg.seq_len {
            return Err(TrainError::Invalid(format!(
                "corpus sequence of {} tokens shorter than seq_len {}",
                row.len(),
                tcfg.seq_len
            )));
        }
    }

    let mut params = init_model(config, tcfg.seed)?;
    let mut adam = Adam::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5452_4149_4e21);
    let mut metrics = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let icl_batch = rng.gen::<f64>() < tcfg.mixture;
        let rows: Vec<Vec<u32>> = (0..tcfg.batch)
            .map(|_| {
                if icl_batch {
                    let task = &tasks[rng.gen_range(0..tasks.len())];
                    icl_training_sequence(task, tcfg.seq_len, &mut rng)
                } else {
                    let row = &corpus[rng.gen_range(0..corpus.len())];
                    let start = rng.gen_range(0..=row.len() - tcfg.seq_len);
                    row[start..start + tcfg.seq_len].to_vec()
                }
            })
            .collect();

        let (loss, mut grads) = compute_gradients(&params, &rows)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        let norm = grads.global_norm();
        if norm > GRAD_CLIP_NORM {
            grads.scale((GRAD_CLIP_NORM / norm) as f32);
        }
        adam.update(&mut params, &grads, tcfg);
        metrics.push(StepMetrics {
            step,
            loss,
            lr: tcfg.lr,
        });
    }
    Ok((params, metrics))
}

/// Serialize metrics as JSONL, one record per line.
pub fn metrics_to_jsonl(metrics: &[StepMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Central finite differences against the analytic gradients, both in
/// 64-bit. Returns the worst relative error over every parameter entry.
/// Perturbations are applied to the stored f32 values and the effective
/// step is measured as the realized f64 difference, so representation
/// error cancels.
pub fn gradient_check_max_rel_err(
    model: &ModelParams,
    batch: &[Vec<u32>],
    h: f64,
) -> Result<f64, TrainError> {
    let (_, grads) = compute_gradients_f64(model, batch)?;
    let mut probe = model.clone();
    let mut lens = Vec::new();
    probe.for_each_tensor(|_, t| lens.push(t.len()));
    let grad_tensors = grads.tensors();
    let mut worst = 0.0f64;
    for (ti, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let orig = tensor_entry(&probe, ti, i);
            let plus = (orig as f64 + h) as f32;
            let minus = (orig as f64 - h) as f32;

            set_tensor_entry(&mut probe, ti, i, plus);
            let loss_plus = batch_loss_f64(&probe, batch)?;

            set_tensor_entry(&mut probe, ti, i, minus);
            let loss_minus = batch_loss_f64(&probe, batch)?;

            set_tensor_entry(&mut probe, ti, i, orig);

            let dh = plus as f64 - minus as f64;
            let fd = (loss_plus - loss_minus) / dh;
            let analytic = grad_tensors[ti].1[i];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            let rel = (fd - analytic).abs() / denom;
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn tensor_entry(params: &ModelParams, ti: usize, i: usize) -> f32 {
    let mut idx = 0;
    let mut out = 0.0;
    params.for_each_tensor(|_, t| {
        if idx == ti {
            out = t[i];
        }
        idx += 1;
    });
    out
}

fn set_tensor_entry(params: &mut ModelParams, ti: usize, i: usize, v: f32) {
    let mut idx = 0;
    params.for_each_tensor_mut(|_, t| {
        if idx == ti {
            t[i] = v;
        }
        idx += 1;
    });
    params.refresh_transposes();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sequence_loss;
    use crate::model::zero_state;
    use crate::tasks::{make_task, TaskKind};
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            embed_dim: 4,
            state_dim: 2,
            num_layers: 1,
            conv_width: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_model() {
        let cfg = tiny_config();
        let model = init_model(&cfg, 3).unwrap();
        let batch = vec![vec![0u32, 3, 5, 1, 7, 2, 4, 6]];
        let worst = gradient_check_max_rel_err(&model, &batch, 1e-5).unwrap();
        assert!(worst <= 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_on_two_layer_model() {
        let cfg = ModelConfig {
            vocab_size: 8,
            embed_dim: 4,
            state_dim: 2,
            num_layers: 2,
            conv_width: 2,
            ..ModelConfig::default()
        };
        let model = init_model(&cfg, 11).unwrap();
        let batch = vec![vec![1u32, 6, 2, 0, 5, 3]];
        let worst = gradient_check_max_rel_err(&model, &batch, 1e-5).unwrap();
        assert!(worst <= 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn duplicated_rows_give_identical_gradients() {
        let cfg = tiny_config();
        let model = init_model(&cfg, 0).unwrap();
        let row = vec![0u32, 3, 5, 1, 7, 2];
        let (l1, g1) = compute_gradients(&model, &[row.clone()]).unwrap();
        let (l2, g2) = compute_gradients(&model, &[row.clone(), row]).unwrap();
        assert_eq!(l1, l2);
        for ((n1, t1), (_, t2)) in g1.tensors().into_iter().zip(g2.tensors()) {
            assert_eq!(t1, t2, "tensor {n1} differs under row duplication");
        }
    }

    #[test]
    fn training_forward_loss_matches_sequence_loss() {
        let cfg = tiny_config();
        let model = init_model(&cfg, 5).unwrap();
        let row = vec![4u32, 1, 6, 0, 2, 7, 3, 5];
        let from_trainer = batch_loss_f64(&model, &[row.clone()]).unwrap();
        let s0 = zero_state(&cfg).unwrap();
        let from_eval = sequence_loss(&model, &s0, &row).unwrap();
        assert!(
            (from_trainer - from_eval).abs() < 1e-5,
            "{from_trainer} vs {from_eval}"
        );
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        // lr = 0 is rejected by validate; emulate the sanity check by an
        // Adam update with zero gradients, which must be a no-op too
        let cfg = tiny_config();
        let mut model = init_model(&cfg, 0).unwrap();
        let before = snapshot_tensors(&model);
        let grads = Gradients::<f32>::zeros(&cfg);
        let mut adam = Adam::new(&cfg);
        adam.update(&mut model, &grads, &TrainConfig::default());
        assert_eq!(before, snapshot_tensors(&model));
    }

    #[test]
    fn short_training_run_reduces_loss_and_is_deterministic() {
        let cfg = ModelConfig {
            vocab_size: 256,
            embed_dim: 16,
            state_dim: 4,
            num_layers: 2,
            conv_width: 4,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig {
            steps: 60,
            batch: 8,
            seq_len: 32,
            lr: 3e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let tasks = vec![make_task(TaskKind::Bijection, 0)];
        let corpus: Vec<Vec<u32>> =
            crate::tasks::make_sequential_corpus(crate::tasks::CorpusSource::Synthetic, 7, 8, 20)
                .unwrap()
                .into_iter()
                .map(|t| t.concat())
                .collect();
        let (m1, log1) = train(&cfg, &tcfg, &tasks, &corpus).unwrap();
        assert!(
            log1.last().unwrap().loss < log1[0].loss,
            "loss must go down"
        );
        let (m2, log2) = train(&cfg, &tcfg, &tasks, &corpus).unwrap();
        assert_eq!(log1, log2, "same seeds must give identical metrics");
        assert_eq!(snapshot_tensors(&m1), snapshot_tensors(&m2));
    }

    #[test]
    fn train_rejects_bad_setups() {
        let cfg = tiny_config();
        let bad = TrainConfig {
            mixture: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let ok = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&cfg, &ok, &[], &[]),
            Err(TrainError::Invalid(_))
        ));
    }

    fn snapshot_tensors(m: &ModelParams) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        m.for_each_tensor(|_, t| out.push(t.to_vec()));
        out
    }

    #[test]
    #[ignore = "timing probe, run explicitly"]
    fn bench_primitives() {
        use crate::kernels::Mat;
        use std::time::Instant;
        let d = 64usize;
        let reps = 200_000u32;
        let m = Mat::from_rows(d, d, (0..d * d).map(|i| (i as f32 * 0.01).sin()).collect());
        let x: Vec<f32> = (0..d).map(|i| (i as f32 * 0.1).cos()).collect();
        let mut y = vec![0.0f32; d];
        let t0 = Instant::now();
        for _ in 0..reps {
            m.matvec(&x, &mut y);
            std::hint::black_box(&y);
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!(
            "Mat::matvec 64x64: {:.1} ns/call = {:.1} GFLOP/s",
            dt / reps as f64 * 1e9,
            (reps as f64 * (d * d * 2) as f64) / dt / 1e9
        );

        let mut a = vec![0.0f32; 16 * 64];
        let dt_vec: Vec<f32> = (0..64).map(|i| 0.01 + 0.001 * i as f32).collect();
        let t0 = Instant::now();
        for _ in 0..reps / 10 {
            for nn in 0..16 {
                let r = 0.05f32 * (nn + 1) as f32;
                let row = &mut a[nn * 64..(nn + 1) * 64];
                for i in 0..64 {
                    row[i] = (-(dt_vec[i] * r)).kernel_exp();
                }
            }
            std::hint::black_box(&a);
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!(
            "A-exp 16x64: {:.2} ns/elem",
            dt / (reps as f64 / 10.0 * 1024.0) * 1e9
        );

        let mut c: Vec<f32> = (0..64).map(|i| 0.3 * (i as f32 * 0.7).sin()).collect();
        let mut sig = vec![0.0f32; 64];
        let t0 = Instant::now();
        for _ in 0..reps {
            for i in 0..64 {
                let s = c[i].kernel_sigmoid();
                sig[i] = s;
                c[i] = c[i] * s * 0.999 + 1e-6;
            }
            std::hint::black_box(&sig);
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!(
            "kernel_sigmoid: {:.2} ns/elem",
            dt / (reps as f64 * 64.0) * 1e9
        );

        let mut logits: Vec<f32> = (0..256).map(|i| (i as f32 * 0.21).sin() * 3.0).collect();
        let t0 = Instant::now();
        for _ in 0..reps / 4 {
            let lp = crate::kernels::softmax_and_logprob(&mut logits, 17);
            for (i, v) in logits.iter_mut().enumerate() {
                *v = (*v + (i as f32 * 0.21).sin()) * 2.0 + lp as f32 * 1e-9;
            }
            std::hint::black_box(&logits);
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!(
            "softmax_and_logprob(256): {:.1} ns/call",
            dt / (reps as f64 / 4.0) * 1e9
        );

        // one full layer_forward
        let cfg = ModelConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        let rates: Vec<Vec<f32>> = model
            .layers
            .iter()
            .map(crate::model::engine::layer_rates)
            .collect();
        let mut wk = crate::model::engine::LayerWork::<f32>::new(64, 16);
        let mut ssm = vec![0.0f32; 16 * 64];
        let mut convb = vec![0.0f32; 4 * 64];
        let mut h: Vec<f32> = (0..64).map(|i| 0.1 * (i as f32).sin()).collect();
        let t0 = Instant::now();
        for _ in 0..reps / 2 {
            let mut view = crate::model::engine::LayerStateMut {
                ssm: &mut ssm,
                conv: &mut convb,
                log_decay: None,
            };
            crate::model::engine::layer_forward(
                &model.layers[0],
                &rates[0],
                &mut view,
                &mut h,
                &mut wk,
            );
            for v in h.iter_mut() {
                *v *= 0.5;
            }
            std::hint::black_box(&h);
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!(
            "layer_forward: {:.2} us/call (x4 layers = {:.1} us/token)",
            dt / (reps as f64 / 2.0) * 1e6,
            dt / (reps as f64 / 2.0) * 4e6
        );
    }

    #[test]
    #[ignore = "timing probe, run explicitly"]
    fn bench_forward_backward_split() {
        let cfg = ModelConfig::default();
        let tcfg = TrainConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<u32>> = (0..tcfg.batch)
            .map(|_| {
                (0..tcfg.seq_len)
                    .map(|_| rng.gen_range(0..256u32))
                    .collect()
            })
            .collect();
        let rates: Vec<Vec<f32>> = model
            .layers
            .iter()
            .map(crate::model::engine::layer_rates)
            .collect();
        let steps = rows[0].len() - 1;
        let mut tape = Tape::<f32>::new(&cfg, steps);
        let mut scratch = BackwardScratch::<f32>::new(&cfg);
        let mut ssm = state_bufs::<f32>(&cfg);
        let mut conv = conv_bufs::<f32>(&cfg);
        let mut logits = Vec::new();
        // warmup
        for row in &rows[..4] {
            let _ = forward_row(
                &model,
                &rates,
                row,
                &mut tape,
                &mut ssm,
                &mut conv,
                &mut logits,
            );
        }
        let t0 = std::time::Instant::now();
        for row in &rows {
            let _ = forward_row(
                &model,
                &rates,
                row,
                &mut tape,
                &mut ssm,
                &mut conv,
                &mut logits,
            );
        }
        let fwd = t0.elapsed().as_secs_f64();
        let mut grads = Gradients::<f32>::zeros(&cfg);
        let t0 = std::time::Instant::now();
        for row in &rows {
            backward_row(&model, &rates, row, &tape, &mut scratch, &mut grads);
        }
        let bwd = t0.elapsed().as_secs_f64();
        eprintln!(
            "single-core: forward {:.1} ms/batch, backward {:.1} ms/batch",
            fwd * 1e3,
            bwd * 1e3
        );
        eprintln!(
            "per token: fwd {:.2} us, bwd {:.2} us",
            fwd / 32.0 / 127.0 * 1e6,
            bwd / 32.0 / 127.0 * 1e6
        );
    }

    #[test]
    #[ignore = "timing probe, run explicitly"]
    fn bench_default_training_step() {
        let cfg = ModelConfig::default();
        let tcfg = TrainConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<u32>> = (0..tcfg.batch)
            .map(|_| {
                (0..tcfg.seq_len)
                    .map(|_| rng.gen_range(0..256u32))
                    .collect()
            })
            .collect();
        // warmup
        let _ = compute_gradients(&model, &rows).unwrap();
        let t0 = std::time::Instant::now();
        let n = 20;
        for _ in 0..n {
            let _ = compute_gradients(&model, &rows).unwrap();
        }
        let per_step = t0.elapsed().as_secs_f64() / n as f64;
        eprintln!(
            "compute_gradients: {:.1} ms/step -> {:.1} min for 20k steps",
            per_step * 1e3,
            per_step * 20_000.0 / 60.0
        );
    }
}
