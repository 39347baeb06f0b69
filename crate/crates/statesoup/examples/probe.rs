// Training-quality probe with its own optimizer loop: reports answer-token
// loss and held-out ICL accuracy along the way.
use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statesoup::tasks::{
    eval_icl_accuracy, icl_training_sequence, make_sequential_corpus, make_task_set,
    sample_demonstrations, CorpusSource, TaskKind, TaskSpec, ARROW_TOKEN,
};
use statesoup::train::{compute_gradients, Gradients};
use statesoup::{init_model, process_sequence, zero_state, ModelConfig, ModelParams};

struct MiniAdam {
    m: Gradients<f32>,
    v: Gradients<f32>,
    t: i32,
}

impl MiniAdam {
    fn update(&mut self, params: &mut ModelParams, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let lr = (lr * (1.0 - 0.999f64.powi(self.t)).sqrt() / (1.0 - 0.9f64.powi(self.t))) as f32;
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        let mut mv: Vec<_> = m.into_iter().zip(v).zip(g).collect();
        let mut idx = 0;
        params.for_each_tensor_mut(|_, w| {
            let (((_, m), (_, v)), (_, g)) = &mut mv[idx];
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

fn eval_k32(model: &ModelParams, task: &TaskSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc_sum = 0.0;
    let reps = 3;
    for _ in 0..reps {
        let demo = sample_demonstrations(task, 32, &mut rng, &HashSet::new()).unwrap();
        let zero = zero_state(&model.config).unwrap();
        let (state, _) = process_sequence(model, &zero, &demo.tokens, false).unwrap();
        let exclude: HashSet<usize> = demo.example_ids.iter().copied().collect();
        let n = task.len() - exclude.len();
        acc_sum += eval_icl_accuracy(model, &state, task, n, &mut rng, &exclude).unwrap();
    }
    acc_sum / reps as f64
}

/// Mean NLL at answer positions of a fresh k-shot stream.
fn answer_loss(model: &ModelParams, task: &TaskSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0;
    for _ in 0..4 {
        let seq = icl_training_sequence(task, 128, &mut rng);
        let zero = zero_state(&model.config).unwrap();
        let (_, logits) = process_sequence(model, &zero, &seq, false).unwrap();
        for t in 0..seq.len() - 1 {
            if seq[t] == ARROW_TOKEN {
                let lg = &logits[t];
                let mx = lg.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let z: f64 = lg.iter().map(|&v| (v as f64 - mx).exp()).sum();
                total -= lg[seq[t + 1] as usize] as f64 - mx - z.ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let fixed_shift = args.get(3).map(|s| s == "fixed").unwrap_or(false);
    let mixture = 0.7f64;

    let cfg = ModelConfig::default();
    let kinds = [
        TaskKind::Bijection,
        TaskKind::Bijection,
        TaskKind::Bijection,
        TaskKind::Bijection,
        TaskKind::Bijection,
        TaskKind::SmallBijection,
    ];
    let tasks = make_task_set(&kinds, 0);
    let corpus: Vec<Vec<u32>> = make_sequential_corpus(CorpusSource::Synthetic, 1000, 1000, 100)
        .unwrap()
        .into_iter()
        .map(|t| t.concat())
        .collect();

    let mut model = init_model(&cfg, 0).unwrap();
    let mut adam = MiniAdam {
        m: Gradients::zeros(&cfg),
        v: Gradients::zeros(&cfg),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let t0 = std::time::Instant::now();
    for step in 0..steps {
        let icl = rng.gen::<f64>() < mixture;
        let rows: Vec<Vec<u32>> = (0..32)
            .map(|_| {
                if icl {
                    let task = &tasks[rng.gen_range(0..tasks.len())];
                    if fixed_shift {
                        // in-weights learnability check: always the task's own mapping
                        let mut seq = Vec::new();
                        while seq.len() < 128 {
                            let d = sample_demonstrations(task, 16, &mut rng, &HashSet::new())
                                .unwrap();
                            seq.extend(d.tokens);
                        }
                        seq.truncate(128);
                        seq
                    } else {
                        icl_training_sequence(task, 128, &mut rng)
                    }
                } else {
                    let row = &corpus[rng.gen_range(0..corpus.len())];
                    let start = rng.gen_range(0..=row.len() - 128);
                    row[start..start + 128].to_vec()
                }
            })
            .collect();
        let (loss, mut grads) = compute_gradients(&model, &rows).unwrap();
        let norm = grads.global_norm();
        if norm > 1.0 {
            grads.scale((1.0 / norm) as f32);
        }
        adam.update(&mut model, &grads, lr);

        if step % 500 == 499 || step == 0 {
            let aloss = answer_loss(&model, &tasks[0], 5);
            let acc = eval_k32(&model, &tasks[0], 7);
            println!(
                "step {:5}  loss {:.4}  answer-loss {:.4}  k32-acc {:.3}  ({:.0} ms/step)",
                step + 1,
                loss,
                aloss,
                acc,
                t0.elapsed().as_secs_f64() * 1e3 / (step + 1) as f64
            );
        }
    }
    for t in &tasks {
        println!("  {}: k=32 held-out acc {:.3}", t.task_id, eval_k32(&model, t, 7));
    }
    let control = tasks[0].randomized_control();
    println!("  control: k=32 acc {:.3}", eval_k32(&model, &control, 7));
}
