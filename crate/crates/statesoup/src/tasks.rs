//! Synthetic in-context-learning tasks and the chunked sequential corpus.
//!
//! A task is a seeded bijection between a question-token set and an
//! answer-token set, with examples formatted as `<q> ARROW <a> NEWLINE`.
//! Mappings live in one global family of cyclic token shifts: question q
//! answers (q + s) mod 254, with s drawn from a fixed 16-member shift set.
//! Training streams resample a fresh family member per sequence, so a model
//! can never predict an answer from weights alone: it must classify the
//! active shift from the examples in context. The shift is the task's
//! compact skill parameter.
//!
//! Randomized-label controls keep both token sets and their marginals but
//! draw each example's answer independently, so the demonstration pairing
//! carries no information about the task's own mapping.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::argmax;
use crate::model::{ModelError, StateSnapshot, TokenModel};

/// Reserved separator playing the role of "→".
pub const ARROW_TOKEN: u32 = 254;
/// Reserved separator playing the role of "\n".
pub const NEWLINE_TOKEN: u32 = 255;
/// Tokens usable as questions or answers: everything below the separators.
pub const TOKEN_POOL: u32 = 254;
/// Tokens per formatted example: question, arrow, answer, newline.
pub const TOKENS_PER_EXAMPLE: usize = 4;

/// The global bijection family: eight distinct cyclic shifts, fixed for the
/// artifact. Every task's own mapping and every training sequence uses a
/// member of this set; a demonstration identifies its member through the
/// token difference answer - question.
pub const FAMILY_SHIFTS: [u32; 8] = [19, 237, 83, 152, 47, 201, 11, 174];

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("need {need} examples but only {have} remain after exclusion")]
    InsufficientExamples { need: usize, have: usize },
    #[error("n_samples must be at least 1")]
    ZeroSamples,
    #[error("source has {len} tokens, need at least {need}")]
    SourceTooShort { len: usize, need: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Task flavors. The small variant mirrors datasets too small for the full
/// test-sample budget, so the "use all samples" branch gets exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// 64 question/answer pairs.
    Bijection,
    /// 48 question/answer pairs.
    SmallBijection,
}

impl TaskKind {
    pub fn pair_count(self) -> usize {
        match self {
            TaskKind::Bijection => 64,
            TaskKind::SmallBijection => 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    /// Ordered question tokens; the ordering defines each question's index.
    pub questions: Vec<u32>,
    /// Answer tokens in question order: answers[i] = (questions[i] + shift) mod 254.
    pub answers: Vec<u32>,
    /// The task's own family member: q maps to (q + shift) mod 254.
    pub shift: u32,
    /// Randomized-label control: answers are drawn independently per example.
    pub randomized: bool,
    pub seed: u64,
}

impl TaskSpec {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// The task's own mapping applied to question index `i`.
    pub fn answer_for_index(&self, i: usize) -> u32 {
        self.answers[i]
    }

    /// The family member `s` applied to a question token.
    pub fn family_answer(q: u32, s: u32) -> u32 {
        (q + s) % TOKEN_POOL
    }

    /// The mapping as an explicit (question, answer) table.
    pub fn mapping_pairs(&self) -> Vec<(u32, u32)> {
        (0..self.len())
            .map(|i| (self.questions[i], self.answer_for_index(i)))
            .collect()
    }

    /// Same token sets and orderings, but the pairing is re-randomized per
    /// sampled example.
    pub fn randomized_control(&self) -> TaskSpec {
        let mut t = self.clone();
        t.randomized = true;
        t.task_id = format!("{}-rand", self.task_id);
        t
    }

    /// Audit dump: task identity plus the full mapping table.
    pub fn to_audit_json(&self) -> String {
        let pairs: Vec<[u32; 2]> = self.mapping_pairs().iter().map(|&(q, a)| [q, a]).collect();
        serde_json::json!({
            "task_id": self.task_id,
            "kind": self.kind,
            "seed": self.seed,
            "randomized": self.randomized,
            "shift": self.shift,
            "pairs": pairs,
        })
        .to_string()
    }
}

/// Deterministically build a task from (kind, seed).
pub fn make_task(kind: TaskKind, seed: u64) -> TaskSpec {
    let n = kind.pair_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_736b);
    // sample n distinct question tokens from the pool
    let mut pool: Vec<u32> = (0..TOKEN_POOL).collect();
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let questions = pool[..n].to_vec();
    let shift = FAMILY_SHIFTS[rng.gen_range(0..FAMILY_SHIFTS.len())];
    let answers = questions.iter().map(|&q| TaskSpec::family_answer(q, shift)).collect();
    let prefix = match kind {
        TaskKind::Bijection => "bij64",
        TaskKind::SmallBijection => "bij48",
    };
    TaskSpec {
        task_id: format!("{prefix}-{seed}"),
        kind,
        questions,
        answers,
        shift,
        randomized: false,
        seed,
    }
}

/// Build a set of tasks with pairwise-distinct mappings and distinct
/// shifts, resampling seeds on collision.
pub fn make_task_set(kinds: &[TaskKind], base_seed: u64) -> Vec<TaskSpec> {
    let mut tasks: Vec<TaskSpec> = Vec::with_capacity(kinds.len());
    for (i, &kind) in kinds.iter().enumerate() {
        let mut seed = base_seed.wrapping_add(i as u64);
        loop {
            let t = make_task(kind, seed);
            if tasks
                .iter()
                .all(|u| u.shift != t.shift && u.mapping_pairs() != t.mapping_pairs())
            {
                tasks.push(t);
                break;
            }
            seed = seed.wrapping_add(kinds.len() as u64);
        }
    }
    tasks
}

/// A formatted k-shot demonstration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub tokens: Vec<u32>,
    pub k: usize,
    /// Question indices used, for disjointness bookkeeping.
    pub example_ids: Vec<usize>,
}

/// Sample a k-shot demonstration from the task's own mapping.
pub fn sample_demonstrations(
    task: &TaskSpec,
    k: usize,
    rng: &mut ChaCha8Rng,
    exclude: &HashSet<usize>,
) -> Result<Demonstration, TaskError> {
    sample_family_demonstration(task, k, None, rng, exclude)
}

/// Sample a k-shot demonstration from an explicit family member (`shift`),
/// falling back to the task's own member when `None`. Randomized controls
/// ignore the shift and draw answers independently.
pub fn sample_family_demonstration(
    task: &TaskSpec,
    k: usize,
    shift: Option<u32>,
    rng: &mut ChaCha8Rng,
    exclude: &HashSet<usize>,
) -> Result<Demonstration, TaskError> {
    let mut available: Vec<usize> = (0..task.len()).filter(|i| !exclude.contains(i)).collect();
    if k > available.len() {
        return Err(TaskError::InsufficientExamples {
            need: k,
            have: available.len(),
        });
    }
    for i in 0..k {
        let j = rng.gen_range(i..available.len());
        available.swap(i, j);
    }
    let ids: Vec<usize> = available[..k].to_vec();
    let shift = shift.unwrap_or(task.shift);
    let n = task.answers.len();
    let mut tokens = Vec::with_capacity(TOKENS_PER_EXAMPLE * k);
    for &i in &ids {
        let answer = if task.randomized {
            task.answers[rng.gen_range(0..n)]
        } else {
            TaskSpec::family_answer(task.questions[i], shift)
        };
        tokens.push(task.questions[i]);
        tokens.push(ARROW_TOKEN);
        tokens.push(answer);
        tokens.push(NEWLINE_TOKEN);
    }
    Ok(Demonstration {
        tokens,
        k,
        example_ids: ids,
    })
}

/// A training sequence: demonstrations of one fresh family member,
/// concatenated until `len` tokens. Forces in-context (not in-weights)
/// learning of the mapping.
pub fn icl_training_sequence(task: &TaskSpec, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let shift = FAMILY_SHIFTS[rng.gen_range(0..FAMILY_SHIFTS.len())];
    let max_k = task.len().min(32);
    let k = rng.gen_range(4.min(max_k)..=max_k);
    let exclude = HashSet::new();
    let mut out = Vec::with_capacity(len + TOKENS_PER_EXAMPLE * k);
    while out.len() < len {
        let demo = sample_family_demonstration(task, k, Some(shift), rng, &exclude)
            .expect("k <= task size");
        out.extend_from_slice(&demo.tokens);
    }
    out.truncate(len);
    out
}

/// Feed `[q, ARROW]` from `init` for each sampled test question; a query is
/// correct when the argmax logit after the arrow is the task's answer
/// (ties break to the lowest token id). Questions are drawn without
/// replacement from the non-excluded indices.
///
/// For randomized-label controls the target itself is a fresh random draw
/// from the answer set, mirroring how control demonstrations are sampled:
/// the pairing carries no information, so no model can beat chance.
pub fn eval_icl_accuracy<M: TokenModel + ?Sized>(
    model: &M,
    init: &StateSnapshot,
    task: &TaskSpec,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
    exclude: &HashSet<usize>,
) -> Result<f64, TaskError> {
    if n_samples == 0 {
        return Err(TaskError::ZeroSamples);
    }
    let mut available: Vec<usize> = (0..task.len()).filter(|i| !exclude.contains(i)).collect();
    if n_samples > available.len() {
        return Err(TaskError::InsufficientExamples {
            need: n_samples,
            have: available.len(),
        });
    }
    for i in 0..n_samples {
        let j = rng.gen_range(i..available.len());
        available.swap(i, j);
    }
    let mut correct = 0usize;
    for &qi in &available[..n_samples] {
        let target = if task.randomized {
            task.answers[rng.gen_range(0..task.answers.len())]
        } else {
            task.answer_for_index(qi)
        };
        let mut state = init.clone();
        model.step_state(&mut state, task.questions[qi])?;
        let logits = model.step_state(&mut state, ARROW_TOKEN)?;
        if argmax(&logits) as u32 == target {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_samples as f64)
}

/// Where sequential-corpus triples come from.
#[derive(Debug, Clone)]
pub enum CorpusSource<'a> {
    /// Per-sequence random order-2 Markov chains over a small alphabet, so
    /// each sequence's statistics are only learnable from its own context
    /// (both c1 and c2 carry predictive signal for c_test).
    Synthetic,
    /// Raw bytes of a text file; windows are sampled at seeded offsets.
    TextFile(&'a Path),
}

/// One (c1, c2, c_test) chunk triple.
pub type ChunkTriple = [Vec<u32>; 3];

const CORPUS_ALPHABET: usize = 16;
const CORPUS_NOISE: f64 = 0.1;

/// Build `n_sequences` triples of exactly `chunk_len` tokens each.
pub fn make_sequential_corpus(
    source: CorpusSource<'_>,
    seed: u64,
    n_sequences: usize,
    chunk_len: usize,
) -> Result<Vec<ChunkTriple>, TaskError> {
    let total = 3 * chunk_len;
    match source {
        CorpusSource::Synthetic => Ok((0..n_sequences)
            .map(|i| {
                let tokens = synthetic_sequence(seed, i as u64, total);
                split_triple(&tokens, chunk_len)
            })
            .collect()),
        CorpusSource::TextFile(path) => {
            let bytes = std::fs::read(path)?;
            if bytes.len() < total {
                return Err(TaskError::SourceTooShort {
                    len: bytes.len(),
                    need: total,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
            Ok((0..n_sequences)
                .map(|_| {
                    let start = rng.gen_range(0..=bytes.len() - total);
                    let tokens: Vec<u32> = bytes[start..start + total]
                        .iter()
                        .map(|&b| b as u32)
                        .collect();
                    split_triple(&tokens, chunk_len)
                })
                .collect())
        }
    }
}

fn split_triple(tokens: &[u32], chunk_len: usize) -> ChunkTriple {
    [
        tokens[..chunk_len].to_vec(),
        tokens[chunk_len..2 * chunk_len].to_vec(),
        tokens[2 * chunk_len..3 * chunk_len].to_vec(),
    ]
}

/// One sequence of the synthetic corpus: a fresh random alphabet and a fresh
/// mostly-deterministic order-2 transition table per sequence index.
fn synthetic_sequence(seed: u64, index: u64, len: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    // alphabet drawn from the non-separator pool
    let mut pool: Vec<u32> = (0..TOKEN_POOL).collect();
    for i in 0..CORPUS_ALPHABET {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let alphabet = &pool[..CORPUS_ALPHABET];
    let mut table = [[0u8; CORPUS_ALPHABET]; CORPUS_ALPHABET];
    for row in table.iter_mut() {
        for cell in row.iter_mut() {
            *cell = rng.gen_range(0..CORPUS_ALPHABET) as u8;
        }
    }
    let mut idx = Vec::with_capacity(len);
    idx.push(rng.gen_range(0..CORPUS_ALPHABET));
    idx.push(rng.gen_range(0..CORPUS_ALPHABET));
    while idx.len() < len {
        let a = idx[idx.len() - 2];
        let b = idx[idx.len() - 1];
        let next = if rng.gen::<f64>() < CORPUS_NOISE {
            rng.gen_range(0..CORPUS_ALPHABET)
        } else {
            table[a][b] as usize
        };
        idx.push(next);
    }
    idx.into_iter().map(|i| alphabet[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_task_is_deterministic() {
        let a = make_task(TaskKind::Bijection, 0);
        let b = make_task(TaskKind::Bijection, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert_eq!(make_task(TaskKind::SmallBijection, 0).len(), 48);
    }

    #[test]
    fn tasks_with_distinct_seeds_have_distinct_mappings() {
        let a = make_task(TaskKind::Bijection, 0);
        let b = make_task(TaskKind::Bijection, 1);
        assert_ne!(a.mapping_pairs(), b.mapping_pairs());
        let set = make_task_set(&[TaskKind::Bijection; 6], 0);
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                assert_ne!(set[i].mapping_pairs(), set[j].mapping_pairs());
            }
        }
    }

    #[test]
    fn mapping_is_bijective_and_avoids_separators() {
        for kind in [TaskKind::Bijection, TaskKind::SmallBijection] {
            let t = make_task(kind, 3);
            let qs: HashSet<u32> = t.questions.iter().copied().collect();
            assert_eq!(qs.len(), t.len());
            for &tok in t.questions.iter().chain(t.answers.iter()) {
                assert!(tok < TOKEN_POOL);
                assert_ne!(tok, ARROW_TOKEN);
                assert_ne!(tok, NEWLINE_TOKEN);
            }
            let mapped: HashSet<u32> = t.mapping_pairs().iter().map(|&(_, a)| a).collect();
            assert_eq!(mapped.len(), t.len(), "mapping must be bijective");
        }
    }

    #[test]
    fn one_shot_demo_has_expected_format() {
        let t = make_task(TaskKind::Bijection, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let demo = sample_demonstrations(&t, 1, &mut rng, &HashSet::new()).unwrap();
        assert_eq!(demo.tokens.len(), 4);
        let qi = demo.example_ids[0];
        assert_eq!(demo.tokens[0], t.questions[qi]);
        assert_eq!(demo.tokens[1], ARROW_TOKEN);
        assert_eq!(demo.tokens[2], t.answer_for_index(qi));
        assert_eq!(demo.tokens[3], NEWLINE_TOKEN);
    }

    #[test]
    fn thirty_two_shot_demo_has_distinct_questions() {
        let t = make_task(TaskKind::Bijection, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let demo = sample_demonstrations(&t, 32, &mut rng, &HashSet::new()).unwrap();
        assert_eq!(demo.tokens.len(), 128);
        let distinct: HashSet<usize> = demo.example_ids.iter().copied().collect();
        assert_eq!(distinct.len(), 32);
    }

    #[test]
    fn exclusion_is_respected_and_exhaustion_errors() {
        let t = make_task(TaskKind::Bijection, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let exclude: HashSet<usize> = (0..40).collect();
        let demo = sample_demonstrations(&t, 24, &mut rng, &exclude).unwrap();
        assert!(demo.example_ids.iter().all(|i| !exclude.contains(i)));

        let all: HashSet<usize> = (0..64).collect();
        assert!(matches!(
            sample_demonstrations(&t, 1, &mut rng, &all),
            Err(TaskError::InsufficientExamples { need: 1, have: 0 })
        ));
    }

    #[test]
    fn randomized_control_pairing_carries_no_mutual_information() {
        // empirical MI over the joint (question index, answer index)
        // distribution of sampled examples
        let t = make_task(TaskKind::Bijection, 6).randomized_control();
        let n = t.len();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = 40_000usize;
        let mut joint = vec![vec![0usize; n]; n];
        let mut drawn = 0usize;
        while drawn < samples {
            let demo = sample_demonstrations(&t, 16, &mut rng, &HashSet::new()).unwrap();
            for (slot, &qi) in demo.example_ids.iter().enumerate() {
                let answer = demo.tokens[4 * slot + 2];
                let ai = t.answers.iter().position(|&a| a == answer).unwrap();
                joint[qi][ai] += 1;
                drawn += 1;
            }
        }
        let total = drawn as f64;
        let mut mi = 0.0f64;
        let row_sums: Vec<f64> = joint
            .iter()
            .map(|r| r.iter().sum::<usize>() as f64)
            .collect();
        let mut col_sums = vec![0.0f64; n];
        for r in &joint {
            for (j, &c) in r.iter().enumerate() {
                col_sums[j] += c as f64;
            }
        }
        for (i, row) in joint.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let p = c as f64 / total;
                    mi += p * (p * total * total / (row_sums[i] * col_sums[j])).ln();
                }
            }
        }
        // independent sampling has MI 0; the plug-in estimator's bias is
        // about (n-1)^2 / (2 * samples) nats
        let bias = ((n - 1) * (n - 1)) as f64 / (2.0 * total);
        assert!(
            mi < bias * 2.0 + 0.02,
            "empirical MI {mi} too high (bias {bias})"
        );
        assert!(
            mi < 0.15,
            "MI must be near zero, a real mapping would give ln(64) = 4.16"
        );

        // control shares the base task's token sets
        let base = make_task(TaskKind::Bijection, 6);
        assert_eq!(t.questions, base.questions);
        assert_eq!(t.answers, base.answers);
        assert!(!base.randomized && t.randomized);
    }

    #[test]
    fn training_sequences_are_deterministic_and_well_formed() {
        let t = make_task(TaskKind::Bijection, 9);
        let a = icl_training_sequence(&t, 128, &mut ChaCha8Rng::seed_from_u64(3));
        let b = icl_training_sequence(&t, 128, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 128);
        // all examples in one sequence share a single family member
        let mut shift_seen: Option<u32> = None;
        for ex in a.chunks_exact(4) {
            assert_eq!(ex[1], ARROW_TOKEN);
            assert_eq!(ex[3], NEWLINE_TOKEN);
            assert!(t.questions.contains(&ex[0]));
            let s = (ex[2] + TOKEN_POOL - ex[0]) % TOKEN_POOL;
            match shift_seen {
                None => shift_seen = Some(s),
                Some(prev) => assert_eq!(prev, s, "family member changed mid-sequence"),
            }
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_shaped() {
        let a = make_sequential_corpus(CorpusSource::Synthetic, 0, 10, 100).unwrap();
        let b = make_sequential_corpus(CorpusSource::Synthetic, 0, 10, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for triple in &a {
            for chunk in triple {
                assert_eq!(chunk.len(), 100);
                assert!(chunk.iter().all(|&t| t < TOKEN_POOL));
            }
        }
        let c = make_sequential_corpus(CorpusSource::Synthetic, 1, 10, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn text_corpus_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.bin");
        std::fs::write(&path, vec![65u8; 299]).unwrap();
        assert!(matches!(
            make_sequential_corpus(CorpusSource::TextFile(&path), 0, 1, 100),
            Err(TaskError::SourceTooShort {
                len: 299,
                need: 300
            })
        ));
        std::fs::write(&path, (0..=255u8).cycle().take(600).collect::<Vec<u8>>()).unwrap();
        let triples = make_sequential_corpus(CorpusSource::TextFile(&path), 0, 5, 100).unwrap();
        assert_eq!(triples.len(), 5);
        assert!(triples.iter().all(|t| t.iter().all(|c| c.len() == 100)));
    }

    #[test]
    fn eval_accuracy_argument_checks() {
        let t = make_task(TaskKind::Bijection, 0);
        let cfg = crate::model::ModelConfig::default();
        let m = crate::model::init_model(&cfg, 0).unwrap();
        let s = crate::model::zero_state(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            eval_icl_accuracy(&m, &s, &t, 0, &mut rng, &HashSet::new()),
            Err(TaskError::ZeroSamples)
        ));
        let exclude: HashSet<usize> = (0..64).collect();
        assert!(matches!(
            eval_icl_accuracy(&m, &s, &t, 1, &mut rng, &exclude),
            Err(TaskError::InsufficientExamples { .. })
        ));
    }
}
