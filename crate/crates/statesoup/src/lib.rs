//! statesoup: a desk-scale gated-linear recurrent language model whose
//! internal states are first-class values.
//!
//! States can be snapshotted mid-sequence, persisted in a skill library,
//! retrieved by cosine similarity, and linearly combined (mean, weighted
//! mean, or decay-weighted sequential combination). The crate ships the
//! model core, a from-scratch trainer, synthetic in-context-learning tasks,
//! and the experiment runners behind the `statesoup` CLI.

pub mod cli;
pub mod exp;
pub mod io;
pub mod kernels;
pub mod mix;
pub mod model;
pub mod scalar;
pub mod store;
pub mod tasks;
pub mod train;

pub use mix::{
    a_decay_combine, mean_mix, mix_with_recipe, weighted_mix, MixError, MixRecipe, MixStrategy,
};
pub use model::{
    forward_step, init_model, layer_step, process_sequence, sequence_loss, zero_state, LayerParams,
    LayerState, ModelConfig, ModelError, ModelParams, SnapshotMeta, StateSnapshot, TokenModel,
};
pub use store::{
    cosine_similarity, default_retrieval_layer, export_states_csv, flatten_state, load_library,
    retrieve_nearest, save_library, RetrievalQuery, SkillLibrary, StateKind, StoreError,
};
pub use tasks::{
    eval_icl_accuracy, make_sequential_corpus, make_task, make_task_set, sample_demonstrations,
    CorpusSource, Demonstration, TaskError, TaskKind, TaskSpec, ARROW_TOKEN, NEWLINE_TOKEN,
};
pub use train::{
    batch_loss_f64, compute_gradients, compute_gradients_f64, train, Gradients, StepMetrics,
    TrainConfig, TrainError,
};
