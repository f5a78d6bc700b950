//! Toy grouped-query-attention decoder used to produce activation streams
//! and to measure perplexity under compressed key/value projections.

mod config;
mod corpus;
mod dump;
mod forward;
mod train;
mod weights;

pub use config::{group_map, ModelConfig};
pub use corpus::{read_corpus, split_sequences, write_corpus, MarkovSpec};
pub use dump::dump_activations;
pub use forward::{CompressedOverride, LayerTrace, Model, Trace};
pub use train::{loss_and_grad, train, TrainConfig, TrainLog};
pub use weights::{
    load_checkpoint, save_checkpoint, LayerWeights, ModelWeights, CHECKPOINT_MAGIC, INIT_STD,
};
