//! Few-shot flaky test classification.
//!
//! The pipeline runs in stages:
//!
//! 1. [`dataset`] loads labeled tests from CSV and produces stratified splits.
//! 2. [`augment`] grows a training partition with lexically mutated variants.
//! 3. [`embed`] turns test sources into fixed-dimension vectors through a
//!    pluggable provider (a pre-computed JSON-lines store or an HTTP encoder).
//! 4. [`siamese`] trains a shared-weight MLP head with triplet loss and SGD.
//! 5. [`evaluate`] classifies by nearest class centroid in the learned space and
//!    reports precision, recall, F1 and a confusion matrix.

#![forbid(unsafe_code)]

pub mod augment;
pub mod dataset;
pub mod embed;
pub mod evaluate;
pub mod siamese;

pub use augment::{
    augment_dataset, lex, mutate, AugmentedDataset, CodeToken, MutationOp, TokenKind,
};
pub use dataset::{
    filter_min_category_support, load_dataset, stratified_split, Dataset, FlakyTest, Label,
    SplitSpec, Taxonomy,
};
pub use embed::{
    chunk, embed_test, load_store, remote_embed, ChunkSpec, EmbeddingProvider, EmbeddingStore,
    EmbeddingVector,
};
pub use evaluate::{
    build_centroids, evaluate_model, predict, prepare_partitions, run_experiment, score,
    AugmentTarget, Augmentation, CentroidIndex, EmbeddingSource, EvalReport, ExperimentConfig,
    ExperimentError, ExperimentReport,
};
pub use siamese::{
    backward, forward, init_model, sample_triplets, train, triplet_loss, SiameseModel, TrainConfig,
    TrainLog, Triplet,
};
