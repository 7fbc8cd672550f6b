//! Training orchestration: the two stages and their joint alternative,
//! checkpoint files, and the multi-seed experiment protocols.

pub mod checkpoint;
pub mod protocol;
pub mod stages;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use protocol::{
    run_protocol, run_protocol_resumable, Protocol, KSHOT_GRID, LAMBDA_GRID, PROTOCOL_SEEDS,
    RETRIEVAL_KS,
};
pub use stages::{
    classification_batch_graph, evaluate_retrieval, evaluate_view_accuracy, fit, init_aggregator,
    mean_reward, retrieval_batch_graph, reward_unit_graph, train_aggregator, train_joint,
    train_stage1, train_stage1_with_kind, train_stage2, unit_seed, AggregatorHandle, ClassItem,
    Stage1Output, Stage2Output,
};
