//! Convolutional relay-selection classifiers built on a small
//! reverse-mode engine.

mod adam;
pub mod arch;
mod gemm;
pub mod graph;
pub mod loss;
pub mod model;
pub mod train;

#[cfg(test)]
mod gradcheck;

pub use adam::Adam;
pub use arch::{
    make_rel_net, make_sc_net, make_skin_net, make_student, ArchSpec, BlockKind, ConvNetSpec, Head, Layer,
    STUDENT_NODES,
};
pub use graph::{BnStats, Graph, Tape};
pub use loss::{ce_loss, distill_loss, kld_loss, softmax_columns, LogitShape};
pub use model::{param_count, Mode, Model};
pub use train::{evaluate, train, train_examples, EpochRecord, Examples, LossKind, TrainConfig, TrainHistory};
