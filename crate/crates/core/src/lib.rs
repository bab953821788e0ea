//! Test-time adaptation with a learnable consistency loss.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod train;

pub use adapt::{AdaptConfig, Strategy};
pub use autodiff::{GradMap, Graph, Tensor, Var};
pub use data::{DomainSpec, DomainSuite};
pub use error::{Error, Result};
pub use harness::{ExperimentPlan, ResultTable};
pub use nn::{Arch, Checkpoint, Network};
pub use train::TrainConfig;
