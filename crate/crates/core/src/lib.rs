//! Deterministic federated split learning simulator.
//!
//! Implements a split model (client-side stack, optional auxiliary head,
//! server-side stack) trained under four strategies:
//!
//! - `FSL_MC`: one server-side copy per client, gradients sent back to clients.
//! - `FSL_OC`: a single clipped server-side model, gradients sent back.
//! - `FSL_AN`: auxiliary-head local loss on clients, one server copy per client.
//! - `CSE_FSL`: auxiliary-head local loss, a single sequentially updated
//!   server-side model, and smashed-data uploads only every `h` batches.
//!
//! Every message is metered by the [`ledger`] and the convergence monitors in
//! [`metrics`] track learning-rate-weighted gradient norms.

pub mod data;
pub mod error;
pub mod experiment;
pub mod ledger;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use ledger::{CommLedger, EpochLoad, MessageSizes};
pub use model::SplitModelSpec;
pub use nn::{LayerSpec, LrSchedule};
pub use protocol::{Message, Strategy, StrategyKind};
pub use tensor::{ParamSet, Tensor};
