//! Client and server state machines, typed messages and the round driver.

pub mod client;
pub mod message;
pub mod server;
pub mod sim;
pub mod strategy;

pub use client::{
    client_forward_baseline, client_local_window, client_step_baseline, ClientState, LocalWindow,
    UploadTrigger,
};
pub use message::{ClientModelUpload, Direction, GradDown, Message, MessageKind, SmashedUpload};
pub use server::{mean_params, Ingest, ServerState};
pub use sim::{sample_participants, AggregationPeriod, Arrival, RoundReport, SimConfig, Simulator};
pub use strategy::{Strategy, StrategyKind, DEFAULT_CLIP_THRESHOLD};
