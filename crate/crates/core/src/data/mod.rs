//! Datasets, synthetic generators, file loaders, and client partitioning.

mod dataset;
pub mod idx;
pub mod partition;

pub use dataset::{gen_gaussian_blobs, load_csv, Dataset};
pub use idx::{load_idx, MinMaxScaler};
pub use partition::{
    batches, batches_per_epoch, label_entropy, partition_iid, partition_label_skew, BatchPlan,
    Partition,
};
