use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_gaussian_blobs, load_csv, partition_iid, partition_label_skew, Dataset,
    MinMaxScaler, Partition,
};
use crate::error::{Error, Result};
use crate::ledger::DEFAULT_BYTES_PER_ELEMENT;
use crate::metrics::DEFAULT_PROBE_SIZE;
use crate::model::{AuxHeadKind, SplitModelSpec};
use crate::nn::LayerSpec;
use crate::protocol::{AggregationPeriod, Arrival, SimConfig, Strategy, UploadTrigger};
use crate::rng;

/// Environment variable that replaces the seed list with a single seed.
pub const ENV_SEED: &str = "FSLSIM_SEED";
/// Environment variable that replaces the output directory.
pub const ENV_OUT: &str = "FSLSIM_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic Gaussian blobs; train and test are drawn from independent
    /// substreams of the run seed.
    Blobs {
        n_train: usize,
        n_test: usize,
        classes: usize,
        dim: usize,
        sep: f64,
    },
    /// IDX image/label files; features are min-max scaled with statistics
    /// fitted on the training images.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// CSV files with a header row and the label in the last column.
    Csv { train: PathBuf, test: PathBuf },
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if let DatasetConfig::Blobs {
            n_train,
            n_test,
            classes,
            dim,
            sep,
        } = *self
        {
            for (name, v) in [("n_train", n_train), ("n_test", n_test), ("classes", classes), ("dim", dim)] {
                if v == 0 {
                    return Err(Error::config(format!("dataset.{name}"), "must be positive"));
                }
            }
            if !(sep > 0.0 && sep.is_finite()) {
                return Err(Error::config("dataset.sep", "must be positive"));
            }
        }
        Ok(())
    }

    /// `(train, test)`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Blobs {
                n_train,
                n_test,
                classes,
                dim,
                sep,
            } => Ok((
                gen_gaussian_blobs(*n_train, *classes, *dim, *sep, rng::derive_seed(seed, rng::DATA, &[0]))?,
                gen_gaussian_blobs(*n_test, *classes, *dim, *sep, rng::derive_seed(seed, rng::DATA, &[1]))?,
            )),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                use crate::data::idx::{dataset_from_idx, read_idx};
                let train = dataset_from_idx(&read_idx(train_images)?, &read_idx(train_labels)?)?;
                let test = dataset_from_idx(&read_idx(test_images)?, &read_idx(test_labels)?)?;
                let scaler = MinMaxScaler::fit(&train);
                let classes = train.num_classes().max(test.num_classes());
                Ok((
                    with_classes(scaler.apply(&train), classes)?,
                    with_classes(scaler.apply(&test), classes)?,
                ))
            }
            DatasetConfig::Csv { train, test } => {
                let (train, test) = (load_csv(train)?, load_csv(test)?);
                let classes = train.num_classes().max(test.num_classes());
                Ok((with_classes(train, classes)?, with_classes(test, classes)?))
            }
        }
    }
}

fn with_classes(ds: Dataset, classes: usize) -> Result<Dataset> {
    Dataset::new(ds.inputs().clone(), ds.labels().to_vec(), classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_shape: Vec<usize>,
    pub client_stack: Vec<LayerSpec>,
    /// Explicit auxiliary head layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_head: Option<Vec<LayerSpec>>,
    /// Generated auxiliary head; exclusive with `aux_head`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<AuxHeadKind>,
    pub server_stack: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn to_spec(&self) -> Result<SplitModelSpec> {
        let mut spec = SplitModelSpec {
            input_shape: self.input_shape.clone(),
            client_stack: self.client_stack.clone(),
            aux_head: self.aux_head.clone(),
            server_stack: self.server_stack.clone(),
            num_classes: self.num_classes,
        };
        match (&self.aux_head, &self.aux) {
            (Some(_), Some(_)) => {
                return Err(Error::config("model.aux", "give either `aux_head` or `aux`, not both"))
            }
            (None, Some(kind)) => {
                let cut = spec.cut_shape().map_err(|e| prefix(e, "model"))?;
                spec.aux_head = Some(kind.layers(&cut, self.num_classes).map_err(|e| prefix(e, "model"))?);
            }
            _ => {}
        }
        Ok(spec)
    }
}

impl From<&SplitModelSpec> for ModelConfig {
    fn from(spec: &SplitModelSpec) -> Self {
        Self {
            input_shape: spec.input_shape.clone(),
            client_stack: spec.client_stack.clone(),
            aux_head: spec.aux_head.clone(),
            aux: None,
            server_stack: spec.server_stack.clone(),
            num_classes: spec.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Iid,
    LabelSkew { classes_per_client: usize },
}

impl PartitionConfig {
    pub fn apply(&self, ds: &Dataset, n_clients: usize, seed: u64) -> Result<Partition> {
        match *self {
            PartitionConfig::Iid => partition_iid(ds, n_clients, seed),
            PartitionConfig::LabelSkew { classes_per_client } => {
                partition_label_skew(ds, n_clients, classes_per_client, seed)
            }
        }
    }
}

fn default_fraction() -> f64 {
    1.0
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_bpe() -> usize {
    DEFAULT_BYTES_PER_ELEMENT
}
fn default_probe() -> usize {
    DEFAULT_PROBE_SIZE
}
fn default_threads() -> usize {
    1
}
fn default_partition() -> PartitionConfig {
    PartitionConfig::Iid
}

/// One experiment: a dataset, a split model, a strategy, and the training
/// schedule, run once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub strategy: Strategy,
    #[serde(default)]
    pub aggregation: AggregationPeriod,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_partition")]
    pub partition: PartitionConfig,
    pub n_clients: usize,
    pub batch_size: usize,
    pub eta0: f64,
    pub rounds: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default = "default_bpe")]
    pub bytes_per_element: usize,
    #[serde(default)]
    pub arrival: Arrival,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    #[serde(default)]
    pub upload_trigger: UploadTrigger,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn prefix(err: Error, p: &str) -> Error {
    match err {
        Error::Config { path, msg } => Error::config(format!("{p}.{path}"), msg),
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses and validates; field paths point at the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let path = if path == "." { "<root>".to_string() } else { path };
            Error::config(path, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("<file>", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field checks, all before any compute.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let spec = self.model.to_spec()?;
        spec.validate().map_err(|e| prefix(e, "model"))?;
        if self.strategy.kind.uses_aux() && spec.aux_head.is_none() {
            return Err(Error::config(
                "model.aux_head",
                format!("strategy {} requires an auxiliary head", self.strategy.kind),
            ));
        }
        if let DatasetConfig::Blobs { classes, dim, .. } = self.dataset {
            if self.model.input_shape != [dim] {
                return Err(Error::config(
                    "model.input_shape",
                    format!("blobs have dim {dim}, model expects {:?}", self.model.input_shape),
                ));
            }
            if self.model.num_classes != classes {
                return Err(Error::config(
                    "model.num_classes",
                    format!("blobs have {classes} classes"),
                ));
            }
        }
        if let PartitionConfig::LabelSkew { classes_per_client: 0 } = self.partition {
            return Err(Error::config("partition.classes_per_client", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.probe_size == 0 {
            return Err(Error::config("probe_size", "must be at least 1"));
        }
        self.sim_config(0).validate()
    }

    /// Applies seed and output-directory overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        self
    }

    /// Reads [`ENV_SEED`] and [`ENV_OUT`].
    pub fn with_env_overrides(self) -> Result<Self> {
        let seed = match std::env::var(ENV_SEED) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                Error::config(ENV_SEED, format!("not an unsigned integer: `{v}`"))
            })?),
            Err(_) => None,
        };
        let out = std::env::var_os(ENV_OUT).map(PathBuf::from);
        Ok(self.with_overrides(seed, out))
    }

    pub fn spec(&self) -> Result<SplitModelSpec> {
        self.model.to_spec()
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            strategy: self.strategy,
            n_clients: self.n_clients,
            batch_size: self.batch_size,
            eta0: self.eta0,
            fraction: self.fraction,
            aggregation: self.aggregation,
            arrival: self.arrival,
            upload_trigger: self.upload_trigger,
            bytes_per_element: self.bytes_per_element,
            threads: self.threads,
            seed,
        }
    }

    /// The default desk-scale preset: separable blobs, five IID clients,
    /// CSE_FSL with `h = 1`.
    pub fn blobs_default() -> Self {
        let spec = SplitModelSpec::toy(8, 32, 3);
        Self {
            dataset: DatasetConfig::Blobs {
                n_train: 6000,
                n_test: 2000,
                classes: 3,
                dim: 8,
                sep: 10.0,
            },
            model: ModelConfig::from(&spec),
            strategy: Strategy::cse_fsl(1),
            aggregation: AggregationPeriod::Epochs(1),
            fraction: 1.0,
            partition: PartitionConfig::Iid,
            n_clients: 5,
            batch_size: 32,
            eta0: 0.1,
            rounds: 100,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: default_out(),
            bytes_per_element: DEFAULT_BYTES_PER_ELEMENT,
            arrival: Arrival::ClientOrder,
            probe_size: DEFAULT_PROBE_SIZE,
            upload_trigger: UploadTrigger::WindowEnd,
            threads: 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::StrategyKind;

    fn err_path(json: &str) -> String {
        match ExperimentConfig::from_json(json) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    fn with(f: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v = serde_json::to_value(ExperimentConfig::blobs_default()).unwrap();
        f(&mut v);
        v.to_string()
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::blobs_default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        let j = with(|v| v["strategy"]["hh"] = 3.into());
        assert_eq!(err_path(&j), "strategy.hh");
        let j = with(|v| v["bogus"] = 1.into());
        assert_eq!(err_path(&j), "bogus");
    }

    #[test]
    fn cross_field_errors_name_fields() {
        assert_eq!(err_path(&with(|v| v["strategy"]["h"] = 0.into())), "strategy.h");
        assert_eq!(err_path(&with(|v| v["fraction"] = 1.5.into())), "fraction");
        assert_eq!(err_path(&with(|v| v["fraction"] = 0.0.into())), "fraction");
        assert_eq!(
            err_path(&with(|v| v["model"].as_object_mut().unwrap().remove("aux_head").map(|_| ()).unwrap())),
            "model.aux_head"
        );
        assert_eq!(err_path(&with(|v| v["dataset"]["dim"] = 4.into())), "model.input_shape");
        assert_eq!(err_path(&with(|v| v["n_clients"] = "five".into())), "n_clients");
    }

    #[test]
    fn generated_aux_head() {
        let j = with(|v| {
            let m = v["model"].as_object_mut().unwrap();
            m.remove("aux_head");
            m.insert("aux".into(), serde_json::json!({"kind": "mlp", "hidden": [4]}));
        });
        let cfg = ExperimentConfig::from_json(&j).unwrap();
        let spec = cfg.spec().unwrap();
        assert_eq!(spec.aux_head.as_ref().unwrap().len(), 3);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::blobs_default().with_overrides(Some(9), Some("x".into()));
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.output_dir, PathBuf::from("x"));
        let mut oc = ExperimentConfig::blobs_default();
        oc.strategy = Strategy::new(StrategyKind::FslOc);
        oc.validate().unwrap();
    }
}
