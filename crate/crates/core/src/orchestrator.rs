//! The federated training loop.
//!
//! Each round selects clients, runs their local SGD, corrupts the uploads of
//! the faulty ones, aggregates with the configured rule and records what
//! happened. The `diversefl` rule routes sealed updates through the
//! [`Enclave`]; every other rule sees plaintext updates.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    draw_sample, draw_uniform, fraction_count, load_idx, partition_shards, partition_sorted, sample_indices, DataError,
    Dataset, PartitionMode, SyntheticSpec,
};
use crate::enclave::{
    decide, guiding_update, similarity, ClientChannel, Enclave, EnclaveError, FilterDecision, Thresholds,
};
use crate::faults::{flip_labels, ClientUpdate, FaultError, FaultKind, FaultSpec};
use crate::nn::{init_model, sgd_step, Model, ModelSpec, NnError, ParamVector};
use crate::robust_agg::{
    agg_bulyan, agg_fltrust, agg_mean, agg_median, agg_oracle, agg_resampling, detection_metrics, AggError,
};
use crate::seeding::{derive_seed, stream, Purpose};

/// Client id used for server-side random streams.
const SERVER: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid configuration:\n{0}")]
    Config(ConfigErrors),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Aggregation(#[from] AggError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("client {0} has no local data")]
    EmptyClient(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One offending configuration field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Every problem found in a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl ConfigErrors {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.to_string(),
            message: message.into(),
        });
    }

    pub fn fields(&self) -> Vec<&str> {
        self.0.iter().map(|e| e.field.as_str()).collect()
    }
}

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  {}: {}", e.field, e.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Mean,
    Oracle,
    Median,
    Bulyan,
    Resampling,
    Fltrust,
    Diversefl,
}

impl Rule {
    pub const ALL: [Rule; 7] = [
        Rule::Mean,
        Rule::Oracle,
        Rule::Median,
        Rule::Bulyan,
        Rule::Resampling,
        Rule::Fltrust,
        Rule::Diversefl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Rule::Mean => "mean",
            Rule::Oracle => "oracle",
            Rule::Median => "median",
            Rule::Bulyan => "bulyan",
            Rule::Resampling => "resampling",
            Rule::Fltrust => "fltrust",
            Rule::Diversefl => "diversefl",
        }
    }

    pub fn parse(name: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warmup {
    pub start: f64,
    pub end: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub round: usize,
    pub factor: f64,
}

/// Learning rate per round (rounds count from 1).
///
/// During warmup the rate moves linearly from `start` (round 1) to `end`
/// (round `rounds`). Afterwards it is `initial` times the factor of every
/// step whose round has been reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Warmup>,
    #[serde(default)]
    pub steps: Vec<LrStep>,
}

impl LrSchedule {
    pub fn constant(alpha: f64) -> Self {
        Self {
            initial: alpha,
            warmup: None,
            steps: Vec::new(),
        }
    }

    pub fn alpha(&self, round: usize) -> f64 {
        if let Some(w) = self.warmup {
            if round <= w.rounds {
                if w.rounds <= 1 {
                    return w.end;
                }
                let t = (round.max(1) - 1) as f64 / (w.rounds - 1) as f64;
                return w.start + (w.end - w.start) * t;
            }
        }
        self.steps
            .iter()
            .filter(|s| round >= s.round)
            .fold(self.initial, |a, s| a * s.factor)
    }

    fn validate(&self, errors: &mut ConfigErrors) {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            errors.push("lr.initial", "must be positive and finite");
        }
        if let Some(w) = self.warmup {
            if !(w.start > 0.0 && w.start.is_finite() && w.end > 0.0 && w.end.is_finite()) {
                errors.push("lr.warmup", "start and end must be positive and finite");
            }
            if w.rounds == 0 {
                errors.push("lr.warmup.rounds", "must be at least 1");
            }
        }
        for s in &self.steps {
            if !(s.factor > 0.0 && s.factor.is_finite()) || s.round == 0 {
                errors.push("lr.steps", "each step needs round >= 1 and a positive finite factor");
                break;
            }
        }
    }
}

fn default_true_mean_scale() -> f64 {
    1.0
}

fn default_one() -> usize {
    1
}

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        input_dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
        #[serde(default = "default_true_mean_scale")]
        mean_scale: f64,
        #[serde(default = "default_one")]
        modes_per_class: usize,
        /// Defaults to a value derived from the master seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
}

impl DatasetConfig {
    /// Training and test sets.
    pub fn load(&self, master_seed: u64) -> Result<(Dataset, Dataset), DataError> {
        match self {
            DatasetConfig::Synthetic {
                classes,
                input_dim,
                train_per_class,
                test_per_class,
                spread,
                mean_scale,
                modes_per_class,
                seed,
            } => SyntheticSpec {
                classes: *classes,
                input_dim: *input_dim,
                spread: *spread,
                mean_scale: *mean_scale,
                modes_per_class: *modes_per_class,
                seed: seed.unwrap_or_else(|| derive_seed(master_seed, SERVER, 0, Purpose::Partition)),
            }
            .generate_split(*train_per_class, *test_per_class),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                load_idx(train_images, train_labels)?,
                load_idx(test_images, test_labels)?,
            )),
            DatasetConfig::Csv { train, test, classes } => {
                let train = Dataset::read_csv(train, *classes)?;
                let classes = classes.unwrap_or(train.num_classes());
                let test = Dataset::read_csv(test, Some(classes))?;
                Ok((train, test))
            }
        }
    }

    fn validate(&self, errors: &mut ConfigErrors) {
        if let DatasetConfig::Synthetic {
            classes,
            input_dim,
            train_per_class,
            test_per_class,
            spread,
            mean_scale,
            modes_per_class,
            ..
        } = self
        {
            if *classes < 2 {
                errors.push("dataset.classes", "need at least 2 classes");
            }
            for (name, v) in [
                ("dataset.input_dim", input_dim),
                ("dataset.train_per_class", train_per_class),
                ("dataset.test_per_class", test_per_class),
                ("dataset.modes_per_class", modes_per_class),
            ] {
                if *v == 0 {
                    errors.push(name, "must be at least 1");
                }
            }
            if !(*spread >= 0.0 && spread.is_finite()) {
                errors.push("dataset.spread", "must be finite and non-negative");
            }
            if !(*mean_scale >= 0.0 && mean_scale.is_finite()) {
                errors.push("dataset.mean_scale", "must be finite and non-negative");
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

/// Fault type and the faulty clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FaultConfig {
    #[serde(flatten)]
    pub kind: FaultKind,
    /// Defaults to `f` clients drawn from the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faulty_ids: Option<BTreeSet<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<BTreeMap<usize, BTreeSet<usize>>>,
}

fn default_fraction() -> f64 {
    1.0
}

fn default_batch_fraction() -> f64 {
    0.10
}

fn default_sampling_rate() -> f64 {
    0.01
}

fn default_metrics_warmup() -> usize {
    50
}

fn default_resampling_group() -> usize {
    2
}

fn default_root_fraction() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of clients.
    pub n: usize,
    /// Number of faulty clients.
    pub f: usize,
    pub rounds: usize,
    #[serde(default = "default_one")]
    pub local_steps: usize,
    #[serde(default = "default_fraction")]
    pub client_fraction: f64,
    #[serde(default = "default_batch_fraction")]
    pub batch_fraction: f64,
    pub lr: LrSchedule,
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "default_sampling_rate")]
    pub sampling_rate: f64,
    pub rule: Rule,
    #[serde(default)]
    pub faults: FaultConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub dataset: DatasetConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
    pub model: ModelConfig,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub eval_stride: usize,
    /// Rounds excluded from the mean precision and recall.
    #[serde(default = "default_metrics_warmup")]
    pub metrics_warmup: usize,
    /// Record similarity values for rules other than `diversefl` as well.
    #[serde(default)]
    pub trace: bool,
    #[serde(default = "default_resampling_group")]
    pub resampling_group: usize,
    #[serde(default = "default_root_fraction")]
    pub root_fraction: f64,
}

fn default_partition() -> PartitionMode {
    PartitionMode::Sorted
}

impl ExperimentConfig {
    /// Checks every field, collecting all problems.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut e = ConfigErrors::default();
        if self.n == 0 {
            e.push("n", "must be at least 1");
        }
        if self.f > self.n {
            e.push("f", format!("f = {} exceeds n = {}", self.f, self.n));
        }
        if self.rounds == 0 {
            e.push("rounds", "must be at least 1");
        }
        if self.local_steps == 0 {
            e.push("local_steps", "must be at least 1");
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            e.push("client_fraction", "must be in (0, 1]");
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            e.push("batch_fraction", "must be in (0, 1]");
        }
        self.lr.validate(&mut e);
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            e.push("l2", "must be finite and non-negative");
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            e.push("sampling_rate", "must be in (0, 1]");
        }
        if let Err(err) = self.thresholds.validate() {
            e.push("thresholds", err.to_string());
        }
        if let Err(err) = self.faults.kind.validate() {
            e.push("faults.sigma", err.to_string());
        }
        if let Some(ids) = &self.faults.faulty_ids {
            if ids.len() != self.f {
                e.push(
                    "faults.faulty_ids",
                    format!("lists {} ids but f = {}", ids.len(), self.f),
                );
            }
            if ids.iter().any(|&id| id >= self.n) {
                e.push("faults.faulty_ids", format!("ids must be below n = {}", self.n));
            }
        }
        if let Some(s) = &self.faults.schedule {
            if s.values().flatten().any(|&id| id >= self.n) {
                e.push("faults.schedule", format!("ids must be below n = {}", self.n));
            }
        }
        self.dataset.validate(&mut e);
        if let PartitionMode::Shards { k: 0 } = self.partition {
            e.push("partition.k", "must be at least 1");
        }
        if self.model.hidden.contains(&0) {
            e.push("model.hidden", "layer widths must be positive");
        }
        if self.eval_stride == 0 {
            e.push("eval_stride", "must be at least 1");
        }
        let selected = fraction_count(self.client_fraction, self.n);
        match self.rule {
            Rule::Bulyan if selected < 4 * self.f + 3 => {
                e.push(
                    "rule",
                    format!(
                        "bulyan needs at least 4f + 3 = {} selected clients, got {selected}",
                        4 * self.f + 3
                    ),
                );
            }
            Rule::Resampling if self.resampling_group == 0 || self.resampling_group > selected => {
                e.push("resampling_group", format!("must be in 1..={selected}"));
            }
            Rule::Fltrust if !(self.root_fraction > 0.0 && self.root_fraction <= 1.0) => {
                e.push("root_fraction", "must be in (0, 1]");
            }
            _ => {}
        }
        if e.0.is_empty() {
            Ok(())
        } else {
            Err(e)
        }
    }

    /// The faulty set: `faults.faulty_ids` or `f` ids drawn from the seed.
    pub fn faulty_ids(&self) -> BTreeSet<usize> {
        if let Some(ids) = &self.faults.faulty_ids {
            return ids.clone();
        }
        let mut rng = stream(self.seed, SERVER, 0, Purpose::FaultySet);
        sample_indices(&mut rng, self.n, self.f).into_iter().collect()
    }

    pub fn fault_spec(&self) -> FaultSpec {
        FaultSpec {
            kind: self.faults.kind,
            faulty_ids: self.faulty_ids(),
            seed: self.seed,
            schedule: self.faults.schedule.clone(),
        }
    }
}

/// Sorted ids of `ceil(fraction * n)` clients drawn uniformly for `round`.
pub fn select_clients(n: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let count = fraction_count(fraction, n).max(1).min(n);
    if count == n {
        return (0..n).collect();
    }
    let mut rng = stream(seed, SERVER, round as u64, Purpose::Selection);
    let mut ids = sample_indices(&mut rng, n, count);
    ids.sort_unstable();
    ids
}

/// `theta_prev - theta_E` after `steps` minibatch SGD steps, each on
/// `ceil(batch_fraction * n)` examples drawn without replacement.
#[allow(clippy::too_many_arguments)]
pub fn local_train<R: Rng + ?Sized>(
    model: &dyn Model,
    theta_prev: &ParamVector,
    data: &Dataset,
    alpha: f64,
    steps: usize,
    batch_fraction: f64,
    l2: f64,
    rng: &mut R,
) -> Result<ParamVector, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let m = fraction_count(batch_fraction, data.len()).max(1);
    let mut theta = theta_prev.clone();
    for _ in 0..steps {
        let mut idx = sample_indices(rng, data.len(), m);
        idx.sort_unstable();
        let batch = data.subset(&idx);
        let g = model.loss_and_grad(&theta, batch.view(), l2)?;
        theta = sgd_step(&theta, &g.gradient, alpha)?;
    }
    Ok(theta_prev.sub(&theta))
}

/// Similarity values of one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientSimilarity {
    pub client_id: usize,
    pub c1: f64,
    pub c2: f64,
    pub passed: bool,
}

impl From<&FilterDecision> for ClientSimilarity {
    fn from(d: &FilterDecision) -> Self {
        Self {
            client_id: d.client_id,
            c1: d.c1,
            c2: d.c2,
            passed: d.passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub rule: Rule,
    pub alpha: f64,
    pub selected: Vec<usize>,
    /// Faulty clients among the selected ones.
    pub truth: BTreeSet<usize>,
    /// Clients the rule excluded; empty for rules without a notion of exclusion.
    pub flagged: BTreeSet<usize>,
    pub precision: f64,
    pub recall: f64,
    pub similarities: Vec<ClientSimilarity>,
    pub accuracy: Option<f64>,
    pub aggregate_norm: f64,
    pub anomaly: Option<String>,
    /// Seconds; excluded from CSV output so files stay reproducible.
    pub wall_time: f64,
}

/// Counts over one client's similarity trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientTrace {
    pub client_id: usize,
    pub faulty: bool,
    pub rounds: Vec<usize>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub c1_positive: usize,
    pub c2_in_band: usize,
    pub passed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rule: Rule,
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub metrics_warmup: usize,
    pub anomaly_rounds: Vec<usize>,
    pub faulty_ids: BTreeSet<usize>,
    pub traces: Vec<ClientTrace>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub final_model: ParamVector,
}

/// Layer sizes for a dataset of the given shape.
pub fn build_model_spec(config: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<ModelSpec, NnError> {
    let mut sizes = vec![input_dim];
    sizes.extend(&config.model.hidden);
    sizes.push(classes);
    let seed = config
        .model
        .init_seed
        .unwrap_or_else(|| derive_seed(config.seed, SERVER, 0, Purpose::LocalTraining));
    ModelSpec::new(sizes, seed)
}

/// Mutable state of a running experiment.
pub struct Simulation {
    config: ExperimentConfig,
    model: Arc<dyn Model>,
    faults: FaultSpec,
    clients: Vec<Dataset>,
    /// Label-flipped copies of local data, for label-flip runs.
    flipped: Vec<Option<Dataset>>,
    test: Dataset,
    theta: ParamVector,
    enclave: Option<Enclave>,
    channels: Vec<ClientChannel>,
    /// Plaintext samples, kept only to trace similarity for baseline rules.
    plain_samples: Vec<Option<Dataset>>,
    root: Option<Dataset>,
    round: usize,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("rule", &self.config.rule)
            .field("round", &self.round)
            .field("clients", &self.clients.len())
            .finish_non_exhaustive()
    }
}

impl Simulation {
    /// Loads the data and builds the classifier described by `config`.
    pub fn from_config(config: ExperimentConfig) -> Result<Self, OrchestratorError> {
        config.validate().map_err(OrchestratorError::Config)?;
        let (train, test) = config.dataset.load(config.seed)?;
        let spec = build_model_spec(&config, train.input_dim(), train.num_classes())?;
        let theta0 = init_model(&spec);
        Self::new(config, Arc::new(spec), theta0, train, test)
    }

    /// Partitions `train`, shares client samples and sets up the rule.
    pub fn new(
        config: ExperimentConfig,
        model: Arc<dyn Model>,
        theta0: ParamVector,
        train: Dataset,
        test: Dataset,
    ) -> Result<Self, OrchestratorError> {
        config.validate().map_err(OrchestratorError::Config)?;
        let plan = match config.partition {
            PartitionMode::Sorted => partition_sorted(&train, config.n)?,
            PartitionMode::Shards { k } => partition_shards(
                &train,
                config.n,
                k,
                derive_seed(config.seed, SERVER, 0, Purpose::Partition),
            )?,
        };
        let clients: Vec<Dataset> = plan.assignment.iter().map(|idx| train.subset(idx)).collect();
        if let Some(j) = clients.iter().position(Dataset::is_empty) {
            return Err(OrchestratorError::EmptyClient(j));
        }
        let faults = config.fault_spec();
        faults.validate(config.n)?;
        let flipped = clients
            .iter()
            .map(|c| faults.kind.corrupts_training().then(|| flip_labels(c)))
            .collect();

        let samples = clients
            .iter()
            .enumerate()
            .map(|(j, local)| {
                draw_sample(
                    j,
                    local,
                    config.sampling_rate,
                    derive_seed(config.seed, j as u64, 0, Purpose::Sample),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut enclave = None;
        let mut channels = Vec::new();
        let mut plain_samples = vec![None; config.n];
        if config.rule == Rule::Diversefl {
            let mut e = Enclave::new(
                model.clone(),
                theta0.clone(),
                config.l2,
                config.thresholds,
                derive_seed(config.seed, SERVER, 0, Purpose::ChannelKey),
            )?;
            for sample in &samples {
                let ch = e.establish_channel(sample.owner);
                let nonce = derive_seed(config.seed, sample.owner as u64, 0, Purpose::SealNonce);
                e.provision_sample(&ch.seal_sample(sample, nonce))?;
                channels.push(ch);
            }
            enclave = Some(e);
        } else if config.trace {
            plain_samples = samples.into_iter().map(|s| Some(s.data)).collect();
        }

        let root = if config.rule == Rule::Fltrust {
            Some(draw_uniform(
                &train,
                config.root_fraction,
                derive_seed(config.seed, SERVER, 0, Purpose::RootDataset),
            )?)
        } else {
            None
        };

        Ok(Self {
            config,
            model,
            faults,
            clients,
            flipped,
            test,
            theta: theta0,
            enclave,
            channels,
            plain_samples,
            root,
            round: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn global_model(&self) -> &ParamVector {
        &self.theta
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn faulty_ids(&self) -> &BTreeSet<usize> {
        &self.faults.faulty_ids
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Dataset::len).collect()
    }

    /// Top-1 accuracy of the current model on the test set.
    pub fn evaluate(&self) -> Result<f64, NnError> {
        self.model.evaluate(&self.theta, self.test.view())
    }

    fn client_update(&self, j: usize, round: usize, alpha: f64, faulty: bool) -> Result<ClientUpdate, NnError> {
        let cfg = &self.config;
        let data = match (&self.flipped[j], faulty) {
            (Some(flipped), true) => flipped,
            _ => &self.clients[j],
        };
        let mut rng: ChaCha8Rng = stream(cfg.seed, j as u64, round as u64, Purpose::LocalTraining);
        let honest = local_train(
            self.model.as_ref(),
            &self.theta,
            data,
            alpha,
            cfg.local_steps,
            cfg.batch_fraction,
            cfg.l2,
            &mut rng,
        )?;
        let payload = if faulty {
            let mut frng = stream(cfg.seed, j as u64, round as u64, Purpose::Fault);
            self.faults.kind.corrupt_upload(honest, &mut frng)
        } else {
            honest
        };
        Ok(ClientUpdate {
            client_id: j,
            round,
            payload,
        })
    }

    fn traced_similarity(
        &self,
        update: &ClientUpdate,
        alpha: f64,
    ) -> Result<Option<ClientSimilarity>, OrchestratorError> {
        let Some(sample) = &self.plain_samples[update.client_id] else {
            return Ok(None);
        };
        let guide = guiding_update(
            self.model.as_ref(),
            &self.theta,
            sample.view(),
            self.config.l2,
            alpha,
            self.config.local_steps,
        )?;
        let (c1, c2) = similarity(&update.payload, &guide)?;
        Ok(Some(
            (&decide(update.client_id, c1, c2, &self.config.thresholds)).into(),
        ))
    }

    /// Runs the next round.
    pub fn run_round(&mut self) -> Result<RoundRecord, OrchestratorError> {
        let started = Instant::now();
        let round = self.round + 1;
        let cfg = self.config.clone();
        let alpha = cfg.lr.alpha(round);
        let selected = select_clients(cfg.n, cfg.client_fraction, round, cfg.seed);
        let faulty_now = self.faults.faulty_in_round(round);
        let truth: BTreeSet<usize> = selected.iter().copied().filter(|j| faulty_now.contains(j)).collect();

        let this = &*self;
        let updates = selected
            .par_iter()
            .map(|&j| this.client_update(j, round, alpha, truth.contains(&j)))
            .collect::<Result<Vec<_>, _>>()?;

        let mut similarities = Vec::new();
        let mut flagged = BTreeSet::new();
        let mut anomaly = None;
        let mut aggregate_norm = 0.0;

        if cfg.rule == Rule::Diversefl {
            let blobs: Vec<_> = updates
                .iter()
                .map(|u| {
                    let nonce = derive_seed(cfg.seed, u.client_id as u64, round as u64, Purpose::SealNonce);
                    self.channels[u.client_id].seal_update(round, &u.payload, nonce)
                })
                .collect();
            let enclave = self.enclave.as_mut().expect("diversefl runs own an enclave");
            match enclave.secure_round(&blobs, alpha, cfg.local_steps, round) {
                Ok(outcome) => {
                    similarities = outcome.decisions.iter().map(Into::into).collect();
                    flagged = outcome.flagged;
                    aggregate_norm = outcome.aggregate_norm;
                }
                Err(EnclaveError::NoSurvivors { decisions, .. }) => {
                    similarities = decisions.iter().map(Into::into).collect();
                    flagged = selected.iter().copied().collect();
                    anomaly = Some("no_survivors".to_string());
                }
                Err(e) => return Err(e.into()),
            }
            self.theta = enclave.global_model().clone();
        } else {
            if cfg.trace {
                let this = &*self;
                similarities = updates
                    .par_iter()
                    .map(|u| this.traced_similarity(u, alpha))
                    .collect::<Result<Vec<_>, _>>()?
                    .into_iter()
                    .flatten()
                    .collect();
            }
            let f = cfg.f;
            let result = match cfg.rule {
                Rule::Mean => agg_mean(&updates),
                Rule::Oracle => agg_oracle(&updates, &truth),
                Rule::Median => agg_median(&updates),
                Rule::Bulyan => agg_bulyan(&updates, f),
                Rule::Resampling => agg_resampling(
                    &updates,
                    cfg.resampling_group,
                    derive_seed(cfg.seed, SERVER, round as u64, Purpose::Resampling),
                ),
                Rule::Fltrust => {
                    let root = self.root.as_ref().expect("fltrust runs own a root dataset");
                    let mut rng = stream(cfg.seed, SERVER, round as u64, Purpose::RootUpdate);
                    let root_update = local_train(
                        self.model.as_ref(),
                        &self.theta,
                        root,
                        alpha,
                        cfg.local_steps,
                        cfg.batch_fraction,
                        cfg.l2,
                        &mut rng,
                    )?;
                    agg_fltrust(&updates, &root_update)
                }
                Rule::Diversefl => unreachable!("handled above"),
            };
            match result {
                Ok(agg) => {
                    flagged = agg.excluded(&updates);
                    let next = self.theta.sub(&agg.aggregate);
                    if next.is_finite() {
                        aggregate_norm = agg.aggregate.norm();
                        self.theta = next;
                    } else {
                        anomaly = Some("non_finite_aggregate".to_string());
                    }
                }
                Err(AggError::AllFaulty) => anomaly = Some("all_faulty".to_string()),
                Err(AggError::ZeroRoot) => anomaly = Some("zero_root_update".to_string()),
                Err(e) => return Err(e.into()),
            }
        }

        let accuracy = if round.is_multiple_of(cfg.eval_stride) || round == cfg.rounds {
            Some(self.evaluate()?)
        } else {
            None
        };
        let metrics = detection_metrics(&flagged, &truth);
        self.round = round;
        Ok(RoundRecord {
            round,
            rule: cfg.rule,
            alpha,
            selected,
            truth,
            flagged,
            precision: metrics.precision,
            recall: metrics.recall,
            similarities,
            accuracy,
            aggregate_norm,
            anomaly,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining rounds and summarizes them.
    pub fn run(mut self) -> Result<ExperimentResult, OrchestratorError> {
        let mut records = Vec::with_capacity(self.config.rounds);
        while self.round < self.config.rounds {
            records.push(self.run_round()?);
        }
        let summary = summarize(&self.config, &self.faults.faulty_ids, &records);
        Ok(ExperimentResult {
            records,
            summary,
            final_model: self.theta,
        })
    }
}

/// Builds the simulation from `config` and runs all rounds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, OrchestratorError> {
    Simulation::from_config(config.clone())?.run()
}

pub fn summarize(config: &ExperimentConfig, faulty_ids: &BTreeSet<usize>, records: &[RoundRecord]) -> Summary {
    let accuracies: Vec<f64> = records.iter().filter_map(|r| r.accuracy).collect();
    let after: Vec<&RoundRecord> = records.iter().filter(|r| r.round > config.metrics_warmup).collect();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let t = config.thresholds;
    let mut traces: BTreeMap<usize, ClientTrace> = BTreeMap::new();
    for r in records {
        for s in &r.similarities {
            let tr = traces.entry(s.client_id).or_insert_with(|| ClientTrace {
                client_id: s.client_id,
                faulty: faulty_ids.contains(&s.client_id),
                rounds: Vec::new(),
                c1: Vec::new(),
                c2: Vec::new(),
                c1_positive: 0,
                c2_in_band: 0,
                passed: 0,
            });
            tr.rounds.push(r.round);
            tr.c1.push(s.c1);
            tr.c2.push(s.c2);
            tr.c1_positive += usize::from(s.c1 > 0.0);
            tr.c2_in_band += usize::from(s.c2 > t.eps2 && s.c2 < t.eps3);
            tr.passed += usize::from(s.passed);
        }
    }
    Summary {
        rule: config.rule,
        rounds: records.len(),
        final_accuracy: accuracies.last().copied(),
        best_accuracy: accuracies.iter().copied().reduce(f64::max),
        mean_precision: mean(after.iter().map(|r| r.precision).collect()),
        mean_recall: mean(after.iter().map(|r| r.recall).collect()),
        metrics_warmup: config.metrics_warmup,
        anomaly_rounds: records
            .iter()
            .filter(|r| r.anomaly.is_some())
            .map(|r| r.round)
            .collect(),
        faulty_ids: faulty_ids.clone(),
        traces: traces.into_values().collect(),
    }
}

/// Fixed 17-significant-digit rendering; non-finite values as `inf`, `-inf`, `nan`.
pub fn format_number(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn join_ids<'a>(ids: impl IntoIterator<Item = &'a usize>) -> String {
    ids.into_iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// Per-round CSV: summary columns, then `c1_j`, `c2_j` for each client `j < n`.
pub fn write_rounds_csv<W: Write>(out: W, n: usize, records: &[RoundRecord]) -> Result<(), OrchestratorError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "round",
        "rule",
        "alpha",
        "accuracy",
        "precision",
        "recall",
        "aggregate_norm",
        "selected_ids",
        "truth_ids",
        "flagged_ids",
        "anomaly",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for j in 0..n {
        header.push(format!("c1_{j}"));
        header.push(format!("c2_{j}"));
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.round.to_string(),
            r.rule.name().to_string(),
            format_number(r.alpha),
            r.accuracy.map(format_number).unwrap_or_default(),
            format_number(r.precision),
            format_number(r.recall),
            format_number(r.aggregate_norm),
            join_ids(&r.selected),
            join_ids(&r.truth),
            join_ids(&r.flagged),
            r.anomaly.clone().unwrap_or_default(),
        ];
        let mut cells = vec![(String::new(), String::new()); n];
        for s in &r.similarities {
            if s.client_id < n {
                cells[s.client_id] = (format_number(s.c1), format_number(s.c2));
            }
        }
        for (c1, c2) in cells {
            row.push(c1);
            row.push(c2);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(rule: Rule) -> ExperimentConfig {
        ExperimentConfig {
            n: 6,
            f: 0,
            rounds: 5,
            local_steps: 1,
            client_fraction: 1.0,
            batch_fraction: 0.2,
            lr: LrSchedule::constant(0.1),
            l2: 0.0005,
            sampling_rate: 0.2,
            rule,
            faults: FaultConfig::default(),
            thresholds: Thresholds::default(),
            dataset: DatasetConfig::Synthetic {
                classes: 3,
                input_dim: 4,
                train_per_class: 40,
                test_per_class: 10,
                spread: 0.5,
                mean_scale: 1.0,
                modes_per_class: 1,
                seed: None,
            },
            partition: PartitionMode::Shards { k: 2 },
            model: ModelConfig {
                hidden: vec![5],
                init_seed: None,
            },
            seed: 3,
            eval_stride: 1,
            metrics_warmup: 0,
            trace: false,
            resampling_group: 2,
            root_fraction: 0.05,
        }
    }

    #[test]
    fn mnist_schedule_spot_values() {
        let lr = LrSchedule {
            initial: 0.06,
            warmup: None,
            steps: vec![
                LrStep {
                    round: 500,
                    factor: 0.5,
                },
                LrStep {
                    round: 950,
                    factor: 0.5,
                },
            ],
        };
        assert_eq!(lr.alpha(1), 0.06);
        assert_eq!(lr.alpha(499), 0.06);
        assert_eq!(lr.alpha(500), 0.03);
        assert_eq!(lr.alpha(949), 0.03);
        assert_eq!(lr.alpha(950), 0.015);
        assert_eq!(lr.alpha(1000), 0.015);
    }

    #[test]
    fn warmup_is_linear() {
        let lr = LrSchedule {
            initial: 0.1,
            warmup: Some(Warmup {
                start: 0.01,
                end: 0.1,
                rounds: 10,
            }),
            steps: vec![],
        };
        assert!((lr.alpha(1) - 0.01).abs() < 1e-15);
        assert!((lr.alpha(10) - 0.1).abs() < 1e-15);
        assert!((lr.alpha(4) - 0.04).abs() < 1e-15);
        assert_eq!(lr.alpha(11), 0.1);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_clients(7, 1.0, 3, 9), (0..7).collect::<Vec<_>>());
        let s = select_clients(100, 0.25, 4, 9);
        assert_eq!(s.len(), 25);
        assert_eq!(s, select_clients(100, 0.25, 4, 9));
        assert_ne!(s, select_clients(100, 0.25, 5, 9));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn local_train_single_full_step_is_scaled_gradient() {
        let spec = ModelSpec::new(vec![2, 3, 2], 1).unwrap();
        let theta = init_model(&spec);
        let data = Dataset::new(vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6], vec![0, 1, 1], 2, 2).unwrap();
        let mut rng = stream(1, 0, 1, Purpose::LocalTraining);
        let delta = local_train(&spec, &theta, &data, 0.05, 1, 1.0, 0.0, &mut rng).unwrap();
        let guide = guiding_update(&spec, &theta, data.view(), 0.0, 0.05, 1).unwrap();
        for (a, b) in delta.iter().zip(guide.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn validation_names_every_field() {
        let mut cfg = tiny_config(Rule::Mean);
        cfg.f = 9;
        cfg.rounds = 0;
        cfg.batch_fraction = 0.0;
        cfg.lr.initial = -1.0;
        let err = cfg.validate().unwrap_err();
        let fields = err.fields();
        for f in ["f", "rounds", "batch_fraction", "lr.initial"] {
            assert!(fields.contains(&f), "missing {f} in {fields:?}");
        }
        let mut bulyan = tiny_config(Rule::Bulyan);
        bulyan.f = 1;
        assert_eq!(bulyan.validate().unwrap_err().fields(), vec!["rule"]);
    }

    #[test]
    fn default_faulty_set_is_seeded() {
        let mut cfg = tiny_config(Rule::Mean);
        cfg.f = 2;
        let ids = cfg.faulty_ids();
        assert_eq!(ids.len(), 2);
        assert_eq!(ids, cfg.faulty_ids());
        cfg.faults.faulty_ids = Some(BTreeSet::from([0, 5]));
        assert_eq!(cfg.faulty_ids(), BTreeSet::from([0, 5]));
    }

    #[test]
    fn single_round_experiment() {
        let mut cfg = tiny_config(Rule::Median);
        cfg.rounds = 1;
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.records.len(), 1);
        assert_eq!(res.summary.rounds, 1);
        assert!(res.summary.final_accuracy.is_some());
    }

    #[test]
    fn every_rule_runs_with_faults() {
        for rule in Rule::ALL {
            let mut cfg = tiny_config(rule);
            cfg.n = 7;
            cfg.f = 1;
            cfg.faults.kind = FaultKind::SignFlip;
            cfg.trace = true;
            let res = run_experiment(&cfg).unwrap_or_else(|e| panic!("{}: {e}", rule.name()));
            for r in &res.records {
                assert_eq!(r.truth, res.summary.faulty_ids);
                assert!(r.flagged.iter().all(|j| r.selected.contains(j)));
                let acc = r.accuracy.unwrap();
                assert!((0.0..=1.0).contains(&acc));
            }
            assert_eq!(res.summary.traces.len(), 7, "{}", rule.name());
        }
    }

    #[test]
    fn csv_has_one_row_per_round_and_is_reproducible() {
        let cfg = tiny_config(Rule::Diversefl);
        let render = || {
            let res = run_experiment(&cfg).unwrap();
            let mut buf = Vec::new();
            write_rounds_csv(&mut buf, cfg.n, &res.records).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = render();
        assert_eq!(a.lines().count(), 1 + cfg.rounds);
        assert!(a.lines().next().unwrap().starts_with("round,rule,alpha,accuracy"));
        assert_eq!(a, render());
    }

    #[test]
    fn number_format() {
        assert_eq!(format_number(0.5), "5.0000000000000000e-1");
        assert_eq!(format_number(f64::INFINITY), "inf");
        let x = 0.1 + 0.2;
        assert_eq!(format_number(x).parse::<f64>().unwrap(), x);
    }
}
