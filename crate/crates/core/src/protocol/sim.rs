//! Round driver: broadcast, local work, FIFO server ingest, aggregation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, batches_per_epoch, BatchPlan, Dataset, Partition};
use crate::error::{Error, Result};
use crate::ledger::{CommLedger, LedgerEntry, DEFAULT_BYTES_PER_ELEMENT};
use crate::model::{build_for, SplitModelSpec, SplitParams};
use crate::nn::LrSchedule;
use crate::protocol::client::{
    client_forward_baseline, client_local_window, client_step_baseline, ClientState,
    LocalWindow, UploadTrigger,
};
use crate::protocol::message::{Message, MessageKind};
use crate::protocol::server::ServerState;
use crate::protocol::strategy::Strategy;
use crate::rng;
use crate::tensor::ParamSet;

/// First batch position and per-batch example indices of one window.
type ResolvedWindow = (u64, Vec<Vec<usize>>);

/// Order in which participant uploads reach the server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    /// Ascending client id.
    #[default]
    ClientOrder,
    /// A fresh seeded permutation for every upload slot.
    Shuffled,
}

/// How much local work happens between aggregations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationPeriod {
    /// Whole local epochs per round.
    Epochs(usize),
    /// Upload windows per round (`h` batches each, one batch for baselines).
    Windows(usize),
}

impl Default for AggregationPeriod {
    fn default() -> Self {
        AggregationPeriod::Epochs(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub strategy: Strategy,
    pub n_clients: usize,
    pub batch_size: usize,
    pub eta0: f64,
    pub fraction: f64,
    pub aggregation: AggregationPeriod,
    pub arrival: Arrival,
    pub upload_trigger: UploadTrigger,
    pub bytes_per_element: usize,
    /// Worker threads for client windows; 0 or 1 runs everything inline.
    pub threads: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(strategy: Strategy, n_clients: usize, batch_size: usize, eta0: f64, seed: u64) -> Self {
        Self {
            strategy,
            n_clients,
            batch_size,
            eta0,
            fraction: 1.0,
            aggregation: AggregationPeriod::default(),
            arrival: Arrival::default(),
            upload_trigger: UploadTrigger::default(),
            bytes_per_element: DEFAULT_BYTES_PER_ELEMENT,
            threads: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::config("eta0", "must be positive"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config(
                "fraction",
                format!("must lie in (0, 1], got {}", self.fraction),
            ));
        }
        match self.aggregation {
            AggregationPeriod::Epochs(0) => {
                return Err(Error::config("aggregation.epochs", "must be at least 1"))
            }
            AggregationPeriod::Windows(0) => {
                return Err(Error::config("aggregation.windows", "must be at least 1"))
            }
            _ => {}
        }
        if self.bytes_per_element == 0 {
            return Err(Error::config("bytes_per_element", "must be at least 1"));
        }
        Ok(())
    }
}

/// `ceil(fraction * n)` distinct clients, uniform without replacement and
/// deterministic in `(seed, round)`; returned sorted.
pub fn sample_participants(n_clients: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let k = ((fraction * n_clients as f64) - 1e-9).ceil().clamp(1.0, n_clients as f64) as usize;
    if k >= n_clients {
        return (0..n_clients).collect();
    }
    let mut r = rng::stream(seed, rng::SAMPLING, &[round as u64]);
    let mut ids = rand::seq::index::sample(&mut r, n_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub eta: f64,
    pub participants: Vec<usize>,
    /// Aux-head losses per participant, in local step order.
    pub local_losses: Vec<(usize, Vec<f64>)>,
    /// Server loss of every ingest, in ingest order.
    pub server_losses: Vec<(usize, f64)>,
    /// Squared norms of the client-side stochastic gradients used this round.
    pub client_grad_sq: Vec<f64>,
    /// Squared norms of the server-side stochastic gradients used this round.
    pub server_grad_sq: Vec<f64>,
    pub messages: Vec<LedgerEntry>,
}

impl RoundReport {
    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.message_kind == kind).count()
    }

    pub fn mean_server_loss(&self) -> f64 {
        if self.server_losses.is_empty() {
            return f64::NAN;
        }
        self.server_losses.iter().map(|(_, l)| l).sum::<f64>() / self.server_losses.len() as f64
    }
}

type Window = Vec<usize>;

/// Owns all simulated state for one run.
pub struct Simulator {
    spec: SplitModelSpec,
    cfg: SimConfig,
    train: Dataset,
    partition: Partition,
    clients: Vec<ClientState>,
    server: ServerState,
    cursors: Vec<usize>,
    per_epoch: Vec<usize>,
    plans: Vec<Option<BatchPlan>>,
    lr: LrSchedule,
    pool: Option<rayon::ThreadPool>,
}

impl Simulator {
    /// Initialises models from `cfg.seed`.
    pub fn new(spec: SplitModelSpec, cfg: SimConfig, train: Dataset, partition: Partition) -> Result<Self> {
        let params = build_for(&spec, cfg.strategy.kind, cfg.seed)?;
        Self::with_params(spec, cfg, train, partition, params)
    }

    pub fn with_params(
        spec: SplitModelSpec,
        cfg: SimConfig,
        train: Dataset,
        partition: Partition,
        params: SplitParams,
    ) -> Result<Self> {
        cfg.validate()?;
        if partition.n_clients() != cfg.n_clients {
            return Err(Error::usage(format!(
                "partition has {} clients, config {}",
                partition.n_clients(),
                cfg.n_clients
            )));
        }
        if train.example_shape() != spec.input_shape.as_slice() {
            return Err(Error::config(
                "model.input_shape",
                format!(
                    "{:?} does not match dataset examples {:?}",
                    spec.input_shape,
                    train.example_shape()
                ),
            ));
        }
        let per_epoch: Vec<usize> = partition
            .sizes()
            .into_iter()
            .enumerate()
            .map(|(c, n)| {
                if n == 0 {
                    Err(Error::data(format!("client {c} has an empty shard")))
                } else {
                    Ok(batches_per_epoch(n, cfg.batch_size))
                }
            })
            .collect::<Result<_>>()?;
        let clients = (0..cfg.n_clients)
            .map(|i| ClientState::new(i, params.client.clone(), params.aux.clone()))
            .collect();
        let server = ServerState::new(cfg.strategy, cfg.n_clients, params)?;
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::usage(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            lr: LrSchedule::new(cfg.eta0)?,
            spec,
            train,
            partition,
            clients,
            server,
            cursors: vec![0; cfg.n_clients],
            per_epoch,
            plans: vec![None; cfg.n_clients],
            pool,
            cfg,
        })
    }

    pub fn spec(&self) -> &SplitModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Next round index.
    pub fn round(&self) -> usize {
        self.server.round()
    }

    pub fn global_client(&self) -> &ParamSet {
        self.server.global_client()
    }

    pub fn batches_per_epoch(&self, client: usize) -> usize {
        self.per_epoch[client]
    }

    /// Mean over clients of local epochs completed.
    pub fn epochs_elapsed(&self) -> f64 {
        let n = self.cursors.len() as f64;
        self.cursors
            .iter()
            .zip(&self.per_epoch)
            .map(|(&k, &b)| k as f64 / b as f64)
            .sum::<f64>()
            / n
    }

    fn batch_indices(&mut self, client: usize, position: usize) -> Result<Vec<usize>> {
        let b = self.per_epoch[client];
        let epoch = position / b;
        if self.plans[client].as_ref().is_none_or(|p| p.epoch != epoch) {
            self.plans[client] = Some(batches(
                &self.partition,
                client,
                self.cfg.batch_size,
                epoch,
                self.cfg.seed,
            )?);
        }
        Ok(self.plans[client].as_ref().expect("set").batches[position % b].clone())
    }

    /// Windows of global batch positions for this round; advances the cursor.
    fn schedule(&mut self, client: usize) -> Vec<std::ops::Range<usize>> {
        let b = self.per_epoch[client];
        let h = self.cfg.strategy.h;
        let mut k = self.cursors[client];
        let mut out = Vec::new();
        let mut step = |k: &mut usize| {
            let epoch_end = (*k / b + 1) * b;
            let end = (*k + h).min(epoch_end);
            out.push(*k..end);
            *k = end;
        };
        match self.cfg.aggregation {
            AggregationPeriod::Epochs(e) => {
                let stop = (k / b + e) * b;
                while k < stop {
                    step(&mut k);
                }
            }
            AggregationPeriod::Windows(c) => {
                for _ in 0..c {
                    step(&mut k);
                }
            }
        }
        self.cursors[client] = k;
        out
    }

    fn arrival_order(&self, participants: &[usize], round: usize, slot: usize) -> Vec<usize> {
        let mut order = participants.to_vec();
        if self.cfg.arrival == Arrival::Shuffled {
            order.shuffle(&mut rng::stream(
                self.cfg.seed,
                rng::ARRIVAL,
                &[round as u64, slot as u64],
            ));
        }
        order
    }

    fn entry(&self, round: usize, msg: &Message) -> LedgerEntry {
        LedgerEntry::of(round, msg, self.cfg.bytes_per_element)
    }

    /// Runs one global round and returns what happened.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.server.round();
        let eta = self.lr.lr_at(t);
        let participants =
            sample_participants(self.cfg.n_clients, self.cfg.fraction, self.cfg.seed, t);
        let mut report = RoundReport {
            round: t,
            eta,
            participants: participants.clone(),
            local_losses: Vec::new(),
            server_losses: Vec::new(),
            client_grad_sq: Vec::new(),
            server_grad_sq: Vec::new(),
            messages: Vec::new(),
        };

        for msg in self.server.broadcast_models(&participants)? {
            report.messages.push(self.entry(t, &msg));
            if let Message::ModelBroadcast { client, x_c, a_c } = msg {
                self.clients[client].receive_broadcast(&x_c, a_c.as_ref());
            }
        }

        let mut schedules: Vec<(usize, Vec<Window>)> = Vec::with_capacity(participants.len());
        for &c in &participants {
            let ranges = self.schedule(c);
            let mut windows = Vec::with_capacity(ranges.len());
            for r in ranges {
                windows.push(r.collect());
            }
            schedules.push((c, windows));
        }

        if self.cfg.strategy.kind.uses_aux() {
            self.aux_phase(t, eta, &participants, schedules, &mut report)?;
        } else {
            self.baseline_phase(t, eta, &participants, schedules, &mut report)?;
        }

        let uploads: Vec<_> = participants
            .iter()
            .map(|&c| self.clients[c].model_upload())
            .collect();
        for u in &uploads {
            let msg = Message::ClientModelUpload(u.clone());
            report.messages.push(self.entry(t, &msg));
        }
        self.server.aggregate(&uploads)?;
        self.check_finite(t, &report)?;
        Ok(report)
    }

    fn aux_phase(
        &mut self,
        t: usize,
        eta: f64,
        participants: &[usize],
        schedules: Vec<(usize, Vec<Window>)>,
        report: &mut RoundReport,
    ) -> Result<()> {
        // resolve positions to example indices up front (touches plan caches)
        let mut work: Vec<(usize, Vec<ResolvedWindow>)> = Vec::new();
        for (c, windows) in schedules {
            let mut resolved = Vec::with_capacity(windows.len());
            for w in windows {
                let idx = w
                    .iter()
                    .map(|&k| self.batch_indices(c, k))
                    .collect::<Result<Vec<_>>>()?;
                resolved.push((w[0] as u64, idx));
            }
            work.push((c, resolved));
        }

        let spec = &self.spec;
        let train = &self.train;
        let trigger = self.cfg.upload_trigger;
        let run = |client: &mut ClientState, windows: &[ResolvedWindow]| {
            windows
                .iter()
                .map(|(first, idx)| {
                    let batches: Vec<_> = idx.iter().map(|i| train.batch(i)).collect();
                    client_local_window(spec, client, &batches, *first, eta, trigger)
                })
                .collect::<Result<Vec<LocalWindow>>>()
        };
        let mut jobs: Vec<(&mut ClientState, &[ResolvedWindow])> = self
            .clients
            .iter_mut()
            .filter(|c| participants.binary_search(&c.id).is_ok())
            .zip(work.iter())
            .map(|(c, (id, w))| {
                debug_assert_eq!(c.id, *id);
                (c, w.as_slice())
            })
            .collect();
        let results: Vec<Result<Vec<LocalWindow>>> = match &self.pool {
            Some(pool) => pool.install(|| {
                jobs.par_iter_mut()
                    .map(|(c, w)| run(c, w))
                    .collect()
            }),
            None => jobs.iter_mut().map(|(c, w)| run(c, w)).collect(),
        };
        let mut outcomes: Vec<(usize, std::vec::IntoIter<LocalWindow>)> = Vec::new();
        for (&c, r) in participants.iter().zip(results) {
            let windows = r?;
            let mut losses = Vec::new();
            for w in &windows {
                losses.extend_from_slice(&w.losses);
                report.client_grad_sq.extend_from_slice(&w.grad_sq_norms);
            }
            report.local_losses.push((c, losses));
            outcomes.push((c, windows.into_iter()));
        }

        let slots = work.iter().map(|(_, w)| w.len()).max().unwrap_or(0);
        for slot in 0..slots {
            for c in self.arrival_order(participants, t, slot) {
                let pos = participants.binary_search(&c).expect("participant");
                if let Some(w) = outcomes[pos].1.next() {
                    let msg = Message::SmashedUpload(w.upload);
                    report.messages.push(self.entry(t, &msg));
                    let Message::SmashedUpload(upload) = msg else {
                        unreachable!()
                    };
                    self.server.enqueue(upload)?;
                }
            }
        }
        for ingest in self.server.drain(&self.spec, eta)? {
            report.server_losses.push((ingest.client, ingest.loss));
            report.server_grad_sq.push(ingest.grad_sq_norm);
        }
        Ok(())
    }

    fn baseline_phase(
        &mut self,
        t: usize,
        eta: f64,
        participants: &[usize],
        schedules: Vec<(usize, Vec<Window>)>,
        report: &mut RoundReport,
    ) -> Result<()> {
        let steps = schedules.iter().map(|(_, w)| w.len()).max().unwrap_or(0);
        for step in 0..steps {
            for c in self.arrival_order(participants, t, step) {
                let pos = participants.binary_search(&c).expect("participant");
                let Some(window) = schedules[pos].1.get(step) else {
                    continue;
                };
                let k = window[0];
                let idx = self.batch_indices(c, k)?;
                let (x, y) = self.train.batch(&idx);
                let upload = client_forward_baseline(&self.spec, &mut self.clients[c], &x, &y, k as u64)?;
                let msg = Message::SmashedUpload(upload);
                report.messages.push(self.entry(t, &msg));
                let Message::SmashedUpload(upload) = msg else {
                    unreachable!()
                };
                self.server.enqueue(upload)?;
                let ingest = self
                    .server
                    .drain(&self.spec, eta)?
                    .pop()
                    .expect("one queued upload");
                report.server_losses.push((c, ingest.loss));
                report.server_grad_sq.push(ingest.grad_sq_norm);
                let grad = ingest.grad_down.expect("baselines send gradients");
                let msg = Message::GradDown(grad);
                report.messages.push(self.entry(t, &msg));
                let Message::GradDown(grad) = msg else {
                    unreachable!()
                };
                let done = client_step_baseline(&self.spec, &mut self.clients[c], &grad, eta)?;
                report.client_grad_sq.push(done.grad_sq_norm);
            }
        }
        Ok(())
    }

    fn check_finite(&self, round: usize, report: &RoundReport) -> Result<()> {
        let numeric = |msg: String| Error::Numeric { round, msg };
        if let Some((c, _)) = report.server_losses.iter().find(|(_, l)| !l.is_finite()) {
            return Err(numeric(format!("non-finite server loss from client {c}")));
        }
        for (c, losses) in &report.local_losses {
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(numeric(format!("non-finite local loss on client {c}")));
            }
        }
        if !self.server.global_client().all_finite()
            || self.server.global_aux().is_some_and(|a| !a.all_finite())
        {
            return Err(numeric("non-finite client-side parameters".into()));
        }
        if self.server.server_models().iter().any(|m| !m.all_finite()) {
            return Err(numeric("non-finite server-side parameters".into()));
        }
        Ok(())
    }

    /// Runs `rounds` rounds, recording every message in `ledger`.
    pub fn run(&mut self, rounds: usize, ledger: &mut CommLedger) -> Result<Vec<RoundReport>> {
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let r = self.run_round()?;
            ledger.extend(r.messages.iter().cloned());
            out.push(r);
        }
        Ok(out)
    }
}
