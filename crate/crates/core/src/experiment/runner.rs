use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::ledger::{storage_of, CommLedger};
use crate::metrics::{
    evaluate_global, probe_grad_sq, probe_subset, weighted_grad_average, write_metrics_csv,
    AssumptionEstimates, ConvergenceTrace, MetricsRow, Side,
};
use crate::nn::gradcheck::{reference_backward, run_suite, sign_flipped_dense_backward, GradCheckReport};
use crate::protocol::{Simulator, StrategyKind};

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub ledger: CommLedger,
    pub trace: ConvergenceTrace,
    pub estimates: AssumptionEstimates,
    pub storage_params: usize,
    pub clip_threshold: Option<f64>,
}

impl SeedOutcome {
    pub fn final_top1(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test_top1)
    }

    pub fn total_bytes(&self) -> u64 {
        self.ledger.total()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedOutcome>,
}

/// Trains one seed for `cfg.rounds` rounds. Nothing is written to disk.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let spec = cfg.spec()?;
    let (train, test) = cfg.dataset.load(seed)?;
    if train.example_shape() != spec.input_shape.as_slice() {
        return Err(Error::config(
            "model.input_shape",
            format!("{:?} does not match dataset examples {:?}", spec.input_shape, train.example_shape()),
        ));
    }
    if train.num_classes() > spec.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("dataset has {} classes", train.num_classes()),
        ));
    }
    let partition = cfg.partition.apply(&train, cfg.n_clients, seed)?;
    let probe = probe_subset(&train, cfg.probe_size, seed);
    let kind = cfg.strategy.kind;
    let clip_threshold = cfg.strategy.effective_clip();
    if kind == StrategyKind::FslOc && cfg.strategy.clip_threshold.is_none() {
        log::info!("FSL_OC clip_threshold not set; using default {}", clip_threshold.unwrap_or_default());
    }
    let storage_params = storage_of(
        kind,
        cfg.n_clients,
        spec.client_param_count(),
        spec.aux_param_count(),
        spec.server_param_count(),
    );

    let mut sim = Simulator::new(spec.clone(), cfg.sim_config(seed), train, partition)?;
    let mut ledger = CommLedger::new();
    let mut trace = ConvergenceTrace::new();
    let mut estimates = AssumptionEstimates::new();
    let mut rows = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (c_sq, s_sq) = probe_grad_sq(
            &spec,
            kind,
            sim.global_client(),
            sim.server().global_aux(),
            sim.server().server_models(),
            &probe,
        )?;
        let report = sim.run_round()?;
        trace
            .push(report.eta, c_sq, s_sq)
            .map_err(|e| Error::Numeric {
                round: report.round,
                msg: e.to_string(),
            })?;
        estimates.update(&report.client_grad_sq, &report.server_grad_sq);
        ledger.extend(report.messages.iter().cloned());
        let eval = evaluate_global(&spec, sim.global_client(), sim.server().server_models(), &test)?;
        let t = trace.len();
        rows.push(MetricsRow {
            round: report.round,
            epoch: sim.epochs_elapsed(),
            comm_rounds: ledger.comm_rounds(),
            uplink_bytes: ledger.uplink(),
            downlink_bytes: ledger.downlink(),
            train_loss: report.mean_server_loss(),
            test_top1: eval.top1,
            grad_norm_client: c_sq.sqrt(),
            grad_norm_server: s_sq.sqrt(),
            gamma_t: trace.gamma(t)?,
            weighted_avg_client: weighted_grad_average(&trace, Side::Client, t)?,
            weighted_avg_server: weighted_grad_average(&trace, Side::Server, t)?,
        });
    }
    Ok(SeedOutcome {
        seed,
        rows,
        ledger,
        trace,
        estimates,
        storage_params,
        clip_threshold,
    })
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn seed_summary(cfg: &ExperimentConfig, o: &SeedOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "strategy: {}", cfg.strategy);
    let _ = writeln!(s, "seed: {}", o.seed);
    let _ = writeln!(s, "rounds: {}", o.rows.len());
    let _ = writeln!(s, "final_test_top1: {}", o.final_top1());
    let _ = writeln!(s, "uplink_bytes: {}", o.ledger.uplink());
    let _ = writeln!(s, "downlink_bytes: {}", o.ledger.downlink());
    let _ = writeln!(s, "total_load_bytes: {}", o.total_bytes());
    let _ = writeln!(s, "comm_rounds: {}", o.ledger.comm_rounds());
    let _ = writeln!(s, "storage_params: {}", o.storage_params);
    if let Some(c) = o.clip_threshold {
        let _ = writeln!(s, "clip_threshold: {c}");
    }
    let _ = writeln!(s, "g1_sq_hat: {}", o.estimates.g1_sq_hat);
    let _ = writeln!(s, "g2_sq_hat: {}", o.estimates.g2_sq_hat);
    s
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate_summary(cfg: &ExperimentConfig, seeds: &[SeedOutcome]) -> String {
    let mut s = String::new();
    let ids: Vec<String> = seeds.iter().map(|o| o.seed.to_string()).collect();
    let _ = writeln!(s, "strategy: {}", cfg.strategy);
    let _ = writeln!(s, "seeds: {}", ids.join(" "));
    let _ = writeln!(s, "rounds: {}", cfg.rounds);
    let stat = |f: &dyn Fn(&SeedOutcome) -> f64| {
        let v: Vec<f64> = seeds.iter().map(f).collect();
        let (m, sd) = mean_std(&v);
        format!("{m} ± {sd}")
    };
    let _ = writeln!(s, "final_test_top1: {}", stat(&|o| o.final_top1()));
    let _ = writeln!(s, "total_load_bytes: {}", stat(&|o| o.total_bytes() as f64));
    let _ = writeln!(s, "comm_rounds: {}", stat(&|o| o.ledger.comm_rounds() as f64));
    let _ = writeln!(s, "storage_params: {}", stat(&|o| o.storage_params as f64));
    s
}

/// Writes `metrics.csv`, `ledger.csv` and `summary.txt` for one seed.
pub fn write_seed_outputs(cfg: &ExperimentConfig, o: &SeedOutcome, out: &Path) -> Result<()> {
    let dir = seed_dir(out, o.seed);
    std::fs::create_dir_all(&dir)?;
    write_metrics_csv(&o.rows, std::fs::File::create(dir.join("metrics.csv"))?)?;
    o.ledger.save_csv(dir.join("ledger.csv"))?;
    std::fs::write(dir.join("summary.txt"), seed_summary(cfg, o))?;
    Ok(())
}

/// Runs every seed, writing per-seed outputs and the cross-seed summary
/// under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.json"), cfg.to_json())?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("{}: seed {seed}, {} rounds", cfg.strategy, cfg.rounds);
        let o = run_seed(cfg, seed)?;
        write_seed_outputs(cfg, &o, &cfg.output_dir)?;
        log::info!("seed {seed}: final top-1 {:.4}", o.final_top1());
        seeds.push(o);
    }
    std::fs::write(cfg.output_dir.join("summary.txt"), aggregate_summary(cfg, &seeds))?;
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        seeds,
    })
}

/// One row of `compare.csv`: seed means for one round of one config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub strategy: String,
    pub h: usize,
    pub round: usize,
    pub epoch: f64,
    pub comm_rounds: f64,
    pub total_bytes: f64,
    pub test_top1: f64,
}

pub const COMPARE_COLUMNS: [&str; 7] = [
    "strategy",
    "h",
    "round",
    "epoch",
    "comm_rounds",
    "total_bytes",
    "test_top1",
];

/// Runs configs that share a dataset and model, each into
/// `out/<STRATEGY>-h<h>`, and merges their curves into `out/compare.csv`.
pub fn compare(configs: &[ExperimentConfig], out: &Path) -> Result<Vec<CompareRow>> {
    if configs.len() < 2 {
        return Err(Error::usage("compare needs at least two configs"));
    }
    let first = &configs[0];
    let mut keys = BTreeSet::new();
    for (i, c) in configs.iter().enumerate() {
        if c.dataset != first.dataset || c.model != first.model {
            return Err(Error::usage(format!(
                "config {i} uses a different dataset or model than config 0"
            )));
        }
        if !keys.insert((c.strategy.kind, c.strategy.h)) {
            return Err(Error::usage(format!(
                "config {i} repeats the key ({}, h={})",
                c.strategy.kind, c.strategy.h
            )));
        }
    }
    let mut rows = Vec::new();
    for c in configs {
        let mut c = c.clone();
        c.output_dir = out.join(format!("{}-h{}", c.strategy.kind, c.strategy.h));
        let outcome = run_experiment(&c)?;
        let n = outcome.seeds.len() as f64;
        for r in 0..c.rounds {
            let mean = |f: &dyn Fn(&MetricsRow) -> f64| {
                outcome.seeds.iter().map(|o| f(&o.rows[r])).sum::<f64>() / n
            };
            rows.push(CompareRow {
                strategy: c.strategy.kind.to_string(),
                h: c.strategy.h,
                round: r,
                epoch: mean(&|m| m.epoch),
                comm_rounds: mean(&|m| m.comm_rounds as f64),
                total_bytes: mean(&|m| (m.uplink_bytes + m.downlink_bytes) as f64),
                test_top1: mean(&|m| m.test_top1),
            });
        }
    }
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Runs the finite-difference suite; `inject_fault` swaps in a dense
/// backward with a flipped sign.
pub fn gradcheck(seed: u64, inject_fault: bool) -> Result<GradCheckReport> {
    let f = if inject_fault {
        sign_flipped_dense_backward
    } else {
        reference_backward
    };
    run_suite(seed, f)
}

pub fn format_gradcheck(report: &GradCheckReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>7} {:>14} {:>14}  result",
        "layer", "params", "max_rel_param", "max_rel_input"
    );
    for c in &report.cases {
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>14.3e} {:>14.3e}  {}",
            c.layer,
            c.param_count,
            c.max_rel_error_params,
            c.max_rel_error_input,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let _ = writeln!(
        s,
        "epsilon {:e}, tolerance {:e}: {}",
        report.epsilon,
        report.tolerance,
        if report.passed() { "passed" } else { "FAILED" }
    );
    s
}
