//! Seeded experiment runs: one result series per (strategy, seed), written
//! atomically so interrupted experiments resume where they stopped.

pub mod config;
pub mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{concatenate, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{load_config, parse_config, ExperimentConfig, NamedStrategy, ScheduleConfig};

use crate::error::{Error, Result};
use crate::eval::{
    activation_correlation, cl_test_set, eval_cl, eval_rep, make_eval_tasks, unit_similarity,
    ClResult, LayerCorrelation, Reference, RepResult, UnitSimilarity,
};
use crate::network::{GateWeights, Model};
use crate::rng::RngState;
use crate::tasks::{make_universe, RegressionDataset};
use crate::training::{gdumb_model, train_multitask, train_task, Method, TrainStrategy};

/// Rows of the probe set used for activation correlations.
pub const PROBE_ROWS: usize = 2000;

/// Everything measured at one task boundary. `task_index` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_index: usize,
    pub feature_index: usize,
    pub train_loss: f64,
    pub epochs: usize,
    pub closed_after_warmup: Option<f64>,
    pub rep: Option<RepResult>,
    pub cl: ClResult,
    /// First-layer similarity to each linear shared feature.
    pub similarity: Vec<Option<UnitSimilarity>>,
    /// Per shared feature, per hidden layer.
    pub activation: Vec<Vec<LayerCorrelation>>,
    /// Against the model at the previous evaluation point.
    pub drift: Option<Vec<LayerCorrelation>>,
}

impl EvalReport {
    pub fn p_rep(&self) -> Option<f64> {
        self.rep.as_ref().map(|r| r.p_rep)
    }

    pub fn p_cl(&self) -> f64 {
        self.cl.p_cl
    }
}

/// One finished (strategy, seed) series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub strategy: NamedStrategy,
    pub seed: u64,
    pub sequence_features: Vec<usize>,
    pub reports: Vec<EvalReport>,
    /// End-of-task gate weights by 1-based task index (adapter runs only).
    pub gates: BTreeMap<usize, Vec<GateWeights>>,
}

impl RunRecord {
    pub fn report_at(&self, task_index: usize) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.task_index == task_index)
    }

    pub fn last(&self) -> Option<&EvalReport> {
        self.reports.last()
    }

    /// Long-form CSV: one row per (task_index, metric).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_hash,strategy,seed,task_index,metric,value\n");
        for r in &self.reports {
            for (metric, value) in report_metrics(r) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    self.config_hash, self.strategy.name, self.seed, r.task_index, metric, value
                );
            }
        }
        out
    }
}

fn report_metrics(r: &EvalReport) -> Vec<(String, f64)> {
    let mut m = vec![
        ("train_loss".to_string(), r.train_loss),
        ("epochs".into(), r.epochs as f64),
        ("p_cl".into(), r.cl.p_cl),
    ];
    if let Some(c) = r.closed_after_warmup {
        m.push(("closed_after_warmup".into(), c));
    }
    if let Some(rep) = &r.rep {
        m.push(("p_rep".into(), rep.p_rep));
        for (size, v) in &rep.per_size {
            m.push((format!("p_rep_n{size}"), *v));
        }
    }
    for (f, s) in r.similarity.iter().enumerate() {
        if let Some(s) = s {
            m.push((format!("similarity_max_h{}", f + 1), s.max()));
            let top = s.top_values();
            m.push((
                format!("similarity_top_mean_h{}", f + 1),
                top.iter().sum::<f64>() / top.len().max(1) as f64,
            ));
        }
    }
    for (f, layers) in r.activation.iter().enumerate() {
        for (i, c) in layers.iter().enumerate() {
            m.push((format!("activation_h{}_layer{}", f + 1, i + 1), c.value));
        }
    }
    if let Some(drift) = &r.drift {
        for (i, c) in drift.iter().enumerate() {
            m.push((format!("drift_layer{}", i + 1), c.value));
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub strategy: String,
    pub seed: u64,
}

impl std::fmt::Display for RunKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/seed-{}", self.strategy, self.seed)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the current rayon pool.
    pub workers: Option<usize>,
    /// Checked between tasks; setting it stops every run with
    /// [`Error::Cancelled`], leaving finished runs on disk.
    pub cancel: Option<Arc<AtomicBool>>,
    /// Raise `cancel` once this many tasks have been trained in total.
    pub cancel_after_tasks: Option<usize>,
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub computed: Vec<RunKey>,
    pub skipped: Vec<RunKey>,
    pub failed: Vec<(RunKey, Error)>,
    pub cancelled: bool,
}

#[derive(Serialize)]
struct Timing {
    strategy: String,
    seed: u64,
    seconds: f64,
    per_task_seconds: Vec<f64>,
}

pub fn record_path(out: &Path, strategy: &str, seed: u64) -> PathBuf {
    out.join(strategy).join(format!("seed-{seed}.json"))
}

fn csv_path(out: &Path, strategy: &str, seed: u64) -> PathBuf {
    out.join(strategy).join(format!("seed-{seed}.csv"))
}

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `Some(record)` if a finished, matching result exists; an error if a
/// result from a different configuration is in the way.
fn existing_record(cfg: &ExperimentConfig, s: &NamedStrategy, seed: u64) -> Result<Option<RunRecord>> {
    let path = record_path(&cfg.output, &s.name, seed);
    if !path.exists() {
        return Ok(None);
    }
    let rec = read_record(&path)?;
    if rec.config_hash != cfg.config_hash() || rec.strategy.method != s.method || rec.strategy.adapter != s.adapter {
        return Err(Error::MixedResults(format!(
            "{} was produced by a different configuration; use another output directory",
            path.display()
        )));
    }
    Ok(Some(rec))
}

struct Budget {
    cancel: Arc<AtomicBool>,
    trained: AtomicUsize,
    limit: Option<usize>,
}

impl Budget {
    fn check(&self) -> Result<()> {
        if self.cancel.load(Ordering::SeqCst) {
            Err(Error::Cancelled)
        } else {
            Ok(())
        }
    }

    fn tick(&self) {
        let n = self.trained.fetch_add(1, Ordering::SeqCst) + 1;
        if self.limit.is_some_and(|l| n >= l) {
            self.cancel.store(true, Ordering::SeqCst);
        }
    }
}

/// Run every (strategy, seed) pair of `cfg`, skipping finished ones.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;

    let mut summary = RunSummary::default();
    let mut pending = Vec::new();
    for s in &cfg.strategies {
        for &seed in &cfg.seeds {
            let key = RunKey {
                strategy: s.name.clone(),
                seed,
            };
            match existing_record(cfg, s, seed)? {
                Some(_) => {
                    log::info!("{key}: already complete, skipping");
                    summary.skipped.push(key);
                }
                None => pending.push((s, seed, key)),
            }
        }
    }

    let budget = Budget {
        cancel: opts.cancel.clone().unwrap_or_default(),
        trained: AtomicUsize::new(0),
        limit: opts.cancel_after_tasks,
    };
    let work = || {
        pending
            .par_iter()
            .map(|(s, seed, key)| (key.clone(), run_and_store(cfg, s, *seed, &budget)))
            .collect::<Vec<_>>()
    };
    let results = match opts.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?
            .install(work),
        None => work(),
    };
    for (key, res) in results {
        match res {
            Ok(()) => summary.computed.push(key),
            Err(Error::Cancelled) => summary.cancelled = true,
            Err(e) => {
                log::error!("{key}: {e}");
                summary.failed.push((key, e));
            }
        }
    }
    Ok(summary)
}

fn run_and_store(cfg: &ExperimentConfig, s: &NamedStrategy, seed: u64, budget: &Budget) -> Result<()> {
    let json = record_path(&cfg.output, &s.name, seed);
    let csv = csv_path(&cfg.output, &s.name, seed);
    let (json_tmp, csv_tmp) = (partial(&json), partial(&csv));
    if let Some(dir) = csv.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let started = Instant::now();
    let mut per_task = Vec::new();
    let record = run_single(cfg, s, seed, budget, |report, elapsed| {
        per_task.push(elapsed);
        // Append-only progress so an interrupted run leaves its trail.
        let mut line = String::new();
        for (metric, value) in report_metrics(report) {
            let _ = writeln!(
                line,
                "{},{},{},{},{},{}",
                cfg.config_hash(),
                s.name,
                seed,
                report.task_index,
                metric,
                value
            );
        }
        use std::io::Write;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_tmp)
            .map_err(|e| Error::io(&csv_tmp, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&csv_tmp, e))
    });
    let record = match record {
        Ok(r) => r,
        Err(e) => {
            let _ = fs::remove_file(&csv_tmp);
            return Err(e);
        }
    };
    write_file(&csv_tmp, &record.to_csv())?;
    write_file(&json_tmp, &serde_json::to_string_pretty(&record)?)?;
    fs::rename(&csv_tmp, &csv).map_err(|e| Error::io(&csv, e))?;
    fs::rename(&json_tmp, &json).map_err(|e| Error::io(&json, e))?;
    let timing = Timing {
        strategy: s.name.clone(),
        seed,
        seconds: started.elapsed().as_secs_f64(),
        per_task_seconds: per_task,
    };
    write_file(
        &cfg.output.join("timing").join(format!("{}-seed-{seed}.json", s.name)),
        &serde_json::to_string_pretty(&timing)?,
    )?;
    log::info!("{}/seed-{seed}: done in {:.1}s", s.name, timing.seconds);
    Ok(())
}

fn stack(datasets: &[RegressionDataset], max_rows: usize) -> Result<crate::linalg::Matrix> {
    let per = max_rows.div_ceil(datasets.len().max(1));
    let views: Vec<_> = datasets
        .iter()
        .map(|d| d.inputs.slice(ndarray::s![..per.min(d.len()), ..]))
        .collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Train one strategy on one seed's task sequence. `on_report` sees each
/// report as soon as it exists, with the elapsed seconds of the run.
fn run_single(
    cfg: &ExperimentConfig,
    s: &NamedStrategy,
    seed: u64,
    budget: &Budget,
    mut on_report: impl FnMut(&EvalReport, f64) -> Result<()>,
) -> Result<RunRecord> {
    let started = Instant::now();
    let root = RngState::new(seed);
    let universe = make_universe(&cfg.universe, &root.derive_stream("universe"))?;
    let length = cfg.sequence.length;
    let tasks = universe.make_sequence(&cfg.sequence.pattern, length, &root.derive_stream("sequence"))?;
    let held = make_eval_tasks(&universe, &cfg.eval, &root.derive_stream("eval-tasks"))?;
    let probe = stack(&held.iter().map(|h| h.test.clone()).collect::<Vec<_>>(), PROBE_ROWS)?;
    let (rep_rng, cl_rng) = (root.derive_stream("rep"), root.derive_stream("cl-test"));
    let (data_rng, train_rng) = (root.derive_stream("data"), root.derive_stream("train"));
    let widths = cfg.widths();
    let init = || Model::new(&widths, s.adapter, &mut root.derive_stream("init"));
    let schedule = cfg.schedule_for(s);

    let mut model = init()?;
    let mut strategy = TrainStrategy::new(s.strategy_config(), &root.derive_stream("strategy"))?;
    let mut seen = Vec::new();
    let mut test_sets = Vec::new();
    let mut reports = Vec::new();
    let mut gates = BTreeMap::new();
    let mut previous: Option<Model> = None;

    for (i, task) in tasks.iter().enumerate() {
        budget.check()?;
        let l = i + 1;
        let data = universe.sample_dataset(
            task,
            cfg.sequence.samples_per_task,
            &mut data_rng.derive_stream(&format!("task-{i}")),
            format!("train/task-{i}"),
        )?;
        test_sets.push(cl_test_set(&universe, task, cfg.eval.test_size, &cl_rng)?);
        let task_rng = train_rng.derive_stream(&format!("task-{i}"));
        let is_eval = schedule.is_eval_point(l, length);

        let (outcome, eval_model) = if s.method == Method::Multitask {
            seen.push(data);
            if is_eval {
                let mut m = init()?;
                let pool: Vec<_> = seen.iter().collect();
                let out = train_multitask(&mut m, &pool, &cfg.train, &task_rng)?;
                (out, Some(m))
            } else {
                (Default::default(), None)
            }
        } else {
            let out = train_task(&mut model, &data, &cfg.train, &mut strategy, &task_rng)?;
            if model.gates_trainable() {
                gates.insert(l, model.gate_weights());
            }
            let eval_model = match (&s.method, is_eval) {
                (_, false) => None,
                (Method::GDumb { .. }, true) => Some(gdumb_model(
                    &widths,
                    s.adapter,
                    strategy.buffer.as_ref().expect("gdumb keeps a buffer"),
                    &cfg.train,
                    &task_rng.derive_stream("gdumb"),
                )?),
                (_, true) => Some(model.clone()),
            };
            (out, eval_model)
        };
        budget.tick();
        let Some(eval_model) = eval_model else { continue };

        let rep = if schedule.is_rep_point(l, length) {
            Some(eval_rep(&eval_model, &held, &cfg.eval, &rep_rng)?)
        } else {
            None
        };
        let cl = eval_cl(&eval_model, &test_sets, &strategy.gate_memory)?;
        let similarity = universe
            .features
            .iter()
            .map(|f| f.linear_weights().map(|w| unit_similarity(&eval_model, w)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let activation = universe
            .features
            .iter()
            .map(|f| activation_correlation(&eval_model, Reference::Feature(f), probe.view()))
            .collect::<Result<Vec<_>>>()?;
        let drift = match (&previous, &s.method) {
            (Some(prev), m) if *m != Method::Multitask && !matches!(m, Method::GDumb { .. }) => {
                Some(activation_correlation(&eval_model, Reference::Model(prev), probe.view())?)
            }
            _ => None,
        };
        let report = EvalReport {
            task_index: l,
            feature_index: task.feature_index,
            train_loss: outcome.final_loss,
            epochs: outcome.epochs,
            closed_after_warmup: outcome.closed_after_warmup,
            rep,
            cl,
            similarity,
            activation,
            drift,
        };
        log::info!(
            "{}/seed-{seed}: task {l}/{length} p_cl {:.3}{}",
            s.name,
            report.p_cl(),
            report.p_rep().map(|p| format!(" p_rep {p:.3}")).unwrap_or_default()
        );
        on_report(&report, started.elapsed().as_secs_f64())?;
        reports.push(report);
        previous = Some(eval_model);
    }

    Ok(RunRecord {
        config_hash: cfg.config_hash(),
        strategy: s.clone(),
        seed,
        sequence_features: tasks.iter().map(|t| t.feature_index).collect(),
        reports,
        gates,
    })
}
