//! Experiment plans, the multi-trial runner and result tables.

mod table;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{evaluate, AdaptConfig, AdaptObjective, Strategy};
use crate::data::{default_domain_specs, generate_suite, DomainSpec, DomainSuite};
use crate::error::{Error, Result};
use crate::nn::{hex, Checkpoint};
use crate::train::{fit_with, AuxTask, TrainConfig};

pub use table::{population_std, CellStat, MethodRow, ResultTable};

pub const LOG_FILE: &str = "log.jsonl";
pub const TABLE_FILE: &str = "table.txt";
pub const TABLE_JSON_FILE: &str = "table.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Half-width, in decades, of the per-trial learning-rate draw.
pub const LR_SPREAD_DECADES: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Every domain is held out once; the rest are sources.
    LeaveOneOut,
    /// Every domain is the only source once; the rest are targets.
    SingleSource,
}

/// Where a plan gets its data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteSource {
    Path(PathBuf),
    Generate {
        #[serde(default = "default_class_count")]
        class_count: usize,
        #[serde(default = "default_domain_specs")]
        specs: Vec<DomainSpec>,
        #[serde(default)]
        seed: u64,
    },
}

fn default_class_count() -> usize {
    4
}

impl Default for SuiteSource {
    fn default() -> Self {
        Self::Generate {
            class_count: default_class_count(),
            specs: default_domain_specs(),
            seed: 0,
        }
    }
}

impl SuiteSource {
    pub fn load(&self) -> Result<DomainSuite> {
        match self {
            Self::Path(p) => DomainSuite::load(p),
            Self::Generate {
                class_count,
                specs,
                seed,
            } => generate_suite(*class_count, specs, *seed),
        }
    }
}

/// A named pair of training and adaptation configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
}

/// A method in a plan file: either a builtin name or a full definition.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Builtin(String),
    Custom(Method),
}

impl<'de> Deserialize<'de> for MethodEntry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => Ok(Self::Builtin(s)),
            v => serde_json::from_value(v)
                .map(Self::Custom)
                .map_err(|e| D::Error::custom(format!("method: {e}"))),
        }
    }
}

impl MethodEntry {
    pub fn resolve(&self) -> Result<Method> {
        match self {
            Self::Builtin(name) => builtin_method(name),
            Self::Custom(m) => Ok(m.clone()),
        }
    }
}

pub const BUILTIN_NAMES: [&str; 8] = [
    "ours",
    "ours_no_fw",
    "ours_ent",
    "ours_rot",
    "ours_no_ttt",
    "ours_all",
    "ours_bn",
    "erm",
];

/// The baseline matrix, in table order.
pub fn builtin_methods() -> Vec<Method> {
    BUILTIN_NAMES
        .iter()
        .map(|n| builtin_method(n).expect("builtin"))
        .collect()
}

pub fn builtin_method(name: &str) -> Result<Method> {
    let train = TrainConfig::default();
    let adapt = AdaptConfig::default();
    let (train, adapt) = match name {
        "ours" => (train, adapt),
        "ours_no_fw" => (
            TrainConfig {
                learn_w: false,
                ..train
            },
            adapt,
        ),
        "ours_ent" => (
            TrainConfig {
                aux_task: AuxTask::None,
                learn_w: false,
                ..train
            },
            AdaptConfig {
                objective: AdaptObjective::Entropy,
                ..adapt
            },
        ),
        "ours_rot" => (
            TrainConfig {
                aux_task: AuxTask::Rotation,
                learn_w: false,
                ..train
            },
            AdaptConfig {
                objective: AdaptObjective::Rotation,
                ..adapt
            },
        ),
        "ours_no_ttt" => (
            train,
            AdaptConfig {
                strategy: Strategy::None,
                ttt_steps: 0,
                ..adapt
            },
        ),
        "ours_all" => (
            train,
            AdaptConfig {
                strategy: Strategy::All,
                ..adapt
            },
        ),
        "ours_bn" => (
            train,
            AdaptConfig {
                strategy: Strategy::Bn,
                ..adapt
            },
        ),
        "erm" => (
            TrainConfig {
                alpha: 0.0,
                aux_task: AuxTask::None,
                learn_w: false,
                ..train
            },
            AdaptConfig {
                strategy: Strategy::None,
                ttt_steps: 0,
                ..adapt
            },
        ),
        other => return Err(Error::UnknownMethod(other.to_string())),
    };
    Ok(Method {
        name: name.to_string(),
        train,
        adapt,
    })
}

fn default_methods() -> Vec<MethodEntry> {
    BUILTIN_NAMES
        .iter()
        .map(|n| MethodEntry::Builtin(n.to_string()))
        .collect()
}

fn default_trials() -> usize {
    5
}

fn default_output() -> PathBuf {
    PathBuf::from("itta-out")
}

fn default_workers() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub suite: SuiteSource,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodEntry>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Draw lr_model and lr_adapt per trial around each method's values.
    #[serde(default = "default_true")]
    pub randomize_lr: bool,
    /// Overrides `steps` of every method's training config.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Restrict the held-out (or single-source) domains. All by default.
    #[serde(default)]
    pub domains: Option<Vec<String>>,
}

fn default_protocol() -> Protocol {
    Protocol::LeaveOneOut
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl ExperimentPlan {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn resolved_methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(MethodEntry::resolve).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        let methods = self.resolved_methods()?;
        if methods.is_empty() {
            return Err(Error::Config("plan has no methods".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &methods {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::Config(format!("duplicate method name `{}`", m.name)));
            }
            let (train, adapt) = self.cell_configs(m, 0);
            train.validate()?;
            adapt.validate(train.arch.blocks)?;
        }
        Ok(())
    }

    /// Columns of the result table.
    pub fn columns(&self, suite: &DomainSuite) -> Result<Vec<String>> {
        match &self.domains {
            None => Ok(suite.domain_ids()),
            Some(ids) => {
                for id in ids {
                    suite.domain(id)?;
                }
                Ok(ids.clone())
            }
        }
    }

    /// Configurations of one cell after seeding and learning-rate draws.
    pub fn cell_configs(&self, method: &Method, trial: usize) -> (TrainConfig, AdaptConfig) {
        let draw = trial_draw(self.seed, trial, self.randomize_lr);
        let mut train = method.train.clone();
        let mut adapt = method.adapt.clone();
        if let Some(s) = self.steps {
            train.steps = s;
        }
        if let Some(e) = self.eval_every {
            train.eval_every = e;
        }
        train.seed = draw.seed;
        train.lr_model *= draw.lr_model_factor;
        adapt.seed = draw.seed;
        adapt.lr_adapt *= draw.lr_adapt_factor;
        (train, adapt)
    }

    fn view(&self, suite: &DomainSuite, column: &str) -> Result<DomainSuite> {
        match self.protocol {
            Protocol::LeaveOneOut => suite.leave_one_out(column),
            Protocol::SingleSource => suite.single_source(column),
        }
    }
}

/// Seed and learning-rate multipliers shared by every method of a trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialDraw {
    pub seed: u64,
    pub lr_model_factor: f64,
    pub lr_adapt_factor: f64,
}

pub fn trial_draw(plan_seed: u64, trial: usize, randomize_lr: bool) -> TrialDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(plan_seed);
    rng.set_stream(trial as u64 + 1);
    let seed = rng.next_u64();
    let mut factor = || 10f64.powf(rng.random_range(-LR_SPREAD_DECADES..=LR_SPREAD_DECADES));
    let (m, a) = (factor(), factor());
    if randomize_lr {
        TrialDraw {
            seed,
            lr_model_factor: m,
            lr_adapt_factor: a,
        }
    } else {
        TrialDraw {
            seed,
            lr_model_factor: 1.0,
            lr_adapt_factor: 1.0,
        }
    }
}

/// Identity of a training run: cells with equal keys share a checkpoint.
pub fn train_key(protocol: Protocol, column: &str, cfg: &TrainConfig) -> String {
    let body = serde_json::json!({ "protocol": protocol, "column": column, "train": cfg });
    hex(&Sha256::digest(body.to_string().as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Invalid,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: String,
    pub domain: String,
    pub trial: usize,
    pub status: CellStatus,
    pub accuracy: Option<f64>,
    pub per_target: Vec<(String, f64)>,
    pub train_key: String,
    pub checkpoint_hash: Option<String>,
    pub best_val_acc: Option<f64>,
    pub best_step: Option<usize>,
    pub seed: u64,
    pub lr_model: f64,
    pub lr_adapt: f64,
    pub error: Option<String>,
}

/// Read a run log. A trailing partial line from an interrupted write is
/// cut off the file.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<CellRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        OpenOptions::new()
            .write(true)
            .open(path)?
            .set_len(complete as u64)?;
    }
    let mut out = Vec::new();
    for line in BufReader::new(&bytes[..complete]).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// What a run did, besides producing the table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub table: ResultTable,
    pub log_path: PathBuf,
    pub computed_cells: usize,
    pub skipped_cells: usize,
    pub trained: usize,
    pub reused_checkpoints: usize,
}

struct Job {
    column: String,
    trial: usize,
    key: String,
    train: TrainConfig,
    cells: Vec<(String, AdaptConfig)>,
}

enum Event {
    Cell(CellRecord),
    Trained,
    Reused,
}

/// Fit and evaluate every missing (method, column, trial) cell, append
/// the results to the log and build the table from the log.
pub fn run_plan(plan: &ExperimentPlan) -> Result<RunOutput> {
    plan.validate()?;
    let suite = plan.suite.load()?;
    let methods = plan.resolved_methods()?;
    let columns = plan.columns(&suite)?;
    fs::create_dir_all(plan.output.join(CHECKPOINT_DIR))?;
    let log_path = plan.output.join(LOG_FILE);
    let done: BTreeSet<(String, String, usize)> = read_log(&log_path)?
        .into_iter()
        .map(|r| (r.method, r.domain, r.trial))
        .collect();

    let mut groups: BTreeMap<(usize, usize, String), Job> = BTreeMap::new();
    let mut skipped = 0;
    for trial in 0..plan.trials {
        for (ci, column) in columns.iter().enumerate() {
            for m in &methods {
                if done.contains(&(m.name.clone(), column.clone(), trial)) {
                    skipped += 1;
                    continue;
                }
                let (train, adapt) = plan.cell_configs(m, trial);
                let key = train_key(plan.protocol, column, &train);
                groups
                    .entry((trial, ci, key.clone()))
                    .or_insert_with(|| Job {
                        column: column.clone(),
                        trial,
                        key,
                        train,
                        cells: Vec::new(),
                    })
                    .cells
                    .push((m.name.clone(), adapt));
            }
        }
    }
    let jobs: Vec<Job> = groups.into_values().collect();

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Event>();
    let (mut computed, mut trained, mut reused) = (0, 0, 0);
    let write_result: Result<()> = std::thread::scope(|s| {
        for _ in 0..plan.workers.min(jobs.len().max(1)) {
            let tx = tx.clone();
            let (jobs, next, suite) = (&jobs, &next, &suite);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                run_job(plan, suite, job, &tx);
            });
        }
        drop(tx);
        for event in rx {
            match event {
                Event::Cell(rec) => {
                    writeln!(log, "{}", serde_json::to_string(&rec)?)?;
                    log.flush()?;
                    computed += 1;
                }
                Event::Trained => trained += 1,
                Event::Reused => reused += 1,
            }
        }
        Ok(())
    });
    write_result?;

    let names: Vec<String> = methods.iter().map(|m| m.name.clone()).collect();
    let table = ResultTable::from_records(
        &read_log(&log_path)?,
        &names,
        &columns,
        plan.trials,
        plan.protocol,
    );
    fs::write(plan.output.join(TABLE_FILE), table.render())?;
    fs::write(plan.output.join(TABLE_JSON_FILE), table.to_json())?;
    Ok(RunOutput {
        table,
        log_path,
        computed_cells: computed,
        skipped_cells: skipped,
        trained,
        reused_checkpoints: reused,
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn guarded<T>(f: impl FnOnce() -> Result<T>) -> std::result::Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(format!("panicked: {}", panic_message(p))),
    }
}

struct Trained {
    checkpoint: Checkpoint,
    best_val_acc: f64,
    best_step: usize,
}

fn obtain_checkpoint(
    plan: &ExperimentPlan,
    view: &DomainSuite,
    job: &Job,
    tx: &mpsc::Sender<Event>,
) -> Result<Trained> {
    let dir = plan.output.join(CHECKPOINT_DIR);
    let ckpt_path = dir.join(format!("{}.ckpt", job.key));
    let meta_path = dir.join(format!("{}.json", job.key));
    if ckpt_path.exists() && meta_path.exists() {
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let checkpoint = Checkpoint::load(&ckpt_path)?;
        let _ = tx.send(Event::Reused);
        return Ok(Trained {
            checkpoint,
            best_val_acc: meta["best_val_acc"].as_f64().unwrap_or(f64::NAN),
            best_step: meta["best_step"].as_u64().unwrap_or(0) as usize,
        });
    }
    let mut metrics = Vec::new();
    let res = fit_with(view, &job.train, |r| {
        metrics.push(serde_json::to_string(r).expect("metrics record serializes"));
    })?;
    let mut trace = metrics.join("\n");
    trace.push('\n');
    fs::write(dir.join(format!("{}.metrics.jsonl", job.key)), trace)?;
    let tmp = dir.join(format!("{}.ckpt.tmp", job.key));
    res.checkpoint.save(&tmp)?;
    fs::rename(&tmp, &ckpt_path)?;
    let meta = serde_json::json!({
        "train": job.train,
        "column": job.column,
        "best_val_acc": res.best_val_acc,
        "best_step": res.best_step,
        "w_skipped_steps": res.w_skipped_steps,
        "checkpoint_hash": res.checkpoint.hash(),
    });
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    let _ = tx.send(Event::Trained);
    Ok(Trained {
        checkpoint: res.checkpoint,
        best_val_acc: res.best_val_acc,
        best_step: res.best_step,
    })
}

fn run_job(plan: &ExperimentPlan, suite: &DomainSuite, job: &Job, tx: &mpsc::Sender<Event>) {
    let base = |name: &str, adapt: &AdaptConfig| CellRecord {
        method: name.to_string(),
        domain: job.column.clone(),
        trial: job.trial,
        status: CellStatus::Invalid,
        accuracy: None,
        per_target: Vec::new(),
        train_key: job.key.clone(),
        checkpoint_hash: None,
        best_val_acc: None,
        best_step: None,
        seed: job.train.seed,
        lr_model: job.train.lr_model,
        lr_adapt: adapt.lr_adapt,
        error: None,
    };
    let trained = guarded(|| {
        let view = plan.view(suite, &job.column)?;
        let t = obtain_checkpoint(plan, &view, job, tx)?;
        Ok((view, t))
    });
    let (view, t) = match trained {
        Ok(v) => v,
        Err(e) => {
            for (name, adapt) in &job.cells {
                let mut rec = base(name, adapt);
                rec.error = Some(format!("training failed: {e}"));
                let _ = tx.send(Event::Cell(rec));
            }
            return;
        }
    };
    let hash = t.checkpoint.hash();
    for (name, adapt) in &job.cells {
        let mut rec = base(name, adapt);
        rec.checkpoint_hash = Some(hash.clone());
        rec.best_val_acc = Some(t.best_val_acc);
        rec.best_step = Some(t.best_step);
        match guarded(|| evaluate(&view, &t.checkpoint, adapt)) {
            Ok(res) => {
                rec.status = CellStatus::Ok;
                rec.accuracy = Some(res.macro_avg);
                rec.per_target = res.per_domain;
            }
            Err(e) => rec.error = Some(format!("adaptation failed: {e}")),
        }
        let _ = tx.send(Event::Cell(rec));
    }
}

/// Rebuild the table of `plan` from its log without running anything.
pub fn report(plan: &ExperimentPlan) -> Result<ResultTable> {
    let suite = plan.suite.load()?;
    let names: Vec<String> = plan
        .resolved_methods()?
        .into_iter()
        .map(|m| m.name)
        .collect();
    let records = read_log(plan.output.join(LOG_FILE))?;
    Ok(ResultTable::from_records(
        &records,
        &names,
        &plan.columns(&suite)?,
        plan.trials,
        plan.protocol,
    ))
}

/// Table from a log alone: methods and columns sorted by name, trial
/// count from the highest trial index seen.
pub fn report_from_log(path: impl AsRef<Path>, protocol: Protocol) -> Result<ResultTable> {
    let records = read_log(path)?;
    let mut names: Vec<String> = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for r in &records {
        if !names.contains(&r.method) {
            names.push(r.method.clone());
        }
        if !columns.contains(&r.domain) {
            columns.push(r.domain.clone());
        }
    }
    names.sort();
    columns.sort();
    let trials = records.iter().map(|r| r.trial + 1).max().unwrap_or(0);
    Ok(ResultTable::from_records(
        &records, &names, &columns, trials, protocol,
    ))
}

/// Write a plan as pretty JSON.
pub fn save_plan(plan: &ExperimentPlan, path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(serde_json::to_string_pretty(plan)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests;
