use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use itta_core::adapt::evaluate;
use itta_core::harness::{self, ExperimentPlan, MethodEntry, Protocol, SuiteSource};
use itta_core::nn::Checkpoint;
use itta_core::train::fit_with;

/// Test-time adaptation experiments on synthetic domain suites.
#[derive(Parser)]
#[command(name = "itta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the plan's suite and write it to `<out>/suite.bin`.
    Generate(Common),
    /// Fit one method with one domain held out; writes a checkpoint and metrics.
    Train(Single),
    /// Evaluate a checkpoint written by `train` on its held-out domain.
    Adapt(Single),
    /// Run every cell of a plan and print the result table.
    Run(Common),
    /// Print the table of a finished or partial run from its log.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Plan file (JSON). Defaults apply to every missing field.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the plan's.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Restrict the run to these methods (repeatable).
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Restrict the run to these held-out domains (repeatable).
    #[arg(long = "held-out")]
    held_out: Vec<String>,
}

#[derive(Args)]
struct Single {
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ours")]
    method: String,
    #[arg(long = "held-out")]
    held_out: String,
}

fn load_plan(path: Option<&Path>) -> Result<ExperimentPlan> {
    match path {
        Some(p) => ExperimentPlan::load(p).with_context(|| format!("reading plan {}", p.display())),
        None => Ok(ExperimentPlan::default()),
    }
}

impl Common {
    fn plan(&self) -> Result<ExperimentPlan> {
        let mut plan = load_plan(self.plan.as_deref())?;
        if let Some(s) = self.seed {
            plan.seed = s;
        }
        if let Some(o) = &self.out {
            plan.output = o.clone();
        }
        if let Some(w) = self.workers {
            plan.workers = w;
        }
        if !self.methods.is_empty() {
            let all = plan.resolved_methods()?;
            let mut picked = Vec::new();
            for name in &self.methods {
                match all.iter().find(|m| &m.name == name) {
                    Some(m) => picked.push(MethodEntry::Custom(m.clone())),
                    None => picked.push(MethodEntry::Builtin(name.clone())),
                }
            }
            plan.methods = picked;
        }
        if !self.held_out.is_empty() {
            plan.domains = Some(self.held_out.clone());
        }
        Ok(plan)
    }
}

impl Single {
    fn setup(&self) -> Result<(ExperimentPlan, harness::Method)> {
        let plan = ExperimentPlan {
            seed: self.seed,
            ..load_plan(self.plan.as_deref())?
        };
        let method = match plan
            .resolved_methods()?
            .into_iter()
            .find(|m| m.name == self.method)
        {
            Some(m) => m,
            None => harness::builtin_method(&self.method)?,
        };
        Ok((plan, method))
    }
}

fn generate(c: &Common) -> Result<ExitCode> {
    let plan = c.plan()?;
    let suite = match (&plan.suite, c.seed) {
        (
            SuiteSource::Generate {
                class_count, specs, ..
            },
            Some(seed),
        ) => SuiteSource::Generate {
            class_count: *class_count,
            specs: specs.clone(),
            seed,
        }
        .load()?,
        (s, _) => s.load()?,
    };
    fs::create_dir_all(&plan.output)?;
    let path = plan.output.join("suite.bin");
    suite.save(&path)?;
    println!(
        "wrote {} ({} domains, {} classes)",
        path.display(),
        suite.domains().len(),
        suite.class_count
    );
    Ok(ExitCode::SUCCESS)
}

fn train(s: &Single) -> Result<ExitCode> {
    let (plan, method) = s.setup()?;
    let suite = plan.suite.load()?.leave_one_out(&s.held_out)?;
    let (cfg, _) = plan.cell_configs(&method, 0);
    fs::create_dir_all(&s.out)?;
    let mut metrics = String::new();
    let res = fit_with(&suite, &cfg, |r| {
        let line = serde_json::to_string(r).expect("metrics record serializes");
        eprintln!("{line}");
        metrics.push_str(&line);
        metrics.push('\n');
    })?;
    fs::write(s.out.join("metrics.jsonl"), metrics)?;
    res.checkpoint.save(s.out.join("checkpoint.ckpt"))?;
    println!(
        "best val acc {:.4} at step {} (checkpoint {})",
        res.best_val_acc,
        res.best_step,
        res.checkpoint.hash()
    );
    Ok(ExitCode::SUCCESS)
}

fn adapt(s: &Single) -> Result<ExitCode> {
    let (plan, method) = s.setup()?;
    let suite = plan.suite.load()?.leave_one_out(&s.held_out)?;
    let (_, cfg) = plan.cell_configs(&method, 0);
    let path = s.out.join("checkpoint.ckpt");
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let res = evaluate(&suite, &ckpt, &cfg)?;
    let mut lines = String::new();
    for r in &res.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(s.out.join("adapt.jsonl"), lines)?;
    for (d, acc) in &res.per_domain {
        println!("{d}: {acc:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn run(c: &Common) -> Result<ExitCode> {
    let plan = c.plan()?;
    let out = harness::run_plan(&plan)?;
    eprintln!(
        "{} cells computed, {} skipped, {} fits, {} checkpoints reused; log {}",
        out.computed_cells,
        out.skipped_cells,
        out.trained,
        out.reused_checkpoints,
        out.log_path.display()
    );
    print!("{}", out.table.render());
    Ok(if out.table.all_valid() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn report(c: &Common) -> Result<ExitCode> {
    let table = if c.plan.is_some() {
        harness::report(&c.plan()?)?
    } else {
        let Some(dir) = &c.out else {
            bail!("report needs --plan or --out");
        };
        harness::report_from_log(dir.join(harness::LOG_FILE), Protocol::LeaveOneOut)?
    };
    print!("{}", table.render());
    Ok(if table.all_valid() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Train(s) => train(s),
        Command::Adapt(s) => adapt(s),
        Command::Run(c) => run(c),
        Command::Report(c) => report(c),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
