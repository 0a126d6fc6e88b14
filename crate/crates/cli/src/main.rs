//! `pathrl`: synthesize datasets, train and evaluate diagnosis policies, run
//! experiment plans, aggregate pathways and serve policies over HTTP.

use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pathrl_core::drl::{evaluate_policy, pathway_weights, Selection, TrainConfig};
use pathrl_core::env::EnvConfig;
use pathrl_core::harness::{self, Cell, Condition, EpisodeLog, ExperimentPlan, Model};
use pathrl_core::metrics::EvalReport;
use pathrl_core::pathways::{aggregate, extract, GraphFilter};
use pathrl_core::qnet::PolicyArtifact;
use pathrl_core::synthgen::{self, defaults, degrade, read_csv, write_csv, DegradationSpec, UseCase};

#[derive(Debug, Parser)]
#[command(name = "pathrl", version, about = "Diagnostic pathway learning with deep Q-networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Train one agent and write its checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a policy artifact greedily.
    Eval(EvalArgs),
    /// Run an experiment plan.
    Sweep(SweepArgs),
    /// Aggregate stored episodes into a pathway graph.
    Paths(PathsArgs),
    /// Serve policies over HTTP.
    Serve(ServeArgs),
    /// Rebuild the result tables of a sweep directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    use_case: UseCase,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = harness::DESK_RECORDS)]
    records: usize,
    /// Missingness level applied to all records.
    #[arg(long)]
    missing: Option<f64>,
    /// Noise level applied to all records.
    #[arg(long)]
    noise: Option<f64>,
    /// Also write the train, validation and test parts beside `--out`.
    #[arg(long)]
    split: bool,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset CSV; generated from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = harness::DESK_RECORDS)]
    records: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    use_case: UseCase,
    #[arg(long, default_value = "dqn")]
    algo: pathrl_core::drl::Algorithm,
    #[arg(long)]
    per: bool,
    #[arg(long, default_value_t = harness::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = harness::DESK_TIMESTEPS)]
    timesteps: u64,
    /// Checkpoint selection: accuracy or wpahm.
    #[arg(long)]
    select: Option<Selection>,
    /// JSON file with base training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    policy: PathBuf,
    /// Evaluate every record of this CSV instead of a generated test split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = harness::DESK_RECORDS)]
    records: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the episodes for pathway aggregation.
    #[arg(long)]
    episodes: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PathsArgs {
    /// An episode log or a directory searched for `*.episodes.json`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Comma-separated class names or indices.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    collapse_depth: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    artifacts: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Idle minutes before a session expires.
    #[arg(long, default_value_t = 30)]
    ttl_minutes: u64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn synth(a: SynthArgs) -> Result<()> {
    let schema = defaults::schema(a.use_case);
    let mut records = harness::generate_dataset(a.use_case, &schema, a.records, a.seed)?;
    let tree = (a.use_case == UseCase::Anemia).then(|| defaults::anemia_tree(&schema));
    if let Some(level) = a.noise {
        let spec = match a.use_case {
            UseCase::Anemia => DegradationSpec::anemia_noise(level, a.seed),
            UseCase::Lupus => DegradationSpec::lupus_label_noise(level, a.seed),
        };
        records = degrade(&records, &schema, tree.as_ref(), &spec)?;
    }
    if let Some(level) = a.missing {
        let spec = DegradationSpec::missingness(a.use_case, level, a.seed);
        records = degrade(&records, &schema, tree.as_ref(), &spec)?;
    }
    write_csv(&a.out, &schema, &records)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    if a.split {
        let parts = synthgen::split(&records, a.seed);
        for (name, part) in [
            ("train", &parts.train),
            ("validation", &parts.validation),
            ("test", &parts.test),
        ] {
            let path = sibling(&a.out, name);
            write_csv(&path, &schema, part)?;
            println!("wrote {} records to {}", part.len(), path.display());
        }
    }
    Ok(())
}

fn sibling(path: &Path, part: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    path.with_file_name(format!("{stem}_{part}.csv"))
}

fn print_report(report: &EvalReport) {
    print!("{}", report.render_classes());
    println!("mean episode length {:.2}", report.mean_episode_length);
    println!(
        "macro F1 {:.2}  macro ROC-AUC {:.2}",
        100.0 * report.macro_f1,
        100.0 * report.macro_roc_auc
    );
    if let (Some(aps), Some(w)) = (report.aps, report.wpahm) {
        println!("APS {:.2}  wPAHM {:.2}", 100.0 * aps, 100.0 * w);
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let model = Model::Drl {
        algorithm: a.algo,
        per: a.per,
    };
    let plan = ExperimentPlan {
        use_case: a.use_case,
        models: vec![model],
        seeds: vec![a.data.seed],
        records: a.data.records,
        timesteps: a.timesteps,
        lambda: a.lambda,
        selection: a.select,
        train: base,
        data: a.data.data,
        ..Default::default()
    };
    let cell = Cell {
        condition: Condition::clean(),
        model,
        seed: a.data.seed,
    };
    let dir = a.out.join(format!("run_{}", a.data.seed));
    let m = harness::run_cell(&plan, &cell, &dir)?;
    println!(
        "{model} seed {}: selected checkpoint {} of {} ({:.1}s)",
        m.seed,
        m.selected_timestep.unwrap_or(0),
        m.checkpoints.len(),
        m.wall_seconds
    );
    print_report(&m.report);
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let artifact = PolicyArtifact::load(&a.policy)?;
    let use_case = artifact.header.use_case;
    let schema = defaults::schema(use_case);
    let env = match use_case {
        UseCase::Anemia => EnvConfig {
            max_steps: artifact.header.max_steps,
            ..EnvConfig::anemia(&schema)
        },
        UseCase::Lupus => EnvConfig::lupus(
            artifact.header.lambda.unwrap_or(harness::DEFAULT_LAMBDA),
            defaults::penalty_table().weights_for(&schema)?,
        ),
    };
    let records = match &a.data {
        Some(p) => read_csv(p, &schema)?,
        None => {
            synthgen::split(
                &harness::generate_dataset(use_case, &schema, a.records, a.seed)?,
                a.seed,
            )
            .test
        }
    };
    let episodes = evaluate_policy(&artifact, &schema, &env, &records)?;
    let report = EvalReport::compute(&episodes, &schema.classes, pathway_weights(&env));
    print_report(&report);
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.episodes {
        EpisodeLog::new(&schema, episodes).save(p)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let plan = ExperimentPlan::load(&a.plan)?;
    let out = harness::run_plan(&plan, &a.out)?;
    println!("{} runs completed, {} failed", out.runs.len(), out.failures.len());
    for f in &out.failures {
        println!("  {}: {}", f.cell.dir().display(), f.error);
    }
    for f in &out.report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn episode_logs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_owned()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![input.to_owned()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.to_str().is_some_and(|s| s.ends_with(".episodes.json")) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn paths(a: PathsArgs) -> Result<()> {
    let logs = episode_logs(&a.input)?;
    if logs.is_empty() {
        bail!("no episode logs under {}", a.input.display());
    }
    let mut use_case = None;
    let mut episodes = Vec::new();
    for p in &logs {
        let log = EpisodeLog::load(p)?;
        if use_case.is_some_and(|u| u != log.use_case) {
            bail!("{} mixes use cases", a.input.display());
        }
        use_case = Some(log.use_case);
        episodes.extend(log.episodes);
    }
    let schema = defaults::schema(use_case.expect("at least one log"));
    let classes = a
        .classes
        .as_deref()
        .map(|list| {
            list.split(',')
                .map(|c| {
                    let c = c.trim();
                    schema
                        .class_index(c)
                        .or_else(|| c.parse().ok().filter(|&i: &usize| i < schema.n_classes()))
                        .with_context(|| format!("unknown class `{c}`"))
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let filter = GraphFilter {
        classes,
        top_k: a.top_k,
        collapse_depth: a.collapse_depth,
    };
    let graph = aggregate(&extract(&episodes), &schema, &filter);
    fs::write(&a.out, graph.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} episodes from {} logs: {} nodes, {} links -> {}",
        episodes.len(),
        logs.len(),
        graph.nodes.len(),
        graph.links.len(),
        a.out.display()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let state = pathrl_serve::AppState::load(&a.artifacts, Duration::from_secs(60 * a.ttl_minutes))?;
    println!("{} policies loaded from {}", state.store().len(), a.artifacts.display());
    let addr = SocketAddr::new(a.host, a.port);
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(pathrl_serve::serve(state, addr))?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let out = harness::report(&a.input)?;
    for w in &out.warnings {
        println!("warning: {w}");
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Paths(a) => paths(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    }
}
