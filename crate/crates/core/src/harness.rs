//! Experiment plans: multi-seed runs over degradation, λ and train-size
//! sweeps, per-run metrics files and aggregated result tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{knn_impute, FfnnClassifier, FfnnParams, RandomAgent, TreeAgent, TreeClassifier};
use crate::drl::{
    evaluate_agent, evaluate_policy, pathway_weights, select_checkpoint, train, Algorithm, Selection, TrainConfig,
};
use crate::env::{Action, EnvConfig};
use crate::error::{Error, Result};
use crate::metrics::{Ending, EpisodeRecord, EvalReport};
use crate::synthgen::anemia::anemia_dataset;
use crate::synthgen::csvio::write_records;
use crate::synthgen::{
    defaults, degrade, generate_lupus, read_csv, split, stream_rng, DegradationSpec, PatientRecord, Schema, Split,
    UseCase,
};

pub const PLAN_SCHEMA: &str = "experiment-plan/1";
pub const METRICS_SCHEMA: &str = "run-metrics/1";
pub const EPISODES_SCHEMA: &str = "episodes/1";
pub const WORKERS_ENV: &str = "PATHRL_WORKERS";

pub const DESK_RECORDS: usize = 10_000;
pub const DESK_TIMESTEPS: u64 = 300_000;
pub const DEFAULT_TIMESTEP_GRID: [u64; 4] = [100_000, 300_000, 500_000, 1_000_000];
pub const DT_DEPTHS: [Option<usize>; 4] = [Some(8), Some(12), Some(16), None];
pub const FFNN_WIDTHS: [usize; 2] = [64, 128];
pub const FFNN_LAYERS: [usize; 2] = [1, 2];
pub const COMBINED_NOISE: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 9.0;

/// Anything a cell can train and evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Model {
    Drl { algorithm: Algorithm, per: bool },
    DecisionTree,
    Ffnn,
    Random,
    TreeAgent,
}

impl Model {
    pub fn label(self) -> String {
        match self {
            Model::Drl { algorithm, per } => {
                let mut s = algorithm.as_str().to_owned();
                if per {
                    s.push_str("-per");
                }
                s
            }
            Model::DecisionTree => "dt".into(),
            Model::Ffnn => "ffnn".into(),
            Model::Random => "random".into(),
            Model::TreeAgent => "tree-agent".into(),
        }
    }

    pub fn is_drl(self) -> bool {
        matches!(self, Model::Drl { .. })
    }

    /// The eight DQN-family variants.
    pub fn all_drl() -> Vec<Model> {
        Algorithm::ALL
            .iter()
            .flat_map(|&algorithm| [false, true].map(|per| Model::Drl { algorithm, per }))
            .collect()
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt" | "decision-tree" => Ok(Model::DecisionTree),
            "ffnn" => Ok(Model::Ffnn),
            "random" => Ok(Model::Random),
            "tree-agent" => Ok(Model::TreeAgent),
            other => {
                let (name, per) = match other.strip_suffix("-per") {
                    Some(rest) => (rest, true),
                    None => (other, false),
                };
                Ok(Model::Drl {
                    algorithm: name.parse()?,
                    per,
                })
            }
        }
    }
}

impl From<Model> for String {
    fn from(m: Model) -> Self {
        m.label()
    }
}

impl TryFrom<String> for Model {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Which grid a cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Clean,
    Missingness,
    Noise,
    /// Fixed noise plus a missingness level.
    Combined,
    Lambda,
    TrainSize,
}

impl Sweep {
    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::Clean => "clean",
            Sweep::Missingness => "missingness",
            Sweep::Noise => "noise",
            Sweep::Combined => "combined",
            Sweep::Lambda => "lambda",
            Sweep::TrainSize => "train_size",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub sweep: Sweep,
    pub level: f64,
}

impl Condition {
    pub fn clean() -> Self {
        Self {
            sweep: Sweep::Clean,
            level: 0.0,
        }
    }

    pub fn key(&self) -> String {
        match self.sweep {
            Sweep::Clean => "clean".into(),
            s => format!("{}_{}", s.as_str(), self.level),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub condition: Condition,
    pub model: Model,
    pub seed: u64,
}

impl Cell {
    /// Directory of the cell relative to the results root.
    pub fn dir(&self) -> PathBuf {
        PathBuf::from("cells")
            .join(self.condition.key())
            .join(self.model.label())
            .join(format!("run_{}", self.seed))
    }
}

/// Multipliers over the plan's record count and timestep budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scale {
    pub records: f64,
    pub timesteps: f64,
}

impl Default for Scale {
    fn default() -> Self {
        Self {
            records: 1.0,
            timesteps: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub schema: String,
    pub use_case: UseCase,
    #[serde(alias = "algorithms")]
    pub models: Vec<Model>,
    pub seeds: Vec<u64>,
    pub records: usize,
    pub timesteps: u64,
    pub scale: Scale,
    /// Include the clean-data cell.
    pub clean: bool,
    pub missingness: Vec<f64>,
    pub noise: Vec<f64>,
    /// Missingness levels applied on top of `combined_noise`.
    pub combined_missingness: Vec<f64>,
    pub combined_noise: f64,
    pub lambdas: Vec<f64>,
    /// λ for every lupus cell outside the λ sweep.
    pub lambda: f64,
    /// Fractions of the training split kept.
    pub train_fractions: Vec<f64>,
    /// Defaults to accuracy for anemia and wPAHM for lupus.
    pub selection: Option<Selection>,
    /// Anemia only: total timesteps chosen per model on the first seed.
    pub timestep_grid: Option<Vec<u64>>,
    /// Base settings; algorithm flags, seed and timesteps are set per cell.
    pub train: TrainConfig,
    /// Base classifier settings; the width and depth grid is searched.
    pub ffnn: FfnnParams,
    pub save_checkpoints: bool,
    pub workers: Option<usize>,
    /// Dataset CSV used instead of generated records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            schema: PLAN_SCHEMA.into(),
            use_case: UseCase::Anemia,
            models: Vec::new(),
            seeds: vec![0, 1, 2],
            records: DESK_RECORDS,
            timesteps: DESK_TIMESTEPS,
            scale: Scale::default(),
            clean: true,
            missingness: Vec::new(),
            noise: Vec::new(),
            combined_missingness: Vec::new(),
            combined_noise: COMBINED_NOISE,
            lambdas: Vec::new(),
            lambda: DEFAULT_LAMBDA,
            train_fractions: Vec::new(),
            selection: None,
            timestep_grid: None,
            train: TrainConfig::default(),
            ffnn: FfnnParams::default(),
            save_checkpoints: true,
            workers: None,
            data: None,
        }
    }
}

fn check_levels(name: &str, levels: &[f64]) -> Result<()> {
    match levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        Some(l) => Err(Error::config(format!("{name} level {l} is outside [0, 1]"))),
        None => Ok(()),
    }
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != PLAN_SCHEMA {
            return Err(Error::config(format!("unknown plan schema `{}`", self.schema)));
        }
        if self.models.is_empty() {
            return Err(Error::config("plan lists no models"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("plan lists no seeds"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if !(self.scale.records > 0.0 && self.scale.timesteps > 0.0) {
            return Err(Error::config("scale factors must be positive"));
        }
        if self.n_records() < 10 {
            return Err(Error::config("need at least 10 records"));
        }
        check_levels("missingness", &self.missingness)?;
        check_levels("noise", &self.noise)?;
        check_levels("combined missingness", &self.combined_missingness)?;
        check_levels("combined noise", &[self.combined_noise])?;
        check_levels("train fraction", &self.train_fractions)?;
        if self.train_fractions.contains(&0.0) {
            return Err(Error::config("train fraction must be positive"));
        }
        if self.lambdas.iter().chain([&self.lambda]).any(|l| !(*l > 0.0)) {
            return Err(Error::config("λ must be positive"));
        }
        if self.use_case == UseCase::Anemia && !self.lambdas.is_empty() {
            return Err(Error::config("the λ sweep needs query penalties (lupus)"));
        }
        if self.use_case == UseCase::Lupus && self.models.contains(&Model::TreeAgent) {
            return Err(Error::Unsupported(
                "the tree agent needs the anemia labeling tree".into(),
            ));
        }
        match &self.timestep_grid {
            Some(_) if self.use_case == UseCase::Lupus => {
                return Err(Error::config("lupus uses fixed timesteps with checkpoint selection"))
            }
            Some(g) if g.is_empty() || g.contains(&0) => {
                return Err(Error::config("timestep grid must be non-empty and positive"))
            }
            _ => {}
        }
        if self.selection == Some(Selection::BestWpahm) && self.use_case == UseCase::Anemia {
            return Err(Error::config("wPAHM is undefined without query penalties"));
        }
        if self.cells().is_empty() {
            return Err(Error::config("plan has no cells"));
        }
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        (self.records as f64 * self.scale.records).round() as usize
    }

    pub fn n_timesteps(&self) -> u64 {
        (self.timesteps as f64 * self.scale.timesteps).round() as u64
    }

    pub fn selection(&self) -> Selection {
        self.selection.unwrap_or(match self.use_case {
            UseCase::Anemia => Selection::BestAccuracy,
            UseCase::Lupus => Selection::BestWpahm,
        })
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        if self.clean {
            out.push(Condition::clean());
        }
        let grids = [
            (Sweep::Missingness, &self.missingness),
            (Sweep::Noise, &self.noise),
            (Sweep::Combined, &self.combined_missingness),
            (Sweep::Lambda, &self.lambdas),
            (Sweep::TrainSize, &self.train_fractions),
        ];
        for (sweep, levels) in grids {
            out.extend(levels.iter().map(|&level| Condition { sweep, level }));
        }
        out
    }

    /// Every (condition, model, seed) combination in plan order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for condition in self.conditions() {
            for &model in &self.models {
                for &seed in &self.seeds {
                    out.push(Cell { condition, model, seed });
                }
            }
        }
        out
    }

    pub fn lambda_for(&self, condition: &Condition) -> f64 {
        match condition.sweep {
            Sweep::Lambda => condition.level,
            _ => self.lambda,
        }
    }

    pub fn env_config(&self, schema: &Schema, condition: &Condition) -> Result<EnvConfig> {
        Ok(match self.use_case {
            UseCase::Anemia => EnvConfig::anemia(schema),
            UseCase::Lupus => EnvConfig::lupus(
                self.lambda_for(condition),
                defaults::penalty_table().weights_for(schema)?,
            ),
        })
    }

    pub fn workers(&self) -> usize {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .or(self.workers)
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
    }
}

/// The clean dataset of one seed. Lupus records split evenly between
/// ANA-positive and ANA-negative entries.
pub fn generate_dataset(use_case: UseCase, schema: &Schema, records: usize, seed: u64) -> Result<Vec<PatientRecord>> {
    match use_case {
        UseCase::Anemia => anemia_dataset(records, schema, &defaults::anemia_tree(schema), seed),
        UseCase::Lupus => {
            let pos = records / 2;
            generate_lupus(
                pos,
                records - pos,
                schema,
                &defaults::lupus_prevalence(),
                &defaults::lupus_criteria(),
                seed,
            )
        }
    }
}

/// SHA-256 of the records in CSV form.
pub fn records_hash(schema: &Schema, records: &[PatientRecord]) -> Result<String> {
    let mut bytes = Vec::new();
    write_records(&mut bytes, schema, records)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Keeps `round(fraction · n)` training records, at least one.
pub fn subsample(records: &[PatientRecord], fraction: f64, seed: u64) -> Vec<PatientRecord> {
    let keep = ((fraction * records.len() as f64).round() as usize).clamp(1, records.len().max(1));
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut stream_rng(seed, 0x7473));
    order.truncate(keep);
    order.sort_unstable();
    order.into_iter().map(|i| records[i].clone()).collect()
}

/// Data for one cell: degradation touches the training split only.
pub fn cell_split(plan: &ExperimentPlan, schema: &Schema, condition: &Condition, seed: u64) -> Result<Split> {
    let data = match &plan.data {
        Some(path) => read_csv(path, schema)?,
        None => generate_dataset(plan.use_case, schema, plan.n_records(), seed)?,
    };
    let mut parts = split(&data, seed);
    let tree = (plan.use_case == UseCase::Anemia).then(|| defaults::anemia_tree(schema));
    let noise = |level: f64| match plan.use_case {
        UseCase::Anemia => DegradationSpec::anemia_noise(level, seed),
        UseCase::Lupus => DegradationSpec::lupus_label_noise(level, seed),
    };
    let missing = |level: f64| DegradationSpec::missingness(plan.use_case, level, seed);
    let specs = match condition.sweep {
        Sweep::Missingness => vec![missing(condition.level)],
        Sweep::Noise => vec![noise(condition.level)],
        Sweep::Combined => vec![noise(plan.combined_noise), missing(condition.level)],
        Sweep::Clean | Sweep::Lambda | Sweep::TrainSize => Vec::new(),
    };
    for spec in &specs {
        parts.train = degrade(&parts.train, schema, tree.as_ref(), spec)?;
    }
    if condition.sweep == Sweep::TrainSize {
        parts.train = subsample(&parts.train, condition.level, seed);
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub timestep: u64,
    pub validation_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_wpahm: Option<f64>,
    pub validation_mean_length: f64,
}

/// Contents of a cell's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema: String,
    pub use_case: UseCase,
    pub condition: Condition,
    pub model: Model,
    pub seed: u64,
    pub config: serde_json::Value,
    pub train_size: usize,
    pub test_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_timestep: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<CheckpointSummary>,
    pub wall_seconds: f64,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Test-set episodes of a policy, stored beside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub schema: String,
    pub use_case: UseCase,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub episodes: Vec<EpisodeRecord>,
}

impl EpisodeLog {
    pub fn new(schema: &Schema, episodes: Vec<EpisodeRecord>) -> Self {
        Self {
            schema: EPISODES_SCHEMA.into(),
            use_case: schema.use_case,
            class_names: schema.classes.clone(),
            feature_names: schema.feature_names().map(str::to_owned).collect(),
            episodes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let log: Self = serde_json::from_str(&text)?;
        if log.schema != EPISODES_SCHEMA {
            return Err(Error::config(format!("unknown episode log schema `{}`", log.schema)));
        }
        Ok(log)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One-step episodes for a classifier that sees the whole record.
fn classifier_episodes(
    records: &[PatientRecord],
    predict: impl Fn(&PatientRecord) -> Result<Vec<f64>> + Sync,
) -> Result<Vec<EpisodeRecord>> {
    records
        .par_iter()
        .map(|r| {
            let p = predict(r)?;
            let class = crate::qnet::argmax(&p);
            Ok(EpisodeRecord {
                actions: vec![Action::Diagnose(class)],
                observed: vec![None],
                rewards: vec![if class == r.label { 1.0 } else { -1.0 }],
                ending: Ending::Diagnosed,
                prediction: Some(class),
                truth: r.label,
                scores: Some(p),
            })
        })
        .collect()
}

fn ffnn_grid(base: &FfnnParams) -> Vec<FfnnParams> {
    let mut out = Vec::new();
    for layers in FFNN_LAYERS {
        for width in FFNN_WIDTHS {
            out.push(FfnnParams {
                hidden: vec![width; layers],
                ..base.clone()
            });
        }
    }
    out
}

/// Fits every grid point and keeps the best on validation (earliest on ties).
pub fn fit_ffnn_grid(
    train: &[PatientRecord],
    validation: &[PatientRecord],
    n_classes: usize,
    base: &FfnnParams,
) -> Result<(FfnnClassifier, FfnnParams)> {
    let mut best: Option<(f64, FfnnClassifier, FfnnParams)> = None;
    for params in ffnn_grid(base) {
        let model = FfnnClassifier::fit(train, Some(validation), n_classes, &params)?;
        let acc = model.accuracy(validation)?;
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, model, params));
        }
    }
    best.map(|(_, m, p)| (m, p))
        .ok_or_else(|| Error::Empty("empty classifier grid".into()))
}

struct Context<'a> {
    plan: &'a ExperimentPlan,
    schema: &'a Schema,
    timesteps: &'a BTreeMap<Model, u64>,
    root: &'a Path,
}

impl Context<'_> {
    fn train_config(&self, model: Model, seed: u64) -> Result<TrainConfig> {
        let Model::Drl { algorithm, per } = model else {
            return Err(Error::config(format!("{model} is not a DQN variant")));
        };
        let mut cfg = self.plan.train.clone();
        cfg.double = algorithm.double();
        cfg.dueling = algorithm.dueling();
        cfg.per = per;
        cfg.seed = seed;
        cfg.total_timesteps = self.timesteps.get(&model).copied().unwrap_or(self.plan.n_timesteps());
        Ok(cfg)
    }

    fn run(&self, cell: &Cell) -> Result<RunMetrics> {
        self.run_in(cell, &self.root.join(cell.dir()))
    }

    fn run_in(&self, cell: &Cell, dir: &Path) -> Result<RunMetrics> {
        let started = Instant::now();
        let (plan, schema) = (self.plan, self.schema);
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let parts = cell_split(plan, schema, &cell.condition, cell.seed)?;
        let env = plan.env_config(schema, &cell.condition)?;
        let mut selected_timestep = None;
        let mut checkpoints = Vec::new();
        let (episodes, config) = match cell.model {
            Model::Drl { .. } => {
                let cfg = self.train_config(cell.model, cell.seed)?;
                let outcome = train(schema, &env, &cfg, &parts.train, &parts.validation)?;
                let best = select_checkpoint(&outcome.checkpoints, plan.selection())?;
                for c in &outcome.checkpoints {
                    if plan.save_checkpoints {
                        c.artifact.save(&dir.join(format!("ckpt_{}.policy", c.timestep)))?;
                    }
                    checkpoints.push(CheckpointSummary {
                        timestep: c.timestep,
                        validation_accuracy: c.validation_accuracy,
                        validation_wpahm: c.validation_wpahm,
                        validation_mean_length: c.validation_mean_length,
                    });
                }
                let chosen = &outcome.checkpoints[best];
                selected_timestep = Some(chosen.timestep);
                chosen.artifact.save(&dir.join("best.policy"))?;
                let episodes = evaluate_policy(&chosen.artifact, schema, &env, &parts.test)?;
                EpisodeLog::new(schema, episodes.clone()).save(&dir.join("best.episodes.json"))?;
                (episodes, serde_json::json!({ "env": env, "train": cfg }))
            }
            Model::DecisionTree => {
                let train = self.classifier_train(&parts.train);
                let tree = TreeClassifier::fit_grid(&train, &parts.validation, schema.n_classes(), &DT_DEPTHS)?;
                write_file(&dir.join("model.json"), tree.to_json()?.as_bytes())?;
                let episodes = classifier_episodes(&parts.test, |r| {
                    Ok(tree.predict_proba(&crate::baselines::encode_record(&r.values)).to_vec())
                })?;
                let config = serde_json::json!({ "max_depth": tree.params.max_depth, "depth": tree.depth() });
                (episodes, config)
            }
            Model::Ffnn => {
                let train = self.classifier_train(&parts.train);
                let base = FfnnParams {
                    seed: cell.seed,
                    ..plan.ffnn.clone()
                };
                let (model, params) = fit_ffnn_grid(&train, &parts.validation, schema.n_classes(), &base)?;
                write_file(&dir.join("model.json"), model.to_json()?.as_bytes())?;
                let episodes = classifier_episodes(&parts.test, |r| model.predict_proba(r))?;
                (episodes, serde_json::to_value(&params)?)
            }
            Model::Random => {
                let agent = RandomAgent::new(schema);
                let episodes = evaluate_agent(&agent, schema, &env, &parts.test, cell.seed)?;
                (episodes, serde_json::json!({ "env": env }))
            }
            Model::TreeAgent => {
                let agent = TreeAgent::new(schema, defaults::anemia_tree(schema))?;
                let episodes = evaluate_agent(&agent, schema, &env, &parts.test, cell.seed)?;
                (episodes, serde_json::json!({ "env": env }))
            }
        };
        let report = EvalReport::compute(&episodes, &schema.classes, pathway_weights(&env));
        let metrics = RunMetrics {
            schema: METRICS_SCHEMA.into(),
            use_case: plan.use_case,
            condition: cell.condition,
            model: cell.model,
            seed: cell.seed,
            config,
            train_size: parts.train.len(),
            test_hash: records_hash(schema, &parts.test)?,
            selected_timestep,
            checkpoints,
            wall_seconds: started.elapsed().as_secs_f64(),
            report,
        };
        write_file(
            &dir.join("metrics.json"),
            serde_json::to_string_pretty(&metrics)?.as_bytes(),
        )?;
        Ok(metrics)
    }

    /// Lupus classifiers see imputed training data; anemia keeps sentinels.
    fn classifier_train(&self, train: &[PatientRecord]) -> Vec<PatientRecord> {
        match self.plan.use_case {
            UseCase::Anemia => train.to_vec(),
            UseCase::Lupus if train.iter().all(PatientRecord::is_complete) => train.to_vec(),
            UseCase::Lupus => knn_impute(train, train).records,
        }
    }

    /// Total timesteps per DQN variant from the first seed's clean data.
    fn grid_search(&self, grid: &[u64]) -> Result<BTreeMap<Model, u64>> {
        let seed = *self.plan.seeds.iter().min().expect("validated plan has seeds");
        let parts = cell_split(self.plan, self.schema, &Condition::clean(), seed)?;
        let env = self.plan.env_config(self.schema, &Condition::clean())?;
        let mut out = BTreeMap::new();
        for &model in self.plan.models.iter().filter(|m| m.is_drl()) {
            let mut best: Option<(f64, u64)> = None;
            for &t in grid {
                let mut cfg = self.train_config(model, seed)?;
                cfg.total_timesteps = t;
                let outcome = train(self.schema, &env, &cfg, &parts.train, &parts.validation)?;
                let i = select_checkpoint(&outcome.checkpoints, self.plan.selection())?;
                let score = outcome.checkpoints[i].validation_accuracy;
                info!("{model}: {t} timesteps, validation accuracy {score:.4}");
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, t));
                }
            }
            if let Some((_, t)) = best {
                out.insert(model, t);
            }
        }
        Ok(out)
    }
}

/// Runs a single cell of `plan`, writing its files into `dir`.
pub fn run_cell(plan: &ExperimentPlan, cell: &Cell, dir: &Path) -> Result<RunMetrics> {
    plan.validate()?;
    let schema = defaults::schema(plan.use_case);
    let timesteps = BTreeMap::new();
    Context {
        plan,
        schema: &schema,
        timesteps: &timesteps,
        root: dir,
    }
    .run_in(cell, dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub runs: Vec<RunMetrics>,
    pub failures: Vec<CellFailure>,
    pub report: ReportOutput,
}

/// Runs every cell of `plan` under `out_dir`, then writes the report. A
/// failing cell is recorded in `failures.json` and the rest still run.
pub fn run_plan(plan: &ExperimentPlan, out_dir: &Path) -> Result<PlanOutcome> {
    plan.validate()?;
    let schema = defaults::schema(plan.use_case);
    write_file(&out_dir.join("plan.json"), plan.to_json()?.as_bytes())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers())
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let fixed = BTreeMap::new();
    let searcher = Context {
        plan,
        schema: &schema,
        timesteps: &fixed,
        root: out_dir,
    };
    let timesteps = match &plan.timestep_grid {
        Some(grid) => {
            let chosen = pool.install(|| searcher.grid_search(grid))?;
            let labels: BTreeMap<String, u64> = chosen.iter().map(|(m, t)| (m.label(), *t)).collect();
            write_file(
                &out_dir.join("timesteps.json"),
                serde_json::to_string_pretty(&labels)?.as_bytes(),
            )?;
            chosen
        }
        None => fixed.clone(),
    };
    let ctx = Context {
        timesteps: &timesteps,
        ..searcher
    };
    let cells = plan.cells();
    let results: Vec<Result<RunMetrics>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                info!("cell {}", cell.dir().display());
                ctx.run(cell)
            })
            .collect()
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(m) => runs.push(m),
            Err(e) => {
                warn!("cell {} failed: {e}", cell.dir().display());
                failures.push(CellFailure {
                    cell: *cell,
                    error: e.to_string(),
                });
            }
        }
    }
    failures.extend(hash_mismatches(&runs));
    write_file(
        &out_dir.join("failures.json"),
        serde_json::to_string_pretty(&failures)?.as_bytes(),
    )?;
    let report = if runs.is_empty() {
        ReportOutput::default()
    } else {
        report(out_dir)?
    };
    Ok(PlanOutcome { runs, failures, report })
}

/// Runs whose test split differs from the first run with the same seed.
fn hash_mismatches(runs: &[RunMetrics]) -> Vec<CellFailure> {
    let mut first: BTreeMap<u64, &str> = BTreeMap::new();
    let mut out = Vec::new();
    for r in runs {
        let expected = *first.entry(r.seed).or_insert(&r.test_hash);
        if expected != r.test_hash {
            out.push(CellFailure {
                cell: Cell {
                    condition: r.condition,
                    model: r.model,
                    seed: r.seed,
                },
                error: format!("test split hash {} differs from {expected}", r.test_hash),
            });
        }
    }
    out
}

/// Every `metrics.json` under `dir`, in path order.
pub fn load_runs(dir: &Path) -> Result<Vec<RunMetrics>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "metrics.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    if dir.is_dir() {
        walk(dir, &mut paths)?;
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let m: RunMetrics = serde_json::from_str(&text)?;
            if m.schema != METRICS_SCHEMA {
                return Err(Error::config(format!(
                    "{}: unknown metrics schema `{}`",
                    p.display(),
                    m.schema
                )));
            }
            Ok(m)
        })
        .collect()
}

/// Mean, sample standard deviation and 95% t-interval half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Some(Self {
                mean,
                sd: 0.0,
                n,
                ci95: 0.0,
            });
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(f64::NAN);
        Some(Self {
            mean,
            sd,
            n,
            ci95: t * sd / (n as f64).sqrt(),
        })
    }
}

pub const METRIC_NAMES: [&str; 6] = [
    "accuracy",
    "mean_episode_length",
    "macro_f1",
    "macro_roc_auc",
    "aps",
    "wpahm",
];

fn metric(report: &EvalReport, name: &str) -> Option<f64> {
    match name {
        "accuracy" => Some(report.accuracy),
        "mean_episode_length" => Some(report.mean_episode_length),
        "macro_f1" => Some(report.macro_f1),
        "macro_roc_auc" => Some(report.macro_roc_auc),
        "aps" => report.aps,
        "wpahm" => report.wpahm,
        _ => None,
    }
}

/// Aggregate of all runs sharing a condition and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub condition: Condition,
    pub model: Model,
    pub planned: Option<usize>,
    pub metrics: BTreeMap<String, Summary>,
}

impl Row {
    pub fn summary(&self, name: &str) -> Option<&Summary> {
        self.metrics.get(name)
    }

    pub fn n(&self) -> usize {
        self.metrics.get("accuracy").map_or(0, |s| s.n)
    }
}

/// Groups runs into rows ordered by sweep, level and model.
pub fn aggregate(runs: &[RunMetrics], planned: Option<usize>) -> Vec<Row> {
    let mut groups: Vec<((Condition, Model), Vec<&RunMetrics>)> = Vec::new();
    for r in runs {
        match groups
            .iter_mut()
            .find(|((c, m), _)| c.sweep == r.condition.sweep && c.level == r.condition.level && *m == r.model)
        {
            Some((_, v)) => v.push(r),
            None => groups.push(((r.condition, r.model), vec![r])),
        }
    }
    groups
        .sort_by(|((a, am), _), ((b, bm), _)| a.sweep.cmp(&b.sweep).then(a.level.total_cmp(&b.level)).then(am.cmp(bm)));
    groups
        .into_iter()
        .map(|((condition, model), mut rs)| {
            rs.sort_by_key(|r| r.seed);
            let metrics = METRIC_NAMES
                .iter()
                .filter_map(|&name| {
                    let values: Vec<f64> = rs.iter().filter_map(|r| metric(&r.report, name)).collect();
                    Summary::of(&values).map(|s| (name.to_owned(), s))
                })
                .collect();
            Row {
                condition,
                model,
                planned,
                metrics,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportOutput {
    pub rows: Vec<Row>,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn is_rate(name: &str) -> bool {
    name != "mean_episode_length"
}

fn render_summary(s: Option<&Summary>, name: &str) -> String {
    match s {
        None => "-".into(),
        Some(s) if is_rate(name) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.sd),
        Some(s) => format!("{:.2} ± {:.2}", s.mean, s.sd),
    }
}

/// Markdown tables (mean ± SD, rates ×100) per condition.
pub fn render_markdown(rows: &[Row]) -> String {
    let mut out = String::from("# Results\n");
    let mut current: Option<String> = None;
    for row in rows {
        let key = row.condition.key();
        if current.as_deref() != Some(&key) {
            out.push_str(&format!(
                "\n## {key}\n\n| Model | Accuracy | Mean length | Macro F1 | ROC-AUC | APS | wPAHM | n |\n|---|---|---|---|---|---|---|---|\n"
            ));
            current = Some(key);
        }
        let cols: Vec<String> = METRIC_NAMES
            .iter()
            .map(|&name| render_summary(row.summary(name), name))
            .collect();
        out.push_str(&format!("| {} | {} | {} |\n", row.model, cols.join(" | "), row.n()));
    }
    out
}

/// One plot-data table per sweep and metric.
pub fn render_csv(rows: &[Row], sweep: Sweep, name: &str) -> String {
    let mut out = String::from("level,model,mean,sd,n,ci95\n");
    for row in rows.iter().filter(|r| r.condition.sweep == sweep) {
        if let Some(s) = row.summary(name) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.condition.level, row.model, s.mean, s.sd, s.n, s.ci95
            ));
        }
    }
    out
}

/// Reads every run under `dir` and writes `report/summary.md`, plot CSVs and
/// `report/warnings.txt`. Identical inputs give identical bytes.
pub fn report(dir: &Path) -> Result<ReportOutput> {
    let runs = load_runs(&dir.join("cells"))?;
    if runs.is_empty() {
        return Err(Error::Empty(format!("no completed runs under {}", dir.display())));
    }
    let plan_path = dir.join("plan.json");
    let plan = if plan_path.is_file() {
        let text = fs::read_to_string(&plan_path).map_err(|e| Error::io(&plan_path, e))?;
        Some(serde_json::from_str::<ExperimentPlan>(&text)?)
    } else {
        None
    };
    let planned = plan.as_ref().map(|p| p.seeds.len());
    let rows = aggregate(&runs, planned);
    let mut warnings = Vec::new();
    if let Some(p) = &plan {
        for condition in p.conditions() {
            for &model in &p.models {
                if !rows.iter().any(|r| r.condition == condition && r.model == model) {
                    warnings.push(format!("{} {model}: 0 of {} runs", condition.key(), p.seeds.len()));
                }
            }
        }
    }
    for row in &rows {
        if let Some(p) = planned.filter(|&p| row.n() < p) {
            warnings.push(format!(
                "{} {}: {} of {p} runs",
                row.condition.key(),
                row.model,
                row.n()
            ));
        }
    }
    for f in hash_mismatches(&runs) {
        warnings.push(format!("{}: {}", f.cell.dir().display(), f.error));
    }
    for w in &warnings {
        warn!("{w}");
    }
    let out = dir.join("report");
    let mut files = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = out.join(name);
        write_file(&path, text.as_bytes())?;
        files.push(path);
        Ok(())
    };
    put("summary.md".into(), render_markdown(&rows))?;
    put("rows.json".into(), serde_json::to_string_pretty(&rows)?)?;
    let mut sweeps: Vec<Sweep> = rows.iter().map(|r| r.condition.sweep).collect();
    sweeps.dedup();
    for sweep in sweeps {
        for name in METRIC_NAMES {
            let csv = render_csv(&rows, sweep, name);
            if csv.lines().count() > 1 {
                put(format!("{}_{name}.csv", sweep.as_str()), csv)?;
            }
        }
    }
    let mut text = warnings.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    put("warnings.txt".into(), text)?;
    Ok(ReportOutput { rows, files, warnings })
}
