//! Experiment orchestration.
//!
//! A run is a sequence of stages that read and write a bundle directory:
//!
//! ```text
//! <out>/MANIFEST                      bundle version, scenario, seed, attacks
//! <out>/config.toml                   effective configuration
//! <out>/{pretrain,normal}/logs/*.log  normal-traffic logs
//! <out>/{pretrain,normal}/features/{router,coordinator}.csv
//! <out>/models/pretrained.wts, central.wts, federated.wts, global_r<N>.wts
//! <out>/models/comms.csv, scalers.json
//! <out>/thresholds.csv                method, device, mean, std, k, value
//! <out>/attacks/<slug>/logs/*.log
//! <out>/attacks/<slug>/features/{router,coordinator}.csv
//! <out>/attacks/<slug>/losses.csv     method, device, window_start, truth, loss
//! <out>/attacks/<slug>/plot-<R>.csv   per-minute losses and threshold lines
//! <out>/attacks/<slug>/reports.csv    method, device, k, acc, prec, rec, f1
//! <out>/summary.csv                   per attack, method and device at the best k
//! <out>/overhead.csv
//! ```
//!
//! Every stage derives its random streams from the master seed, so a
//! configuration reproduces its bundle byte for byte.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackPlan, AttackSpec, Truth};
use crate::autoencoder::{Architecture, ModelWeights, TrainConfig, TrainReport, Trainer};
use crate::detect::{self, Confusion, DetectionReport, LossStats, Metrics, Verdict};
use crate::features::{
    coordinator_view, extract_windows, fit_scaler, read_feature_csv, router_view, write_feature_csv, FeatureLevel,
    FeatureSchema, FeatureVector, ScalerParams,
};
use crate::federated::{
    run_federated_training, write_comms_csv, write_round_globals, AggregationTree, CommsRecord, FLConfig,
};
use crate::logfmt::{parse_log, LogEntry, Timestamp};
use crate::netmodel::{NodeId, Role, Scenario, Topology};
use crate::simkernel::{run_simulation, SimConfig, SimOutput};
use crate::util::{derive_seed, secs};

pub const BUNDLE_VERSION: u32 = 1;

/// Pipeline stage, used to tag errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Simulate,
    Features,
    Pretrain,
    TrainCentral,
    TrainFed,
    Thresholds,
    Detect,
    SweepK,
    Overhead,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Simulate => "simulate",
            Stage::Features => "features",
            Stage::Pretrain => "pretrain",
            Stage::TrainCentral => "train-central",
            Stage::TrainFed => "train-fed",
            Stage::Thresholds => "thresholds",
            Stage::Detect => "detect",
            Stage::SweepK => "sweep-k",
            Stage::Overhead => "overhead",
        })
    }
}

#[derive(Debug)]
pub struct HarnessError {
    pub stage: Stage,
    pub source: Box<dyn StdError + Send + Sync>,
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.source)
    }
}

impl StdError for HarnessError {
    fn source(&self) -> Option<&(dyn StdError + 'static)> {
        Some(self.source.as_ref())
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

trait StageExt<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T, E: Into<Box<dyn StdError + Send + Sync>>> StageExt<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| HarnessError { stage, source: e.into() })
    }
}

fn fail<T>(stage: Stage, msg: impl Into<String>) -> Result<T> {
    Err(HarnessError { stage, source: msg.into().into() })
}

fn read_file(stage: Stage, path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HarnessError { stage, source: format!("{}: {e}", path.display()).into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Centralized,
    Federated,
    #[default]
    Both,
}

impl Mode {
    pub fn methods(self) -> Vec<Method> {
        match self {
            Mode::Centralized => vec![Method::Centralized],
            Mode::Federated => vec![Method::Federated],
            Mode::Both => vec![Method::Centralized, Method::Federated],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Centralized,
    Federated,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Centralized => "centralized",
            Method::Federated => "federated",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "centralized" => Ok(Method::Centralized),
            "federated" => Ok(Method::Federated),
            _ => Err(format!("unknown method `{s}`")),
        }
    }
}

/// Bounds the federated routers scale with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerScope {
    /// Each router fits its own bounds.
    Local,
    /// Routers exchange their bounds once and all use the merged bounds.
    #[default]
    Shared,
}

/// Phase lengths of every attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    #[serde(with = "secs")]
    pub normal_before: Duration,
    #[serde(with = "secs")]
    pub attack_window: Duration,
    #[serde(with = "secs")]
    pub normal_after: Duration,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            normal_before: AttackPlan::DEFAULT_BEFORE,
            attack_window: AttackPlan::DEFAULT_WINDOW,
            normal_after: AttackPlan::DEFAULT_AFTER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub mode: Mode,
    /// Attack tokens such as `"E1>A"`; empty selects every attack of the scenario.
    pub attacks: Vec<String>,
    pub ks: Vec<f64>,
    #[serde(with = "secs")]
    pub window: Duration,
    #[serde(with = "secs")]
    pub pretrain_duration: Duration,
    /// Share of each round's windows held out, from the end of the round,
    /// for threshold calibration.
    pub validation_fraction: f64,
    pub fed_scaler: ScalerScope,
    /// Also score the coordinator's aggregate windows (device `C`) with the
    /// centralized model. The model never trains on them.
    pub evaluate_coordinator: bool,
    pub architecture: Architecture,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub fl: FLConfig,
    pub plan: PlanConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            scenario: Scenario::III,
            mode: Mode::Both,
            attacks: Vec::new(),
            ks: detect::DEFAULT_KS.to_vec(),
            window: Duration::from_secs(60),
            pretrain_duration: Duration::from_secs(3600),
            validation_fraction: 0.2,
            fed_scaler: ScalerScope::default(),
            evaluate_coordinator: false,
            architecture: Architecture::default(),
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            fl: FLConfig::default(),
            plan: PlanConfig::default(),
        }
    }
}

/// Which simulated run a log or feature file belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Pretrain,
    Normal,
}

impl Part {
    fn dir(self) -> &'static str {
        match self {
            Part::Pretrain => "pretrain",
            Part::Normal => "normal",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).at(Stage::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = Stage::Config;
        self.sim.validate().at(s)?;
        self.train.validate().at(s)?;
        self.fl.validate().at(s)?;
        self.architecture.validate().at(s)?;
        if self.architecture.input != crate::features::FEATURE_COUNT {
            return fail(s, format!("architecture input must be {}", crate::features::FEATURE_COUNT));
        }
        if self.window.is_zero() {
            return fail(s, "window must be positive");
        }
        if self.ks.is_empty() || self.ks.iter().any(|k| !k.is_finite()) {
            return fail(s, "ks must be a nonempty list of finite numbers");
        }
        let w = self.window.as_micros();
        if self.fl.round_interval.as_micros() % w != 0 || self.pretrain_duration.as_micros() % w != 0 {
            return fail(s, "round_interval and pretrain_duration must be whole numbers of windows");
        }
        if self.pretrain_duration.is_zero() {
            return fail(s, "pretrain_duration must be positive");
        }
        let block = self.round_windows();
        let val = self.validation_windows();
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) || val == 0 || val >= block {
            return fail(s, format!("validation_fraction leaves {val} of {block} windows per round for validation"));
        }
        if self.plan.attack_window.is_zero() {
            return fail(s, "plan.attack_window must be positive");
        }
        self.attack_specs()?;
        Ok(())
    }

    pub fn attack_specs(&self) -> Result<Vec<AttackSpec>> {
        if self.attacks.is_empty() {
            return Ok(crate::attacks::enumerate_attacks(self.scenario));
        }
        self.attacks.iter().map(|t| AttackSpec::parse(self.scenario, t).at(Stage::Config)).collect()
    }

    pub fn topology(&self) -> Topology {
        Topology::build(self.scenario)
    }

    pub fn round_windows(&self) -> usize {
        (self.fl.round_interval.as_micros() / self.window.as_micros()) as usize
    }

    pub fn validation_windows(&self) -> usize {
        (self.round_windows() as f64 * self.validation_fraction).round() as usize
    }

    pub fn normal_duration(&self) -> Duration {
        self.fl.round_interval * self.fl.rounds as u32
    }

    fn windows_in(&self, d: Duration) -> usize {
        d.as_micros().div_ceil(self.window.as_micros()) as usize
    }

    pub fn plan(&self, spec: AttackSpec) -> AttackPlan {
        AttackPlan {
            spec,
            normal_before: self.plan.normal_before,
            attack_window: self.plan.attack_window,
            normal_after: self.plan.normal_after,
        }
    }

    fn part_start(&self, part: Part) -> Timestamp {
        let base = self.sim.start_time;
        match part {
            Part::Pretrain => base,
            Part::Normal => base.plus_micros(self.pretrain_duration.as_micros() as i64),
        }
    }

    fn attack_start(&self) -> Timestamp {
        self.part_start(Part::Normal).plus_micros(self.normal_duration().as_micros() as i64)
    }

    fn part_duration(&self, part: Part) -> Duration {
        match part {
            Part::Pretrain => self.pretrain_duration,
            Part::Normal => self.normal_duration(),
        }
    }

    fn sim_config(&self, label: &str, start: Timestamp, duration: Duration) -> SimConfig {
        SimConfig { seed: derive_seed(self.seed, label), start_time: start, duration, ..self.sim.clone() }
    }

    fn methods(&self) -> Vec<Method> {
        self.mode.methods()
    }
}

/// Raw window features of one run, per router.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatures {
    /// Router-level vectors from each router's own log.
    pub router: BTreeMap<NodeId, Vec<FeatureVector>>,
    /// Coordinator-level vectors from the central log, one series per router.
    pub coordinator: BTreeMap<NodeId, Vec<FeatureVector>>,
    pub truths: Vec<Truth>,
}

impl PartFeatures {
    pub fn series(&self, method: Method) -> &BTreeMap<NodeId, Vec<FeatureVector>> {
        match method {
            Method::Centralized => &self.coordinator,
            Method::Federated => &self.router,
        }
    }
}

fn part_features(
    cfg: &ExperimentConfig,
    logs: &BTreeMap<NodeId, Vec<LogEntry>>,
    start: Timestamp,
    truths: Vec<Truth>,
) -> PartFeatures {
    let count = truths.len();
    let mut f = extract_features(&cfg.topology(), logs, start, cfg.window, count, truths);
    if cfg.evaluate_coordinator && cfg.methods().contains(&Method::Centralized) {
        let c = NodeId::COORDINATOR;
        let all = logs.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        f.coordinator.insert(c, extract_windows(all, start, cfg.window, count, c, FeatureSchema::coordinator()));
    }
    f
}

/// Windows every router's view of `logs`.
pub fn extract_features(
    topology: &Topology,
    logs: &BTreeMap<NodeId, Vec<LogEntry>>,
    start: Timestamp,
    window: Duration,
    count: usize,
    truths: Vec<Truth>,
) -> PartFeatures {
    let empty = Vec::new();
    let central = logs.get(&NodeId::COORDINATOR).unwrap_or(&empty);
    let mut router = BTreeMap::new();
    let mut coordinator = BTreeMap::new();
    for r in topology.routers() {
        let own = router_view(logs.get(&r).unwrap_or(&empty), r);
        router.insert(r, extract_windows(&own, start, window, count, r, FeatureSchema::router()));
        let seen = coordinator_view(central, r);
        coordinator.insert(r, extract_windows(&seen, start, window, count, r, FeatureSchema::coordinator()));
    }
    PartFeatures { router, coordinator, truths }
}

fn write_logs(stage: Stage, dir: &Path, out: &SimOutput) -> Result<()> {
    out.write_logs(dir).at(stage)
}

fn read_logs(stage: Stage, topology: &Topology, dir: &Path) -> Result<BTreeMap<NodeId, Vec<LogEntry>>> {
    let mut logs = BTreeMap::new();
    for n in topology.nodes().iter().filter(|n| n.role() != Role::Attacker) {
        let path = dir.join(format!("{n}.log"));
        let text = read_file(stage, &path)?;
        let entries =
            parse_log(&text).map_err(|e| HarnessError { stage, source: format!("{}: {e}", path.display()).into() })?;
        logs.insert(*n, entries);
    }
    Ok(logs)
}

fn write_part_features(stage: Stage, dir: &Path, f: &PartFeatures) -> Result<()> {
    fs::create_dir_all(dir).at(stage)?;
    for (name, series) in [("router", &f.router), ("coordinator", &f.coordinator)] {
        let mut rows = Vec::new();
        let mut truths = Vec::new();
        for vs in series.values() {
            rows.extend(vs.iter().cloned());
            truths.extend(f.truths.iter().copied());
        }
        let file = fs::File::create(dir.join(format!("{name}.csv"))).at(stage)?;
        write_feature_csv(io::BufWriter::new(file), &rows, Some(&truths)).at(stage)?;
    }
    Ok(())
}

fn read_part_features(stage: Stage, dir: &Path) -> Result<PartFeatures> {
    let mut out = PartFeatures { router: BTreeMap::new(), coordinator: BTreeMap::new(), truths: Vec::new() };
    for (name, level) in [("router", FeatureLevel::Router), ("coordinator", FeatureLevel::Coordinator)] {
        let path = dir.join(format!("{name}.csv"));
        let file = fs::File::open(&path)
            .map_err(|e| HarnessError { stage, source: format!("{}: {e}", path.display()).into() })?;
        let rows = read_feature_csv(io::BufReader::new(file), level, false).at(stage)?;
        let mut series: BTreeMap<NodeId, Vec<FeatureVector>> = BTreeMap::new();
        let mut truths: BTreeMap<NodeId, Vec<Truth>> = BTreeMap::new();
        for (v, t) in rows {
            truths.entry(v.device).or_default().push(t.unwrap_or(Truth::Normal));
            series.entry(v.device).or_default().push(v);
        }
        if let Some(t) = truths.into_values().next() {
            out.truths = t;
        }
        match level {
            FeatureLevel::Router => out.router = series,
            FeatureLevel::Coordinator => out.coordinator = series,
        }
    }
    Ok(out)
}

fn write_text(stage: Stage, path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(stage)?;
    }
    fs::write(path, text).map_err(|e| HarnessError { stage, source: format!("{}: {e}", path.display()).into() })
}

fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

fn attack_dir(out: &Path, spec: &AttackSpec) -> PathBuf {
    out.join("attacks").join(spec.slug())
}

/// Writes `MANIFEST` and `config.toml`.
pub fn write_manifest(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let specs = cfg.attack_specs()?;
    let mut m = format!(
        "bundle_version = {BUNDLE_VERSION}\nscenario = \"{}\"\nseed = {}\nmode = \"{}\"\nattacks = [",
        cfg.scenario,
        cfg.seed,
        match cfg.mode {
            Mode::Centralized => "centralized",
            Mode::Federated => "federated",
            Mode::Both => "both",
        }
    );
    m.push_str(&specs.iter().map(|s| format!("\"{}\"", s.slug())).collect::<Vec<_>>().join(", "));
    m.push_str("]\n");
    write_text(Stage::Config, &out.join("MANIFEST"), &m)?;
    write_text(Stage::Config, &out.join("config.toml"), &cfg.to_toml())
}

/// Simulates the pretraining hour and the normal corpus and writes their logs.
pub fn stage_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let topology = cfg.topology();
    for part in [Part::Pretrain, Part::Normal] {
        let sim = cfg.sim_config(part.dir(), cfg.part_start(part), cfg.part_duration(part));
        let run = run_simulation(&topology, &sim, None).at(Stage::Simulate)?;
        write_logs(Stage::Simulate, &out.join(part.dir()).join("logs"), &run)?;
    }
    Ok(())
}

/// Turns the normal-run logs into raw feature matrices.
pub fn stage_features(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let topology = cfg.topology();
    for part in [Part::Pretrain, Part::Normal] {
        let logs = read_logs(Stage::Features, &topology, &out.join(part.dir()).join("logs"))?;
        let count = cfg.windows_in(cfg.part_duration(part));
        let f = part_features(cfg, &logs, cfg.part_start(part), vec![Truth::Normal; count]);
        write_part_features(Stage::Features, &out.join(part.dir()).join("features"), &f)?;
    }
    Ok(())
}

fn load_part(stage: Stage, out: &Path, part: Part) -> Result<PartFeatures> {
    read_part_features(stage, &out.join(part.dir()).join("features"))
}

/// Scalers of every model, stored as `models/scalers.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalerSet {
    pub pretrain: BTreeMap<NodeId, ScalerParams>,
    pub central: Option<ScalerParams>,
    pub federated: BTreeMap<NodeId, ScalerParams>,
}

impl ScalerSet {
    fn path(out: &Path) -> PathBuf {
        models_dir(out).join("scalers.json")
    }

    fn load(stage: Stage, out: &Path) -> Result<ScalerSet> {
        let p = Self::path(out);
        if !p.exists() {
            return Ok(ScalerSet::default());
        }
        serde_json::from_str(&read_file(stage, &p)?).at(stage)
    }

    fn store(&self, stage: Stage, out: &Path) -> Result<()> {
        write_text(stage, &Self::path(out), &serde_json::to_string_pretty(self).at(stage)?)
    }

    fn for_method(&self, stage: Stage, method: Method, router: NodeId) -> Result<&ScalerParams> {
        let s = match method {
            Method::Centralized => self.central.as_ref(),
            Method::Federated => self.federated.get(&router),
        };
        match s {
            Some(s) => Ok(s),
            None => fail(stage, format!("no {method} scaler for {router}; run the training stage first")),
        }
    }
}

/// Per-router scalers for router-level series, restricted to `idx` windows
/// when given.
fn fit_scope(
    stage: Stage,
    scope: ScalerScope,
    series: &BTreeMap<NodeId, Vec<FeatureVector>>,
    idx: Option<&[usize]>,
) -> Result<BTreeMap<NodeId, ScalerParams>> {
    let mut local = BTreeMap::new();
    for (r, vs) in series {
        let fit = match idx {
            Some(idx) => fit_scaler(&pick(vs, idx)),
            None => fit_scaler(vs),
        };
        local.insert(*r, fit.at(stage)?);
    }
    if scope == ScalerScope::Shared {
        let merged = ScalerParams::merge(&local.values().cloned().collect::<Vec<_>>()).at(stage)?;
        local.values_mut().for_each(|p| *p = merged.clone());
    }
    Ok(local)
}

fn normalized(stage: Stage, scaler: &ScalerParams, vs: &[FeatureVector]) -> Result<Vec<Vec<f32>>> {
    Ok(scaler.apply_all(vs).at(stage)?.iter().map(FeatureVector::as_f32).collect())
}

/// Splits window indices of the normal run into per-round training sets
/// and the pooled validation set.
pub fn split_rounds(cfg: &ExperimentConfig, total: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let block = cfg.round_windows();
    let val = cfg.validation_windows();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for r in 0..cfg.fl.rounds {
        let lo = r * block;
        let hi = ((r + 1) * block).min(total);
        let cut = hi.saturating_sub(val).max(lo);
        train.push((lo..cut).collect());
        validation.extend(cut..hi);
    }
    (train, validation)
}

fn pick<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|i| xs[*i].clone()).collect()
}

/// Trains the model every federated client starts from, on the
/// pretraining hour of every router.
pub fn stage_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<TrainReport> {
    let s = Stage::Pretrain;
    let part = load_part(s, out, Part::Pretrain)?;
    let mut scalers = ScalerSet::load(s, out)?;
    let local = fit_scope(s, cfg.fed_scaler, &part.router, None)?;
    let mut pooled = Vec::new();
    for (r, vs) in &part.router {
        pooled.extend(normalized(s, &local[r], vs)?);
    }
    scalers.pretrain = local;
    let init = ModelWeights::init(&cfg.architecture, derive_seed(cfg.seed, "pretrain-init"));
    let train = TrainConfig { seed: derive_seed(cfg.seed, "pretrain-shuffle"), ..cfg.train.clone() };
    let (w, report) = crate::autoencoder::train(&init, &pooled, &train).at(s)?;
    fs::create_dir_all(models_dir(out)).at(s)?;
    w.save(&models_dir(out).join("pretrained.wts")).at(s)?;
    scalers.store(s, out)?;
    Ok(report)
}

/// Trains one model on coordinator-level windows pooled over routers.
pub fn stage_train_central(cfg: &ExperimentConfig, out: &Path) -> Result<TrainReport> {
    let s = Stage::TrainCentral;
    let part = load_part(s, out, Part::Normal)?;
    let (rounds, _) = split_rounds(cfg, part.truths.len());
    let train_idx: Vec<usize> = rounds.concat();
    let raw: Vec<FeatureVector> =
        part.coordinator.iter().filter(|(r, _)| r.is_router()).flat_map(|(_, vs)| pick(vs, &train_idx)).collect();
    let scaler = fit_scaler(&raw).at(s)?;
    let data = normalized(s, &scaler, &raw)?;
    let init = ModelWeights::init(&cfg.architecture, derive_seed(cfg.seed, "central-init"));
    let train = TrainConfig { seed: derive_seed(cfg.seed, "central-shuffle"), ..cfg.train.clone() };
    let mut t = Trainer::new(init, train.clone()).at(s)?;
    let report = t.fit(&data, train.seed).at(s)?;
    fs::create_dir_all(models_dir(out)).at(s)?;
    t.weights.save(&models_dir(out).join("central.wts")).at(s)?;
    let mut scalers = ScalerSet::load(s, out)?;
    scalers.central = Some(scaler);
    scalers.store(s, out)?;
    Ok(report)
}

/// Runs the federated rounds from the pretrained model.
pub fn stage_train_fed(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CommsRecord>> {
    let s = Stage::TrainFed;
    let part = load_part(s, out, Part::Normal)?;
    let pretrained = ModelWeights::load(&models_dir(out).join("pretrained.wts")).at(s)?;
    let (rounds, _) = split_rounds(cfg, part.truths.len());
    let train_idx: Vec<usize> = rounds.concat();
    let mut scalers = ScalerSet::load(s, out)?;
    let local = fit_scope(s, cfg.fed_scaler, &part.router, Some(&train_idx))?;
    let mut data = BTreeMap::new();
    for (r, vs) in &part.router {
        let per_round =
            rounds.iter().map(|idx| normalized(s, &local[r], &pick(vs, idx))).collect::<Result<Vec<_>>>()?;
        data.insert(*r, per_round);
    }
    scalers.federated = local;
    let tree = AggregationTree::from_topology(&cfg.topology()).at(s)?;
    let fl = FLConfig {
        local_train: TrainConfig { seed: derive_seed(cfg.seed, "federated"), ..cfg.fl.local_train.clone() },
        ..cfg.fl.clone()
    };
    let run = run_federated_training(&fl, &tree, &pretrained, &data).at(s)?;
    let dir = models_dir(out);
    write_round_globals(&dir, &run).at(s)?;
    run.global.save(&dir.join("federated.wts")).at(s)?;
    write_comms_csv(&dir.join("comms.csv"), &run.ledger).at(s)?;
    scalers.store(s, out)?;
    Ok(run.ledger)
}

fn load_model(stage: Stage, out: &Path, method: Method) -> Result<ModelWeights<f32>> {
    let name = match method {
        Method::Centralized => "central.wts",
        Method::Federated => "federated.wts",
    };
    ModelWeights::load(&models_dir(out).join(name)).at(stage)
}

fn losses(stage: Stage, model: &ModelWeights<f32>, scaler: &ScalerParams, vs: &[FeatureVector]) -> Result<Vec<f64>> {
    normalized(stage, scaler, vs)?.iter().map(|x| model.sample_loss(x).map(f64::from).at(stage)).collect()
}

/// Validation loss statistics per method and router.
pub type ThresholdTable = BTreeMap<(Method, NodeId), LossStats>;

/// Calibrates per-router thresholds on the held-out normal windows.
pub fn stage_thresholds(cfg: &ExperimentConfig, out: &Path) -> Result<ThresholdTable> {
    let s = Stage::Thresholds;
    let part = load_part(s, out, Part::Normal)?;
    let (_, val_idx) = split_rounds(cfg, part.truths.len());
    let scalers = ScalerSet::load(s, out)?;
    let mut table = ThresholdTable::new();
    for method in cfg.methods() {
        let model = load_model(s, out, method)?;
        for (r, vs) in part.series(method) {
            let l = losses(s, &model, scalers.for_method(s, method, *r)?, &pick(vs, &val_idx))?;
            table.insert((method, *r), LossStats::from_losses(&l).at(s)?);
        }
    }
    let mut text = String::from("method,device,mean,std,k,value\n");
    for ((method, r), st) in &table {
        for k in &cfg.ks {
            let t = st.threshold(*r, *k);
            text.push_str(&format!("{method},{r},{},{},{k},{}\n", t.mean, t.std, t.value));
        }
    }
    write_text(s, &out.join("thresholds.csv"), &text)?;
    Ok(table)
}

fn read_thresholds(stage: Stage, out: &Path) -> Result<ThresholdTable> {
    let text = read_file(stage, &out.join("thresholds.csv"))?;
    let mut table = ThresholdTable::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return fail(stage, format!("bad thresholds row `{line}`"));
        }
        let method: Method = f[0].parse().at(stage)?;
        let device: NodeId = f[1].parse().at(stage)?;
        let mean: f64 = f[2].parse().at(stage)?;
        let std: f64 = f[3].parse().at(stage)?;
        table.insert((method, device), LossStats { mean, std });
    }
    Ok(table)
}

/// Per-window losses of one attack run, per method and router.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackLosses {
    pub spec: AttackSpec,
    pub window_starts: Vec<Timestamp>,
    pub truths: Vec<Truth>,
    pub losses: BTreeMap<(Method, NodeId), Vec<f64>>,
}

/// Simulates one attack run, writes its logs and features, and scores
/// every window with the trained models.
pub fn run_attack(
    cfg: &ExperimentConfig,
    out: &Path,
    spec: AttackSpec,
    models: &BTreeMap<Method, ModelWeights<f32>>,
    scalers: &ScalerSet,
) -> Result<AttackLosses> {
    let s = Stage::Detect;
    let topology = cfg.topology();
    let plan = cfg.plan(spec);
    let start = cfg.attack_start();
    let sim = cfg.sim_config(&format!("attack/{}", spec.slug()), start, plan.total());
    let run = run_simulation(&topology, &sim, Some(&plan)).at(s)?;
    let dir = attack_dir(out, &spec);
    write_logs(s, &dir.join("logs"), &run)?;
    let truths: Vec<Truth> = plan.label_windows(cfg.window).iter().map(|l| l.truth).collect();
    let f = part_features(cfg, &run.logs, start, truths.clone());
    write_part_features(s, &dir.join("features"), &f)?;
    let mut out_losses = BTreeMap::new();
    for (method, model) in models {
        for (r, vs) in f.series(*method) {
            out_losses.insert((*method, *r), losses(s, model, scalers.for_method(s, *method, *r)?, vs)?);
        }
    }
    let window_starts =
        (0..truths.len()).map(|i| start.plus_micros(i as i64 * cfg.window.as_micros() as i64)).collect();
    let result = AttackLosses { spec, window_starts, truths, losses: out_losses };
    write_text(s, &dir.join("losses.csv"), &losses_csv(&result))?;
    Ok(result)
}

fn losses_csv(a: &AttackLosses) -> String {
    let mut text = String::from("method,device,window_start,truth,loss\n");
    for ((method, r), ls) in &a.losses {
        for ((w, t), l) in a.window_starts.iter().zip(&a.truths).zip(ls) {
            text.push_str(&format!("{method},{r},{w},{t},{l}\n"));
        }
    }
    text
}

fn read_losses(stage: Stage, out: &Path, spec: AttackSpec) -> Result<AttackLosses> {
    let text = read_file(stage, &attack_dir(out, &spec).join("losses.csv"))?;
    let mut losses: BTreeMap<(Method, NodeId), Vec<f64>> = BTreeMap::new();
    let mut windows: BTreeMap<(Method, NodeId), Vec<(Timestamp, Truth)>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return fail(stage, format!("bad losses row `{line}`"));
        }
        let key = (f[0].parse::<Method>().at(stage)?, f[1].parse::<NodeId>().at(stage)?);
        let ts = Timestamp::parse(f[2])
            .ok_or_else(|| HarnessError { stage, source: format!("bad time `{}`", f[2]).into() })?;
        let truth = match f[3] {
            "attack" => Truth::Attack,
            "normal" => Truth::Normal,
            other => return fail(stage, format!("bad truth `{other}`")),
        };
        losses.entry(key).or_default().push(f[4].parse().at(stage)?);
        windows.entry(key).or_default().push((ts, truth));
    }
    let first = windows.into_values().next().unwrap_or_default();
    Ok(AttackLosses {
        spec,
        window_starts: first.iter().map(|w| w.0).collect(),
        truths: first.iter().map(|w| w.1).collect(),
        losses,
    })
}

/// Runs every selected attack (in parallel) and writes per-attack losses
/// and plot data.
pub fn stage_detect(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AttackLosses>> {
    let s = Stage::Detect;
    let scalers = ScalerSet::load(s, out)?;
    let table = read_thresholds(s, out)?;
    let models: BTreeMap<Method, ModelWeights<f32>> =
        cfg.methods().into_iter().map(|m| Ok((m, load_model(s, out, m)?))).collect::<Result<_>>()?;
    let specs = cfg.attack_specs()?;
    let results: Vec<AttackLosses> =
        specs.par_iter().map(|spec| run_attack(cfg, out, *spec, &models, &scalers)).collect::<Result<_>>()?;
    for a in &results {
        let devices: std::collections::BTreeSet<NodeId> = a.losses.keys().map(|k| k.1).collect();
        for r in devices {
            let text = emit_plot_data(a, r, &table, &cfg.ks);
            write_text(s, &attack_dir(out, &a.spec).join(format!("plot-{r}.csv")), &text)?;
        }
    }
    Ok(results)
}

/// Per-minute losses of both methods at one router, with a threshold
/// column per method and k.
pub fn emit_plot_data(a: &AttackLosses, router: NodeId, table: &ThresholdTable, ks: &[f64]) -> String {
    let methods: Vec<Method> =
        [Method::Centralized, Method::Federated].into_iter().filter(|m| a.losses.contains_key(&(*m, router))).collect();
    let mut header = vec!["minute".to_string(), "window_start".into(), "truth".into()];
    for m in &methods {
        header.push(format!("{m}_loss"));
    }
    for m in &methods {
        for k in ks {
            header.push(format!("{m}_threshold_k{k}"));
        }
    }
    let mut text = header.join(",");
    text.push('\n');
    for (i, (w, t)) in a.window_starts.iter().zip(&a.truths).enumerate() {
        let mut row = vec![i.to_string(), w.to_string(), t.to_string()];
        for m in &methods {
            row.push(format!("{}", a.losses[&(*m, router)][i]));
        }
        for m in &methods {
            for k in ks {
                let v = table.get(&(*m, router)).map(|st| st.threshold(router, *k).value);
                row.push(v.map(|v| format!("{v}")).unwrap_or_default());
            }
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

/// Detection result of one method on one attack, with the observing
/// routers' verdicts OR-ed per window.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedResult {
    pub method: Method,
    pub observers: Vec<NodeId>,
    pub k: f64,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub spec: AttackSpec,
    /// One report per method, router and k, grouped by method then router.
    pub per_device: Vec<(Method, DetectionReport)>,
    /// Best-k fused result per method.
    pub fused: Vec<FusedResult>,
}

/// Sweeps k for every router and method and fuses the observers.
pub fn evaluate_attack(a: &AttackLosses, table: &ThresholdTable, ks: &[f64]) -> Result<AttackReport> {
    let s = Stage::SweepK;
    let mut per_device = Vec::new();
    let mut fused = Vec::new();
    let methods: Vec<Method> =
        a.losses.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let observers: Vec<NodeId> = a.spec.observers().into_iter().filter(|n| n.is_router()).collect();
    for method in methods {
        let mut by_device: BTreeMap<NodeId, Vec<DetectionReport>> = BTreeMap::new();
        for ((m, r), ls) in &a.losses {
            if *m != method {
                continue;
            }
            let Some(st) = table.get(&(method, *r)) else {
                return fail(s, format!("no {method} threshold for {r}"));
            };
            let reports = detect::sweep_k(*r, st, &a.window_starts, ls, &a.truths, ks).at(s)?;
            by_device.insert(*r, reports);
        }
        let mut candidates = Vec::new();
        for (ki, k) in ks.iter().enumerate() {
            let verdicts: Vec<Vec<Verdict>> =
                observers.iter().filter_map(|o| by_device.get(o)).map(|rs| rs[ki].verdicts()).collect();
            let c = detect::confusion(&detect::fuse_any(&verdicts), &a.truths).at(s)?;
            candidates.push(FusedResult {
                method,
                observers: observers.clone(),
                k: *k,
                confusion: c,
                metrics: Metrics::from_confusion(&c),
            });
        }
        let scores: Vec<(f64, f64)> = candidates.iter().map(|c| (c.k, c.metrics.f1)).collect();
        if let Some(best) = detect::select_optimal_k(&scores) {
            fused.extend(candidates.into_iter().filter(|c| c.k == best).take(1));
        }
        per_device.extend(by_device.into_values().flatten().map(|r| (method, r)));
    }
    Ok(AttackReport { spec: a.spec, per_device, fused })
}

fn metric_cells(m: &Metrics) -> String {
    format!("{:.4},{:.4},{:.4},{:.4},{:.4}", m.accuracy, m.precision, m.recall, m.f1, m.false_positive_rate)
}

/// Writes per-attack `reports.csv` and the bundle's `summary.csv`.
pub fn stage_sweep_k(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AttackReport>> {
    let s = Stage::SweepK;
    let table = read_thresholds(s, out)?;
    let mut reports = Vec::new();
    let mut summary = String::from("attack,method,device,k,acc,prec,rec,f1,fpr\n");
    for spec in cfg.attack_specs()? {
        let a = read_losses(s, out, spec)?;
        let rep = evaluate_attack(&a, &table, &cfg.ks)?;
        let mut text = String::from("method,device,k,acc,prec,rec,f1\n");
        for (method, r) in &rep.per_device {
            let m = &r.metrics;
            text.push_str(&format!(
                "{method},{},{},{:.4},{:.4},{:.4},{:.4}\n",
                r.device, r.k, m.accuracy, m.precision, m.recall, m.f1
            ));
        }
        write_text(s, &attack_dir(out, &spec).join("reports.csv"), &text)?;
        for chunk in rep.per_device.chunks(cfg.ks.len()) {
            let method = chunk[0].0;
            let reports: Vec<DetectionReport> = chunk.iter().map(|c| c.1.clone()).collect();
            if let Some(best) = detect::optimal_report(&reports) {
                summary.push_str(&format!(
                    "{},{method},{},{},{}\n",
                    spec.slug(),
                    best.device,
                    best.k,
                    metric_cells(&best.metrics)
                ));
            }
        }
        for f in &rep.fused {
            summary.push_str(&format!("{},{},observers,{},{}\n", spec.slug(), f.method, f.k, metric_cells(&f.metrics)));
        }
        reports.push(rep);
    }
    write_text(s, &out.join("summary.csv"), &summary)?;
    Ok(reports)
}

/// Parameters of the communication comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadModel {
    /// Raw data each router contributes to the central store over the run.
    pub per_router_bytes: u64,
    pub routers: u64,
    pub payload_bytes: u64,
    pub rounds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub centralized_bytes: u64,
    pub federated_bytes: u64,
    /// Centralized over federated bytes.
    pub ratio: f64,
}

pub fn overhead_report(m: &OverheadModel) -> OverheadReport {
    let centralized_bytes = m.per_router_bytes * m.routers;
    let federated_bytes = 2 * m.payload_bytes * m.rounds * m.routers;
    let ratio = if federated_bytes == 0 { f64::INFINITY } else { centralized_bytes as f64 / federated_bytes as f64 };
    OverheadReport { centralized_bytes, federated_bytes, ratio }
}

/// The published figures: 1.5 MB per router, 12.6 KB weights, 5 rounds, 3 routers.
pub fn published_overhead_model() -> OverheadModel {
    OverheadModel { per_router_bytes: 1_500_000, routers: 3, payload_bytes: 12_600, rounds: 5 }
}

/// Compares the published parameters with the simulated run: central
/// bytes are the serialized coordinator log lines each router's traffic
/// produced; federated bytes come from the comms ledger.
pub fn stage_overhead(cfg: &ExperimentConfig, out: &Path) -> Result<(OverheadReport, OverheadReport)> {
    let s = Stage::Overhead;
    let topology = cfg.topology();
    let logs = read_logs(s, &topology, &out.join(Part::Normal.dir()).join("logs"))?;
    let central = logs.get(&NodeId::COORDINATOR).cloned().unwrap_or_default();
    let routers: Vec<NodeId> = topology.routers().collect();
    let total: u64 = routers
        .iter()
        .map(|r| coordinator_view(&central, *r).iter().map(|e| e.serialize().len() as u64 + 1).sum::<u64>())
        .sum();
    let ledger = read_file(s, &models_dir(out).join("comms.csv"))?;
    let mut fed_bytes = 0u64;
    let mut payload = 0u64;
    for line in ledger.lines().skip(1) {
        let b: u64 = line.rsplit(',').next().unwrap_or("").parse().at(s)?;
        fed_bytes += b;
        payload = payload.max(b);
    }
    let published = overhead_report(&published_overhead_model());
    let sim_model = OverheadModel {
        per_router_bytes: total / routers.len().max(1) as u64,
        routers: routers.len() as u64,
        payload_bytes: payload,
        rounds: cfg.fl.rounds as u64,
    };
    let simulated = overhead_report(&sim_model);
    if simulated.federated_bytes != fed_bytes {
        return fail(s, format!("ledger holds {fed_bytes} B, model predicts {}", simulated.federated_bytes));
    }
    let mut text =
        String::from("source,routers,rounds,payload_bytes,per_router_bytes,centralized_bytes,federated_bytes,ratio\n");
    for (name, m, r) in [("published", published_overhead_model(), published), ("simulated", sim_model, simulated)] {
        text.push_str(&format!(
            "{name},{},{},{},{},{},{},{:.3}\n",
            m.routers, m.rounds, m.payload_bytes, m.per_router_bytes, r.centralized_bytes, r.federated_bytes, r.ratio
        ));
    }
    write_text(s, &out.join("overhead.csv"), &text)?;
    Ok((published, simulated))
}

/// Everything `run-all` produced that callers may want to inspect.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub thresholds: ThresholdTable,
    pub attacks: Vec<AttackReport>,
    pub overhead: Option<(OverheadReport, OverheadReport)>,
}

/// Runs every stage in order into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).at(Stage::Config)?;
    write_manifest(cfg, out)?;
    stage_simulate(cfg, out)?;
    stage_features(cfg, out)?;
    let methods = cfg.methods();
    if methods.contains(&Method::Federated) {
        stage_pretrain(cfg, out)?;
    }
    if methods.contains(&Method::Centralized) {
        stage_train_central(cfg, out)?;
    }
    if methods.contains(&Method::Federated) {
        stage_train_fed(cfg, out)?;
    }
    let thresholds = stage_thresholds(cfg, out)?;
    stage_detect(cfg, out)?;
    let attacks = stage_sweep_k(cfg, out)?;
    let overhead = if methods.contains(&Method::Federated) { Some(stage_overhead(cfg, out)?) } else { None };
    Ok(RunSummary { thresholds, attacks, overhead })
}
