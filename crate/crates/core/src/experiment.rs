//! Config-driven experiment runner: builds one dataset per seed, trains every
//! method of a template, evaluates, and writes per-seed reports plus a
//! seed-aggregated summary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colliding::{user_ratios, CollidingConfig, CollidingScorer, NeighborWeights};
use crate::data::{
    apply_flags, inject_false_positives, load_interactions, reveal_extra_feedback, split_holdout, synthesize_dataset, Columns,
    Dataset, LoadOptions, SplitRatios, SyntheticSpec,
};
use crate::denoise::LossStrategy;
use crate::error::{Error, Result};
use crate::eval::{denoise_precision_recall, evaluate, evaluate_users, group_users_by_activity, EvalReport, Scorer, SKIP_POLICY};
use crate::model::{AdamConfig, Model, ModelSpec};
use crate::train::{finetune, train, train_clean, warmup_then_train, PhaseConfig, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    CleanVsNormal,
    AdtCompare,
    ExtraFeedback,
    Colliding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
pub enum StrategyName {
    #[serde(rename = "ce")]
    #[value(name = "ce")]
    Ce,
    #[serde(rename = "t-ce")]
    #[value(name = "t-ce")]
    TCe,
    #[serde(rename = "r-ce")]
    #[value(name = "r-ce")]
    RCe,
}

impl StrategyName {
    pub fn label(self) -> &'static str {
        match self {
            StrategyName::Ce => "CE",
            StrategyName::TCe => "T-CE",
            StrategyName::RCe => "R-CE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExtraStrategy {
    None,
    Finetune,
    Warmup,
    WarmupColliding,
}

/// One trained-and-evaluated row of a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Clean,
    Adt(StrategyName),
    Finetune(StrategyName),
    Warmup(StrategyName),
    WarmupColliding(StrategyName),
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::Clean => "clean".into(),
            Method::Adt(s) => s.label().into(),
            Method::Finetune(s) => format!("finetune+{}", s.label()),
            Method::Warmup(s) => format!("warm-up+{}", s.label()),
            Method::WarmupColliding(s) => format!("warm-up+colliding+{}", s.label()),
        }
    }

    fn needs_extra(self) -> bool {
        matches!(self, Method::Finetune(_) | Method::Warmup(_) | Method::WarmupColliding(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Interaction file; when unset a synthetic dataset is generated.
    pub path: Option<PathBuf>,
    /// Optional noise-flag sidecar for `path`.
    pub flags: Option<PathBuf>,
    pub threshold: f64,
    pub user_col: usize,
    pub item_col: usize,
    pub value_col: Option<usize>,
    pub timestamp_col: Option<usize>,
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub density: f64,
    /// Log-normal sigma of per-user activity around the mean density.
    pub activity_spread: f64,
    /// Injected false-positive share of train. Defaults to 0.3 for synthetic
    /// data and 0 for files.
    pub noise_rate: Option<f64>,
    /// Share of true-positive train records revealed as extra feedback.
    pub extra_fraction: f64,
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            flags: None,
            threshold: 3.0,
            user_col: 0,
            item_col: 1,
            value_col: Some(2),
            timestamp_col: Some(3),
            n_users: 2000,
            n_items: 1000,
            latent_dim: 16,
            density: 0.02,
            activity_spread: 0.0,
            noise_rate: None,
            extra_fraction: 0.1,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub template: Option<Template>,
    pub model: ModelSpec,
    pub strategy: StrategyName,
    pub extra: ExtraStrategy,
    pub epsilon_max: f64,
    pub epsilon_n: u64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_iters: Option<u64>,
    pub warmup_iters: Option<u64>,
    pub finetune_iters: Option<u64>,
    pub phase_lr: Option<f64>,
    pub lambda: f64,
    pub neighbors: usize,
    pub ratio_threshold: f64,
    pub neighbor_weights: NeighborWeights,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub activity_groups: usize,
    pub log_losses: bool,
    /// Epochs between loss-curve rows.
    pub log_every: usize,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            template: None,
            model: ModelSpec::default(),
            strategy: StrategyName::TCe,
            extra: ExtraStrategy::None,
            epsilon_max: 0.2,
            epsilon_n: 1400,
            beta: 0.5,
            lr: 0.001,
            batch_size: 1024,
            neg_ratio: 1,
            epochs: 100,
            max_iters: None,
            warmup_iters: None,
            finetune_iters: None,
            phase_lr: None,
            lambda: 0.9,
            neighbors: 50,
            ratio_threshold: 0.1,
            neighbor_weights: NeighborWeights::Uniform,
            ks: vec![10, 20],
            seeds: vec![0, 1, 2],
            activity_groups: 4,
            log_losses: true,
            log_every: 1,
            out: PathBuf::from("results"),
            data: DataConfig::default(),
        }
    }
}

const EPSILON_MAX_GRID: [f64; 3] = [0.05, 0.1, 0.2];
const BETA_GRID: [f64; 7] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.5, 1.0];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a non-empty list of positive cutoffs".into()));
        }
        if self.epochs == 0 && self.max_iters.is_none() {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.data.flags {
            if !p.exists() {
                return Err(Error::Config(format!("flag file {} does not exist", p.display())));
            }
        }
        self.model.validate()?;
        self.colliding().validate()?;
        self.loss_strategy(StrategyName::TCe)?;
        self.loss_strategy(StrategyName::RCe)?;
        if !EPSILON_MAX_GRID.iter().any(|g| (g - self.epsilon_max).abs() < 1e-12) {
            log::warn!("epsilon_max {} is outside the usual grid {:?}", self.epsilon_max, EPSILON_MAX_GRID);
        }
        if !BETA_GRID.iter().any(|g| (g - self.beta).abs() < 1e-12) {
            log::warn!("beta {} is outside the usual grid {:?}", self.beta, BETA_GRID);
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        let s = self.strategy;
        match self.template {
            Some(Template::CleanVsNormal) => vec![Method::Clean, Method::Adt(StrategyName::Ce)],
            Some(Template::AdtCompare) => {
                vec![Method::Adt(StrategyName::Ce), Method::Adt(StrategyName::TCe), Method::Adt(StrategyName::RCe)]
            }
            Some(Template::ExtraFeedback) => vec![Method::Adt(s), Method::Finetune(s), Method::Warmup(s)],
            Some(Template::Colliding) => vec![Method::Warmup(s), Method::WarmupColliding(s)],
            None => vec![match self.extra {
                ExtraStrategy::None => Method::Adt(s),
                ExtraStrategy::Finetune => Method::Finetune(s),
                ExtraStrategy::Warmup => Method::Warmup(s),
                ExtraStrategy::WarmupColliding => Method::WarmupColliding(s),
            }],
        }
    }

    pub fn loss_strategy(&self, name: StrategyName) -> Result<LossStrategy> {
        match name {
            StrategyName::Ce => Ok(LossStrategy::Ce),
            StrategyName::TCe => LossStrategy::truncated(self.epsilon_max, self.epsilon_n),
            StrategyName::RCe => LossStrategy::reweighted(self.beta),
        }
    }

    pub fn colliding(&self) -> CollidingConfig {
        CollidingConfig {
            lambda: self.lambda,
            n_neighbors: self.neighbors,
            ratio_threshold: self.ratio_threshold,
            weights: self.neighbor_weights,
        }
    }

    pub fn phase(&self, iterations: Option<u64>) -> PhaseConfig {
        PhaseConfig { iterations, lr: self.phase_lr }
    }

    /// Training configuration for `strategy` over a train set of `n_train`
    /// positives.
    pub fn train_config(&self, strategy: StrategyName, seed: u64, n_train: usize) -> Result<TrainConfig> {
        let mut config = TrainConfig {
            model: self.model.clone(),
            strategy: self.loss_strategy(strategy)?,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            batch_size: self.batch_size,
            neg_ratio: self.neg_ratio,
            max_iters: 1,
            seed,
            log_losses: self.log_losses,
            log_every: self.log_every,
            record_drops: strategy == StrategyName::TCe,
            ..TrainConfig::default()
        };
        config.max_iters = self
            .max_iters
            .unwrap_or(self.epochs as u64 * config.iters_per_epoch(n_train));
        Ok(config)
    }
}

/// Dataset for one seed: load or synthesize, split, corrupt, reveal extra
/// feedback.
pub fn build_dataset(data: &DataConfig, seed: u64) -> Result<Dataset> {
    let ratios = SplitRatios { train: data.split[0], validation: data.split[1], test: data.split[2] };
    let (full, noise) = match &data.path {
        Some(path) => {
            let opts = LoadOptions {
                columns: Columns {
                    user: data.user_col,
                    item: data.item_col,
                    value: data.value_col,
                    timestamp: data.timestamp_col,
                },
                threshold: data.threshold,
            };
            let mut ds = load_interactions(path, &opts)?;
            if let Some(flags) = &data.flags {
                let mut train = ds.train.clone();
                apply_flags(&mut train, flags)?;
                ds = ds.with_train(train)?;
            }
            (ds, data.noise_rate.unwrap_or(0.0))
        }
        None => {
            let spec = SyntheticSpec {
                n_users: data.n_users,
                n_items: data.n_items,
                latent_dim: data.latent_dim,
                density: data.density,
                activity_spread: data.activity_spread,
                seed,
            };
            (synthesize_dataset(&spec)?, data.noise_rate.unwrap_or(0.3))
        }
    };
    let mut ds = split_holdout(&full.train, full.n_users, full.n_items, ratios, seed)?;
    if noise > 0.0 {
        ds = inject_false_positives(&ds, noise, seed)?;
    }
    if data.extra_fraction > 0.0 && ds.has_noise_flags() {
        ds = reveal_extra_feedback(&ds, data.extra_fraction, seed)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub iterations: u64,
    pub epochs: usize,
    pub overall: EvalReport,
    /// Test users whose extra/implicit ratio is below the threshold.
    pub sparse: Option<EvalReport>,
    /// Test users in activity groups of roughly equal interaction mass,
    /// sparsest first.
    pub groups: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_false_positives: usize,
    pub n_extra: usize,
    pub n_test: usize,
    pub methods: Vec<MethodReport>,
}

/// A seed report plus its diagnostic CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedArtifacts {
    pub report: SeedReport,
    pub loss_curve_csv: String,
    pub drop_diag_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    /// Standard error of the mean.
    pub se: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, se: std / n.sqrt(), values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateAtK {
    pub k: usize,
    pub recall: Stat,
    pub ndcg: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub overall: Vec<AggregateAtK>,
    pub sparse: Option<Vec<AggregateAtK>>,
}

impl SummaryRow {
    pub fn overall_at(&self, k: usize) -> Option<&AggregateAtK> {
        self.overall.iter().find(|a| a.k == k)
    }

    pub fn sparse_at(&self, k: usize) -> Option<&AggregateAtK> {
        self.sparse.as_ref()?.iter().find(|a| a.k == k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub skip_policy: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, method: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn aggregate(ks: &[usize], reports: &[&EvalReport]) -> Vec<AggregateAtK> {
    ks.iter()
        .map(|&k| AggregateAtK {
            k,
            recall: Stat::of(reports.iter().map(|r| r.recall(k)).collect()),
            ndcg: Stat::of(reports.iter().map(|r| r.ndcg(k)).collect()),
        })
        .collect()
}

/// Seed-aggregated rows, in the method order of the first report.
pub fn summarize(config: &ExperimentConfig, reports: &[SeedReport]) -> Result<Summary> {
    let first = reports.first().ok_or_else(|| Error::Empty("no seed reports to summarize".into()))?;
    let mut rows = Vec::new();
    for (m, method) in first.methods.iter().enumerate() {
        let per_seed: Vec<&MethodReport> = reports
            .iter()
            .map(|r| {
                r.methods
                    .get(m)
                    .filter(|x| x.method == method.method)
                    .ok_or_else(|| Error::Shape(format!("seed {} lacks method {}", r.seed, method.method)))
            })
            .collect::<Result<_>>()?;
        let overall: Vec<&EvalReport> = per_seed.iter().map(|r| &r.overall).collect();
        let sparse: Option<Vec<&EvalReport>> = per_seed.iter().map(|r| r.sparse.as_ref()).collect();
        rows.push(SummaryRow {
            method: method.method.clone(),
            overall: aggregate(&config.ks, &overall),
            sparse: sparse.map(|s| aggregate(&config.ks, &s)),
        });
    }
    Ok(Summary {
        config: config.clone(),
        skip_policy: SKIP_POLICY.into(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        rows,
    })
}

/// Aligned-column text rendering of a summary.
pub fn summary_table(summary: &Summary) -> String {
    let mut header = vec!["method".to_string()];
    let ks: Vec<usize> = summary.rows.first().map(|r| r.overall.iter().map(|a| a.k).collect()).unwrap_or_default();
    for &k in &ks {
        header.push(format!("Recall@{k}"));
        header.push(format!("NDCG@{k}"));
    }
    let cell = |s: &Stat| format!("{:.4} ± {:.4}", s.mean, s.std);
    let mut lines: Vec<Vec<String>> = vec![header];
    for row in &summary.rows {
        let mut line = vec![row.method.clone()];
        for a in &row.overall {
            line.push(cell(&a.recall));
            line.push(cell(&a.ndcg));
        }
        lines.push(line);
    }
    for row in summary.rows.iter().filter(|r| r.sparse.is_some()) {
        let mut line = vec![format!("{} [sparse users]", row.method)];
        for a in row.sparse.as_ref().unwrap() {
            line.push(cell(&a.recall));
            line.push(cell(&a.ndcg));
        }
        lines.push(line);
    }
    let n_cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..n_cols)
        .map(|c| lines.iter().filter_map(|l| l.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "seeds: {:?}", summary.seeds);
    for line in &lines {
        let cells: Vec<String> = line.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    let _ = writeln!(out, "({})", summary.skip_policy);
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `seed_<k>/{report.json,loss_curve.csv,drop_diag.csv}` and the
/// summary files under `out`.
pub fn emit_report(config: &ExperimentConfig, artifacts: &[SeedArtifacts], out: &Path) -> Result<Summary> {
    if artifacts.is_empty() {
        return Err(Error::Empty("no reports to emit".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for a in artifacts {
        let dir = out.join(format!("seed_{}", a.report.seed));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write(&dir.join("report.json"), &(serde_json::to_string_pretty(&a.report)? + "\n"))?;
        write(&dir.join("loss_curve.csv"), &a.loss_curve_csv)?;
        write(&dir.join("drop_diag.csv"), &a.drop_diag_csv)?;
    }
    let reports: Vec<SeedReport> = artifacts.iter().map(|a| a.report.clone()).collect();
    let summary = summarize(config, &reports)?;
    write(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    write(&out.join("summary.txt"), &summary_table(&summary))?;
    Ok(summary)
}

#[derive(Default)]
struct SeedCache {
    adt: HashMap<StrategyName, TrainOutcome>,
    warm: HashMap<StrategyName, (Model, TrainOutcome)>,
}

struct SeedRun<'a> {
    config: &'a ExperimentConfig,
    dataset: &'a Dataset,
    seed: u64,
    cache: SeedCache,
}

impl SeedRun<'_> {
    fn adt(&mut self, s: StrategyName) -> Result<&TrainOutcome> {
        if !self.cache.adt.contains_key(&s) {
            let cfg = self.config.train_config(s, self.seed, self.dataset.train.len())?;
            let out = train(self.dataset, &cfg).map_err(Error::stage(format!("train {}", s.label())))?;
            self.cache.adt.insert(s, out);
        }
        Ok(&self.cache.adt[&s])
    }

    fn warm(&mut self, s: StrategyName) -> Result<&(Model, TrainOutcome)> {
        if !self.cache.warm.contains_key(&s) {
            let cfg = self.config.train_config(s, self.seed, self.dataset.train.len())?;
            let phase = self.config.phase(self.config.warmup_iters);
            let out = warmup_then_train(self.dataset, &phase, &cfg).map_err(Error::stage(format!("warm-up {}", s.label())))?;
            self.cache.warm.insert(s, (out.warm, out.adt));
        }
        Ok(&self.cache.warm[&s])
    }
}

struct Groups {
    relevant: Vec<Vec<u32>>,
    sparse: Option<Vec<u32>>,
    activity: Vec<Vec<u32>>,
}

fn method_report(
    name: String,
    scorer: &dyn Scorer,
    outcome: &TrainOutcome,
    dataset: &Dataset,
    groups: &Groups,
    ks: &[usize],
) -> Result<MethodReport> {
    let stage = format!("evaluate {name}");
    let overall = evaluate(scorer, dataset, ks).map_err(Error::stage(&stage))?;
    let sparse = match &groups.sparse {
        Some(users) => Some(evaluate_users(scorer, dataset, &groups.relevant, Some(users), ks).map_err(Error::stage(&stage))?),
        None => None,
    };
    let activity = groups
        .activity
        .iter()
        .map(|users| evaluate_users(scorer, dataset, &groups.relevant, Some(users), ks))
        .collect::<Result<Vec<_>>>()
        .map_err(Error::stage(&stage))?;
    Ok(MethodReport {
        method: name,
        iterations: outcome.iterations,
        epochs: outcome.epochs,
        overall,
        sparse,
        groups: activity,
    })
}

fn loss_rows(out: &mut String, method: &str, outcome: &TrainOutcome) {
    for line in outcome.loss_log.to_csv().lines().skip(1) {
        let _ = writeln!(out, "{method},{line}");
    }
}

fn drop_rows(out: &mut String, method: &str, outcome: &TrainOutcome, dataset: &Dataset) -> Result<()> {
    if outcome.drop_log.is_empty() || !dataset.has_noise_flags() {
        return Ok(());
    }
    for r in denoise_precision_recall(&outcome.drop_log, dataset)? {
        let _ = writeln!(
            out,
            "{method},{},{:.6},{},{},{},{},{:.6},{:.6},{},{:.6},{:.6}",
            r.epoch,
            r.mean_epsilon,
            r.positives_seen,
            r.false_positives_seen,
            r.dropped,
            r.dropped_false_positives,
            r.recall,
            r.precision,
            u8::from(r.precision_defined),
            r.baseline_recall,
            r.baseline_precision
        );
    }
    Ok(())
}

pub const LOSS_CURVE_HEADER: &str = "method,epoch,tp_mean,fp_mean,pos_mean,neg_mean";
pub const DROP_DIAG_HEADER: &str = "method,epoch,mean_epsilon,positives,false_positives,dropped,dropped_false_positives,recall,precision,precision_defined,baseline_recall,baseline_precision";

/// Trains and evaluates every method of `config` on the dataset of `seed`.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let dataset = build_dataset(&config.data, seed).map_err(Error::stage("dataset"))?;
    let methods = config.methods();
    if methods.iter().any(|m| m.needs_extra()) && dataset.extra_records().is_empty() {
        return Err(Error::stage("dataset")(Error::Empty("the selected methods need extra feedback".into())));
    }
    let relevant = dataset.test_items();
    let has_extra = !dataset.extra_records().is_empty();
    let sparse = has_extra.then(|| {
        let ratios = user_ratios(&dataset);
        (0..dataset.n_users as u32)
            .filter(|&u| !relevant[u as usize].is_empty())
            .filter(|&u| ratios[u as usize].is_some_and(|r| r < config.ratio_threshold))
            .collect::<Vec<u32>>()
    });
    let activity = if config.activity_groups >= 2 {
        group_users_by_activity(&dataset, config.activity_groups).map_err(Error::stage("grouping"))?
    } else {
        Vec::new()
    };
    let groups = Groups { relevant, sparse, activity };

    let mut run = SeedRun { config, dataset: &dataset, seed, cache: SeedCache::default() };
    let mut reports = Vec::new();
    let mut loss_csv = format!("{LOSS_CURVE_HEADER}\n");
    let mut drop_csv = format!("{DROP_DIAG_HEADER}\n");
    let ks = &config.ks;
    for method in methods {
        let name = method.name();
        let report = match method {
            Method::Clean => {
                let n_clean = dataset.train.iter().filter(|r| r.true_positive == Some(true)).count();
                let cfg = config.train_config(StrategyName::Ce, seed, n_clean)?;
                let out = train_clean(&dataset, &cfg).map_err(Error::stage("train clean"))?;
                loss_rows(&mut loss_csv, &name, &out);
                method_report(name, &out.model, &out, &dataset, &groups, ks)?
            }
            Method::Adt(s) => {
                let out = run.adt(s)?;
                loss_rows(&mut loss_csv, &name, out);
                drop_rows(&mut drop_csv, &name, out, &dataset)?;
                method_report(name, &out.model, out, &dataset, &groups, ks)?
            }
            Method::Finetune(s) => {
                let base = run.adt(s)?.clone();
                let cfg = config.train_config(s, seed, dataset.train.len())?;
                let model = finetune(base.model.clone(), &dataset, &config.phase(config.finetune_iters), &cfg)
                    .map_err(Error::stage(format!("finetune {}", s.label())))?;
                method_report(name, &model, &base, &dataset, &groups, ks)?
            }
            Method::Warmup(s) => {
                let (_, out) = run.warm(s)?;
                loss_rows(&mut loss_csv, &name, out);
                drop_rows(&mut drop_csv, &name, out, &dataset)?;
                method_report(name, &out.model, out, &dataset, &groups, ks)?
            }
            Method::WarmupColliding(s) => {
                let (warm, out) = run.warm(s)?;
                let scorer = CollidingScorer::new(&out.model, warm, &dataset, &config.colliding())
                    .map_err(Error::stage("colliding index"))?;
                method_report(name, &scorer, out, &dataset, &groups, ks)?
            }
        };
        reports.push(report);
    }
    Ok(SeedArtifacts {
        report: SeedReport {
            seed,
            n_users: dataset.n_users,
            n_items: dataset.n_items,
            n_train: dataset.train.len(),
            n_false_positives: dataset.train.iter().filter(|r| r.is_false_positive()).count(),
            n_extra: dataset.train.iter().filter(|r| r.extra).count(),
            n_test: dataset.test.len(),
            methods: reports,
        },
        loss_curve_csv: loss_csv,
        drop_diag_csv: drop_csv,
    })
}

/// Runs every seed (in parallel) and writes all artifacts under `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary> {
    config.validate().map_err(Error::stage("config"))?;
    let artifacts = config
        .seeds
        .par_iter()
        .map(|&seed| {
            log::info!("seed {seed}: start");
            let a = run_seed(config, seed).map_err(Error::stage(format!("seed {seed}")));
            log::info!("seed {seed}: done");
            a
        })
        .collect::<Result<Vec<_>>>()?;
    emit_report(config, &artifacts, &config.out).map_err(Error::stage("emit report"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSpec { factors: 8, ..ModelSpec::default() },
            epochs: 3,
            batch_size: 128,
            epsilon_n: 10,
            seeds: vec![0, 1],
            neighbors: 3,
            data: DataConfig { n_users: 120, n_items: 80, latent_dim: 4, density: 0.1, ..DataConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn template_rows() {
        let mut c = ExperimentConfig { template: Some(Template::AdtCompare), ..ExperimentConfig::default() };
        let names: Vec<_> = c.methods().into_iter().map(Method::name).collect();
        assert_eq!(names, ["CE", "T-CE", "R-CE"]);
        c.template = Some(Template::CleanVsNormal);
        assert_eq!(c.methods().len(), 2);
        c.template = Some(Template::ExtraFeedback);
        let names: Vec<_> = c.methods().into_iter().map(Method::name).collect();
        assert_eq!(names, ["T-CE", "finetune+T-CE", "warm-up+T-CE"]);
        c.template = None;
        c.extra = ExtraStrategy::WarmupColliding;
        assert_eq!(c.methods()[0].name(), "warm-up+colliding+T-CE");
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ExperimentConfig::from_toml(
            "template = \"adt-compare\"\nstrategy = \"r-ce\"\nbeta = 0.1\nseeds = [4]\n[model]\nkind = \"neumf\"\n[data]\nnoise_rate = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.template, Some(Template::AdtCompare));
        assert_eq!(c.strategy, StrategyName::RCe);
        assert_eq!(c.model.kind, crate::model::ModelKind::NeuMf);
        assert_eq!(c.data.noise_rate, Some(0.2));
        assert!(ExperimentConfig::from_toml("epsilon = 0.1\n").is_err());
        assert!(ExperimentConfig::from_toml("strategy = \"x-ce\"\n").is_err());
    }

    #[test]
    fn validation_errors() {
        let c = ExperimentConfig { seeds: vec![], ..ExperimentConfig::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { lambda: 2.0, ..ExperimentConfig::default() };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.data.path = Some(PathBuf::from("/definitely/not/here.tsv"));
        assert!(c.validate().is_err());
    }

    #[test]
    fn stats() {
        let s = Stat::of(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert!((s.se - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(vec![0.5]).std, 0.0);
    }

    #[test]
    fn emit_is_byte_stable_and_means_match() {
        let config = ExperimentConfig { template: Some(Template::AdtCompare), ..small_config() };
        let artifacts: Vec<_> = config.seeds.iter().map(|&s| run_seed(&config, s).unwrap()).collect();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let summary = emit_report(&config, &artifacts, a.path()).unwrap();
        emit_report(&config, &artifacts, b.path()).unwrap();
        for f in ["summary.json", "summary.txt", "seed_0/report.json", "seed_1/loss_curve.csv", "seed_1/drop_diag.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let row = summary.row("T-CE").unwrap();
        let per_seed: Vec<f64> = artifacts.iter().map(|x| x.report.methods[1].overall.recall(20)).collect();
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        assert_eq!(row.overall_at(20).unwrap().recall.values, per_seed);
        assert!((row.overall_at(20).unwrap().recall.mean - mean).abs() < 1e-15);
        assert!(emit_report(&config, &[], a.path()).is_err());
        let csv = fs::read_to_string(a.path().join("seed_0/drop_diag.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("T-CE,1,"));
    }

    #[test]
    fn colliding_template_reports_sparse_users() {
        let config = ExperimentConfig { template: Some(Template::Colliding), seeds: vec![3], ..small_config() };
        let a = run_seed(&config, 3).unwrap();
        assert_eq!(a.report.methods.len(), 2);
        assert!(a.report.methods.iter().all(|m| m.sparse.is_some()));
        assert_eq!(a.report.methods[0].overall.users_evaluated, a.report.methods[1].overall.users_evaluated);
    }

    #[test]
    fn stage_names_on_failure() {
        let mut config = ExperimentConfig { template: Some(Template::ExtraFeedback), ..small_config() };
        config.data.extra_fraction = 0.0;
        let err = run_seed(&config, 0).unwrap_err();
        assert!(err.to_string().contains("stage `dataset`"), "{err}");
    }
}
