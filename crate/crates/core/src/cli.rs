//! Experiment runner and command-line surface.
//!
//! `run` executes ingest → split → features → k-means groups → DMTL
//! training and baseline fitting → evaluation, then writes `report.json`,
//! `report.md`, `projections.csv` and `dmtl_checkpoint.json` under the
//! output directory. `validate` prints dataset statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::baselines::{fit, BaselineConfig, BaselineModel, Variant};
use crate::dataio::{
    build_item_features_with, build_user_features_with, parse_generic_csv, parse_movielens, split, CsvColumns,
    DatasetStats, FeatureRecipe, RatingsTable, SplitSpec,
};
use crate::dmtl::{train_with, Checkpoint, DmtlConfig, EpochLog, GroupData, GroupSample, Predictor};
use crate::error::{Error, Result};
use crate::evalrank::{
    evaluate_method, profiling_metrics, CandidateSet, EvalReport, MethodResult, PrecisionDenominator, RankingTask,
    RelevanceSpec,
};
use crate::grouping::{aggregate_group_ratings, kmeans, project_2d, write_projection_csv, GroupRatingsTable};

/// Environment variable naming the directory that holds `ml-100k/u.data`.
pub const DATA_DIR_ENV: &str = "GROUPREC_DATA_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Tab-separated `user item rating timestamp`.
    #[default]
    Movielens,
    /// Comma-separated with a header row.
    Csv,
}

/// Fully resolved settings of one run. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub format: DataFormat,
    pub csv: CsvColumns,
    pub split: SplitSpec,
    pub user_features: FeatureRecipe,
    pub item_features: FeatureRecipe,
    pub k_groups: usize,
    pub kmeans_max_iter: usize,
    pub dmtl: DmtlConfig,
    pub baselines: BaselineConfig,
    pub relevance: RelevanceSpec,
    /// Also score every method per user.
    pub user_level: bool,
    pub seed: u64,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub quiet: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: default_data_path(),
            format: DataFormat::Movielens,
            csv: CsvColumns::default(),
            split: SplitSpec::default(),
            user_features: FeatureRecipe::Centered,
            item_features: FeatureRecipe::Centered,
            k_groups: 20,
            kmeans_max_iter: 300,
            dmtl: DmtlConfig::default(),
            baselines: BaselineConfig::default(),
            relevance: RelevanceSpec::default(),
            user_level: true,
            seed: 42,
            out: PathBuf::from("runs/latest"),
            quiet: false,
        }
    }
}

impl ExperimentConfig {
    /// Uses `seed` for the split, clustering, DMTL and baselines alike.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.split.seed = seed;
        self.dmtl.seed = seed;
        self.baselines.seed = seed;
        self
    }

    fn resolve(&mut self) -> Result<()> {
        if self.k_groups == 0 {
            return Err(Error::Config("k must be ≥ 1".into()));
        }
        self.dmtl.classes = self.k_groups;
        self.dmtl.validate()
    }
}

/// `$GROUPREC_DATA_DIR/ml-100k/u.data`, or `data/ml-100k/u.data`.
pub fn default_data_path() -> PathBuf {
    let dir = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
    dir.join("ml-100k").join("u.data")
}

/// Hash of the file as a git blob object (`git hash-object`).
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn load_table(path: &Path, format: DataFormat, csv: &CsvColumns) -> Result<RatingsTable> {
    match format {
        DataFormat::Movielens => parse_movielens(path),
        DataFormat::Csv => parse_generic_csv(path, csv),
    }
}

/// Reference statistics a dataset can be checked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Expected {
    /// 943 users, 1682 items, 100000 ratings, scale [1, 5], sparsity 93.70%.
    Movielens100k,
    /// 454 users, 70 items, 5230 ratings, scale [1, 5], sparsity 83.54%.
    Itm,
}

impl Expected {
    fn reference(self) -> (usize, usize, usize, (f64, f64), f64) {
        match self {
            Expected::Movielens100k => (943, 1682, 100_000, (1.0, 5.0), 0.9370),
            Expected::Itm => (454, 70, 5230, (1.0, 5.0), 0.8354),
        }
    }

    /// Mismatch descriptions; empty when the statistics agree (sparsity
    /// within 0.01 percentage points).
    pub fn check(self, stats: &DatasetStats) -> Vec<String> {
        let (users, items, ratings, scale, sparsity) = self.reference();
        let mut out = Vec::new();
        if stats.users != users {
            out.push(format!("users: {} (expected {users})", stats.users));
        }
        if stats.items != items {
            out.push(format!("items: {} (expected {items})", stats.items));
        }
        if stats.ratings != ratings {
            out.push(format!("ratings: {} (expected {ratings})", stats.ratings));
        }
        if stats.scale != scale {
            out.push(format!("scale: {:?} (expected {scale:?})", stats.scale));
        }
        if (stats.sparsity - sparsity).abs() > 1e-4 + 1e-12 {
            out.push(format!(
                "sparsity: {:.2}% (expected {:.2}%)",
                100.0 * stats.sparsity,
                100.0 * sparsity
            ));
        }
        out
    }
}

pub fn validate_dataset(path: &Path, format: DataFormat, csv: &CsvColumns) -> Result<DatasetStats> {
    Ok(load_table(path, format, csv)?.stats())
}

pub fn format_stats(stats: &DatasetStats) -> String {
    format!(
        "users: {}\nitems: {}\nratings: {}\nscale: [{}, {}]\nsparsity: {:.2}%\nduplicates dropped: {}\n",
        stats.users,
        stats.items,
        stats.ratings,
        stats.scale.0,
        stats.scale.1,
        100.0 * stats.sparsity,
        stats.duplicates_dropped
    )
}

/// Report plus the files written.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub artifacts: Vec<PathBuf>,
}

struct Progress {
    quiet: bool,
    start: Instant,
}

impl Progress {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{:7.1}s] {}", self.start.elapsed().as_secs_f64(), msg.as_ref());
        }
    }
}

/// Group-level samples from aggregated ratings.
pub fn group_samples(table: &GroupRatingsTable) -> Vec<GroupSample> {
    table
        .tuples()
        .iter()
        .map(|t| GroupSample {
            group: t.group,
            item: t.item,
            rating: t.rating,
        })
        .collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Intermediate products of a run that tests and the report draw on.
struct Pipeline {
    table: RatingsTable,
    train: RatingsTable,
    test: RatingsTable,
    labels: Vec<usize>,
    members: Vec<Vec<usize>>,
    run: serde_json::Map<String, serde_json::Value>,
}

fn json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

/// Runs the whole pipeline and writes the artifacts. On failure nothing
/// written by this call is left behind, and the error names the stage.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let mut config = config.clone();
    config.resolve().map_err(|e| e.in_stage("config"))?;
    let progress = Progress {
        quiet: config.quiet,
        start: Instant::now(),
    };
    let mut written = Vec::new();
    let created_dir = !config.out.exists();
    let result = execute(&config, &progress, &mut written);
    if result.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
        if created_dir {
            let _ = fs::remove_dir(&config.out);
        }
    }
    result.map(|report| RunOutcome {
        report,
        artifacts: written,
    })
}

fn execute(config: &ExperimentConfig, progress: &Progress, written: &mut Vec<PathBuf>) -> Result<EvalReport> {
    let bytes = fs::read(&config.data).map_err(|e| Error::from(e).in_stage("ingest"))?;
    let data_hash = git_blob_sha1(&bytes);
    drop(bytes);
    let table = load_table(&config.data, config.format, &config.csv).map_err(|e| e.in_stage("ingest"))?;
    config.relevance.validate(table.scale()).map_err(|e| e.in_stage("config"))?;
    progress.note(format!("loaded {} ratings", table.len()));

    let (train, test) = split(&table, &config.split).map_err(|e| e.in_stage("split"))?;
    let user_x = build_user_features_with(&train, config.user_features).map_err(|e| e.in_stage("features"))?;
    let item_x = build_item_features_with(&train, config.item_features).map_err(|e| e.in_stage("features"))?;

    let assignment =
        kmeans(&user_x, config.k_groups, config.seed, config.kmeans_max_iter).map_err(|e| e.in_stage("grouping"))?;
    let members = assignment.members();
    let train_groups = aggregate_group_ratings(&train, &assignment).map_err(|e| e.in_stage("grouping"))?;
    let test_groups = aggregate_group_ratings(&test, &assignment).map_err(|e| e.in_stage("grouping"))?;
    progress.note(format!(
        "{} groups, {} training and {} held-out group ratings",
        config.k_groups,
        train_groups.len(),
        test_groups.len()
    ));

    let mut run = serde_json::Map::new();
    run.insert("config".into(), json(config)?);
    run.insert(
        "data".into(),
        serde_json::json!({
            "path": config.data.display().to_string(),
            "git_blob_sha1": data_hash,
            "stats": json(&table.stats())?,
        }),
    );
    run.insert("split".into(), serde_json::json!({"train": train.len(), "test": test.len()}));
    run.insert(
        "grouping".into(),
        serde_json::json!({
            "objective": assignment.objective(),
            "iterations": assignment.iterations(),
            "converged": assignment.converged(),
            "sizes": members.iter().map(Vec::len).collect::<Vec<_>>(),
            "train_group_ratings": train_groups.len(),
            "test_group_ratings": test_groups.len(),
        }),
    );
    let pipeline = Pipeline {
        table,
        train,
        test,
        labels: assignment.labels().to_vec(),
        members,
        run,
    };
    let mut pipeline = pipeline;

    // DMTL
    let data = GroupData {
        users: &user_x,
        items: &item_x,
        members: &pipeline.members,
    };
    let samples = group_samples(&train_groups);
    let outcome = train_with(&config.dmtl, data, &samples, |e: &EpochLog| {
        progress.note(format!(
            "dmtl epoch {:>3}: loss {:.5} (rating {:.5}, profile {:.5})",
            e.epoch + 1,
            e.loss,
            e.rec,
            e.profile
        ))
    })
    .map_err(|e| e.in_stage("dmtl-train"))?;
    pipeline.run.insert("dmtl_training".into(), json(&outcome.log)?);
    let params = outcome.params;
    let predictor = Predictor::new(&params, &user_x, &item_x).map_err(|e| e.in_stage("dmtl-train"))?;

    // baselines
    let mut models: Vec<BaselineModel> = Vec::new();
    for v in Variant::ALL {
        models.push(fit(v, &pipeline.train, &config.baselines).map_err(|e| e.in_stage("baselines"))?);
        progress.note(format!("fitted {}", v.label()));
    }

    // evaluation
    let n_items = pipeline.table.n_items();
    let group_catalog = (config.relevance.candidates == CandidateSet::Catalog).then(|| {
        train_groups_catalog(&train_groups, config.k_groups, n_items)
    });
    let group_task = RankingTask::from_groups(&test_groups, &config.relevance, group_catalog.as_deref())
        .map_err(|e| e.in_stage("evaluate"))?;
    let user_task = if config.user_level {
        let catalog = (config.relevance.candidates == CandidateSet::Catalog).then(|| {
            let mut rated = vec![vec![false; n_items]; pipeline.table.n_users()];
            pipeline.train.ratings().iter().for_each(|r| rated[r.user][r.item] = true);
            rated
                .iter()
                .map(|row| (0..n_items).filter(|&i| !row[i]).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        });
        Some(
            RankingTask::from_triples(
                pipeline.test.ratings().iter().map(|r| (r.user, r.item, r.value)),
                &config.relevance,
                catalog.as_deref(),
            )
            .map_err(|e| e.in_stage("evaluate"))?,
        )
    } else {
        None
    };

    let spec = &config.relevance;
    let mut methods = Vec::new();
    for m in &models {
        let group = evaluate_method(&group_task, spec, |g, i| m.predict_group(&pipeline.members[g], i))
            .map_err(|e| e.in_stage("evaluate"))?;
        let user = user_task
            .as_ref()
            .map(|t| evaluate_method(t, spec, |u, i| Ok(m.predict(u, i))))
            .transpose()
            .map_err(|e| e.in_stage("evaluate"))?;
        methods.push(MethodResult {
            method: m.variant().name().into(),
            label: m.variant().label().into(),
            group,
            user,
        });
    }
    let queries: Vec<(&[usize], usize)> = group_task
        .entries
        .iter()
        .flat_map(|(g, candidates, _)| candidates.iter().map(|&i| (&pipeline.members[*g][..], i)))
        .collect();
    let scores = predictor.predict_groups(&queries).map_err(|e| e.in_stage("evaluate"))?;
    let keys = group_task
        .entries
        .iter()
        .flat_map(|(g, candidates, _)| candidates.iter().map(move |&i| (*g, i)));
    let dmtl_scores: BTreeMap<(usize, usize), f64> = keys.zip(scores).collect();
    let group = evaluate_method(&group_task, spec, |g, i| {
        dmtl_scores
            .get(&(g, i))
            .copied()
            .ok_or_else(|| Error::Protocol(format!("no score for group {g}, item {i}")))
    })
    .map_err(|e| e.in_stage("evaluate"))?;
    let user = user_task
        .as_ref()
        .map(|t| evaluate_method(t, spec, |u, i| Ok(predictor.member_output(u, i)?.rating)))
        .transpose()
        .map_err(|e| e.in_stage("evaluate"))?;
    methods.push(MethodResult {
        method: "dmtl".into(),
        label: "DMTL".into(),
        group,
        user,
    });
    progress.note("ranking evaluation done");

    // profiling: each user's cluster from member logits averaged over the
    // user's held-out items (training items when none are held out)
    let test_by_user = pipeline.test.by_user();
    let train_by_user = pipeline.train.by_user();
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for u in 0..pipeline.table.n_users() {
        let items = if test_by_user[u].is_empty() { &train_by_user[u] } else { &test_by_user[u] };
        if items.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; config.k_groups];
        for &(i, _) in items {
            let out = predictor.member_output(u, i).map_err(|e| e.in_stage("evaluate"))?;
            mean.iter_mut().zip(out.logits.iter()).for_each(|(m, l)| *m += l);
        }
        truth.push(pipeline.labels[u]);
        predicted.push(argmax(&mean));
    }
    let profiling = profiling_metrics(&truth, &predicted, config.k_groups).map_err(|e| e.in_stage("evaluate"))?;

    pipeline.run.insert(
        "protocol".into(),
        serde_json::json!({
            "group_candidates": match spec.candidates {
                CandidateSet::TestItems => "held-out items of the group",
                CandidateSet::Catalog => "catalog items without a training rating in the group",
            },
            "precision_denominator": match spec.denominator {
                PrecisionDenominator::K => "K",
                PrecisionDenominator::Available => "min(K, ranked)",
            },
            "group_relevance": "mean held-out member rating of the item >= threshold",
            "baseline_group_score": "mean of clipped member predictions, clipped",
            "dmtl_group_score": "rating head on mean-pooled member z, unclipped for ranking",
            "user_level": if config.user_level { "every method also ranked per user on the user's held-out items" } else { "off" },
        }),
    );
    let report = EvalReport {
        dataset: config
            .data
            .file_name()
            .map_or_else(|| config.data.display().to_string(), |n| n.to_string_lossy().into_owned()),
        relevance: *spec,
        methods,
        profiling,
        profiling_protocol: "per user: argmax of member logits averaged over the user's held-out items".into(),
        run: serde_json::Value::Object(pipeline.run),
    };

    // artifacts
    let write_stage = |e: Error| e.in_stage("write");
    fs::create_dir_all(&config.out).map_err(|e| write_stage(e.into()))?;
    let mut put = |name: &str, body: &[u8]| -> Result<()> {
        let path = config.out.join(name);
        written.push(path.clone());
        fs::write(&path, body)?;
        Ok(())
    };
    put("report.json", report.to_json().map_err(write_stage)?.as_bytes()).map_err(write_stage)?;
    put("report.md", report.to_markdown().as_bytes()).map_err(write_stage)?;

    let coords = project_2d(&user_x).map_err(|e| e.in_stage("projection"))?;
    let mut csv = Vec::new();
    write_projection_csv(&mut csv, |u| pipeline.table.users().id_of(u).to_string(), &assignment, &coords)
        .map_err(write_stage)?;
    put("projections.csv", &csv).map_err(write_stage)?;

    let mut checkpoint = Vec::new();
    Checkpoint::new(&config.dmtl, &params).write(&mut checkpoint).map_err(write_stage)?;
    put("dmtl_checkpoint.json", &checkpoint).map_err(write_stage)?;
    progress.note(format!("wrote artifacts to {}", config.out.display()));
    Ok(report)
}

/// Per group, the items without a training rating from any member.
fn train_groups_catalog(train: &GroupRatingsTable, k: usize, n_items: usize) -> Vec<Vec<usize>> {
    let mut rated: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for t in train.tuples() {
        rated.entry(t.group).or_insert_with(|| vec![false; n_items])[t.item] = true;
    }
    (0..k)
        .map(|g| match rated.get(&g) {
            Some(r) => (0..n_items).filter(|&i| !r[i]).collect(),
            None => (0..n_items).collect(),
        })
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "grouprec", version, about = "Group profiling and group recommendation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, evaluate and write reports.
    Run(RunArgs),
    /// Print dataset statistics, optionally checking them against a reference.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct CsvArgs {
    #[arg(long, default_value = "user_id")]
    pub user_col: String,
    #[arg(long, default_value = "item_id")]
    pub item_col: String,
    #[arg(long, default_value = "rating")]
    pub rating_col: String,
    #[arg(long)]
    pub timestamp_col: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub scale_min: f64,
    #[arg(long, default_value_t = 5.0)]
    pub scale_max: f64,
}

impl CsvArgs {
    pub fn columns(&self) -> CsvColumns {
        CsvColumns {
            user: self.user_col.clone(),
            item: self.item_col.clone(),
            rating: self.rating_col.clone(),
            timestamp: self.timestamp_col.clone(),
            scale: (self.scale_min, self.scale_max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DenominatorArg {
    K,
    Available,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CandidatesArg {
    Test,
    Catalog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RecipeArg {
    Centered,
    Raw,
}

impl From<RecipeArg> for FeatureRecipe {
    fn from(r: RecipeArg) -> Self {
        match r {
            RecipeArg::Centered => FeatureRecipe::Centered,
            RecipeArg::Raw => FeatureRecipe::Raw,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Ratings file [default: $GROUPREC_DATA_DIR/ml-100k/u.data or data/ml-100k/u.data]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DataFormat::Movielens)]
    pub format: DataFormat,
    #[command(flatten)]
    pub csv: CsvArgs,
    /// Number of k-means groups (and profiling classes).
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Weight of the profiling loss.
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// Relevance threshold for ranking metrics.
    #[arg(long, default_value_t = 3.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub h1: Option<usize>,
    #[arg(long)]
    pub h_attn: Option<usize>,
    #[arg(long)]
    pub h2: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub user_features: Option<RecipeArg>,
    #[arg(long, value_enum)]
    pub item_features: Option<RecipeArg>,
    #[arg(long, value_enum, default_value_t = DenominatorArg::K)]
    pub precision_denominator: DenominatorArg,
    #[arg(long, value_enum, default_value_t = CandidatesArg::Test)]
    pub candidates: CandidatesArg,
    /// Skip the per-user scoring of every method.
    #[arg(long)]
    pub no_user_level: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

impl RunArgs {
    pub fn to_config(&self) -> ExperimentConfig {
        let mut c = ExperimentConfig::default().with_seed(self.seed);
        if let Some(d) = &self.data {
            c.data = d.clone();
        }
        c.format = self.format;
        c.csv = self.csv.columns();
        c.k_groups = self.k;
        if let Some(l) = self.lambda {
            c.dmtl.lambda = l;
        }
        c.relevance.threshold = self.threshold;
        c.relevance.k = self.topk;
        c.relevance.denominator = match self.precision_denominator {
            DenominatorArg::K => PrecisionDenominator::K,
            DenominatorArg::Available => PrecisionDenominator::Available,
        };
        c.relevance.candidates = match self.candidates {
            CandidatesArg::Test => CandidateSet::TestItems,
            CandidatesArg::Catalog => CandidateSet::Catalog,
        };
        c.out = self.out.clone();
        if let Some(v) = self.epochs {
            c.dmtl.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.dmtl.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.dmtl.batch_size = v;
        }
        if let Some(v) = self.h1 {
            c.dmtl.h1 = v;
        }
        if let Some(v) = self.h_attn {
            c.dmtl.h_attn = v;
        }
        if let Some(v) = self.h2 {
            c.dmtl.h2 = v;
        }
        if let Some(v) = self.train_fraction {
            c.split.train_fraction = v;
        }
        if let Some(v) = self.user_features {
            c.user_features = v.into();
        }
        if let Some(v) = self.item_features {
            c.item_features = v.into();
        }
        c.user_level = !self.no_user_level;
        c.quiet = self.quiet;
        c
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Ratings file [default: $GROUPREC_DATA_DIR/ml-100k/u.data or data/ml-100k/u.data]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DataFormat::Movielens)]
    pub format: DataFormat,
    #[command(flatten)]
    pub csv: CsvArgs,
    /// Fail unless the statistics match this reference.
    #[arg(long, value_enum)]
    pub expect: Option<Expected>,
}

/// Executes a parsed command, writing human-readable output to `out`.
/// Returns the process exit code.
pub fn dispatch(cli: Cli, out: &mut dyn std::io::Write) -> Result<i32> {
    match cli.command {
        Command::Run(args) => {
            let outcome = run_experiment(&args.to_config())?;
            out.write_all(outcome.report.to_markdown().as_bytes())?;
            for p in &outcome.artifacts {
                writeln!(out, "wrote {}", p.display())?;
            }
            Ok(0)
        }
        Command::Validate(args) => {
            let path = args.data.clone().unwrap_or_else(default_data_path);
            let stats = validate_dataset(&path, args.format, &args.csv.columns()).map_err(|e| e.in_stage("validate"))?;
            out.write_all(format_stats(&stats).as_bytes())?;
            if let Some(expect) = args.expect {
                let problems = expect.check(&stats);
                if !problems.is_empty() {
                    for p in &problems {
                        writeln!(out, "mismatch: {p}")?;
                    }
                    return Ok(2);
                }
                writeln!(out, "matches {expect:?}")?;
            }
            Ok(0)
        }
    }
}
