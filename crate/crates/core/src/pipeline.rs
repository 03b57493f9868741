//! End-to-end composition of the stages, in memory and on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::{self, peek_fingerprint};
use crate::cleora::{self, embed_cities, CleoraOptions, EmbeddingTable};
use crate::codes::{self, build_codes, build_random_codes, CodesMatrix, Modality};
use crate::dataset::{self, generate_synthetic, split, Split, SyntheticConfig, Trip, TripExample};
use crate::error::{Error, Result};
use crate::eval::{self, ensemble, EvalReport, EvalSample, PopularityTable};
use crate::graph::{self, TransitionGraph};
use crate::model::{self, ModelOptions, TrainConfig, TrainedModel};
use crate::CityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Sizes from the original competition system.
    PaperScale,
    /// Small enough to train on a laptop CPU in minutes.
    DeskScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Trip CSV to ingest; when absent, trips are generated.
    pub input: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub valid_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            input: None,
            synthetic: SyntheticConfig::default(),
            valid_fraction: 0.1,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub dim: usize,
    pub iterations: Vec<usize>,
    pub directed_only: bool,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 1024,
            iterations: vec![1, 3],
            directed_only: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchConfig {
    pub width: usize,
    pub depth: usize,
    pub random_modality: bool,
    pub seed: u64,
}

impl Default for SketchConfig {
    fn default() -> Self {
        SketchConfig {
            width: 128,
            depth: 40,
            random_modality: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub popularity_boost: bool,
    /// Number of models averaged (each trained with seed `train.seed + m`).
    pub ensemble: usize,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            popularity_boost: true,
            ensemble: 1,
            top_k: eval::TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Each seed reruns the whole table from data generation onwards.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub profile: Profile,
    /// Directory holding every stage's artifacts.
    pub work_dir: PathBuf,
    pub data: DataConfig,
    pub embed: EmbedConfig,
    pub sketch: SketchConfig,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Train on final-destination examples only.
    pub final_only: bool,
    /// Run every stage on a single thread.
    pub deterministic: bool,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl PipelineConfig {
    pub fn paper_scale() -> Self {
        PipelineConfig {
            profile: Profile::PaperScale,
            work_dir: PathBuf::from("work"),
            data: DataConfig::default(),
            embed: EmbedConfig::default(),
            sketch: SketchConfig::default(),
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            eval: EvalConfig {
                ensemble: 5,
                ..EvalConfig::default()
            },
            final_only: false,
            deterministic: true,
            ablation: AblationConfig::default(),
        }
    }

    pub fn desk_scale() -> Self {
        let mut c = Self::paper_scale();
        c.profile = Profile::DeskScale;
        c.embed.dim = 64;
        c.sketch.depth = 8;
        c.sketch.width = 16;
        c.model.hidden = 256;
        // Fewer, smaller batches per epoch than at full scale.
        c.train.optimizer.lr = 2e-3;
        c.eval.ensemble = 3;
        c
    }

    /// Parses TOML; keys left out take the values of the file's `profile`
    /// (desk scale when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match user.get("profile") {
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| Error::Config(e.to_string()))?,
            None => Profile::DeskScale,
        };
        let mut base = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::PaperScale => Self::paper_scale(),
            Profile::DeskScale => Self::desk_scale(),
        }
    }

    /// Offsets every stage seed from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.synthetic.seed = seed;
        self.data.split_seed = seed.wrapping_add(1);
        self.embed.seed = seed.wrapping_add(2);
        self.sketch.seed = seed.wrapping_add(3);
        self.train.seed = seed.wrapping_add(4);
        self
    }

    pub fn fingerprint(&self) -> u64 {
        artifact::fingerprint(self)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Everything up to (not including) training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub trips: Vec<Trip>,
    pub split: Split,
    pub graph: TransitionGraph,
    pub tables: Vec<EmbeddingTable>,
    pub codes: Vec<CodesMatrix>,
}

impl Prepared {
    pub fn codes(&self) -> Vec<&CodesMatrix> {
        self.codes.iter().collect()
    }

    pub fn train_examples(&self, final_only: bool) -> Vec<TripExample> {
        self.split
            .train
            .iter()
            .filter(|e| e.is_final || !final_only)
            .cloned()
            .collect()
    }

    pub fn eval_samples(&self) -> Vec<EvalSample> {
        eval_samples(&self.split.valid, &self.codes[0])
    }
}

pub fn eval_samples(examples: &[TripExample], codes: &CodesMatrix) -> Vec<EvalSample> {
    let index: std::collections::HashMap<CityId, usize> = codes
        .city_ids()
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    examples
        .iter()
        .map(|e| EvalSample {
            trip_id: e.trip_id.clone(),
            target: index.get(&e.target).copied(),
            target_id: e.target,
            trip_len: e.trip_len,
            is_return: e.is_final && e.prefix[0] == e.target,
        })
        .collect()
}

pub fn load_trips(data: &DataConfig) -> Result<Vec<Trip>> {
    match &data.input {
        Some(path) => dataset::parse_trips(std::fs::File::open(path)?),
        None => Ok(generate_synthetic(&data.synthetic)),
    }
}

pub fn embed(graph: &TransitionGraph, config: &EmbedConfig) -> Result<Vec<EmbeddingTable>> {
    embed_cities(
        graph,
        config.dim,
        &config.iterations,
        config.seed,
        CleoraOptions {
            directed_only: config.directed_only,
        },
    )
}

/// One codes matrix per embedding table, plus the random modality last.
pub fn fit_sketches(tables: &[EmbeddingTable], config: &SketchConfig) -> Result<Vec<CodesMatrix>> {
    let first = tables.first().ok_or(Error::NoData("no embedding tables"))?;
    let mut codes = tables
        .iter()
        .enumerate()
        .map(|(m, t)| {
            let seed = config.seed.wrapping_add((m * config.depth) as u64);
            build_codes(t, config.width, config.depth, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    if config.random_modality {
        codes.push(build_random_codes(
            first.city_ids(),
            config.width,
            config.depth,
            config
                .seed
                .wrapping_add((tables.len() * config.depth) as u64),
        )?);
    }
    Ok(codes)
}

pub fn prepare(config: &PipelineConfig) -> Result<Prepared> {
    let trips = load_trips(&config.data)?;
    let split = split(&trips, config.data.valid_fraction, config.data.split_seed)?;
    let graph = TransitionGraph::build(&split.graph_trips(&trips))?;
    let tables = embed(&graph, &config.embed)?;
    let codes = fit_sketches(&tables, &config.sketch)?;
    Ok(Prepared {
        trips,
        split,
        graph,
        tables,
        codes,
    })
}

/// Trains `count` models whose seeds start at `config.train.seed`.
pub fn train_models(
    prepared: &Prepared,
    config: &PipelineConfig,
    count: usize,
) -> Result<Vec<TrainedModel>> {
    let examples = prepared.train_examples(config.final_only);
    let codes = prepared.codes();
    (0..count as u64)
        .map(|m| {
            let mut train = config.train.clone();
            train.seed = train.seed.wrapping_add(m);
            TrainedModel::fit(&examples, &codes, 0, &config.model, &train)
        })
        .collect()
}

/// The example predicting each trip's last city from everything before it.
/// Trips shorter than two reservations have nothing to predict and are skipped.
pub fn final_examples(trips: &[Trip]) -> Vec<TripExample> {
    trips
        .iter()
        .filter(|t| t.len() >= 2)
        .map(|t| dataset::featurize(t, t.len() - 1))
        .collect()
}

/// Arithmetic mean of every model's per-city scores.
pub fn ensemble_scores(
    models: &[&TrainedModel],
    codes: &[&CodesMatrix],
    examples: &[TripExample],
) -> Result<Vec<Vec<f64>>> {
    if models.is_empty() {
        return Err(Error::NoData("no models"));
    }
    let per_model = models
        .iter()
        .map(|m| m.score(codes, examples))
        .collect::<Result<Vec<_>>>()?;
    (0..examples.len())
        .map(|i| {
            ensemble(
                &per_model
                    .iter()
                    .map(|s| s[i].as_slice())
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

/// Top-`k` city ids per example.
pub fn predict(
    models: &[&TrainedModel],
    codes: &[&CodesMatrix],
    examples: &[TripExample],
    popularity_boost: bool,
    k: usize,
) -> Result<Vec<Vec<CityId>>> {
    let scores = ensemble_scores(models, codes, examples)?;
    let table = PopularityTable::new(models[0].final_counts.clone());
    let ids = codes[0].city_ids();
    scores
        .into_iter()
        .map(|s| {
            let s = if popularity_boost {
                eval::popularity_boost(&s, &table)?
            } else {
                s
            };
            Ok(eval::top_k(&s, k).into_iter().map(|i| ids[i]).collect())
        })
        .collect()
}

/// Averages the models' scores, optionally boosts by popularity and ranks.
pub fn evaluate_models(
    models: &[&TrainedModel],
    codes: &[&CodesMatrix],
    examples: &[TripExample],
    popularity_boost: bool,
    k: usize,
) -> Result<EvalReport> {
    let scores = ensemble_scores(models, codes, examples)?;
    let table = PopularityTable::new(models[0].final_counts.clone());
    let samples = eval_samples(examples, codes[0]);
    eval::evaluate_scores(
        &scores,
        &samples,
        codes[0].city_ids(),
        popularity_boost.then_some(&table),
        k,
    )
}

/// Column names of the ablation table, in order.
pub const ABLATION_COLUMNS: [&str; 5] =
    ["Basic", "+Data", "+Features", "+Popularity", "+Ensembling"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub name: String,
    pub precision: f64,
    /// Change from the previous column; `None` for the first.
    pub difference: Option<f64>,
    /// Hidden width of the network(s) behind this column.
    pub hidden: usize,
    pub models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub k: usize,
    pub columns: Vec<AblationColumn>,
    /// Overall and return-trip precision of the full configuration.
    pub return_trip_precision: f64,
    pub return_trips: usize,
}

impl AblationReport {
    pub fn precision(&self, column: &str) -> Option<f64> {
        self.columns
            .iter()
            .find(|c| c.name == column)
            .map(|c| c.precision)
    }

    /// Two-row text table: precision and difference per column.
    pub fn to_table(&self) -> String {
        let mut header = String::from("Metric     ");
        let mut precision = format!("{:<11}", format!("P@{}", self.k));
        let mut diff = String::from("Difference ");
        for c in &self.columns {
            let w = c.name.len().max(7) + 2;
            header += &format!("| {:<w$}", c.name);
            precision += &format!("| {:<w$}", format!("{:.4}", c.precision));
            diff += &format!(
                "| {:<w$}",
                c.difference.map_or("-".to_string(), |d| format!("{d:+.4}"))
            );
        }
        format!("{header}\n{precision}\n{diff}\n")
    }
}

/// Mean and sample standard deviation of one column across reports.
pub fn column_stats(reports: &[AblationReport], column: &str) -> Option<(f64, f64)> {
    let values: Vec<f64> = reports.iter().filter_map(|r| r.precision(column)).collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Trains and evaluates the cumulative configurations of the ablation table
/// on the validation split. Reduced-input variants get a wider hidden layer so
/// every network has about as many parameters as the full one.
pub fn ablation_run(prepared: &Prepared, config: &PipelineConfig) -> Result<AblationReport> {
    let codes = prepared.codes();
    let valid = &prepared.split.valid;
    let k = config.eval.top_k;
    let all = prepared.train_examples(false);
    let finals = prepared.train_examples(true);

    let full = {
        let vocab = dataset::CategoricalVocab::fit(&all);
        let segments: Vec<_> = codes.iter().map(|c| c.segment()).collect();
        let mut options = config.model.clone();
        options.use_features = true;
        options.use_flag = true;
        options.to_config(segments, vocab.sizes(), 0)
    };
    let matched = |use_features: bool, use_flag: bool| -> ModelOptions {
        let mut options = config.model.clone();
        options.use_features = use_features;
        options.use_flag = use_flag;
        let mut c = full.clone();
        c.use_features = use_features;
        c.use_flag = use_flag;
        options.hidden = c.hidden_for_parameters(full.parameter_count());
        options
    };

    let mut columns = Vec::new();
    let mut push = |name: &str, precision: f64, hidden: usize, models: usize| {
        let difference = columns
            .last()
            .map(|c: &AblationColumn| precision - c.precision);
        columns.push(AblationColumn {
            name: name.to_string(),
            precision,
            difference,
            hidden,
            models,
        });
    };

    let basic_options = matched(false, false);
    let basic = TrainedModel::fit(&finals, &codes, 0, &basic_options, &config.train)?;
    let report = evaluate_models(&[&basic], &codes, valid, false, k)?;
    push(
        ABLATION_COLUMNS[0],
        report.precision,
        basic_options.hidden,
        1,
    );

    let data_options = matched(false, true);
    let data = TrainedModel::fit(&all, &codes, 0, &data_options, &config.train)?;
    let report = evaluate_models(&[&data], &codes, valid, false, k)?;
    push(
        ABLATION_COLUMNS[1],
        report.precision,
        data_options.hidden,
        1,
    );

    let mut full_options = config.model.clone();
    full_options.use_features = true;
    full_options.use_flag = true;
    let members = config.eval.ensemble.max(1);
    let mut models = Vec::with_capacity(members);
    for m in 0..members as u64 {
        let mut train = config.train.clone();
        train.seed = train.seed.wrapping_add(m);
        models.push(TrainedModel::fit(&all, &codes, 0, &full_options, &train)?);
    }
    let report = evaluate_models(&[&models[0]], &codes, valid, false, k)?;
    push(
        ABLATION_COLUMNS[2],
        report.precision,
        full_options.hidden,
        1,
    );
    let report = evaluate_models(&[&models[0]], &codes, valid, true, k)?;
    push(
        ABLATION_COLUMNS[3],
        report.precision,
        full_options.hidden,
        1,
    );
    let refs: Vec<&TrainedModel> = models.iter().collect();
    let report = evaluate_models(&refs, &codes, valid, true, k)?;
    push(
        ABLATION_COLUMNS[4],
        report.precision,
        full_options.hidden,
        members,
    );

    Ok(AblationReport {
        seed: config.train.seed,
        k,
        columns,
        return_trip_precision: report.return_trips.precision,
        return_trips: report.return_trips.count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Trips,
    Split,
    Graph,
    Embed,
    FitSketches,
    Train,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Trips => "trips",
            Stage::Split => "split",
            Stage::Graph => "build-graph",
            Stage::Embed => "embed",
            Stage::FitSketches => "fit-sketches",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub fingerprint: u64,
    /// False when every output was already current.
    pub ran: bool,
}

/// File layout of a pipeline working directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Workspace { dir: dir.into() }
    }

    pub fn trips(&self) -> PathBuf {
        self.dir.join("trips.csv")
    }

    pub fn train_trips(&self) -> PathBuf {
        self.dir.join("train.csv")
    }

    pub fn valid_trips(&self) -> PathBuf {
        self.dir.join("valid.csv")
    }

    pub fn graph(&self) -> PathBuf {
        self.dir.join("graph.bin")
    }

    pub fn embedding(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("embedding_i{iteration}.bin"))
    }

    pub fn codes(&self, modality: Modality) -> PathBuf {
        self.dir.join(format!("codes_{}.bin", modality.label()))
    }

    pub fn model(&self, member: usize) -> PathBuf {
        self.dir.join(format!("model_{member}.bin"))
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report")
    }

    fn stamp(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!(".{}.fingerprint", stage.name()))
    }

    fn failure_marker(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("FAILED-{}", stage.name()))
    }

    fn stamped(&self, stage: Stage, fingerprint: u64, outputs: &[PathBuf]) -> bool {
        outputs.iter().all(|p| p.exists())
            && fs::read_to_string(self.stamp(stage)).ok().as_deref()
                == Some(format!("{fingerprint:016x}").as_str())
    }

    fn write_stamp(&self, stage: Stage, fingerprint: u64) -> Result<()> {
        fs::write(self.stamp(stage), format!("{fingerprint:016x}"))?;
        Ok(())
    }
}

fn current(path: &Path, magic: &[u8; 8], fingerprint: u64) -> bool {
    peek_fingerprint(path, magic) == Some(fingerprint)
}

fn modalities(config: &PipelineConfig) -> Vec<Modality> {
    let mut m: Vec<Modality> = config
        .embed
        .iterations
        .iter()
        .map(|&i| Modality::Cleora(i as u32))
        .collect();
    if config.sketch.random_modality {
        m.push(Modality::Random);
    }
    m
}

fn read_trips(path: &Path) -> Result<Vec<Trip>> {
    dataset::parse_trips(fs::File::open(path)?)
}

fn write_trips(path: &Path, trips: &[Trip]) -> Result<()> {
    dataset::write_trips(fs::File::create(path)?, trips)
}

/// Result of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub stages: Vec<StageOutcome>,
    pub report: EvalReport,
}

/// Runs every stage into `workspace`, skipping stages whose outputs carry the
/// fingerprint the current config would produce. A failing stage leaves a
/// `FAILED-<stage>` marker next to whatever it had already written.
pub fn run_pipeline(config: &PipelineConfig, workspace: &Workspace) -> Result<PipelineRun> {
    fs::create_dir_all(&workspace.dir)?;
    if config.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| run_stages(config, workspace))
    } else {
        run_stages(config, workspace)
    }
}

fn run_stages(config: &PipelineConfig, ws: &Workspace) -> Result<PipelineRun> {
    let mut stages = Vec::new();
    let mut guarded = |stage: Stage, fingerprint: u64, run: &mut dyn FnMut() -> Result<bool>| {
        let marker = ws.failure_marker(stage);
        match run() {
            Ok(ran) => {
                if marker.exists() {
                    fs::remove_file(&marker)?;
                }
                log::info!(
                    "{}: {}",
                    stage.name(),
                    if ran { "done" } else { "up to date" }
                );
                stages.push(StageOutcome {
                    stage,
                    fingerprint,
                    ran,
                });
                Ok(())
            }
            Err(e) => {
                fs::write(&marker, format!("{e}\n"))?;
                Err(e)
            }
        }
    };

    // Trips.
    let fp_trips = match &config.data.input {
        Some(path) => artifact::chain(artifact::fingerprint_bytes(&fs::read(path)?), "input"),
        None => artifact::chain(0, &config.data.synthetic),
    };
    guarded(Stage::Trips, fp_trips, &mut || {
        if ws.stamped(Stage::Trips, fp_trips, &[ws.trips()]) {
            return Ok(false);
        }
        write_trips(&ws.trips(), &load_trips(&config.data)?)?;
        ws.write_stamp(Stage::Trips, fp_trips)?;
        Ok(true)
    })?;

    // Split.
    let fp_split = artifact::chain(
        fp_trips,
        &(config.data.valid_fraction, config.data.split_seed),
    );
    guarded(Stage::Split, fp_split, &mut || {
        if ws.stamped(
            Stage::Split,
            fp_split,
            &[ws.train_trips(), ws.valid_trips()],
        ) {
            return Ok(false);
        }
        let trips = read_trips(&ws.trips())?;
        let s = split(&trips, config.data.valid_fraction, config.data.split_seed)?;
        let (train, held) = s.partition(&trips);
        write_trips(&ws.train_trips(), &train)?;
        write_trips(&ws.valid_trips(), &held)?;
        ws.write_stamp(Stage::Split, fp_split)?;
        Ok(true)
    })?;
    let load_split = || -> Result<(Vec<Trip>, Split)> {
        Ok(dataset::from_holdout(
            read_trips(&ws.train_trips())?,
            read_trips(&ws.valid_trips())?,
        ))
    };

    // Graph.
    let fp_graph = artifact::chain(fp_split, "graph");
    guarded(Stage::Graph, fp_graph, &mut || {
        if current(&ws.graph(), graph::MAGIC, fp_graph) {
            return Ok(false);
        }
        let (trips, s) = load_split()?;
        TransitionGraph::build(&s.graph_trips(&trips))?.save(&ws.graph(), fp_graph)?;
        Ok(true)
    })?;

    // Embeddings.
    let fp_embed = artifact::chain(fp_graph, &config.embed);
    let embedding_paths: Vec<PathBuf> = config
        .embed
        .iterations
        .iter()
        .map(|&i| ws.embedding(i))
        .collect();
    guarded(Stage::Embed, fp_embed, &mut || {
        if embedding_paths
            .iter()
            .all(|p| current(p, cleora::MAGIC, fp_embed))
        {
            return Ok(false);
        }
        let (graph, _) = TransitionGraph::load(&ws.graph())?;
        for (table, path) in embed(&graph, &config.embed)?.iter().zip(&embedding_paths) {
            table.save(path, fp_embed)?;
        }
        Ok(true)
    })?;

    // Sketch codes.
    let fp_codes = artifact::chain(fp_embed, &config.sketch);
    let codes_paths: Vec<PathBuf> = modalities(config)
        .into_iter()
        .map(|m| ws.codes(m))
        .collect();
    guarded(Stage::FitSketches, fp_codes, &mut || {
        if codes_paths
            .iter()
            .all(|p| current(p, codes::MAGIC, fp_codes))
        {
            return Ok(false);
        }
        let tables = embedding_paths
            .iter()
            .map(|p| EmbeddingTable::load(p).map(|(t, _)| t))
            .collect::<Result<Vec<_>>>()?;
        for (c, path) in fit_sketches(&tables, &config.sketch)?
            .iter()
            .zip(&codes_paths)
        {
            c.save(path, fp_codes)?;
        }
        Ok(true)
    })?;
    let codes = codes_paths
        .iter()
        .map(|p| CodesMatrix::load(p).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    let code_refs: Vec<&CodesMatrix> = codes.iter().collect();

    // Models.
    let members = config.eval.ensemble.max(1);
    let member_train = |m: usize| {
        let mut t = config.train.clone();
        t.seed = t.seed.wrapping_add(m as u64);
        t
    };
    let fp_models: Vec<u64> = (0..members)
        .map(|m| {
            artifact::chain(
                fp_codes,
                &(&config.model, &member_train(m), config.final_only),
            )
        })
        .collect();
    let fp_train = artifact::chain(fp_codes, &fp_models);
    guarded(Stage::Train, fp_train, &mut || {
        let stale: Vec<usize> = (0..members)
            .filter(|&m| !current(&ws.model(m), model::MAGIC, fp_models[m]))
            .collect();
        if stale.is_empty() {
            return Ok(false);
        }
        let (_, s) = load_split()?;
        let examples: Vec<TripExample> = s
            .train
            .into_iter()
            .filter(|e| e.is_final || !config.final_only)
            .collect();
        for m in stale {
            let model = TrainedModel::fit(
                &examples,
                &code_refs,
                fp_codes,
                &config.model,
                &member_train(m),
            )?;
            model.save(&ws.model(m), fp_models[m])?;
        }
        Ok(true)
    })?;

    // Evaluation.
    let fp_eval = artifact::chain(fp_train, &config.eval);
    let report_dir = ws.report();
    let mut report = None;
    guarded(Stage::Evaluate, fp_eval, &mut || {
        let outputs = [
            report_dir.join("summary.json"),
            report_dir.join("samples.csv"),
        ];
        let fresh = ws.stamped(Stage::Evaluate, fp_eval, &outputs);
        let models = (0..members)
            .map(|m| TrainedModel::load(&ws.model(m)).map(|(t, _)| t))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TrainedModel> = models.iter().collect();
        let (_, s) = load_split()?;
        let r = evaluate_models(
            &refs,
            &code_refs,
            &s.valid,
            config.eval.popularity_boost,
            config.eval.top_k,
        )?;
        if !fresh {
            r.write(&report_dir)?;
            ws.write_stamp(Stage::Evaluate, fp_eval)?;
        }
        report = Some(r);
        Ok(!fresh)
    })?;

    Ok(PipelineRun {
        stages,
        report: report.expect("evaluate stage sets the report"),
    })
}
