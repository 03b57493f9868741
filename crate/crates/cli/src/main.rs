use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tripsketch_core::artifact;
use tripsketch_core::cleora::{self, CleoraOptions, EmbeddingTable};
use tripsketch_core::codes::CodesMatrix;
use tripsketch_core::dataset::{self, SyntheticConfig, Trip};
use tripsketch_core::eval::{self, PopularityTable};
use tripsketch_core::graph::TransitionGraph;
use tripsketch_core::model::{ModelOptions, TrainConfig, TrainedModel};
use tripsketch_core::pipeline::{self, PipelineConfig, Profile, SketchConfig, Workspace};

#[derive(Parser)]
#[command(
    name = "tripsketch",
    version,
    about = "Predict the next city of a multi-city trip"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trips CSV.
    GenerateSynthetic(GenerateArgs),
    /// Hold out the final city of a fraction of trips.
    Split(SplitArgs),
    /// Build the city transition graph.
    BuildGraph(GraphArgs),
    /// Embed graph nodes, one table per iteration count.
    Embed(EmbedArgs),
    /// Fit sketch codes for each embedding table.
    FitSketches(SketchArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Top-k next cities for the last reservation of every trip.
    Predict(PredictArgs),
    /// Precision@k of one model or an ensemble on held-out trips.
    Evaluate(EvaluateArgs),
    /// Run the ablation table.
    Ablate(AblateArgs),
    /// Run every stage, skipping those already up to date.
    RunPipeline(PipelineArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 2000)]
    cities: usize,
    #[arg(long, default_value_t = 20)]
    countries: usize,
    #[arg(long, default_value_t = 10_000)]
    trips: usize,
    #[arg(long, default_value_t = 5.0)]
    mean_trip_length: f64,
    #[arg(long, default_value_t = 0.15)]
    return_probability: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    valid_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives train.csv and valid.csv.
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct TripsInput {
    /// Trips used whole.
    #[arg(long)]
    trips: PathBuf,
    /// Trips whose final city is held out; earlier cities are still used.
    #[arg(long)]
    holdout: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    input: TripsInput,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    iterations: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Propagate along outgoing edges only.
    #[arg(long)]
    directed_only: bool,
    /// Receives embedding_i<N>.bin per iteration count.
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct SketchArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    embeddings: Vec<PathBuf>,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add a modality of random codes.
    #[arg(long)]
    random_modality: bool,
    /// Receives codes_<modality>.bin per modality.
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: TripsInput,
    /// Codes files in modality order.
    #[arg(long, value_delimiter = ',', required = true)]
    codes: Vec<PathBuf>,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    finetune_lr_factor: f64,
    #[arg(long, default_value_t = 0.9)]
    decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on final-destination examples only.
    #[arg(long)]
    final_only: bool,
    /// Leave out numerical and categorical features.
    #[arg(long)]
    no_features: bool,
    /// Leave out the is-final flag.
    #[arg(long)]
    no_flag: bool,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ScoringArgs {
    /// One model, or several to ensemble.
    #[arg(long, value_delimiter = ',', required = true)]
    model: Vec<PathBuf>,
    /// Codes files in the order the model was trained with.
    #[arg(long, value_delimiter = ',', required = true)]
    codes: Vec<PathBuf>,
    #[arg(long)]
    popularity_boost: bool,
    #[arg(long, default_value_t = eval::TOP_K)]
    top_k: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Trips whose last reservation is to be predicted (its city may be 0).
    #[arg(long)]
    trips: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Held-out trips; each one's last city is the target.
    #[arg(long)]
    examples: PathBuf,
    /// Directory for summary.json and samples.csv.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also print the popularity-only baseline.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; flags below take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Offsets every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    ensemble: Option<usize>,
    /// Use all cores where stages allow it.
    #[arg(long)]
    parallel: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    PaperScale,
    DeskScale,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// JSON file for the per-seed tables and column statistics.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateSynthetic(a) => generate(a),
        Command::Split(a) => split(a),
        Command::BuildGraph(a) => build_graph(a),
        Command::Embed(a) => embed(a),
        Command::FitSketches(a) => fit_sketches(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::RunPipeline(a) => run_pipeline(a),
    }
}

fn read_trips(path: &Path) -> Result<Vec<Trip>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    dataset::parse_trips(file).with_context(|| format!("reading {}", path.display()))
}

fn write_trips(path: &Path, trips: &[Trip]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(dataset::write_trips(file, trips)?)
}

fn load_split(input: &TripsInput) -> Result<(Vec<Trip>, dataset::Split)> {
    let train = read_trips(&input.trips)?;
    let held = match &input.holdout {
        Some(p) => read_trips(p)?,
        None => Vec::new(),
    };
    Ok(dataset::from_holdout(train, held))
}

/// Fingerprint of the files an artifact was derived from.
fn inputs_fingerprint(paths: &[&Path]) -> Result<u64> {
    let mut fp = 0;
    for p in paths {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        fp = artifact::chain(fp, &artifact::fingerprint_bytes(&bytes));
    }
    Ok(fp)
}

fn load_codes(paths: &[PathBuf]) -> Result<Vec<CodesMatrix>> {
    paths
        .iter()
        .map(|p| {
            CodesMatrix::load(p)
                .map(|(c, _)| c)
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect()
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<TrainedModel>> {
    paths
        .iter()
        .map(|p| {
            TrainedModel::load(p)
                .map(|(m, _)| m)
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect()
}

fn generate(a: GenerateArgs) -> Result<()> {
    if a.cities < a.countries || a.countries == 0 {
        bail!("need cities >= countries >= 1");
    }
    if !(0.0..=1.0).contains(&a.return_probability) {
        bail!("return probability must lie in [0, 1]");
    }
    let config = SyntheticConfig {
        cities: a.cities,
        countries: a.countries,
        trips: a.trips,
        mean_trip_length: a.mean_trip_length,
        return_probability: a.return_probability,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let trips = dataset::generate_synthetic(&config);
    write_trips(&a.output, &trips)?;
    log::info!("wrote {} trips to {}", trips.len(), a.output.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let trips = read_trips(&a.input)?;
    let s = dataset::split(&trips, a.valid_fraction, a.seed)?;
    let (train, held) = s.partition(&trips);
    fs::create_dir_all(&a.output_dir)?;
    write_trips(&a.output_dir.join("train.csv"), &train)?;
    write_trips(&a.output_dir.join("valid.csv"), &held)?;
    log::info!(
        "{} trips kept whole, {} held out ({} training examples)",
        train.len(),
        held.len(),
        s.train.len()
    );
    Ok(())
}

fn build_graph(a: GraphArgs) -> Result<()> {
    let (trips, s) = load_split(&a.input)?;
    let graph = TransitionGraph::build(&s.graph_trips(&trips))?;
    let mut sources = vec![a.input.trips.as_path()];
    sources.extend(a.input.holdout.as_deref());
    graph.save(&a.output, inputs_fingerprint(&sources)?)?;
    let stats = graph.degree_stats();
    println!(
        "nodes {} edges {} total weight {} max out-degree {} mean out-degree {:.2}",
        stats.nodes, stats.edges, stats.total_weight, stats.max_out_degree, stats.mean_out_degree
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let (graph, fp) = TransitionGraph::load(&a.graph)?;
    let tables = cleora::embed_cities(
        &graph,
        a.dim,
        &a.iterations,
        a.seed,
        CleoraOptions {
            directed_only: a.directed_only,
        },
    )?;
    fs::create_dir_all(&a.output_dir)?;
    let fp = artifact::chain(fp, &(a.dim, &a.iterations, a.seed, a.directed_only));
    for t in &tables {
        let path = a
            .output_dir
            .join(format!("embedding_i{}.bin", t.iteration()));
        t.save(&path, fp)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn fit_sketches(a: SketchArgs) -> Result<()> {
    let mut tables = Vec::new();
    let mut fp = 0;
    for p in &a.embeddings {
        let (t, f) = EmbeddingTable::load(p).with_context(|| format!("loading {}", p.display()))?;
        fp = artifact::chain(fp, &f);
        tables.push(t);
    }
    let config = SketchConfig {
        width: a.width,
        depth: a.depth,
        random_modality: a.random_modality,
        seed: a.seed,
    };
    let codes = pipeline::fit_sketches(&tables, &config)?;
    fs::create_dir_all(&a.output_dir)?;
    let fp = artifact::chain(fp, &config);
    for c in &codes {
        let path = a
            .output_dir
            .join(format!("codes_{}.bin", c.modality().label()));
        c.save(&path, fp)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (_, s) = load_split(&a.input)?;
    let examples: Vec<_> = s
        .train
        .into_iter()
        .filter(|e| e.is_final || !a.final_only)
        .collect();
    let codes = load_codes(&a.codes)?;
    let refs: Vec<&CodesMatrix> = codes.iter().collect();
    let options = ModelOptions {
        hidden: a.hidden,
        blocks: a.blocks,
        use_features: !a.no_features,
        use_flag: !a.no_flag,
        decay: a.decay,
        ..ModelOptions::default()
    };
    let mut config = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        finetune_epochs: a.finetune_epochs,
        finetune_lr_factor: a.finetune_lr_factor,
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.optimizer.lr = a.lr;
    config.optimizer.weight_decay = a.weight_decay;
    let codes_fp = inputs_fingerprint(&a.codes.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let model = TrainedModel::fit(&examples, &refs, codes_fp, &options, &config)?;
    let fp = artifact::chain(codes_fp, &(&options, &config, a.final_only));
    model.save(&a.output, fp)?;
    for (epoch, loss) in model.report.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {loss:.4}", epoch + 1);
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let models = load_models(&a.scoring.model)?;
    let codes = load_codes(&a.scoring.codes)?;
    let trips = read_trips(&a.trips)?;
    let examples = pipeline::final_examples(&trips);
    let top = pipeline::predict(
        &models.iter().collect::<Vec<_>>(),
        &codes.iter().collect::<Vec<_>>(),
        &examples,
        a.scoring.popularity_boost,
        a.scoring.top_k,
    )?;
    let mut w = csv::Writer::from_path(&a.output)?;
    let mut header = vec!["trip_id".to_string()];
    header.extend((1..=a.scoring.top_k).map(|i| format!("city_{i}")));
    w.write_record(&header)?;
    for (e, cities) in examples.iter().zip(top) {
        let mut rec = vec![e.trip_id.clone()];
        rec.extend(cities.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    log::info!(
        "wrote {} predictions to {}",
        examples.len(),
        a.output.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let models = load_models(&a.scoring.model)?;
    let codes = load_codes(&a.scoring.codes)?;
    let code_refs: Vec<&CodesMatrix> = codes.iter().collect();
    let examples = pipeline::final_examples(&read_trips(&a.examples)?);
    let report = pipeline::evaluate_models(
        &models.iter().collect::<Vec<_>>(),
        &code_refs,
        &examples,
        a.scoring.popularity_boost,
        a.scoring.top_k,
    )?;
    println!(
        "precision@{} {:.4} over {} samples; return trips {:.4} over {}",
        report.k,
        report.precision,
        report.samples.len(),
        report.return_trips.precision,
        report.return_trips.count
    );
    for (len, b) in &report.by_trip_length {
        println!("  trip length {len:>2}: {:.4} ({})", b.precision, b.count);
    }
    if a.baseline {
        let table = PopularityTable::new(models[0].final_counts.clone());
        let samples = pipeline::eval_samples(&examples, code_refs[0]);
        let base =
            eval::popularity_baseline(&table, &samples, code_refs[0].city_ids(), a.scoring.top_k)?;
        println!("popularity baseline {:.4}", base.precision);
    }
    if let Some(dir) = &a.report {
        report.write(dir)?;
    }
    Ok(())
}

fn resolve_config(a: &ConfigArgs) -> Result<PipelineConfig> {
    let mut config = match &a.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::desk_scale(),
    };
    if let Some(p) = a.profile {
        let profile = match p {
            ProfileArg::PaperScale => Profile::PaperScale,
            ProfileArg::DeskScale => Profile::DeskScale,
        };
        if profile != config.profile {
            let work_dir = config.work_dir.clone();
            config = PipelineConfig::for_profile(profile);
            config.work_dir = work_dir;
        }
    }
    if let Some(seed) = a.seed {
        config = config.with_seed(seed);
    }
    if let Some(d) = &a.work_dir {
        config.work_dir = d.clone();
    }
    if let Some(h) = a.hidden {
        config.model.hidden = h;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.train.optimizer.lr = lr;
    }
    if let Some(m) = a.ensemble {
        config.eval.ensemble = m;
    }
    if a.parallel {
        config.deterministic = false;
    }
    Ok(config)
}

fn run_pipeline(a: PipelineArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let run = pipeline::run_pipeline(&config, &Workspace::new(&config.work_dir))?;
    for s in &run.stages {
        println!(
            "{:<13} {:016x} {}",
            s.stage.name(),
            s.fingerprint,
            if s.ran { "ran" } else { "skipped" }
        );
    }
    println!(
        "precision@{} {:.4}; return trips {:.4} ({})",
        run.report.k,
        run.report.precision,
        run.report.return_trips.precision,
        run.report.return_trips.count
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let seeds = a
        .seeds
        .clone()
        .unwrap_or_else(|| config.ablation.seeds.clone());
    let mut reports = Vec::new();
    for seed in seeds {
        let seeded = config.clone().with_seed(seed);
        let prepared = pipeline::prepare(&seeded)?;
        let report = pipeline::ablation_run(&prepared, &seeded)?;
        println!("seed {seed}");
        print!("{}", report.to_table());
        reports.push(report);
    }
    let stats: Vec<_> = pipeline::ABLATION_COLUMNS
        .iter()
        .filter_map(|c| pipeline::column_stats(&reports, c).map(|(m, s)| (c.to_string(), m, s)))
        .collect();
    if reports.len() > 1 {
        println!("mean over {} seeds", reports.len());
        for (name, mean, std) in &stats {
            println!("  {name:<12} {mean:.4} ± {std:.4}");
        }
    }
    if let Some(path) = &a.output {
        let summary = serde_json::json!({
            "reports": reports,
            "columns": stats
                .iter()
                .map(|(name, mean, std)| serde_json::json!({"name": name, "mean": mean, "std": std}))
                .collect::<Vec<_>>(),
        });
        fs::write(path, serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(())
}
