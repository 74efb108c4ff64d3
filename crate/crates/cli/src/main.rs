use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use exposure_core::ingest::{
    parse_records, synth_dataset, synth_metadata, write_records, InputFormat, SynthConfig,
};
use exposure_core::linkpred::{train_live, NodeStateBank, TgnnConfig, TgnnModel};
use exposure_core::metrics::{compute_metrics, write_metrics_csv, MetricsOptions};
use exposure_core::cluster::{cluster_snapshot, ClusterOptions};
use exposure_core::netbuild::{
    build_series, read_snapshot_dir, read_snapshot_json, write_snapshot_dir, BuildOptions, NewTokenPolicy,
};
use exposure_core::pipeline::{
    self, derive_seed, load_sector_map, load_side_tables, IngestConfig, PathsConfig, PipelineConfig, Stage,
};
use exposure_core::sectors::{
    fit_var, incident_table, irf, read_series_csv, sector_flows, select_lag_aic, write_incident_csv, write_irf_csv,
    write_series_csv, FlowOptions, Orientation, Sector,
};
use exposure_core::tokmap::{load_manual_map, Resolver, TextCorpus, TokenProtocolMap, DEFAULT_SIMILARITY_THRESHOLD};
use exposure_core::Error;
use rayon::prelude::*;
use rust_decimal::Decimal;

#[derive(Parser)]
#[command(name = "exposure", version, about = "Temporal credit-exposure networks from TVL records")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw records and write them back in canonical CSV.
    Ingest(IngestArgs),
    /// Generate a seeded synthetic dataset and its side tables.
    Synth(SynthArgs),
    /// Resolve every token to its issuing protocol.
    MapTokens(MapArgs),
    /// Build weekly exposure snapshots.
    Build(BuildArgs),
    /// Global network metrics per snapshot.
    Metrics(MetricsArgs),
    /// t-SNE embedding and DBSCAN sweep per snapshot.
    Cluster(ClusterArgs),
    /// Sector flows and the incident table around an event.
    Sectors(SectorsArgs),
    /// VAR fit and impulse responses of a series table.
    Var(VarArgs),
    /// Live-update link prediction.
    Predict(PredictArgs),
    /// The full pipeline from one config file.
    Run(RunArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// csv or json; defaults to the file extension.
    #[arg(long)]
    format: Option<InputFormat>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rejections: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    protocols: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    timestamps: Option<usize>,
    #[arg(long, default_value = "csv")]
    format: InputFormat,
    #[arg(long)]
    out: PathBuf,
    /// Where to write categories, metadata map and texts as JSON.
    #[arg(long)]
    side_tables: Option<PathBuf>,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    side_tables: Option<PathBuf>,
    #[arg(long)]
    manual_map: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SIMILARITY_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    /// Records, as written by `ingest` or `synth`.
    #[arg(long)]
    input: PathBuf,
    /// Token map, as written by `map-tokens`.
    #[arg(long)]
    map: PathBuf,
    #[arg(long, default_value = "7d")]
    interval: String,
    #[arg(long, default_value = "1d")]
    tolerance: String,
    /// First grid date, anchored at midnight UTC; defaults to the earliest record.
    #[arg(long)]
    start: Option<NaiveDate>,
    #[arg(long, default_value = "0")]
    node_threshold: Decimal,
    #[arg(long, default_value = "include")]
    new_token_policy: NewTokenPolicy,
    #[arg(long)]
    from: Option<NaiveDate>,
    #[arg(long)]
    to: Option<NaiveDate>,
    /// Directory for `<date>.json` snapshots.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    idleness: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// One snapshot JSON file.
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    /// Fail instead of lowering the perplexity on small snapshots.
    #[arg(long)]
    strict_perplexity: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding, labels and the full sweep as JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SectorsArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long)]
    event: NaiveDate,
    #[arg(long, default_value_t = 4)]
    window: i64,
    /// Sector names; defaults to Asset Management and Trading & Exchanges.
    #[arg(long = "sector")]
    sectors: Vec<String>,
    #[arg(long)]
    side_tables: Option<PathBuf>,
    #[arg(long)]
    sector_map: Option<PathBuf>,
    #[arg(long)]
    protocol_categories: Option<PathBuf>,
    #[arg(long, default_value = "inbound")]
    orientation: Orientation,
    #[arg(long)]
    include_intra: bool,
    #[arg(long, default_value = "1")]
    scale: Decimal,
    /// Incident table.
    #[arg(long)]
    out: PathBuf,
    /// Per-sector expansion, contraction and ratio.
    #[arg(long)]
    flows: Option<PathBuf>,
    /// Wide expansion/contraction table for `var`.
    #[arg(long)]
    series: Option<PathBuf>,
}

#[derive(Args)]
struct VarArgs {
    #[arg(long)]
    series: PathBuf,
    #[arg(long, default_value_t = 2)]
    lags: usize,
    /// Choose the order by AIC up to this many lags.
    #[arg(long)]
    max_lags: Option<usize>,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write the trained parameters here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of stages.
    #[arg(long, value_delimiter = ',')]
    only: Vec<Stage>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(Error::from)?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path)
        .map_err(Error::from)
        .with_context(|| format!("cannot open {}", path.display()))
}

fn read_records(path: &Path, format: Option<InputFormat>) -> Result<exposure_core::ingest::ParseReport> {
    let paths = PathsConfig {
        format,
        ..PathsConfig::default()
    };
    let format = pipeline::input_format(&paths, path)?;
    Ok(parse_records(open(path)?, format)?)
}

fn side_paths(side_tables: &Option<PathBuf>) -> PathsConfig {
    PathsConfig {
        side_tables: side_tables.clone(),
        ..PathsConfig::default()
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let report = read_records(&a.input, a.format)?;
    write_records(&report.records, create(&a.out)?, InputFormat::Csv)?;
    if let Some(path) = &a.rejections {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["line", "reason", "detail"])?;
        for r in &report.rejections {
            w.write_record([r.line.to_string(), r.reason.to_string(), r.detail.clone()])?;
        }
        w.flush()?;
    }
    eprintln!("{} records accepted, {} rejected", report.records.len(), report.rejections.len());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_toml_str(&fs::read_to_string(p).map_err(Error::from)?)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.protocols {
        cfg.protocols = v;
    }
    if let Some(v) = a.tokens {
        cfg.tokens = v;
    }
    if let Some(v) = a.timestamps {
        cfg.timestamps = v;
    }
    cfg.validate()?;
    let records = synth_dataset(&cfg, a.seed);
    write_records(&records, create(&a.out)?, a.format)?;
    if let Some(path) = &a.side_tables {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &synth_metadata(&cfg))?;
        writeln!(w)?;
    }
    Ok(())
}

fn map_tokens(a: MapArgs) -> Result<()> {
    let records = read_records(&a.records, None)?.records;
    let side = load_side_tables(&side_paths(&a.side_tables))?;
    let manual = match &a.manual_map {
        Some(p) => load_manual_map(open(p)?)?,
        None => Default::default(),
    };
    let corpus = TextCorpus::new(&side.token_texts, &side.protocol_texts);
    let resolver = Resolver::new(side.metadata_map, manual, &corpus, a.threshold)?;
    let mut tokens: Vec<&str> = records.iter().map(|r| r.token_id.as_str()).collect();
    tokens.sort_unstable();
    tokens.dedup();
    let map = resolver.resolve_all(tokens);
    map.write_csv(create(&a.out)?)?;
    for (stage, n) in map.stage_counts() {
        eprintln!("{stage:?}: {n}");
    }
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let records = read_records(&a.input, None)?.records;
    let map = TokenProtocolMap::read_csv(open(&a.map)?)?;
    let grid = IngestConfig {
        interval: a.interval,
        tolerance: a.tolerance,
        start: a.start,
    };
    let table = grid.align(&records)?;
    let options = BuildOptions {
        node_threshold: a.node_threshold,
        new_token_policy: a.new_token_policy,
    };
    let snapshots = build_series(&table, &map, &options, a.from, a.to)?;
    let paths = write_snapshot_dir(&a.out, &snapshots)?;
    eprintln!("{} snapshots written", paths.len());
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let snapshots = read_snapshot_dir(&a.snapshots)?;
    let options = MetricsOptions { idleness: a.idleness };
    let reports = snapshots
        .par_iter()
        .map(|s| compute_metrics(s, &options))
        .collect::<exposure_core::Result<Vec<_>>>()?;
    write_metrics_csv(&reports, create(&a.out)?)?;
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let snapshot = read_snapshot_json(open(&a.snapshot)?)?;
    let mut options = ClusterOptions {
        clamp_perplexity: !a.strict_perplexity,
        ..ClusterOptions::default()
    };
    options.tsne.perplexity = a.perplexity;
    let report = cluster_snapshot(&snapshot, &options, a.seed)?;
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    eprintln!(
        "{} clusters, silhouette {:?}, eps {}, min_samples {}{}",
        report.best.n_clusters,
        report.best.silhouette,
        report.best.eps,
        report.best.min_samples,
        if report.best.target_missed { " (outside the 5-20 target band)" } else { "" }
    );
    Ok(())
}

fn sectors(a: SectorsArgs) -> Result<()> {
    let paths = PathsConfig {
        side_tables: a.side_tables.clone(),
        sector_map: a.sector_map.clone(),
        protocol_categories: a.protocol_categories.clone(),
        ..PathsConfig::default()
    };
    let side = load_side_tables(&paths)?;
    let map = load_sector_map(&paths, &side)?;
    let snapshots = read_snapshot_dir(&a.snapshots)?;
    let chosen: Vec<Sector> = if a.sectors.is_empty() {
        vec![Sector::AssetManagement, Sector::TradingExchanges]
    } else {
        a.sectors.iter().map(|s| s.parse()).collect::<exposure_core::Result<_>>()?
    };
    let rows = incident_table(&snapshots, &map, a.event, a.window, &chosen)?;
    write_incident_csv(&rows, a.scale, create(&a.out)?)?;
    let flows = sector_flows(
        &snapshots,
        &map,
        &FlowOptions {
            orientation: a.orientation,
            include_intra: a.include_intra,
        },
    );
    if let Some(p) = &a.flows {
        flows.write_csv(create(p)?)?;
    }
    if let Some(p) = &a.series {
        let (names, values) = flows.var_table(&chosen);
        write_series_csv(&flows.dates(), &names, &values, create(p)?)?;
    }
    Ok(())
}

fn var(a: VarArgs) -> Result<()> {
    let (names, rows) = read_series_csv(open(&a.series)?)?;
    let lags = match a.max_lags {
        Some(max) => {
            let (p, scores) = select_lag_aic(&rows, &names, max)?;
            eprintln!("AIC by order: {scores:?}; chose {p}");
            p
        }
        None => a.lags,
    };
    let model = fit_var(&rows, &names, lags)?;
    if !model.is_stable() {
        eprintln!("warning: fitted VAR is not stable (spectral radius {})", model.spectral_radius());
    }
    write_irf_csv(&irf(&model, a.horizon)?, create(&a.out)?)?;
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => TgnnConfig::from_toml_str(&fs::read_to_string(p).map_err(Error::from)?)?,
        None => TgnnConfig::default(),
    };
    let snapshots = read_snapshot_dir(&a.snapshots)?;
    let mut model = TgnnModel::new(derive_seed(a.seed, "init"));
    let report = train_live(
        &mut model,
        &mut NodeStateBank::default(),
        &snapshots,
        &config,
        derive_seed(a.seed, "train"),
    )?;
    report.write_csv(create(&a.out)?)?;
    if let Some(p) = &a.checkpoint {
        let mut w = create(p)?;
        serde_json::to_writer(&mut w, &model.checkpoint())?;
        writeln!(w)?;
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)
        .with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(input) = a.input {
        cfg.paths.input = Some(input);
    }
    if let Some(out) = a.out {
        cfg.paths.output = out;
    }
    match pipeline::run_pipeline(&cfg, &a.only) {
        Ok(m) => {
            for s in &m.stages {
                eprintln!("{:<8} {} artifacts", s.stage.name(), s.artifacts.len());
            }
            Ok(())
        }
        Err(f) => {
            eprintln!("{} stage(s) completed before the failure", f.manifest.stages.len());
            Err(anyhow::Error::new(f.error).context(match f.stage {
                Some(s) => format!("stage `{s}` failed"),
                None => "pipeline could not start".to_owned(),
            }))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(1, |e| pipeline::exit_code(e) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(pipeline::EXIT_CONFIG as u8);
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::MapTokens(a) => map_tokens(a),
        Command::Build(a) => build(a),
        Command::Metrics(a) => metrics(a),
        Command::Cluster(a) => cluster(a),
        Command::Sectors(a) => sectors(a),
        Command::Var(a) => var(a),
        Command::Predict(a) => predict(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
