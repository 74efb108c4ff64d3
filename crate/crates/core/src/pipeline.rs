//! Full-pipeline orchestration: one TOML config, six stages, and a manifest
//! listing every artifact with its SHA-256.
//!
//! Stages run in the order of [`Stage::ALL`]. A stage that was not selected
//! with `only` reads its inputs from the output directory, so
//! `--only metrics` works against snapshots written by an earlier run (or
//! the directory named by `paths.snapshots`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{cluster_snapshot, ClusterOptions, NOISE};
use crate::error::{Error, Result};
use crate::ingest::{align, align_with_grid, parse_duration, AlignedStateTable, parse_records, write_records, GridSpec, InputFormat, SynthMetadata, TvlRecord};
use crate::linkpred::{train_live, NodeStateBank, TgnnConfig, TgnnModel};
use crate::metrics::{composition_length, compute_metrics, write_metrics_csv, MetricsOptions};
use crate::netbuild::{build_series, read_snapshot_dir, write_snapshot_json, BuildOptions, NetworkSnapshot, NewTokenPolicy};
use crate::sectors::{
    fit_var, incident_table, irf, sector_flows, sector_matrix, select_lag_aic, write_incident_csv, write_irf_csv,
    write_sector_matrix_csv, write_series_csv, FlowOptions, Orientation, Sector, SectorMap,
};
use crate::tokmap::{load_manual_map, Resolver, TextCorpus, DEFAULT_SIMILARITY_THRESHOLD};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Process exit codes, following the BSD `sysexits` convention.
pub const EXIT_DATA: i32 = 65;
pub const EXIT_SOFTWARE: i32 = 70;
pub const EXIT_IO: i32 = 74;
pub const EXIT_CONFIG: i32 = 78;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::Config(_) => EXIT_CONFIG,
        Error::Format(_) | Error::Invariant(_) => EXIT_DATA,
        _ => EXIT_SOFTWARE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Build,
    Metrics,
    Cluster,
    Sectors,
    Predict,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Build,
        Stage::Metrics,
        Stage::Cluster,
        Stage::Sectors,
        Stage::Predict,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Build => "build",
            Stage::Metrics => "metrics",
            Stage::Cluster => "cluster",
            Stage::Sectors => "sectors",
            Stage::Predict => "predict",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Seed for one stage: the first eight bytes of
/// `sha256("<root>:<label>")`, little endian.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{root}:{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Raw TVL records.
    pub input: Option<PathBuf>,
    /// Defaults to the extension of `input`.
    pub format: Option<InputFormat>,
    /// JSON side tables: protocol categories, metadata token map and texts.
    pub side_tables: Option<PathBuf>,
    /// `token_id,protocol_id` CSV.
    pub manual_map: Option<PathBuf>,
    /// `category,sector` CSV replacing the built-in grouping.
    pub sector_map: Option<PathBuf>,
    /// `protocol_id,category` CSV, merged over the side tables.
    pub protocol_categories: Option<PathBuf>,
    /// Prebuilt snapshots for runs that skip `build`.
    pub snapshots: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            input: None,
            format: None,
            side_tables: None,
            manual_map: None,
            sector_map: None,
            protocol_categories: None,
            snapshots: None,
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Grid spacing, e.g. `7d`.
    pub interval: String,
    /// Half-width of the matching window around each grid point.
    pub tolerance: String,
    /// Anchor the grid at midnight UTC of this date instead of at the
    /// earliest record.
    pub start: Option<NaiveDate>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            interval: "7d".into(),
            tolerance: "1d".into(),
            start: None,
        }
    }
}

impl IngestConfig {
    pub fn seconds(&self) -> Result<(i64, i64)> {
        let interval = parse_duration(&self.interval)?;
        let tolerance = parse_duration(&self.tolerance)?;
        GridSpec {
            start: 0,
            interval,
            tolerance,
            len: 0,
        }
        .validate()?;
        Ok((interval, tolerance))
    }

    pub fn align(&self, records: &[TvlRecord]) -> Result<AlignedStateTable> {
        let (interval, tolerance) = self.seconds()?;
        let Some(date) = self.start else {
            return align(records, interval, tolerance);
        };
        let start = date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp();
        let last = records.iter().map(|r| r.timestamp).max().unwrap_or(start);
        let len = if last + tolerance < start {
            0
        } else {
            ((last - start + tolerance) / interval) as usize + 1
        };
        align_with_grid(
            records,
            GridSpec {
                start,
                interval,
                tolerance,
                len,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub similarity_threshold: f64,
    pub node_threshold: Decimal,
    pub new_token_policy: NewTokenPolicy,
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            node_threshold: Decimal::ZERO,
            new_token_policy: NewTokenPolicy::Include,
            from: None,
            to: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub idleness: f64,
    /// Links listed per snapshot in the composition-length table.
    pub composition_top: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            idleness: 0.0,
            composition_top: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SectorsConfig {
    pub orientation: Orientation,
    pub include_intra: bool,
    /// VAR variables are the expansion and contraction series of these
    /// sectors, in this order (the Cholesky ordering).
    pub var_sectors: Vec<String>,
    pub lags: usize,
    /// Pick the lag order by AIC up to `max_lags` instead of using `lags`.
    pub select_lags: bool,
    pub max_lags: usize,
    pub horizon: usize,
    pub event: Option<NaiveDate>,
    pub window: i64,
    pub incident_sectors: Vec<String>,
    /// Incident values are divided by this.
    pub scale: Decimal,
}

impl Default for SectorsConfig {
    fn default() -> Self {
        let pair = vec![
            Sector::AssetManagement.name().to_owned(),
            Sector::TradingExchanges.name().to_owned(),
        ];
        SectorsConfig {
            orientation: Orientation::Inbound,
            include_intra: false,
            var_sectors: pair.clone(),
            lags: 2,
            select_lags: false,
            max_lags: 4,
            horizon: 12,
            event: None,
            window: 4,
            incident_sectors: pair,
            scale: Decimal::ONE,
        }
    }
}

fn parse_sectors(names: &[String]) -> Result<Vec<Sector>> {
    names.iter().map(|n| n.parse()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub build: BuildConfig,
    pub metrics: MetricsConfig,
    pub cluster: ClusterOptions,
    pub sectors: SectorsConfig,
    pub predict: TgnnConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threads: None,
            paths: PathsConfig::default(),
            ingest: IngestConfig::default(),
            build: BuildConfig::default(),
            metrics: MetricsConfig::default(),
            cluster: ClusterOptions::default(),
            sectors: SectorsConfig::default(),
            predict: TgnnConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates. Relative paths are taken relative to `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn rebase(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.input,
            &mut p.side_tables,
            &mut p.manual_map,
            &mut p.sector_map,
            &mut p.protocol_categories,
            &mut p.snapshots,
        ] {
            if let Some(path) = slot {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        if p.output.is_relative() {
            p.output = base.join(&p.output);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.ingest.seconds()?;
        let b = &self.build;
        if !(b.similarity_threshold > 0.0 && b.similarity_threshold < 1.0) {
            return Err(Error::Config("build.similarity_threshold must lie in (0, 1)".into()));
        }
        if b.node_threshold < Decimal::ZERO {
            return Err(Error::Config("build.node_threshold must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.metrics.idleness) {
            return Err(Error::Config("metrics.idleness must lie in [0, 1)".into()));
        }
        let t = &self.cluster.tsne;
        if !(t.perplexity >= 1.0 && t.learning_rate > 0.0 && t.dims >= 1) {
            return Err(Error::Config("cluster.tsne needs perplexity >= 1, positive learning rate, dims >= 1".into()));
        }
        let g = &self.cluster.grid;
        if g.eps.is_empty() || g.min_samples.is_empty() || g.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("cluster.grid needs positive eps values and min_samples".into()));
        }
        if g.target_clusters.0 > g.target_clusters.1 {
            return Err(Error::Config("cluster.grid.target_clusters must be an ordered pair".into()));
        }
        let s = &self.sectors;
        parse_sectors(&s.var_sectors)?;
        parse_sectors(&s.incident_sectors)?;
        if s.var_sectors.is_empty() {
            return Err(Error::Config("sectors.var_sectors is empty".into()));
        }
        if s.lags == 0 || s.max_lags == 0 || s.horizon == 0 {
            return Err(Error::Config("sectors.lags, max_lags and horizon must be positive".into()));
        }
        if s.window < 0 || s.scale <= Decimal::ZERO {
            return Err(Error::Config("sectors.window must be non-negative and scale positive".into()));
        }
        self.predict.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub seed: u64,
    pub params: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub stages: Vec<StageEntry>,
}

impl Manifest {
    pub fn new(seed: u64) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            seed,
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageEntry> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

/// A stage that failed, with the manifest as far as it got.
#[derive(Debug)]
pub struct Failure {
    pub stage: Option<Stage>,
    pub error: Error,
    pub manifest: Manifest,
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        exit_code(&self.error)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage `{s}` failed: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for Failure {}

/// Collects the files a stage writes.
struct Writer<'a> {
    root: &'a Path,
    artifacts: Vec<ArtifactEntry>,
}

impl<'a> Writer<'a> {
    fn new(root: &'a Path) -> Self {
        Writer {
            root,
            artifacts: Vec::new(),
        }
    }

    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.artifacts.push(ArtifactEntry {
            path: rel.to_owned(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn put_with(&mut self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.put(rel, &buf)
    }
}

pub fn input_format(paths: &PathsConfig, input: &Path) -> Result<InputFormat> {
    match paths.format {
        Some(f) => Ok(f),
        None => input
            .extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::Config(format!("cannot infer record format of {}", input.display())))?
            .parse(),
    }
}

pub fn load_side_tables(paths: &PathsConfig) -> Result<SynthMetadata> {
    match &paths.side_tables {
        Some(p) => serde_json::from_slice(&fs::read(p)?).map_err(|e| Error::Config(format!("side tables: {e}"))),
        None => Ok(SynthMetadata::default()),
    }
}

pub fn load_sector_map(paths: &PathsConfig, side: &SynthMetadata) -> Result<SectorMap> {
    let mut map = SectorMap::standard();
    if let Some(p) = &paths.sector_map {
        map = map.with_category_csv(fs::File::open(p)?)?;
    }
    map = map.with_protocol_categories(side.categories.clone());
    if let Some(p) = &paths.protocol_categories {
        map = map.with_protocol_csv(fs::File::open(p)?)?;
    }
    Ok(map)
}

/// Records sorted by `(protocol, chain, token, timestamp)`.
fn sorted_records(mut records: Vec<TvlRecord>) -> Vec<TvlRecord> {
    records.sort_by(|a, b| {
        (&a.protocol_id, &a.chain_id, &a.token_id, a.timestamp).cmp(&(&b.protocol_id, &b.chain_id, &b.token_id, b.timestamp))
    });
    records
}

#[derive(Default)]
struct Context {
    records: Option<Vec<TvlRecord>>,
    snapshots: Option<Vec<NetworkSnapshot>>,
}

impl Context {
    fn records(&mut self, out: &Path) -> Result<&[TvlRecord]> {
        if self.records.is_none() {
            let file = fs::File::open(out.join("ingest/records.csv"))?;
            self.records = Some(parse_records(file, InputFormat::Csv)?.records);
        }
        Ok(self.records.as_deref().unwrap_or_default())
    }

    fn snapshots(&mut self, cfg: &PipelineConfig) -> Result<&[NetworkSnapshot]> {
        if self.snapshots.is_none() {
            let dir = cfg
                .paths
                .snapshots
                .clone()
                .unwrap_or_else(|| cfg.paths.output.join("build/snapshots"));
            self.snapshots = Some(read_snapshot_dir(&dir)?);
        }
        Ok(self.snapshots.as_deref().unwrap_or_default())
    }
}

fn params<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

fn run_ingest(cfg: &PipelineConfig, ctx: &mut Context, w: &mut Writer) -> Result<serde_json::Value> {
    let input = cfg
        .paths
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("paths.input is required for ingest".into()))?;
    let format = input_format(&cfg.paths, input)?;
    let raw = fs::read(input)?;
    let report = parse_records(raw.as_slice(), format)?;
    let records = sorted_records(report.records);
    w.put_with("ingest/records.csv", |buf| write_records(&records, buf, InputFormat::Csv))?;
    w.put_with("ingest/rejections.csv", |buf| {
        let mut c = csv::Writer::from_writer(buf);
        c.write_record(["line", "reason", "detail"])?;
        for r in &report.rejections {
            c.write_record([r.line.to_string(), r.reason.to_string(), r.detail.clone()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let p = serde_json::json!({
        "input_sha256": sha256_hex(&raw),
        "format": format,
        "accepted": records.len(),
        "rejected": report.rejections.len(),
    });
    ctx.records = Some(records);
    Ok(p)
}

fn run_build(cfg: &PipelineConfig, ctx: &mut Context, w: &mut Writer) -> Result<serde_json::Value> {
    let (interval, tolerance) = cfg.ingest.seconds()?;
    let side = load_side_tables(&cfg.paths)?;
    let manual = match &cfg.paths.manual_map {
        Some(p) => load_manual_map(fs::File::open(p)?)?,
        None => BTreeMap::new(),
    };
    let records = ctx.records(&cfg.paths.output)?;
    let table = cfg.ingest.align(records)?;
    let corpus = TextCorpus::new(&side.token_texts, &side.protocol_texts);
    let resolver = Resolver::new(side.metadata_map.clone(), manual, &corpus, cfg.build.similarity_threshold)?;
    let map = resolver.resolve_all(table.tokens());
    let options = BuildOptions {
        node_threshold: cfg.build.node_threshold,
        new_token_policy: cfg.build.new_token_policy,
    };
    let snapshots = build_series(&table, &map, &options, cfg.build.from, cfg.build.to)?;

    w.put_with("build/token_map.csv", |buf| map.write_csv(buf))?;
    for s in &snapshots {
        let rel = format!("build/snapshots/{}.json", s.date.format("%Y-%m-%d"));
        w.put_with(&rel, |buf| write_snapshot_json(s, buf))?;
    }
    let mut p = params(&cfg.build)?;
    p["interval_seconds"] = interval.into();
    p["tolerance_seconds"] = tolerance.into();
    p["snapshots"] = snapshots.len().into();
    p["stage_counts"] = params(&map.stage_counts())?;
    ctx.snapshots = Some(snapshots);
    Ok(p)
}

fn run_metrics(cfg: &PipelineConfig, ctx: &mut Context, w: &mut Writer) -> Result<serde_json::Value> {
    use rayon::prelude::*;
    let snapshots = ctx.snapshots(cfg)?;
    let options = MetricsOptions {
        idleness: cfg.metrics.idleness,
    };
    let reports = snapshots
        .par_iter()
        .map(|s| compute_metrics(s, &options))
        .collect::<Result<Vec<_>>>()?;
    w.put_with("metrics/metrics.csv", |buf| write_metrics_csv(&reports, buf))?;
    w.put_with("metrics/composition_length.csv", |buf| {
        let mut c = csv::Writer::from_writer(buf);
        c.write_record(["date", "source", "target", "length"])?;
        for s in snapshots {
            for r in composition_length(s, cfg.metrics.composition_top) {
                c.write_record([s.date.format("%Y-%m-%d").to_string(), r.source, r.target, r.length.to_string()])?;
            }
        }
        c.flush()?;
        Ok(())
    })?;
    params(&cfg.metrics)
}

fn run_cluster(cfg: &PipelineConfig, ctx: &mut Context, w: &mut Writer, seed: u64) -> Result<serde_json::Value> {
    let snapshots = ctx.snapshots(cfg)?;
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record([
        "date",
        "n_nodes",
        "perplexity",
        "kl_divergence",
        "eps",
        "min_samples",
        "silhouette",
        "n_clusters",
        "target_missed",
        "note",
    ])?;
    let mut points = csv::Writer::from_writer(Vec::new());
    points.write_record(["date", "protocol_id", "x", "y", "label"])?;
    let mut sweep = csv::Writer::from_writer(Vec::new());
    sweep.write_record(["date", "eps", "min_samples", "n_clusters", "n_noise", "silhouette"])?;

    for s in snapshots {
        let date = s.date.format("%Y-%m-%d").to_string();
        // t-SNE needs more than three points per unit of perplexity.
        if s.nodes.len() < 4 {
            summary.write_record([&date, &s.nodes.len().to_string(), "", "", "", "", "", "", "", "too few nodes"])?;
            continue;
        }
        let report = cluster_snapshot(s, &cfg.cluster, derive_seed(seed, &date))
            .map_err(|e| Error::Parameter(format!("{}: {e}", s.date)))?;
        let b = &report.best;
        summary.write_record([
            date.clone(),
            report.ids.len().to_string(),
            report.perplexity.to_string(),
            report.kl_divergence.to_string(),
            b.eps.to_string(),
            b.min_samples.to_string(),
            b.silhouette.map(|v| v.to_string()).unwrap_or_default(),
            b.n_clusters.to_string(),
            b.target_missed.to_string(),
            String::new(),
        ])?;
        for ((id, y), label) in report.ids.iter().zip(&report.embedding).zip(&b.labels) {
            let coord = |i: usize| y.get(i).map(|v| v.to_string()).unwrap_or_default();
            let label = if *label == NOISE { "noise".to_owned() } else { label.to_string() };
            points.write_record([date.clone(), id.clone(), coord(0), coord(1), label])?;
        }
        for c in &report.sweep {
            sweep.write_record([
                date.clone(),
                c.eps.to_string(),
                c.min_samples.to_string(),
                c.n_clusters.to_string(),
                c.n_noise.to_string(),
                c.silhouette.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    for (rel, c) in [("cluster/summary.csv", summary), ("cluster/embedding.csv", points), ("cluster/sweep.csv", sweep)] {
        let bytes = c.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        w.put(rel, &bytes)?;
    }
    params(&cfg.cluster)
}

fn run_sectors(cfg: &PipelineConfig, ctx: &mut Context, w: &mut Writer) -> Result<serde_json::Value> {
    let sc = &cfg.sectors;
    let side = load_side_tables(&cfg.paths)?;
    let map = load_sector_map(&cfg.paths, &side)?;
    let snapshots = ctx.snapshots(cfg)?;
    let flows = sector_flows(
        snapshots,
        &map,
        &FlowOptions {
            orientation: sc.orientation,
            include_intra: sc.include_intra,
        },
    );
    w.put_with("sectors/flows.csv", |buf| flows.write_csv(buf))?;

    let mut total = BTreeMap::new();
    for s in snapshots {
        for (k, v) in sector_matrix(s, &map) {
            *total.entry(k).or_insert(Decimal::ZERO) += v;
        }
    }
    w.put_with("sectors/sector_matrix.csv", |buf| write_sector_matrix_csv(&total, buf))?;

    let var_sectors = parse_sectors(&sc.var_sectors)?;
    let (names, rows) = flows.var_table(&var_sectors);
    w.put_with("sectors/var_series.csv", |buf| write_series_csv(&flows.dates(), &names, &rows, buf))?;
    let (lags, aic) = if sc.select_lags {
        let (p, scores) = select_lag_aic(&rows, &names, sc.max_lags)?;
        (p, Some(scores))
    } else {
        (sc.lags, None)
    };
    let model = fit_var(&rows, &names, lags)?;
    let response = irf(&model, sc.horizon)?;
    w.put_with("sectors/irf.csv", |buf| write_irf_csv(&response, buf))?;

    if let Some(event) = sc.event {
        let rows = incident_table(snapshots, &map, event, sc.window, &parse_sectors(&sc.incident_sectors)?)?;
        w.put_with("sectors/incident.csv", |buf| write_incident_csv(&rows, sc.scale, buf))?;
    }
    let mut p = params(sc)?;
    p["selected_lags"] = lags.into();
    p["aic"] = params(&aic)?;
    p["spectral_radius"] = model.spectral_radius().into();
    Ok(p)
}

fn run_predict(cfg: &PipelineConfig, ctx: &mut Context, w: &mut Writer, seed: u64) -> Result<serde_json::Value> {
    let snapshots = ctx.snapshots(cfg)?;
    let mut model = TgnnModel::new(derive_seed(seed, "init"));
    let mut bank = NodeStateBank::default();
    let report = train_live(&mut model, &mut bank, snapshots, &cfg.predict, derive_seed(seed, "train"))?;
    w.put_with("predict/eval.csv", |buf| report.write_csv(buf))?;
    w.put_with("predict/model.json", |buf| {
        serde_json::to_writer(&mut *buf, &model.checkpoint())?;
        buf.push(b'\n');
        Ok(())
    })?;
    params(&cfg.predict)
}

/// Runs the selected stages (all when `only` is empty) and writes
/// `manifest.json` after every stage. On failure the manifest on disk holds
/// the stages that completed.
pub fn run_pipeline(cfg: &PipelineConfig, only: &[Stage]) -> std::result::Result<Manifest, Failure> {
    let fail = |stage, error, manifest: &Manifest| Failure {
        stage,
        error,
        manifest: manifest.clone(),
    };
    let mut manifest = Manifest::new(cfg.seed);
    if let Err(e) = cfg.validate() {
        return Err(fail(None, e, &manifest));
    }
    let out = cfg.paths.output.as_path();
    if let Err(e) = fs::create_dir_all(out).map_err(Error::from).and_then(|_| manifest.write(out)) {
        return Err(fail(None, e, &manifest));
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cfg.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => return Err(fail(None, Error::Config(e.to_string()), &manifest)),
    };
    let mut ctx = Context::default();
    for stage in Stage::ALL {
        if !only.is_empty() && !only.contains(&stage) {
            continue;
        }
        let seed = derive_seed(cfg.seed, stage.name());
        let mut w = Writer::new(out);
        let result = pool.install(|| match stage {
            Stage::Ingest => run_ingest(cfg, &mut ctx, &mut w),
            Stage::Build => run_build(cfg, &mut ctx, &mut w),
            Stage::Metrics => run_metrics(cfg, &mut ctx, &mut w),
            Stage::Cluster => run_cluster(cfg, &mut ctx, &mut w, seed),
            Stage::Sectors => run_sectors(cfg, &mut ctx, &mut w),
            Stage::Predict => run_predict(cfg, &mut ctx, &mut w, seed),
        });
        match result {
            Ok(params) => {
                manifest.stages.push(StageEntry {
                    stage,
                    seed,
                    params,
                    artifacts: w.artifacts,
                });
                if let Err(e) = manifest.write(out) {
                    return Err(fail(Some(stage), e, &manifest));
                }
            }
            Err(e) => return Err(fail(Some(stage), e, &manifest)),
        }
    }
    Ok(manifest)
}
