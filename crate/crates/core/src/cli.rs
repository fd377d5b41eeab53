//! The `blrn` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or configuration,
//! 2 when a stage fails at run time. Declared outputs are staged in
//! temporary files and renamed into place only once every output of the
//! run has been written.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use chrono_tz::Tz;
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;
use thiserror::Error;

use crate::calibrate::{self, CorpusEntry, NelderMeadOptions};
use crate::eval::{self, Axis, ErrorKind};
use crate::geo::LatLon;
use crate::ingest::{self, ParseOptions, VehicleClass};
use crate::matching::{self, MatchParams};
use crate::network::{build_network, RoadNetwork};
use crate::pipeline;
use crate::routing::{self, RouteRequest, SpeedSet};
use crate::speeds::{self, Metric, RoadSpeedTable, SpeedModel, TrainOptions};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

trait Context<T> {
    fn ctx(self, what: &str) -> Result<T, CliError>;
}

impl<T, E: std::fmt::Display> Context<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "blrn", version, about = "Blue-light road network routing and arrival-time estimation")]
pub struct Cli {
    /// TOML configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages [default: available parallelism].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output on stderr (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the road network and write its link dump.
    BuildNetwork(BuildNetworkArgs),
    /// Generate a synthetic world: network, telemetry and ground truth.
    Synth(SynthArgs),
    /// Parse and clean telemetry.
    Ingest(IngestArgs),
    /// Map-match journeys onto the network.
    Match(MatchArgs),
    /// Train the speed model.
    Train(TrainArgs),
    /// Predict a route and arrival time, or a batch of them.
    Route(RouteArgs),
    /// Calibrate road-type speeds against reference routes.
    Calibrate(CalibrateArgs),
    /// Score predictions against reference journeys.
    Eval(EvalArgs),
    /// Summarise a trained model.
    ModelInspect(ModelInspectArgs),
}

#[derive(Debug, Args)]
pub struct BuildNetworkArgs {
    /// Network GeoJSON.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Link dump CSV to write.
    #[arg(long)]
    pub dump: PathBuf,
    /// Normalised network GeoJSON to write.
    #[arg(long)]
    pub geojson: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Grid size as ROWSxCOLS.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub spacing_m: Option<f64>,
    #[arg(long)]
    pub journeys: Option<usize>,
    #[arg(long)]
    pub noise_m: Option<f64>,
    #[arg(long)]
    pub interval_s: Option<u32>,
    #[arg(long)]
    pub junction_pause_s: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw telemetry CSV.
    #[arg(long)]
    pub avls: Option<PathBuf>,
    /// Cleaned telemetry CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Rejected rows CSV.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// Fail on the first malformed row.
    #[arg(long)]
    pub strict: bool,
    /// Network for monthly snapping coverage.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Monthly cumulative coverage CSV (needs --network).
    #[arg(long, requires = "network")]
    pub coverage: Option<PathBuf>,
    #[arg(long)]
    pub timezone: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct MatchFlags {
    #[arg(long)]
    pub sigma_m: Option<f64>,
    #[arg(long)]
    pub beta_m: Option<f64>,
    #[arg(long)]
    pub cand_radius_m: Option<f64>,
    #[arg(long)]
    pub max_candidates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Cleaned telemetry CSV.
    #[arg(long)]
    pub avls: Option<PathBuf>,
    /// Matched routes CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Rejected journeys CSV.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// Coverage by road type CSV, matched and snapped.
    #[arg(long)]
    pub coverage: Option<PathBuf>,
    #[command(flatten)]
    pub params: MatchFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Cleaned telemetry CSV.
    #[arg(long)]
    pub avls: Option<PathBuf>,
    /// Matched routes CSV.
    #[arg(long)]
    pub matched: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metric II speed table CSV [default: LAS].
    #[arg(long)]
    pub speed_table: Option<PathBuf>,
    /// Hybrid selection table CSV [default: Nelder-Mead].
    #[arg(long)]
    pub hybrid_table: Option<PathBuf>,
    #[arg(long)]
    pub timezone: Option<String>,
    /// Only fixes at or after this instant.
    #[arg(long)]
    pub train_start: Option<DateTime<Utc>>,
    /// Only fixes before this instant.
    #[arg(long)]
    pub train_end: Option<DateTime<Utc>>,
    #[arg(long, default_value_t = 250.0)]
    pub box_half_side_m: f64,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Trained model [default: untrained, Metrics I and II only].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Origin as lat,lon.
    #[arg(long, required_unless_present = "batch")]
    pub from: Option<LatLon>,
    /// Destination as lat,lon.
    #[arg(long, required_unless_present = "batch")]
    pub to: Option<LatLon>,
    #[arg(long, default_value = "AEU")]
    pub vehicle: VehicleClass,
    /// I, II, III, IV, V or HYBRID.
    #[arg(long)]
    pub metric: Option<String>,
    /// Departure time, RFC 3339.
    #[arg(long, required_unless_present = "batch")]
    pub at: Option<DateTime<Utc>>,
    /// Metric II table: las, nm or a speed table CSV.
    #[arg(long)]
    pub speed_set: Option<String>,
    /// Request CSV; one prediction row per request.
    #[arg(long, requires = "out")]
    pub batch: Option<PathBuf>,
    /// Output file [default: JSON on stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Reference journeys CSV with link paths.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Entries sampled from the corpus; 0 keeps all.
    #[arg(long, default_value_t = 200)]
    pub sample: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Starting table: las, nm or a speed table CSV.
    #[arg(long, default_value = "las")]
    pub initial: String,
    /// Report JSON to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Calibrated speed table CSV to write.
    #[arg(long)]
    pub table: PathBuf,
    /// Iteration trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Batch route output CSV.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference journeys CSV.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// duration, centre_distance, hour_of_day or region.
    #[arg(long, default_value = "hour_of_day")]
    pub axis: String,
    /// Region polygons GeoJSON for --axis region.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Error column: beta (raw) or chi (corrected).
    #[arg(long, default_value = "chi")]
    pub error: String,
    /// Summary CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-journey error CSV.
    #[arg(long)]
    pub errors: Option<PathBuf>,
    /// Network, for per-journey path coincidence.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Path coincidence CSV (needs --network).
    #[arg(long, requires = "network")]
    pub coincidence: Option<PathBuf>,
    /// Centre for distance bands, lat,lon.
    #[arg(long)]
    pub centre: Option<LatLon>,
    #[arg(long)]
    pub timezone: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelInspectArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Layer to dump: III, IV or V.
    #[arg(long, requires = "csv")]
    pub layer: Option<String>,
    /// Layer cells CSV to write.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Optional settings shared by the subcommands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub network: Option<PathBuf>,
    pub avls: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub timezone: Option<String>,
    pub centre: Option<String>,
    pub metric: Option<String>,
    pub log_level: Option<String>,
    pub train_start: Option<DateTime<Utc>>,
    pub train_end: Option<DateTime<Utc>>,
    pub matching: Option<MatchConfig>,
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub sigma_m: Option<f64>,
    pub beta_m: Option<f64>,
    pub cand_radius_m: Option<f64>,
    pub max_candidates: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
        let config: PipelineConfig = toml::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(tz) = &self.timezone {
            parse_timezone(tz, "timezone")?;
        }
        if let Some(c) = &self.centre {
            c.parse::<LatLon>().map_err(|e| usage(format!("config field `centre`: {e}")))?;
        }
        if let Some(m) = &self.metric {
            m.parse::<Metric>().map_err(|e| usage(format!("config field `metric`: {e}")))?;
        }
        if let Some(l) = &self.log_level {
            l.parse::<log::LevelFilter>().map_err(|_| usage(format!("config field `log_level`: unknown level `{l}`")))?;
        }
        if let (Some(a), Some(b)) = (self.train_start, self.train_end) {
            if a >= b {
                return Err(usage("config fields `train_start` must precede `train_end`"));
            }
        }
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| usage(format!("config table `synth`: {e}")))?;
        }
        Ok(())
    }
}

fn parse_timezone(s: &str, flag: &str) -> Result<Tz, CliError> {
    s.parse::<Tz>().map_err(|e| usage(format!("{flag}: {e}")))
}

fn required<T: Clone>(flag: Option<T>, config: Option<&T>, name: &str) -> Result<T, CliError> {
    flag.or_else(|| config.cloned())
        .ok_or_else(|| usage(format!("missing required --{name} (flag or config field `{}`)", name.replace('-', "_"))))
}

/// Outputs of one run, held in temporary files until [`Staged::commit`].
#[derive(Default)]
struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    fn stage<F>(&mut self, path: &Path, write: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<&mut File>) -> Result<(), CliError>,
    {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir).ctx(&format!("creating {}", dir.display()))?;
        let mut tmp = NamedTempFile::new_in(&dir).ctx(&format!("staging {}", path.display()))?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            write(&mut w)?;
            w.flush().ctx(&format!("writing {}", path.display()))?;
        }
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    fn paths(&self) -> Vec<PathBuf> {
        self.files.iter().map(|(_, p)| p.clone()).collect()
    }

    fn commit(self) -> Result<(), CliError> {
        for (tmp, path) in self.files {
            tmp.persist(&path).ctx(&format!("renaming into {}", path.display()))?;
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).ctx(&format!("opening {}", path.display()))
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn print_stdout(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).ctx(&format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn load_network(path: &Path) -> Result<RoadNetwork, CliError> {
    build_network(open(path)?).ctx(&format!("network {}", path.display()))
}

fn load_records(path: &Path) -> Result<Vec<ingest::AvlsRecord>, CliError> {
    let outcome = ingest::parse_avls(open(path)?, ParseOptions { strict: false }).ctx(&format!("telemetry {}", path.display()))?;
    if !outcome.rejects.is_empty() {
        log::warn!("{}: skipped {} malformed rows", path.display(), outcome.rejects.len());
    }
    Ok(outcome.records)
}

fn load_table(path: &Path) -> Result<RoadSpeedTable, CliError> {
    RoadSpeedTable::read_csv(open(path)?).ctx(&format!("speed table {}", path.display()))
}

fn speed_set(s: &str, flag: &str) -> Result<SpeedSet, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "las" => Ok(SpeedSet::Las),
        "nm" | "nelder-mead" | "nelder_mead" => Ok(SpeedSet::NelderMead),
        _ => {
            let path = Path::new(s);
            if !path.exists() {
                return Err(usage(format!("{flag}: expected las, nm or an existing table file, got `{s}`")));
            }
            Ok(SpeedSet::Custom(load_table(path)?))
        }
    }
}

struct Run<'a> {
    config: &'a PipelineConfig,
    config_text: String,
    subcommand: &'static str,
    inputs: Vec<PathBuf>,
    started: Instant,
}

impl Run<'_> {
    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    /// Adds the run manifest next to the first declared output, then
    /// commits everything.
    fn finish(self, mut staged: Staged, args: serde_json::Value) -> Result<(), CliError> {
        let outputs = staged.paths();
        let Some(primary) = outputs.first().cloned() else {
            return Ok(());
        };
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let config_hash = format!("{:x}", Sha256::digest(format!("{}\n{}", self.config_text, args).as_bytes()));
        let manifest = json!({
            "tool": "blrn",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": self.subcommand,
            "arguments": args,
            "config": self.config,
            "config_sha256": config_hash,
            "inputs": inputs,
            "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "elapsed_s": self.started.elapsed().as_secs_f64(),
        });
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        staged.stage(&primary.with_file_name(name), |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest).ctx("manifest")?;
            writeln!(w).ctx("manifest")
        })?;
        staged.commit()
    }
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(cli: &Cli, config: &PipelineConfig) {
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        match cli.verbose {
            0 => config
                .log_level
                .as_deref()
                .and_then(|l| l.parse().ok())
                .unwrap_or(log::LevelFilter::Info),
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let (config, config_text) = match &cli.config {
        Some(p) => (PipelineConfig::load(p)?, std::fs::read_to_string(p).unwrap_or_default()),
        None => (PipelineConfig::default(), String::new()),
    };
    init_logging(&cli, &config);
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // A global pool may already exist when called repeatedly in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut run = Run {
        config: &config,
        config_text,
        subcommand: "",
        inputs: Vec::new(),
        started: Instant::now(),
    };
    match &cli.command {
        Command::BuildNetwork(a) => {
            run.subcommand = "build-network";
            build_network_cmd(a, &mut run)
        }
        Command::Synth(a) => {
            run.subcommand = "synth";
            synth_cmd(a, &mut run)
        }
        Command::Ingest(a) => {
            run.subcommand = "ingest";
            ingest_cmd(a, &mut run)
        }
        Command::Match(a) => {
            run.subcommand = "match";
            match_cmd(a, &mut run)
        }
        Command::Train(a) => {
            run.subcommand = "train";
            train_cmd(a, &mut run)
        }
        Command::Route(a) => {
            run.subcommand = "route";
            route_cmd(a, &mut run)
        }
        Command::Calibrate(a) => {
            run.subcommand = "calibrate";
            calibrate_cmd(a, &mut run)
        }
        Command::Eval(a) => {
            run.subcommand = "eval";
            eval_cmd(a, &mut run)
        }
        Command::ModelInspect(a) => {
            run.subcommand = "model-inspect";
            inspect_cmd(a, &mut run)
        }
    }
    .and_then(|(staged, args)| run.finish(staged, args))
}

type Outcome = Result<(Staged, serde_json::Value), CliError>;

fn build_network_cmd(a: &BuildNetworkArgs, run: &mut Run) -> Outcome {
    let path = required(a.network.clone(), run.config.network.as_ref(), "network")?;
    let net = load_network(&run.input(&path))?;
    eprintln!("{} nodes, {} directed links", net.node_count(), net.link_count());
    let mut staged = Staged::default();
    staged.stage(&a.dump, |w| net.write_dump(w).ctx("link dump"))?;
    if let Some(g) = &a.geojson {
        staged.stage(g, |w| net.write_geojson(w).ctx("network GeoJSON"))?;
    }
    Ok((staged, json!({"network": path, "dump": a.dump, "geojson": a.geojson})))
}

fn parse_grid(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || usage(format!("--grid: expected ROWSxCOLS, got `{s}`"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn synth_cmd(a: &SynthArgs, run: &mut Run) -> Outcome {
    let mut config = run.config.synth.clone().unwrap_or_default();
    if let Some(g) = &a.grid {
        (config.rows, config.cols) = parse_grid(g)?;
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { config.$f = v; })* };
    }
    set!(spacing_m, journeys, noise_m, interval_s, junction_pause_s, seed);
    if let Some(tz) = &run.config.timezone {
        config.timezone = parse_timezone(tz, "config field `timezone`")?;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let out_dir = required(a.out_dir.clone(), run.config.out_dir.as_ref(), "out-dir")?;
    let world = synth::generate_world(&config).ctx("synth")?;
    eprintln!(
        "{} journeys, {} fixes on a {}x{} grid ({} links)",
        world.truth.journeys.len(),
        world.records.len(),
        config.rows,
        config.cols,
        world.network.link_count()
    );
    let mut staged = Staged::default();
    let f = |name: &str| out_dir.join(name);
    staged.stage(&f(synth::WORLD_FILES[0]), |w| world.network.write_geojson(w).ctx("network"))?;
    staged.stage(&f(synth::WORLD_FILES[1]), |w| ingest::write_avls(&world.records, w).ctx("telemetry"))?;
    staged.stage(&f(synth::WORLD_FILES[2]), |w| synth::write_truth_csv(&world.truth, w).ctx("truth"))?;
    staged.stage(&f(synth::WORLD_FILES[3]), |w| eval::write_references(&world.references(), w).ctx("journeys"))?;
    staged.stage(&f(synth::WORLD_FILES[4]), |w| config.speed_table().write_csv(w).ctx("speed table"))?;
    staged.stage(&f("synth_config.toml"), |w| {
        let text = toml::to_string(&config).ctx("config")?;
        w.write_all(text.as_bytes()).ctx("config")
    })?;
    Ok((staged, json!({"out_dir": out_dir, "synth": config})))
}

fn ingest_cmd(a: &IngestArgs, run: &mut Run) -> Outcome {
    let path = required(a.avls.clone(), run.config.avls.as_ref(), "avls")?;
    let tz = match a.timezone.as_ref().or(run.config.timezone.as_ref()) {
        Some(t) => parse_timezone(t, "--timezone")?,
        None => chrono_tz::Europe::London,
    };
    let outcome = ingest::parse_avls(open(&run.input(&path))?, ParseOptions { strict: a.strict }).map_err(|e| match e {
        ingest::IngestError::Malformed { .. } | ingest::IngestError::Header => usage(format!("--avls {}: {e}", path.display())),
        other => CliError::Runtime(format!("telemetry {}: {other}", path.display())),
    })?;
    let (filtered, traces, stats) = pipeline::ingest_records(&outcome.records);
    eprintln!(
        "{} records, {} rejected rows, {} stale fixes removed, {} journeys ({} single-fix discarded)",
        stats.records,
        outcome.rejects.len(),
        stats.stale_removed,
        stats.traces,
        stats.discarded_traces
    );
    let mut staged = Staged::default();
    staged.stage(&a.out, |w| ingest::write_avls(&filtered, w).ctx("cleaned telemetry"))?;
    if let Some(r) = &a.rejects {
        staged.stage(r, |w| ingest::write_rejects(&outcome.rejects, w).ctx("rejects"))?;
    }
    if let (Some(c), Some(n)) = (&a.coverage, &a.network) {
        let net = load_network(&run.input(n))?;
        let cov = ingest::snap_coverage(&net, &filtered, tz);
        staged.stage(c, |w| {
            let mut cw = csv::Writer::from_writer(w);
            cw.write_record(["month", "cumulative_links"]).ctx("coverage")?;
            for (m, n) in &cov {
                cw.write_record([m.to_string(), n.to_string()]).ctx("coverage")?;
            }
            cw.flush().ctx("coverage")
        })?;
    }
    let _ = traces;
    Ok((staged, json!({"avls": path, "out": a.out, "strict": a.strict, "stats": stats})))
}

fn match_params(flags: &MatchFlags, config: Option<&MatchConfig>) -> Result<MatchParams, CliError> {
    let d = MatchParams::default();
    let c = config.cloned().unwrap_or_default();
    let p = MatchParams {
        sigma_m: flags.sigma_m.or(c.sigma_m).unwrap_or(d.sigma_m),
        beta_m: flags.beta_m.or(c.beta_m).unwrap_or(d.beta_m),
        candidate_radius_m: flags.cand_radius_m.or(c.cand_radius_m).unwrap_or(d.candidate_radius_m),
        max_candidates: flags.max_candidates.or(c.max_candidates).unwrap_or(d.max_candidates),
    };
    p.validate().map_err(|e| usage(format!("match parameters: {e}")))?;
    Ok(p)
}

fn match_cmd(a: &MatchArgs, run: &mut Run) -> Outcome {
    let params = match_params(&a.params, run.config.matching.as_ref())?;
    let net_path = required(a.network.clone(), run.config.network.as_ref(), "network")?;
    let avls_path = required(a.avls.clone(), run.config.avls.as_ref(), "avls")?;
    let net = load_network(&run.input(&net_path))?;
    let records = load_records(&run.input(&avls_path))?;
    let (_, traces, _) = pipeline::ingest_records(&records);
    let (routes, rejects, stats) = pipeline::match_traces(&net, &traces, &params);
    eprintln!("matched {} of {} journeys; rejected {:?}", stats.matched, traces.len(), stats.rejected);
    let mut staged = Staged::default();
    staged.stage(&a.out, |w| matching::write_matched_csv(&routes, &net, w).ctx("matched routes"))?;
    if let Some(r) = &a.rejects {
        staged.stage(r, |w| {
            let mut cw = csv::Writer::from_writer(w);
            cw.write_record(["journey_id", "reason", "detail"]).ctx("rejects")?;
            for (id, e) in &rejects {
                cw.write_record([id.as_str(), e.reason(), &e.to_string()]).ctx("rejects")?;
            }
            cw.flush().ctx("rejects")
        })?;
    }
    if let Some(c) = &a.coverage {
        let matched = matching::coverage_by_road_type(&routes, &net);
        let snapped = matching::snapped_coverage_by_road_type(&net, &records);
        staged.stage(c, |w| {
            let mut cw = csv::Writer::from_writer(w);
            cw.write_record(["road_type", "present", "matched", "matched_fraction", "snapped", "snapped_fraction"])
                .ctx("coverage")?;
            for (m, s) in matched.iter().zip(&snapped) {
                cw.write_record([
                    m.road_type.name().to_string(),
                    m.present.to_string(),
                    m.used.to_string(),
                    format!("{:.6}", m.fraction),
                    s.used.to_string(),
                    format!("{:.6}", s.fraction),
                ])
                .ctx("coverage")?;
            }
            cw.flush().ctx("coverage")
        })?;
    }
    Ok((staged, json!({"network": net_path, "avls": avls_path, "out": a.out, "params": params, "stats": stats})))
}

fn train_cmd(a: &TrainArgs, run: &mut Run) -> Outcome {
    let net_path = required(a.network.clone(), run.config.network.as_ref(), "network")?;
    let avls_path = required(a.avls.clone(), run.config.avls.as_ref(), "avls")?;
    let out = required(a.out.clone(), run.config.model.as_ref(), "out")?;
    let tz = match a.timezone.as_ref().or(run.config.timezone.as_ref()) {
        Some(t) => parse_timezone(t, "--timezone")?,
        None => chrono_tz::Europe::London,
    };
    let start = a.train_start.or(run.config.train_start);
    let end = a.train_end.or(run.config.train_end);
    if let (Some(s), Some(e)) = (start, end) {
        if s >= e {
            return Err(usage("--train-start must precede --train-end"));
        }
    }
    if !(a.box_half_side_m > 0.0) {
        return Err(usage("--box-half-side-m must be positive"));
    }
    let metric_ii = a.speed_table.as_ref().map(|p| load_table(&run.input(p))).transpose()?;
    let hybrid = a.hybrid_table.as_ref().map(|p| load_table(&run.input(p))).transpose()?;
    let net = load_network(&run.input(&net_path))?;
    let in_window = |t: DateTime<Utc>| start.is_none_or(|s| t >= s) && end.is_none_or(|e| t < e);
    let records: Vec<_> = load_records(&run.input(&avls_path))?.into_iter().filter(|r| in_window(r.timestamp)).collect();
    let mut paths = matching::read_matched_csv(open(&run.input(&a.matched))?).ctx("matched routes")?;
    paths.retain(|_, p| p.entry.first().is_some_and(|t| in_window(*t)));

    let snapped = pipeline::snap_records(&net, &records);
    let options = TrainOptions {
        box_half_side_m: a.box_half_side_m,
        timezone: tz,
    };
    let layers = speeds::train_metric_iii_iv(&net, &snapped, &options);
    let ex = matching::observations_from_paths(&net, &paths);
    let model = SpeedModel {
        metric_ii: metric_ii.unwrap_or(RoadSpeedTable::LAS),
        hybrid_selection: hybrid.unwrap_or(RoadSpeedTable::NELDER_MEAD),
        metric_iii: layers.metric_iii,
        metric_iv: layers.metric_iv,
        metric_v: speeds::train_metric_v(&ex.observations, tz),
        timezone: tz,
        provenance: speeds::ModelProvenance {
            train_start: records.iter().map(|r| r.timestamp).min(),
            train_end: records.iter().map(|r| r.timestamp).max(),
            snapped_observations: snapped.len() as u64,
            matched_observations: ex.observations.len() as u64,
            zero_speed_excluded: layers.zero_speed_excluded,
        },
        ..SpeedModel::default()
    };
    eprintln!(
        "trained on {} snapped fixes and {} link traversals ({} below the timing floor)",
        snapped.len(),
        ex.observations.len(),
        ex.skipped
    );
    let mut staged = Staged::default();
    staged.stage(&out, |w| speeds::save_model(&model, w).ctx("model"))?;
    Ok((staged, json!({"network": net_path, "avls": avls_path, "matched": a.matched, "out": out, "timezone": tz.name()})))
}

fn route_json(p: &routing::RoutePrediction) -> serde_json::Value {
    json!({
        "links": p.links,
        "distance_m": p.distance_m,
        "t_beta_s": p.t_beta_s,
        "t_chi_s": p.t_chi_s,
        "junctions": p.junctions,
        "metric": p.metric.name(),
        "provenance": p.provenance_counts(),
    })
}

fn route_cmd(a: &RouteArgs, run: &mut Run) -> Outcome {
    let net_path = required(a.network.clone(), run.config.network.as_ref(), "network")?;
    let metric: Metric = match a.metric.as_ref().or(run.config.metric.as_ref()) {
        Some(m) => m.parse().map_err(|e| usage(format!("--metric: {e}")))?,
        None => Metric::V,
    };
    let speed_set = a.speed_set.as_deref().map(|s| speed_set(s, "--speed-set")).transpose()?;
    let model = match a.model.as_ref().or(run.config.model.as_ref()) {
        Some(p) => speeds::load_model(open(&run.input(p))?).ctx(&format!("model {}", p.display()))?,
        None => SpeedModel::default(),
    };
    let net = load_network(&run.input(&net_path))?;
    let mut staged = Staged::default();
    if let Some(batch) = &a.batch {
        let input = open(&run.input(batch))?;
        let out = a.out.as_ref().expect("clap requires --out with --batch");
        let mut n = 0;
        staged.stage(out, |w| {
            n = routing::run_batch(&net, &model, input, w, metric, speed_set).map_err(|e| match e {
                routing::BatchError::Row { .. } => usage(format!("--batch {}: {e}", batch.display())),
                other => CliError::Runtime(format!("batch: {other}")),
            })?;
            Ok(())
        })?;
        eprintln!("routed {n} requests");
        return Ok((staged, json!({"network": net_path, "batch": batch, "metric": metric.name(), "out": out})));
    }
    let request = RouteRequest {
        origin: a.from.expect("clap requires --from"),
        destination: a.to.expect("clap requires --to"),
        vehicle: a.vehicle,
        departure: a.at.expect("clap requires --at"),
        metric,
        speed_set,
    };
    let p = routing::shortest_route(&net, &model, &request).ctx("route")?;
    let body = serde_json::to_string_pretty(&route_json(&p)).ctx("route")?;
    let args = json!({"network": net_path, "from": request.origin, "to": request.destination,
        "vehicle": a.vehicle, "metric": metric.name(), "at": request.departure});
    match &a.out {
        Some(out) => staged.stage(out, |w| writeln!(w, "{body}").ctx("route"))?,
        None => print_stdout(&body)?,
    }
    Ok((staged, args))
}

fn calibrate_cmd(a: &CalibrateArgs, run: &mut Run) -> Outcome {
    let net_path = required(a.network.clone(), run.config.network.as_ref(), "network")?;
    if a.max_iter == 0 {
        return Err(usage("--max-iter must be at least 1"));
    }
    if !(a.tol > 0.0) {
        return Err(usage("--tol must be positive"));
    }
    let initial = speed_set(&a.initial, "--initial")?.table();
    let net = load_network(&run.input(&net_path))?;
    let mut corpus: Vec<CorpusEntry> = calibrate::read_corpus(open(&run.input(&a.corpus))?).ctx("corpus")?;
    if corpus.is_empty() {
        return Err(usage(format!("--corpus {}: no entries with a link path", a.corpus.display())));
    }
    if a.sample > 0 && corpus.len() > a.sample {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        corpus.shuffle(&mut rng);
        corpus.truncate(a.sample);
        corpus.sort_by(|x, y| x.journey_id.cmp(&y.journey_id));
    }
    let options = NelderMeadOptions {
        max_iterations: a.max_iter,
        ftol: a.tol,
        xtol: a.tol,
        ..Default::default()
    };
    let report = calibrate::nelder_mead(&net, &corpus, &initial, &options).ctx("calibration")?;
    eprintln!(
        "mean path coincidence {:.4} -> {:.4} after {} iterations (converged: {})",
        report.initial_objective, report.final_objective, report.iterations, report.converged
    );
    let mut staged = Staged::default();
    staged.stage(&a.report, |w| {
        serde_json::to_writer_pretty(&mut *w, &report).ctx("report")?;
        writeln!(w).ctx("report")
    })?;
    staged.stage(&a.table, |w| report.r#final.to_table().write_csv(w).ctx("speed table"))?;
    if let Some(t) = &a.trace {
        staged.stage(t, |w| calibrate::write_trace_csv(&report, w).ctx("trace"))?;
    }
    Ok((staged, json!({"network": net_path, "corpus": a.corpus, "entries": corpus.len(), "options": options, "initial": a.initial})))
}

fn eval_cmd(a: &EvalArgs, run: &mut Run) -> Outcome {
    let kind = match a.error.as_str() {
        "beta" => ErrorKind::Beta,
        "chi" => ErrorKind::Chi,
        other => return Err(usage(format!("--error: expected beta or chi, got `{other}`"))),
    };
    let axis = match a.axis.as_str() {
        "duration" => Axis::Duration,
        "centre_distance" => Axis::CentreDistance,
        "hour_of_day" => Axis::HourOfDay,
        "region" => {
            let path = a.regions.as_ref().ok_or_else(|| usage("--axis region needs --regions"))?;
            let text = std::fs::read_to_string(run.input(path)).ctx(&format!("reading {}", path.display()))?;
            Axis::Region(eval::read_regions(&text).map_err(|e| usage(format!("--regions {}: {e}", path.display())))?)
        }
        other => return Err(usage(eval::EvalError::Axis(other.into()).to_string())),
    };
    let centre = match (a.centre, run.config.centre.as_ref()) {
        (Some(c), _) => c,
        (None, Some(c)) => c.parse().map_err(|e| usage(format!("config field `centre`: {e}")))?,
        (None, None) => eval::DEFAULT_CENTRE,
    };
    let tz = match a.timezone.as_ref().or(run.config.timezone.as_ref()) {
        Some(t) => parse_timezone(t, "--timezone")?,
        None => chrono_tz::Europe::London,
    };
    let (predictions, failed) = eval::read_predictions(open(&run.input(&a.pred))?).ctx("predictions")?;
    let references = eval::read_references(open(&run.input(&a.reference))?).ctx("references")?;
    let table = eval::error_table(&predictions, &references, centre, tz);
    if !table.unmatched.is_empty() || !failed.is_empty() {
        log::warn!("{} journeys unmatched, {} predictions failed", table.unmatched.len(), failed.len());
    }
    let summary = eval::aggregate(&table.records, &axis, kind);
    eprintln!("{} journeys scored into {} buckets", table.records.len(), summary.len());
    let mut staged = Staged::default();
    staged.stage(&a.out, |w| eval::write_summary(&axis, &summary, w).ctx("summary"))?;
    if let Some(e) = &a.errors {
        staged.stage(e, |w| eval::write_error_table(&table.records, w).ctx("errors"))?;
    }
    if let (Some(c), Some(n)) = (&a.coincidence, &a.network) {
        let net = load_network(&run.input(n))?;
        let by_id: BTreeMap<&str, &eval::Prediction> = predictions.iter().map(|p| (p.journey_id.as_str(), p)).collect();
        staged.stage(c, |w| {
            let mut cw = csv::Writer::from_writer(w);
            cw.write_record(["journey_id", "whole", "q1", "q2", "q3", "q4"]).ctx("coincidence")?;
            for r in references.iter().filter(|r| !r.links.is_empty()) {
                let Some(p) = by_id.get(r.journey_id.as_str()) else { continue };
                let s = eval::path_coincidence(&net, &r.links, &p.links).ctx("coincidence")?;
                let mut rec = vec![r.journey_id.clone(), format!("{:.6}", s.whole)];
                rec.extend(s.quartiles.iter().map(|q| q.map(|v| format!("{v:.6}")).unwrap_or_default()));
                cw.write_record(rec).ctx("coincidence")?;
            }
            cw.flush().ctx("coincidence")
        })?;
    }
    Ok((staged, json!({"pred": a.pred, "ref": a.reference, "axis": axis.name(), "error": a.error, "centre": centre})))
}

fn inspect_cmd(a: &ModelInspectArgs, run: &mut Run) -> Outcome {
    let path = required(a.model.clone(), run.config.model.as_ref(), "model")?;
    let model = speeds::load_model(open(&run.input(&path))?).ctx(&format!("model {}", path.display()))?;
    let layer_summary = |m: Metric| {
        let layer = model.layer(m).expect("matrix layer");
        let cells: usize = layer.values().map(|x| x.populated().count()).sum();
        json!({"links": layer.len(), "cells": cells})
    };
    let summary = json!({
        "format_version": speeds::MODEL_VERSION,
        "timezone": model.timezone.name(),
        "metric_i_mph": model.metric_i_mph,
        "metric_ii": model.metric_ii,
        "hybrid_selection": model.hybrid_selection,
        "metric_iii": layer_summary(Metric::III),
        "metric_iv": layer_summary(Metric::IV),
        "metric_v": layer_summary(Metric::V),
        "provenance": model.provenance,
    });
    print_stdout(&serde_json::to_string_pretty(&summary).ctx("summary")?)?;
    let mut staged = Staged::default();
    if let (Some(l), Some(out)) = (&a.layer, &a.csv) {
        let metric: Metric = l.parse().map_err(|e| usage(format!("--layer: {e}")))?;
        let layer = match metric {
            Metric::III | Metric::IV | Metric::V => model.layer(metric).expect("matrix layer"),
            _ => return Err(usage("--layer: expected III, IV or V")),
        };
        staged.stage(out, |w| speeds::write_layer_csv(layer, w).ctx("layer"))?;
    }
    Ok((staged, json!({"model": path, "layer": a.layer})))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_codes() {
        assert_eq!(run(["blrn", "route", "--help"]), 0);
        assert_eq!(run(["blrn", "no-such-command"]), 1);
        assert_eq!(run(["blrn", "route", "--from", "51.5,-0.1", "--to", "51.5,-0.11", "--at", "2016-11-03T08:15:00Z"]), 1);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "network = \"n.geojson\"\nbogus = 1\n").unwrap();
        let err = PipelineConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        std::fs::write(&p, "metric = \"VI\"\n").unwrap();
        assert!(PipelineConfig::load(&p).unwrap_err().to_string().contains("metric"));
        std::fs::write(&p, "[matching]\nsigma_m = 5.0\n").unwrap();
        assert_eq!(PipelineConfig::load(&p).unwrap().matching.unwrap().sigma_m, Some(5.0));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("20x30").unwrap(), (20, 30));
        assert!(parse_grid("20").is_err());
    }

    #[test]
    fn staged_outputs_vanish_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let mut staged = Staged::default();
        staged.stage(&a, |w| w.write_all(b"x").ctx("a")).unwrap();
        let err = staged.stage(&b, |_| Err(CliError::Runtime("boom".into())));
        assert!(err.is_err());
        drop(staged);
        assert!(!a.exists() && !b.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
