//! The `specmatch` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, missing or
//! malformed config and input files), 2 for failures while running.
//! Every command writes its outputs atomically and leaves a
//! `manifest.json` (or `<out>.manifest.json`) recording the config, seeds,
//! input hashes and crate version.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{self, predict_set};
use crate::error::Error;
use crate::harness::{self, ExperimentConfig, ExperimentReport, SyntheticDatasetSpec, ValidationMode};
use crate::matcher::{self, classify, MatchRecord, MatchResult, ReferenceLibrary, VotingConfig};
use crate::ndcore::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::network::ArchitectureConfig;
use crate::spectra_io::{self, Format, Preprocessing, ResampledSpectrum, Spectrum};
use crate::trainer::{self, Ensemble};

/// Environment variable capping worker threads when `--threads` is absent.
pub const THREADS_ENV: &str = "SPECMATCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "specmatch", version, about = "Spectrum matching with a Siamese network")]
pub struct Cli {
    /// Worker thread cap (default: SPECMATCH_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Gaussian-peak dataset.
    Synth(SynthArgs),
    /// Train an ensemble and write checkpoints and logs.
    Train(TrainArgs),
    /// Match query spectra against a reference library.
    Match(MatchArgs),
    /// Run the repeated leave-one-out experiment and write a report.
    Evaluate(EvaluateArgs),
    /// Calibrate a conformal threshold on held-out spectra.
    Calibrate(CalibrateArgs),
    /// Coverage and set size over a grid of miscoverage levels.
    Curve(CurveArgs),
    /// Render a stored JSON report as text.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML recipe; either a bare recipe or an experiment config with a
    /// `[synthetic]` section. Defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output file; `.csv` or `.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Spectra with roles; `test` records are ignored.
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// JSON lines, one match record per query.
    #[arg(long)]
    pub out: PathBuf,
    /// Top-M voting across repeated scans sharing a source id prefix is not
    /// inferred; with M > 1 every query is treated as its own specimen.
    #[arg(long, default_value_t = 1)]
    pub voting_m: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "manifest")]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    pub data: Option<PathBuf>,
    /// Re-run from a manifest written by an earlier `evaluate`.
    #[arg(long, conflicts_with_all = ["config", "data", "seed"])]
    pub manifest: Option<PathBuf>,
    /// Output directory for `report.md`, `report.json`, `summary.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    /// Held-out spectra whose classes are all in the library.
    #[arg(long)]
    pub validation: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated miscoverage levels.
    #[arg(long, value_delimiter = ',', default_values_t = harness::DEFAULT_ALPHAS.to_vec())]
    pub alphas: Vec<f64>,
    /// JSON lines, one row per alpha.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` written by `evaluate`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of one command.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Everything needed to repeat a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub config_hash: Option<String>,
    /// Full config text after seed overrides.
    pub config_toml: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    /// Dataset the command ran on, when there is exactly one.
    pub data: Option<String>,
    /// Input path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: None,
            config_toml: None,
            seeds: BTreeMap::new(),
            data: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        self.inputs
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn config(&mut self, cfg: &ExperimentConfig) {
        self.config_hash = Some(cfg.hash_hex());
        self.config_toml = Some(cfg.to_toml());
    }
}

/// Write `bytes` to `path` through a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> crate::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn read_text(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = read_text(path, "config file")?;
    ExperimentConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn format_of(path: &Path) -> CliResult<Format> {
    Format::from_path(path).ok_or_else(|| {
        CliError::Usage(format!(
            "{}: unknown extension, expected .csv or .jsonl",
            path.display()
        ))
    })
}

fn load_data(path: &Path) -> CliResult<Vec<Spectrum>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("data file {} does not exist", path.display())));
    }
    let format = format_of(path)?;
    spectra_io::load_spectra(path, format).map_err(|e| CliError::Usage(e.to_string()))
}

/// Architecture, preprocessing and members of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub arch: ArchitectureConfig,
    pub preprocessing: Preprocessing,
    pub member_seeds: Vec<u64>,
}

const MODEL_FILE: &str = "model.toml";

fn member_file(seed: u64) -> String {
    format!("member_{seed}.ckpt")
}

/// Write a model directory: descriptor plus one checkpoint per member.
pub fn save_model(dir: &Path, ensemble: &Ensemble, preprocessing: Preprocessing) -> crate::Result<Vec<String>> {
    let desc = ModelDescriptor {
        arch: ensemble.arch.clone(),
        preprocessing,
        member_seeds: ensemble.member_seeds.clone(),
    };
    let text = toml::to_string(&desc).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join(MODEL_FILE), text.as_bytes())?;
    let mut written = vec![MODEL_FILE.to_string()];
    for m in &ensemble.members {
        let mut bytes = Vec::new();
        write_checkpoint(
            &mut bytes,
            &Checkpoint {
                params: m.clone(),
                arch_hash: ensemble.arch.hash(),
            },
        )?;
        let name = member_file(m.seed);
        write_atomic(&dir.join(&name), &bytes)?;
        written.push(name);
    }
    Ok(written)
}

/// Load a model directory, checking every checkpoint against the
/// descriptor's architecture.
pub fn load_model(dir: &Path) -> crate::Result<(Ensemble, Preprocessing)> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let desc: ModelDescriptor = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    desc.arch.validate()?;
    let hash = desc.arch.hash();
    let mut members = Vec::with_capacity(desc.member_seeds.len());
    for &seed in &desc.member_seeds {
        let p = dir.join(member_file(seed));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let ckpt =
            read_checkpoint(&mut bytes.as_slice()).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
        if ckpt.arch_hash != hash {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different architecture",
                p.display()
            )));
        }
        members.push(ckpt.params);
    }
    Ok((Ensemble::new(desc.arch, members)?, desc.preprocessing))
}

fn load_model_cli(dir: &Path) -> CliResult<(Ensemble, Preprocessing)> {
    if !dir.join(MODEL_FILE).exists() {
        return Err(CliError::Usage(format!(
            "{} is not a model directory (no {MODEL_FILE})",
            dir.display()
        )));
    }
    Ok(load_model(dir)?)
}

fn write_manifest(path: &Path, manifest: &Manifest) -> crate::Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(manifest)? + "\n").as_bytes())
}

fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec = match &args.spec {
        None => SyntheticDatasetSpec::default(),
        Some(p) => {
            let text = read_text(p, "synthetic spec")?;
            let parsed = toml::from_str::<SyntheticDatasetSpec>(&text).or_else(|bare| {
                match toml::from_str::<ExperimentConfig>(&text) {
                    Ok(cfg) => cfg
                        .synthetic
                        .ok_or_else(|| format!("{}: no [synthetic] section", p.display())),
                    Err(_) => Err(format!("{}: {bare}", p.display())),
                }
            });
            parsed.map_err(CliError::Usage)?
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let format = format_of(&args.out)?;
    let data = harness::generate_synthetic(&spec)?;
    let mut bytes = Vec::new();
    spectra_io::write_spectra(&mut bytes, format, &data)?;
    write_atomic(&args.out, &bytes)?;
    let mut m = Manifest::new("synth");
    if let Some(p) = &args.spec {
        m.input(p)?;
    }
    m.config_toml = Some(toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?);
    m.seeds.insert("synthetic".into(), spec.seed);
    m.outputs.push(args.out.display().to_string());
    write_manifest(&sidecar_manifest(&args.out), &m)?;
    log::info!("wrote {} spectra to {}", data.len(), args.out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let data = load_data(&args.data)?;
    let usable: Vec<Spectrum> = data
        .iter()
        .filter(|s| s.role() != spectra_io::Role::Test)
        .cloned()
        .collect();
    if usable.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no training spectra",
            args.data.display()
        )));
    }
    let grid = harness::experiment_grid(&cfg, &usable)?;
    let prep = Preprocessing {
        grid,
        normalize: cfg.experiment.normalize,
    };
    let mut split = spectra_io::split_by_role(&usable);
    if cfg.experiment.validation == ValidationMode::Holdout && split.validation.is_empty() {
        split = spectra_io::hold_out_validation(split, cfg.experiment.split_seed);
    }
    let train = prep.apply_all(&split.train)?;
    let validation = prep.apply_all(&split.validation)?;
    let data = harness::training_data(&cfg, &train, &validation, &grid, cfg.experiment.split_seed)?;
    let (ensemble, members) = trainer::train_ensemble(&data, &cfg.arch, &cfg.train)?;
    let mut m = Manifest::new("train");
    m.input(&args.config)?;
    m.input(&args.data)?;
    m.config(&cfg);
    m.outputs = save_model(&args.out, &ensemble, prep)?;
    for member in &members {
        let name = format!("member_{}.log.jsonl", member.params.seed);
        write_json_lines(&args.out.join(&name), &member.log)?;
        m.outputs.push(name);
        m.seeds
            .insert(format!("member_{}", member.params.seed), member.params.seed);
    }
    m.seeds.insert("train".into(), cfg.train.seed);
    m.seeds.insert("split".into(), cfg.experiment.split_seed);
    write_manifest(&args.out.join("manifest.json"), &m)?;
    Ok(())
}

/// A loaded model with its reference library built.
struct Matcher {
    ensemble: Ensemble,
    prep: Preprocessing,
    lib: ReferenceLibrary,
    manifest: Manifest,
}

impl Matcher {
    fn open(command: &str, model: &Path, library: &Path) -> CliResult<Self> {
        let (ensemble, prep) = load_model_cli(model)?;
        let lib = ReferenceLibrary::build(prep.apply_all(&load_data(library)?)?, &ensemble)?;
        let mut manifest = Manifest::new(command);
        manifest
            .inputs
            .insert(model.display().to_string(), ensemble.fingerprint());
        manifest.input(library)?;
        Ok(Matcher {
            ensemble,
            prep,
            lib,
            manifest,
        })
    }

    fn score(&mut self, queries: &Path) -> CliResult<(Vec<ResampledSpectrum>, Vec<MatchResult>)> {
        let q = self.prep.apply_all(&load_data(queries)?)?;
        let results = matcher::score_queries(&q, &self.lib, &self.ensemble)?;
        self.manifest.input(queries)?;
        Ok((q, results))
    }
}

fn match_cmd(args: &MatchArgs) -> CliResult<()> {
    if args.voting_m == 0 {
        return Err(CliError::Usage("--voting-m must be at least 1".into()));
    }
    let mut mt = Matcher::open("match", &args.model, &args.library)?;
    let (_, results) = mt.score(&args.queries)?;
    let voting = VotingConfig { m: args.voting_m };
    let records: Vec<MatchRecord> = results
        .iter()
        .map(|r| {
            let mut rec = MatchRecord::from(r);
            rec.predicted = classify(r, voting, None);
            rec
        })
        .collect();
    write_json_lines(&args.out, &records)?;
    mt.manifest.outputs.push(args.out.display().to_string());
    write_manifest(&sidecar_manifest(&args.out), &mt.manifest)?;
    Ok(())
}

fn labelled(results: Vec<MatchResult>, spectra: &[ResampledSpectrum]) -> Vec<(MatchResult, String)> {
    results
        .into_iter()
        .zip(spectra)
        .map(|(r, s)| (r, s.class_label().to_string()))
        .collect()
}

fn calibrate(args: &CalibrateArgs) -> CliResult<()> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Usage(format!("--alpha {} outside (0, 1)", args.alpha)));
    }
    let mut mt = Matcher::open("calibrate", &args.model, &args.library)?;
    let (val, results) = mt.score(&args.validation)?;
    let cal = conformal::calibrate(&labelled(results, &val), args.alpha)?;
    write_atomic(
        &args.out,
        (serde_json::to_string_pretty(&cal.summary()).map_err(Error::from)? + "\n").as_bytes(),
    )?;
    mt.manifest.outputs.push(args.out.display().to_string());
    write_manifest(&sidecar_manifest(&args.out), &mt.manifest)?;
    Ok(())
}

fn curve(args: &CurveArgs) -> CliResult<()> {
    if let Some(a) = args.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(CliError::Usage(format!("alpha {a} outside (0, 1)")));
    }
    let mut mt = Matcher::open("curve", &args.model, &args.library)?;
    let (cal_q, cal_results) = mt.score(&args.calibration)?;
    let (test_q, test_results) = mt.score(&args.test)?;
    let cal = labelled(cal_results, &cal_q);
    let test = labelled(test_results, &test_q);
    let rows = harness::coverage_size_curve(&cal, &test, &args.alphas)?;
    write_json_lines(&args.out, &rows)?;
    mt.manifest.outputs.push(args.out.display().to_string());
    // prediction sets at the first alpha, for inspecting individual queries
    if let Some(&alpha) = args.alphas.first() {
        let c = conformal::calibrate(&cal, alpha)?;
        let sets: Vec<_> = test.iter().map(|(r, _)| predict_set(r, &c)).collect();
        let mut sets_path = args.out.clone().into_os_string();
        sets_path.push(".sets.jsonl");
        write_json_lines(Path::new(&sets_path), &sets)?;
        mt.manifest.outputs.push(PathBuf::from(sets_path).display().to_string());
    }
    write_manifest(&sidecar_manifest(&args.out), &mt.manifest)?;
    Ok(())
}

/// Manifest-driven inputs of `evaluate`.
fn evaluate_inputs(args: &EvaluateArgs) -> CliResult<(ExperimentConfig, PathBuf)> {
    if let Some(mp) = &args.manifest {
        let text = read_text(mp, "manifest")?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", mp.display())))?;
        let cfg_text = m
            .config_toml
            .ok_or_else(|| CliError::Usage(format!("{}: manifest has no config", mp.display())))?;
        let cfg =
            ExperimentConfig::from_toml(&cfg_text).map_err(|e| CliError::Usage(format!("{}: {e}", mp.display())))?;
        let data = m
            .data
            .clone()
            .ok_or_else(|| CliError::Usage(format!("{}: manifest names no data file", mp.display())))?;
        let mut check = Manifest::new("");
        check.input(Path::new(&data))?;
        if check.inputs.get(&data) != m.inputs.get(&data) {
            return Err(CliError::Usage(format!(
                "{data} changed since {} was written",
                mp.display()
            )));
        }
        return Ok((cfg, PathBuf::from(data)));
    }
    let config = args.config.as_ref().expect("clap requires --config");
    let mut cfg = load_config(config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.experiment.split_seed = seed;
    }
    Ok((cfg, args.data.clone().expect("clap requires --data")))
}

fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let (cfg, data_path) = evaluate_inputs(args)?;
    let data = load_data(&data_path)?;
    let report = harness::run_experiment(&cfg, &data)?;
    let out = &args.out;
    write_atomic(&out.join("report.md"), report.to_text().as_bytes())?;
    write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
    write_json_lines(&out.join("summary.jsonl"), &report.summary_records())?;
    let curve_rows: Vec<serde_json::Value> = report
        .splits
        .iter()
        .flat_map(|s| {
            s.curve
                .iter()
                .map(move |r| serde_json::json!({ "split_seed": s.seed, "row": r }))
        })
        .collect();
    write_json_lines(&out.join("curve.jsonl"), &curve_rows)?;
    let mut m = Manifest::new("evaluate");
    m.input(&data_path)?;
    m.data = Some(data_path.display().to_string());
    m.config(&cfg);
    m.seeds.insert("train".into(), cfg.train.seed);
    m.seeds.insert("split".into(), cfg.experiment.split_seed);
    m.outputs = ["report.md", "report.json", "summary.jsonl", "curve.jsonl"]
        .map(String::from)
        .to_vec();
    write_manifest(&out.join("manifest.json"), &m)?;
    Ok(())
}

fn report(args: &ReportArgs) -> CliResult<()> {
    let text = read_text(&args.input, "report")?;
    let rep: ExperimentReport =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", args.input.display())))?;
    write_atomic(&args.out, rep.to_text().as_bytes())?;
    Ok(())
}

fn thread_cap(flag: Option<usize>) -> CliResult<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

/// Run an already parsed command line.
pub fn execute(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_cap(cli.threads)? {
        if n == 0 {
            return Err(CliError::Usage("thread cap must be at least 1".into()));
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Match(a) => match_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Curve(a) => curve(a),
        Command::Report(a) => report(a),
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["specmatch", "frobnicate"]), 1);
        assert_eq!(run(["specmatch", "synth", "--out", "x.csv", "--bogus"]), 1);
        assert_eq!(run(["specmatch", "--help"]), 0);
    }

    #[test]
    fn missing_config_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.toml");
        let err = load_config(&missing).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("nope.toml"));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
