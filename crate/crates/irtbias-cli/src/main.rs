//! `irtbias`: two-stage IRT bias analysis from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence
//! under `--strict`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use irtbias::bank::ItemBank;
use irtbias::calibrate::{
    calibrate_binary, calibrate_ordinal, CalibrationConfig, CalibrationInput, CalibrationResult,
};
use irtbias::mapper::{batch_map, MapperConfig, MapperMode, RawCompletion};
use irtbias::model::ModelKind;
use irtbias::pipeline::{
    item_report, run_two_stage_matrix, sha256_hex, theta_histogram, write_dif_csv,
    write_histogram_csv, write_item_report_csv, write_scores_csv, BiasReport,
    DEFAULT_SENSITIVITY_THRESHOLD,
};
use irtbias::responses::{
    parse_response_csv, parse_response_jsonl, GroupBy, ResponseMatrix, ResponseRecord,
};
use irtbias::score::{dif_test, score_matrix, ScoringMethod};
use irtbias::simulate::{recovery_report, simulate, SimSpec};

#[derive(Parser)]
#[command(
    name = "irtbias",
    version,
    about = "Two-stage IRT analysis of survey-style LLM responses",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for calibration and scoring [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// On a data error, also print a machine-readable error object to stdout
    #[arg(long, global = true)]
    errors_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled 105-item bank as JSON
    ExportBank(ExportBankArgs),
    /// Map raw completion text to response categories
    Map(MapArgs),
    /// Validate a response file and summarize its matrix
    IngestCheck(IngestCheckArgs),
    /// Report avoidance rates by group or respondent
    PnaRates(PnaRatesArgs),
    /// Fit one stage and write the calibration as JSON
    Calibrate(CalibrateArgs),
    /// Score respondents against a saved calibration
    Score(ScoreArgs),
    /// Run the full two-stage pipeline and write a bias report
    Run(RunArgs),
    /// Generate a synthetic response matrix from a simulation spec
    Simulate(SimulateArgs),
    /// Simulate, refit, and report parameter recovery
    Recover(RecoverArgs),
    /// Likelihood-ratio differential item functioning test for one item
    Dif(DifArgs),
}

/// Source for calibration defaults echoed in `--help` (kept in sync with the
/// library by construction).
fn defaults() -> CalibrationConfig {
    CalibrationConfig::new(ModelKind::TwoPl)
}

/// Flags mirroring [`CalibrationConfig`]; every default comes from the
/// library's constructor.
#[derive(Args)]
struct ConfigArgs {
    /// Quadrature nodes over the latent scale (odd)
    #[arg(long, default_value_t = defaults().n_quadpoints)]
    quadpoints: usize,

    /// Half-width of the latent scale
    #[arg(long, default_value_t = defaults().bound)]
    bound: f64,

    /// Maximum EM cycles
    #[arg(long, default_value_t = defaults().max_em_cycles)]
    max_cycles: usize,

    /// Stop when no parameter moves more than this between cycles
    #[arg(long, default_value_t = defaults().param_tol)]
    param_tol: f64,

    /// Stop when the marginal log-likelihood gain falls below this
    #[arg(long, default_value_t = defaults().loglik_tol)]
    loglik_tol: f64,

    /// Lower clamp on fitted discriminations
    #[arg(long, default_value_t = defaults().alpha_min)]
    alpha_min: f64,
}

impl ConfigArgs {
    fn to_config(&self, model: ModelKind, seed: u64) -> CliResult<CalibrationConfig> {
        let cfg = CalibrationConfig {
            model,
            n_quadpoints: self.quadpoints,
            bound: self.bound,
            max_em_cycles: self.max_cycles,
            param_tol: self.param_tol,
            loglik_tol: self.loglik_tol,
            alpha_min: self.alpha_min,
            allow_negative_discrimination: false,
            seed,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ExportBankArgs {
    /// Destination file [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MapArgs {
    /// Raw completions, CSV (`respondent_id,group,item_id,raw_text`) or JSONL
    #[arg(long)]
    input: PathBuf,

    /// Classifier mode
    #[arg(long, value_parser = ["fallback", "external"], default_value = "fallback")]
    mode: String,

    /// Classifier endpoint URL (external mode)
    #[arg(long)]
    endpoint: Option<String>,

    /// Per-request timeout in seconds
    #[arg(long, default_value_t = MapperConfig::default().timeout.as_secs())]
    timeout_secs: u64,

    /// Extra attempts after a transport failure
    #[arg(long, default_value_t = MapperConfig::default().max_retries)]
    max_retries: u32,

    /// Prompt template; `{response}` is replaced by the raw text
    #[arg(long)]
    prompt_template: Option<String>,

    /// Destination records CSV [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestCheckArgs {
    /// Response file, CSV or JSONL
    #[arg(long)]
    responses: PathBuf,

    /// Item bank: `builtin` or a path to a bank JSON file
    #[arg(long, default_value = "builtin")]
    bank: String,

    /// Destination summary JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PnaRatesArgs {
    /// Response file, CSV or JSONL
    #[arg(long)]
    responses: PathBuf,

    /// Item bank: `builtin` or a path to a bank JSON file
    #[arg(long, default_value = "builtin")]
    bank: String,

    /// Aggregation key
    #[arg(long, value_parser = ["group", "respondent"], default_value = "group")]
    by: String,

    /// Destination CSV [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Response file, CSV or JSONL
    #[arg(long)]
    responses: PathBuf,

    /// Item bank: `builtin` or a path to a bank JSON file
    #[arg(long, default_value = "builtin")]
    bank: String,

    /// Stage model: `2pl` fits avoidance, `gpcm` fits direction
    #[arg(long, value_parser = ["2pl", "gpcm"])]
    model: String,

    #[command(flatten)]
    config: ConfigArgs,

    /// Seed recorded in provenance and used for tie-breaking
    #[arg(long, default_value_t = defaults().seed)]
    seed: u64,

    /// Exit 3 when the fit does not converge
    #[arg(long)]
    strict: bool,

    /// Destination calibration JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Calibration JSON produced by `calibrate` or extracted from a report
    #[arg(long)]
    calibration: PathBuf,

    /// Response file, CSV or JSONL
    #[arg(long)]
    responses: PathBuf,

    /// Item bank: `builtin` or a path to a bank JSON file
    #[arg(long, default_value = "builtin")]
    bank: String,

    /// Estimator
    #[arg(long, value_parser = ["eap", "mle"], default_value = "eap")]
    method: String,

    /// Destination scores CSV [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Response file, CSV or JSONL
    #[arg(long)]
    responses: PathBuf,

    /// Item bank: `builtin` or a path to a bank JSON file
    #[arg(long, default_value = "builtin")]
    bank: String,

    /// Group whose mean anchors the deviation table
    #[arg(long)]
    reference: Option<String>,

    #[command(flatten)]
    config: ConfigArgs,

    /// Seed recorded in provenance and used for tie-breaking
    #[arg(long, default_value_t = defaults().seed)]
    seed: u64,

    /// Exit 3 when a fitted stage does not converge
    #[arg(long)]
    strict: bool,

    /// Destination report JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also write a flat per-respondent scores CSV
    #[arg(long)]
    scores_csv: Option<PathBuf>,

    /// Also write the ranked item table for the directional stage
    #[arg(long)]
    items_csv: Option<PathBuf>,

    /// |location| above this marks an item as sensitive in the item table
    #[arg(long, default_value_t = DEFAULT_SENSITIVITY_THRESHOLD)]
    sensitivity_threshold: f64,

    /// Also write per-group theta histograms for the directional stage
    #[arg(long)]
    hist_csv: Option<PathBuf>,

    /// Histogram bin width on the theta scale
    #[arg(long, default_value_t = 0.5)]
    hist_bin_width: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec JSON
    #[arg(long)]
    spec: PathBuf,

    /// Override the seed in the spec
    #[arg(long)]
    seed: Option<u64>,

    /// Destination response CSV
    #[arg(long)]
    out: PathBuf,

    /// Also write the generating parameters and traits as JSON
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct RecoverArgs {
    /// Simulation spec JSON
    #[arg(long)]
    spec: PathBuf,

    /// Override the seed in the spec
    #[arg(long)]
    seed: Option<u64>,

    #[command(flatten)]
    config: ConfigArgs,

    /// Destination recovery report JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DifArgs {
    /// Response file, CSV or JSONL
    #[arg(long)]
    responses: PathBuf,

    /// Item bank: `builtin` or a path to a bank JSON file
    #[arg(long, default_value = "builtin")]
    bank: String,

    /// Stage model providing the tested view
    #[arg(long, value_parser = ["2pl", "gpcm"], default_value = "2pl")]
    model: String,

    /// Item id to test
    #[arg(long)]
    item: u32,

    #[command(flatten)]
    config: ConfigArgs,

    /// Seed recorded in provenance and used for tie-breaking
    #[arg(long, default_value_t = defaults().seed)]
    seed: u64,

    /// Destination DIF JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also write a one-row CSV (`item_id,lr,df,p`)
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(irtbias::Error),
    NotConverged(String),
}

type CliResult<T> = Result<T, CliError>;

impl From<irtbias::Error> for CliError {
    fn from(e: irtbias::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(irtbias::Error::Io(e))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let errors_json = cli.errors_json;
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        // Ignore failure: the pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            if errors_json {
                let payload = serde_json::json!({
                    "error": { "kind": e.kind(), "message": e.to_string() }
                });
                println!("{payload}");
            }
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::NotConverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::ExportBank(args) => cmd_export_bank(args),
        Command::Map(args) => cmd_map(args),
        Command::IngestCheck(args) => cmd_ingest_check(args),
        Command::PnaRates(args) => cmd_pna_rates(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Score(args) => cmd_score(args),
        Command::Run(args) => cmd_run(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Recover(args) => cmd_recover(args),
        Command::Dif(args) => cmd_dif(args),
    }
}

// ------------------------------------------------------------------ plumbing

/// Write through a temp file in the destination directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| CliError::from(e.error))?;
    Ok(())
}

/// Write to `--out` atomically, or to stdout when absent.
fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(path) => write_atomic(path, bytes),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

/// Read a file, echoing its digest to stderr.
fn read_input(path: &Path) -> CliResult<(Vec<u8>, String)> {
    let bytes = std::fs::read(path)?;
    let digest = sha256_hex(&bytes);
    eprintln!("input {}: sha256 {digest}", path.display());
    Ok((bytes, digest))
}

fn echo_config(cfg: &CalibrationConfig) {
    eprintln!(
        "config: {}",
        serde_json::to_string(cfg).expect("config serializes")
    );
}

fn load_bank(spec: &str) -> CliResult<Arc<ItemBank>> {
    if spec == "builtin" {
        return Ok(Arc::new(ItemBank::builtin()));
    }
    let (bytes, _) = read_input(Path::new(spec))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| CliError::Data(irtbias::Error::Parse(format!("bank file: {e}"))))?;
    Ok(Arc::new(ItemBank::from_json(&text)?))
}

/// Parse records from bytes, dispatching on the file extension.
fn parse_records(path: &Path, bytes: &[u8]) -> CliResult<Vec<ResponseRecord>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let records = if matches!(ext, "jsonl" | "ndjson") {
        parse_response_jsonl(bytes)?
    } else {
        parse_response_csv(bytes)?
    };
    Ok(records)
}

fn load_matrix(path: &Path, bank: Arc<ItemBank>) -> CliResult<(ResponseMatrix, String)> {
    let (bytes, digest) = read_input(path)?;
    let records = parse_records(path, &bytes)?;
    let matrix = ResponseMatrix::from_records(records, bank)?;
    Ok((matrix, digest))
}

fn model_kind(name: &str) -> ModelKind {
    match name {
        "gpcm" => ModelKind::Gpcm,
        _ => ModelKind::TwoPl,
    }
}

/// Fit the stage view matching the configured model.
fn fit_stage(matrix: &ResponseMatrix, cfg: &CalibrationConfig) -> CliResult<CalibrationResult> {
    let fit = match cfg.model {
        ModelKind::TwoPl => calibrate_binary(&matrix.binarize_pna(), cfg)?,
        ModelKind::Gpcm => calibrate_ordinal(&matrix.filter_answered(), cfg)?,
    };
    eprintln!(
        "fit: model {:?}, {} item(s), {} cycle(s), loglik {:.6}, converged {}",
        fit.model,
        fit.items.len(),
        fit.em_cycles,
        fit.marginal_loglik,
        fit.converged
    );
    Ok(fit)
}

// ------------------------------------------------------------------ commands

fn cmd_export_bank(args: ExportBankArgs) -> CliResult<()> {
    let bank = ItemBank::builtin();
    emit(args.out.as_deref(), bank.to_json().as_bytes())
}

fn cmd_map(args: MapArgs) -> CliResult<()> {
    let (bytes, _) = read_input(&args.input)?;
    let ext = args
        .input
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("");
    let rows: Vec<RawCompletion> = if matches!(ext, "jsonl" | "ndjson") {
        String::from_utf8_lossy(&bytes)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| irtbias::Error::Parse(format!("completions jsonl: {e}")))
            })
            .collect::<Result<_, _>>()?
    } else {
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        rdr.deserialize()
            .map(|r| r.map_err(|e| irtbias::Error::Parse(format!("completions csv: {e}"))))
            .collect::<Result<_, _>>()?
    };

    let mut cfg = MapperConfig {
        mode: if args.mode == "external" {
            MapperMode::External
        } else {
            MapperMode::Fallback
        },
        endpoint: args.endpoint.clone(),
        timeout: std::time::Duration::from_secs(args.timeout_secs),
        max_retries: args.max_retries,
        ..MapperConfig::default()
    };
    if let Some(template) = args.prompt_template {
        cfg.prompt_template = template;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let outcome = batch_map(&rows, &cfg)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["respondent_id", "group", "item_id", "category"])
            .map_err(|e| irtbias::Error::Parse(format!("records csv: {e}")))?;
        for rec in &outcome.records {
            w.write_record([
                rec.respondent_id.as_str(),
                rec.group.as_str(),
                &rec.item_id.to_string(),
                rec.category.label(),
            ])
            .map_err(|e| irtbias::Error::Parse(format!("records csv: {e}")))?;
        }
        w.flush()?;
    }
    emit(args.out.as_deref(), &buf)?;
    eprintln!(
        "mapped {} of {} row(s)",
        outcome.records.len(),
        outcome.records.len() + outcome.errors.len()
    );
    if !outcome.errors.is_empty() {
        for err in &outcome.errors {
            eprintln!(
                "row {} (respondent {}, item {}): {}",
                err.index, err.respondent_id, err.item_id, err.message
            );
        }
        return Err(CliError::Data(irtbias::Error::Parse(format!(
            "{} of {} rows failed to map",
            outcome.errors.len(),
            outcome.records.len() + outcome.errors.len()
        ))));
    }
    Ok(())
}

fn cmd_ingest_check(args: IngestCheckArgs) -> CliResult<()> {
    let bank = load_bank(&args.bank)?;
    let (matrix, digest) = load_matrix(&args.responses, bank.clone())?;

    let mut groups = std::collections::BTreeMap::<&str, usize>::new();
    for r in matrix.respondents() {
        *groups.entry(r.group.as_str()).or_default() += 1;
    }
    let (mut answered, mut pna, mut missing) = (0usize, 0usize, 0usize);
    for row in 0..matrix.n_respondents() {
        for item in bank.items() {
            match matrix.cell(row, item.id) {
                irtbias::bank::ResponseCategory::Missing => missing += 1,
                irtbias::bank::ResponseCategory::Pna => pna += 1,
                _ => answered += 1,
            }
        }
    }
    let summary = serde_json::json!({
        "input_sha256": digest,
        "bank_version": bank.version(),
        "n_respondents": matrix.n_respondents(),
        "n_items": bank.len(),
        "groups": groups,
        "cells": { "answered": answered, "pna": pna, "missing": missing },
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    emit(args.out.as_deref(), text.as_bytes())
}

fn cmd_pna_rates(args: PnaRatesArgs) -> CliResult<()> {
    let bank = load_bank(&args.bank)?;
    let (matrix, _) = load_matrix(&args.responses, bank)?;
    let by = if args.by == "respondent" {
        GroupBy::Respondent
    } else {
        GroupBy::Group
    };
    let rates = matrix.pna_rates(by)?;
    let mut buf = String::from("key,pna_rate_percent\n");
    for (key, rate) in rates {
        buf.push_str(&format!("{key},{:.2}\n", rate * 100.0));
    }
    emit(args.out.as_deref(), buf.as_bytes())
}

fn cmd_calibrate(args: CalibrateArgs) -> CliResult<()> {
    let cfg = args.config.to_config(model_kind(&args.model), args.seed)?;
    echo_config(&cfg);
    let bank = load_bank(&args.bank)?;
    let (matrix, _) = load_matrix(&args.responses, bank)?;
    let fit = fit_stage(&matrix, &cfg)?;
    emit(args.out.as_deref(), fit.to_json().as_bytes())?;
    if args.strict && !fit.converged {
        return Err(CliError::NotConverged(format!(
            "EM stopped after {} cycle(s) without converging",
            fit.em_cycles
        )));
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> CliResult<()> {
    let (calib_bytes, _) = read_input(&args.calibration)?;
    let text = String::from_utf8(calib_bytes)
        .map_err(|e| CliError::Data(irtbias::Error::Parse(format!("calibration file: {e}"))))?;
    let result = CalibrationResult::from_json(&text)?;
    let bank = load_bank(&args.bank)?;
    let (matrix, _) = load_matrix(&args.responses, bank)?;
    let method = if args.method == "mle" {
        ScoringMethod::Mle
    } else {
        ScoringMethod::Eap
    };

    let binary;
    let ordinal;
    let input = match result.model {
        ModelKind::TwoPl => {
            binary = matrix.binarize_pna();
            CalibrationInput::Binary(&binary)
        }
        ModelKind::Gpcm => {
            ordinal = matrix.filter_answered();
            CalibrationInput::Ordinal(&ordinal)
        }
    };
    let scores = score_matrix(&result, input, method)?;

    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "respondent_id",
            "group",
            "theta",
            "se",
            "method",
            "at_bound",
            "n_informative",
            "scale_id",
        ])
        .map_err(|e| irtbias::Error::Parse(format!("scores csv: {e}")))?;
        for (est, resp) in scores.iter().zip(matrix.respondents()) {
            w.write_record([
                est.respondent_id.as_str(),
                resp.group.as_str(),
                &est.theta.to_string(),
                &est.se.to_string(),
                &est.method.to_string(),
                &est.at_bound.to_string(),
                &est.n_informative.to_string(),
                est.scale_id.as_str(),
            ])
            .map_err(|e| irtbias::Error::Parse(format!("scores csv: {e}")))?;
        }
        w.flush()?;
    }
    emit(args.out.as_deref(), &buf)
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let cfg = args.config.to_config(ModelKind::TwoPl, args.seed)?;
    echo_config(&cfg);
    let bank = load_bank(&args.bank)?;
    let (matrix, digest) = load_matrix(&args.responses, bank)?;
    let report = run_two_stage_matrix(&matrix, &cfg, args.reference.as_deref(), &digest)?;

    emit(args.out.as_deref(), report.to_json().as_bytes())?;
    if let Some(path) = &args.scores_csv {
        let mut buf = Vec::new();
        write_scores_csv(&report, &mut buf)?;
        write_atomic(path, &buf)?;
    }
    if let Some(path) = &args.items_csv {
        let section = directional_section(&report)?;
        let rows = item_report(&section.calibration, args.sensitivity_threshold);
        let mut buf = Vec::new();
        write_item_report_csv(&rows, &mut buf)?;
        write_atomic(path, &buf)?;
    }
    if let Some(path) = &args.hist_csv {
        if !(args.hist_bin_width.is_finite() && args.hist_bin_width > 0.0) {
            return Err(CliError::Usage(
                "--hist-bin-width must be positive".to_string(),
            ));
        }
        let section = directional_section(&report)?;
        let rows = theta_histogram(section, cfg.bound, args.hist_bin_width);
        let mut buf = Vec::new();
        write_histogram_csv(&rows, &mut buf)?;
        write_atomic(path, &buf)?;
    }

    for (label, section) in [("stage 1", &report.stage1), ("stage 2", &report.stage2)] {
        match section {
            Some(s) => eprintln!(
                "{label}: {} item(s), converged {}",
                s.calibration.items.len(),
                s.calibration.converged
            ),
            None => eprintln!("{label}: skipped"),
        }
    }
    if args.strict {
        let unconverged: Vec<&str> = [("stage 1", &report.stage1), ("stage 2", &report.stage2)]
            .into_iter()
            .filter_map(|(label, s)| {
                s.as_ref()
                    .filter(|s| !s.calibration.converged)
                    .map(|_| label)
            })
            .collect();
        if !unconverged.is_empty() {
            return Err(CliError::NotConverged(format!(
                "{} did not converge",
                unconverged.join(" and ")
            )));
        }
    }
    Ok(())
}

/// The stage backing item/histogram exports: directional when fitted,
/// otherwise the avoidance stage.
fn directional_section(report: &BiasReport) -> CliResult<&irtbias::pipeline::StageSection> {
    report
        .stage2
        .as_ref()
        .or(report.stage1.as_ref())
        .ok_or_else(|| {
            CliError::Data(irtbias::Error::InsufficientData(
                "no stage was fitted; nothing to export".to_string(),
            ))
        })
}

fn load_spec(path: &Path, seed_override: Option<u64>) -> CliResult<SimSpec> {
    let (bytes, _) = read_input(path)?;
    let mut spec: SimSpec = serde_json::from_str(
        std::str::from_utf8(&bytes)
            .map_err(|e| CliError::Data(irtbias::Error::Parse(format!("spec file: {e}"))))?,
    )
    .map_err(|e| CliError::Data(irtbias::Error::Parse(format!("spec file: {e}"))))?;
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    Ok(spec)
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let spec = load_spec(&args.spec, args.seed)?;
    let (matrix, truth) = simulate(&spec)?;

    let mut buf = Vec::new();
    matrix.write_csv(&mut buf)?;
    write_atomic(&args.out, &buf)?;
    eprintln!(
        "simulated {} respondent(s) x {} item(s), seed {}",
        matrix.n_respondents(),
        matrix.n_items(),
        spec.seed
    );
    if let Some(path) = &args.truth {
        let mut text = serde_json::to_string_pretty(&truth).expect("truth serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_recover(args: RecoverArgs) -> CliResult<()> {
    let spec = load_spec(&args.spec, args.seed)?;
    // One seed flag governs the whole run: the fit provenance carries the
    // (possibly overridden) simulation seed.
    let cfg = args.config.to_config(ModelKind::TwoPl, spec.seed)?;
    echo_config(&cfg);
    let report = recovery_report(&spec, &cfg)?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    emit(args.out.as_deref(), text.as_bytes())
}

fn cmd_dif(args: DifArgs) -> CliResult<()> {
    let cfg = args.config.to_config(model_kind(&args.model), args.seed)?;
    echo_config(&cfg);
    let bank = load_bank(&args.bank)?;
    let (matrix, _) = load_matrix(&args.responses, bank)?;

    let binary;
    let ordinal;
    let input = match cfg.model {
        ModelKind::TwoPl => {
            binary = matrix.binarize_pna();
            CalibrationInput::Binary(&binary)
        }
        ModelKind::Gpcm => {
            ordinal = matrix.filter_answered();
            CalibrationInput::Ordinal(&ordinal)
        }
    };
    let report = dif_test(input, args.item, &cfg)?;

    let group_params: serde_json::Map<String, serde_json::Value> = report
        .group_params
        .iter()
        .map(|(group, params)| {
            (
                group.clone(),
                serde_json::json!({
                    "alpha": params.alpha(),
                    "location": params.location(),
                    "parameters": params.to_vec(),
                }),
            )
        })
        .collect();
    let payload = serde_json::json!({
        "item_id": report.item_id,
        "lr_statistic": report.lr_statistic,
        "df": report.df,
        "p_value": report.p_value,
        "group_params": group_params,
    });
    let mut text = serde_json::to_string_pretty(&payload).expect("dif serializes");
    text.push('\n');
    emit(args.out.as_deref(), text.as_bytes())?;
    if let Some(path) = &args.csv {
        let mut buf = Vec::new();
        write_dif_csv(std::slice::from_ref(&report), &mut buf)?;
        write_atomic(path, &buf)?;
    }
    Ok(())
}
