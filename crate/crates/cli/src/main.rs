//! Command-line entry point for the full pipeline: synthetic cohorts,
//! augmentation export, pretraining, embedding extraction, the SVM probe,
//! classifier ensembles, attention heatmaps, and gradient checking.
//!
//! Exit codes: 0 success, 1 validation/parameter error, 2 I/O or format
//! error, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fcssl::connectome::{make_drop_plan, pfc_augment, DEFAULT_DROP_RATE};
use fcssl::encoder::{attention_heatmap, EncoderConfig, EncoderError, LayerSel};
use fcssl::ingest::{self, Split};
use fcssl::mat::{derive_seed, fnv1a};
use fcssl::numerics::NumericsError;
use fcssl::probe::{self, EmbeddingRecord, ProbeError};
use fcssl::ssl::{objective_grad_check, SslError, StepConfig};
use fcssl::synth::{self, ScanFormat, SynthError, SynthSpec};
use fcssl::trainer::{self, RunConfig, TrainError};

const EXIT_VALIDATION: i32 = 1;
const EXIT_IO: i32 = 2;
const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "fcssl",
    version,
    about = "Self-supervised pretraining and linear probing for functional brain networks",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic BOLD cohort with planted community structure
    Synth(SynthArgs),
    /// Export pseudo-connectivity augmentations of one scan as CSV matrices
    Augment(AugmentArgs),
    /// Self-supervised pretraining over a cohort manifest
    Pretrain(PretrainArgs),
    /// Extract frozen-encoder embeddings for every scan in a manifest
    Embed(EmbedArgs),
    /// Linear SVM probe with repeated val/test resampling
    Probe(ProbeArgs),
    /// Combine per-disease classifiers for zero/few-shot inference
    Ensemble(EnsembleArgs),
    /// Export an attention heatmap averaged over a cohort
    Attn(AttnArgs),
    /// Check analytic gradients of the training objective by central differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of subjects
    #[arg(long, default_value_t = 40)]
    subjects: usize,
    /// ROIs per scan (V)
    #[arg(long, default_value_t = 16)]
    rois: usize,
    /// Timepoints per scan (T)
    #[arg(long, default_value_t = 200)]
    timepoints: usize,
    /// Number of diagnostic classes (class 0 is the control group)
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Additive perturbation of the patient block correlations
    #[arg(long, default_value_t = 0.2)]
    effect: f64,
    /// Isotropic observation noise sigma
    #[arg(long, default_value_t = 0.5)]
    noise_sigma: f64,
    /// Scan file format: csv or bts
    #[arg(long, default_value = "bts")]
    format: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (manifest.tsv + scans/)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    /// Scan file (headerless CSV or .bts)
    #[arg(long)]
    scan: PathBuf,
    /// Fraction of timepoints to drop per view
    #[arg(long, default_value_t = DEFAULT_DROP_RATE)]
    drop_rate: f64,
    /// Number of augmentation views
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (pfc_view<i>.csv)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Cohort manifest TSV
    #[arg(long)]
    manifest: PathBuf,
    /// Run config JSON ({"encoder": {...}, "train": {...}})
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (checkpoint.ckpt + loss_curve.csv)
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated loss terms to disable: latent, mrm_cls, mrm_rec
    #[arg(long)]
    ablate: Option<String>,
    /// Force deterministic execution (the default; kept for scripting)
    #[arg(long, default_value_t = false)]
    deterministic: bool,
}

#[derive(Args)]
struct EmbedArgs {
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Cohort manifest TSV
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (embeddings.csv)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Embeddings CSV produced by `embed`
    #[arg(long)]
    embeddings: PathBuf,
    /// Number of resampled val/test repeats
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (metrics.json + svm.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Directory of SVM classifier JSON files
    #[arg(long)]
    classifiers: PathBuf,
    /// Embeddings CSV of the held-out cohort
    #[arg(long)]
    embeddings: PathBuf,
    /// zero | few
    #[arg(long, default_value = "zero")]
    mode: String,
    /// Fraction of the train split used as the few-shot support set
    #[arg(long, default_value_t = 0.2)]
    support_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (ensemble_metrics.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttnArgs {
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Cohort manifest TSV
    #[arg(long)]
    manifest: PathBuf,
    /// Layer selector: first | last | mean
    #[arg(long, default_value = "mean")]
    layer: String,
    /// Output directory (heatmap.csv)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config JSON; defaults to the built-in tiny config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Floating-point width; only 64 is supported
    #[arg(long, default_value_t = 64)]
    precision: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Message plus the process exit code it maps to.
struct AppError {
    code: i32,
    message: String,
}

impl AppError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        AppError { code, message: message.into() }
    }
}

type AppResult<T> = Result<T, AppError>;

fn numerics_code(e: &NumericsError) -> i32 {
    match e {
        NumericsError::NonFinite { .. } | NumericsError::NonDeterministic => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

impl From<ingest::IngestError> for AppError {
    fn from(e: ingest::IngestError) -> Self {
        let code = match &e {
            ingest::IngestError::Io { .. } | ingest::IngestError::Format { .. } => EXIT_IO,
            ingest::IngestError::Validation { .. } => EXIT_VALIDATION,
        };
        AppError::new(code, e.to_string())
    }
}

impl From<fcssl::connectome::ConnectomeError> for AppError {
    fn from(e: fcssl::connectome::ConnectomeError) -> Self {
        AppError::new(EXIT_VALIDATION, e.to_string())
    }
}

impl From<SynthError> for AppError {
    fn from(e: SynthError) -> Self {
        AppError::new(EXIT_VALIDATION, e.to_string())
    }
}

impl From<EncoderError> for AppError {
    fn from(e: EncoderError) -> Self {
        let code = match &e {
            EncoderError::Numerics(n) => numerics_code(n),
            _ => EXIT_VALIDATION,
        };
        AppError::new(code, e.to_string())
    }
}

impl From<SslError> for AppError {
    fn from(e: SslError) -> Self {
        let code = match &e {
            SslError::CollapsedEmbedding => EXIT_NUMERIC,
            SslError::Numerics(n) => numerics_code(n),
            SslError::Encoder(EncoderError::Numerics(n)) => numerics_code(n),
            _ => EXIT_VALIDATION,
        };
        AppError::new(code, e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Io { .. } | TrainError::Corrupt { .. } | TrainError::Incompatible { .. } => {
                EXIT_IO
            }
            TrainError::NonFiniteGradient { .. } => EXIT_NUMERIC,
            TrainError::Ssl(s) => return AppError::from_ssl_ref(s, e.to_string()),
            _ => EXIT_VALIDATION,
        };
        AppError::new(code, e.to_string())
    }
}

impl AppError {
    fn from_ssl_ref(e: &SslError, message: String) -> Self {
        let code = match e {
            SslError::CollapsedEmbedding => EXIT_NUMERIC,
            SslError::Numerics(n) => numerics_code(n),
            _ => EXIT_VALIDATION,
        };
        AppError::new(code, message)
    }
}

impl From<ProbeError> for AppError {
    fn from(e: ProbeError) -> Self {
        let code = match &e {
            ProbeError::Io { .. } | ProbeError::Format { .. } => EXIT_IO,
            ProbeError::Encoder(EncoderError::Numerics(n)) => numerics_code(n),
            _ => EXIT_VALIDATION,
        };
        AppError::new(code, e.to_string())
    }
}

impl From<NumericsError> for AppError {
    fn from(e: NumericsError) -> Self {
        AppError::new(numerics_code(&e), e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> AppError {
    AppError::new(EXIT_IO, format!("io error on {}: {e}", path.display()))
}

fn create_out_dir(dir: &Path) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    seed: u64,
    version: String,
    config: serde_json::Value,
    /// file name -> FNV-1a digest of its bytes
    outputs: BTreeMap<String, String>,
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    outputs: &[PathBuf],
) -> AppResult<()> {
    let mut digests = BTreeMap::new();
    for path in outputs {
        let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
        let name = path
            .strip_prefix(dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        digests.insert(name, format!("{:#018x}", fnv1a(&bytes)));
    }
    let manifest = RunManifest {
        command: command.to_string(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        outputs: digests,
    };
    let path = dir.join("run_manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| AppError::new(EXIT_IO, e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| io_error(&path, e))
}

fn load_run_config(path: &Path) -> AppResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
        AppError::new(EXIT_IO, format!("config {} is not valid: {e}", path.display()))
    })?;
    config.encoder.validate()?;
    config.train.validate()?;
    Ok(config)
}

fn cmd_synth(args: SynthArgs) -> AppResult<()> {
    let format: ScanFormat = args
        .format
        .parse()
        .map_err(|e: String| AppError::new(EXIT_VALIDATION, e))?;
    let spec = SynthSpec::standard(
        args.subjects,
        args.rois,
        args.timepoints,
        args.classes,
        args.effect,
        args.noise_sigma,
        args.seed,
    );
    let cohort = synth::gen_cohort(&spec)?;
    create_out_dir(&args.out)?;
    let manifest_path = synth::write_cohort(&cohort, &args.out, format)?;
    let mut outputs = vec![manifest_path];
    for scan in &cohort {
        let ext = if format == ScanFormat::Csv { "csv" } else { "bts" };
        outputs.push(args.out.join(format!("scans/{}.{ext}", scan.subject_id)));
    }
    let config = serde_json::json!({
        "subjects": args.subjects,
        "rois": args.rois,
        "timepoints": args.timepoints,
        "classes": args.classes,
        "effect": args.effect,
        "noise_sigma": args.noise_sigma,
        "format": args.format,
    });
    write_run_manifest(&args.out, "synth", args.seed, config, &outputs)?;
    println!("wrote {} scans and manifest under {}", cohort.len(), args.out.display());
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> AppResult<()> {
    let data = ingest::load_scan(&args.scan)?;
    let subject = args
        .scan
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scan".to_string());
    create_out_dir(&args.out)?;
    let mut outputs = Vec::new();
    for view in 0..args.views {
        let plan = make_drop_plan(
            data.cols(),
            args.drop_rate,
            derive_seed(args.seed, "augment-view", &[view as u64]),
        )?;
        let pfc = pfc_augment(&data, &subject, &plan)?;
        let path = args.out.join(format!("pfc_view{view}.csv"));
        ingest::write_scan_csv(&pfc.matrix, &path)?;
        outputs.push(path);
    }
    let config = serde_json::json!({
        "scan": args.scan.display().to_string(),
        "drop_rate": args.drop_rate,
        "views": args.views,
    });
    write_run_manifest(&args.out, "augment", args.seed, config, &outputs)?;
    println!("wrote {} pFC views under {}", args.views, args.out.display());
    Ok(())
}

fn parse_ablate(spec: &str, train: &mut trainer::TrainConfig) -> AppResult<()> {
    for term in spec.split(',').filter(|t| !t.is_empty()) {
        match term.trim() {
            "latent" => train.latent = false,
            "mrm_cls" => train.mrm_cls = false,
            "mrm_rec" => train.mrm_rec = false,
            other => {
                return Err(AppError::new(
                    EXIT_VALIDATION,
                    format!("unknown ablation term {other:?}; expected latent, mrm_cls or mrm_rec"),
                ))
            }
        }
    }
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> AppResult<()> {
    let mut config = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if args.deterministic {
        config.train.deterministic = true;
    }
    if let Some(ablate) = &args.ablate {
        parse_ablate(ablate, &mut config.train)?;
    }
    let manifest = ingest::load_manifest(&args.manifest)?;
    let cohort = ingest::load_cohort(&manifest)?;
    create_out_dir(&args.out)?;

    let outcome = trainer::pretrain::<f32>(&cohort, &config.encoder, &config.train)?;
    let ckpt_path = args.out.join("checkpoint.ckpt");
    let digest = trainer::save_checkpoint(
        &outcome.model,
        &config.encoder,
        &config.train,
        outcome.best_epoch,
        outcome.best_loss,
        &ckpt_path,
    )?;
    let curve_path = args.out.join("loss_curve.csv");
    std::fs::write(&curve_path, trainer::loss_curve_csv(&outcome.curve))
        .map_err(|e| io_error(&curve_path, e))?;
    let config_value =
        serde_json::to_value(&config).map_err(|e| AppError::new(EXIT_IO, e.to_string()))?;
    write_run_manifest(
        &args.out,
        "pretrain",
        config.train.seed,
        config_value,
        &[ckpt_path, curve_path],
    )?;
    match (&outcome.diverged_at, outcome.best_loss) {
        (Some(at), _) => {
            return Err(AppError::new(
                EXIT_NUMERIC,
                format!("training diverged at {at}; last good checkpoint saved ({digest:#018x})"),
            ))
        }
        (None, Some(loss)) => println!(
            "best epoch {} with mean loss {loss:.6}; checkpoint digest {digest:#018x}",
            outcome.best_epoch.unwrap_or(0)
        ),
        (None, None) => println!("untrained checkpoint saved; digest {digest:#018x}"),
    }
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> AppResult<()> {
    let ckpt = trainer::load_checkpoint(&args.ckpt, None)?;
    let manifest = ingest::load_manifest(&args.manifest)?;
    let cohort = ingest::load_cohort(&manifest)?;
    let records = probe::extract_embeddings(&ckpt.model, &cohort)?;
    create_out_dir(&args.out)?;
    let path = args.out.join("embeddings.csv");
    probe::write_embeddings_csv(&records, &path)?;
    let config = serde_json::json!({
        "ckpt": args.ckpt.display().to_string(),
        "encoder": ckpt.meta.encoder,
        "checkpoint_digest": format!("{:#018x}", ckpt.blob_digest),
    });
    write_run_manifest(&args.out, "embed", 0, config, &[path])?;
    println!("wrote {} embeddings of length {}", records.len(), ckpt.meta.encoder.embedding_len());
    Ok(())
}

const PROBE_FRACTIONS: (f64, f64, f64) = (0.7, 0.15, 0.15);

fn cmd_probe(args: ProbeArgs) -> AppResult<()> {
    let records = probe::load_embeddings_csv(&args.embeddings)?;
    let report = probe::repeated_eval(&records, PROBE_FRACTIONS, args.repeats, args.seed)?;
    let (svm, chosen_c) = probe::fit_probe_classifier(&records, PROBE_FRACTIONS, args.seed)?;
    create_out_dir(&args.out)?;
    let metrics_path = args.out.join("metrics.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| AppError::new(EXIT_IO, e.to_string()))?;
    std::fs::write(&metrics_path, json).map_err(|e| io_error(&metrics_path, e))?;
    let svm_path = args.out.join("svm.json");
    probe::save_svm(&svm, &svm_path)?;
    let config = serde_json::json!({
        "embeddings": args.embeddings.display().to_string(),
        "repeats": args.repeats,
        "fractions": [PROBE_FRACTIONS.0, PROBE_FRACTIONS.1, PROBE_FRACTIONS.2],
        "exported_svm_c": chosen_c,
    });
    write_run_manifest(&args.out, "probe", args.seed, config, &[metrics_path, svm_path])?;
    match report.accuracy.mean {
        Some(acc) => println!(
            "test accuracy {:.4} +/- {:.4} over {} repeats",
            acc,
            report.accuracy.std.unwrap_or(0.0),
            report.repeats
        ),
        None => println!("accuracy undefined over {} repeats", report.repeats),
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct EnsembleReport {
    mode: String,
    classifiers: Vec<String>,
    weights: Vec<f64>,
    support_size: Option<usize>,
    metrics: probe::MetricsReport,
}

fn cmd_ensemble(args: EnsembleArgs) -> AppResult<()> {
    if args.mode != "zero" && args.mode != "few" {
        return Err(AppError::new(
            EXIT_VALIDATION,
            format!("unknown mode {:?}; expected zero or few", args.mode),
        ));
    }
    if !(0.0 < args.support_frac && args.support_frac <= 1.0) {
        return Err(AppError::new(
            EXIT_VALIDATION,
            format!("support-frac must lie in (0, 1], got {}", args.support_frac),
        ));
    }
    let mut classifier_paths: Vec<PathBuf> = std::fs::read_dir(&args.classifiers)
        .map_err(|e| io_error(&args.classifiers, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    classifier_paths.sort();
    if classifier_paths.is_empty() {
        return Err(AppError::new(
            EXIT_VALIDATION,
            format!("no classifier JSON files in {}", args.classifiers.display()),
        ));
    }
    let classifiers: Vec<probe::SvmModel> = classifier_paths
        .iter()
        .map(|p| probe::load_svm(p))
        .collect::<Result<_, _>>()?;

    let records = probe::load_embeddings_csv(&args.embeddings)?;
    let assignment = probe::stratified_split(
        &records,
        PROBE_FRACTIONS,
        derive_seed(args.seed, "base-split", &[]),
    )?;
    let positive = records.iter().map(|r| r.label).max().unwrap();

    let (weights, support_size) = if args.mode == "few" {
        let support = select_support(&records, &assignment, args.support_frac, args.seed);
        let weights = probe::ensemble_few_shot(&classifiers, &support)?;
        (weights, Some(support.len()))
    } else {
        (vec![1.0 / classifiers.len() as f64; classifiers.len()], None)
    };

    let test: Vec<&EmbeddingRecord> = records
        .iter()
        .zip(&assignment)
        .filter(|(_, s)| **s == Split::Test)
        .map(|(r, _)| r)
        .collect();
    if test.is_empty() {
        return Err(AppError::new(EXIT_VALIDATION, "test split is empty".to_string()));
    }
    let negative = records.iter().map(|r| r.label).min().unwrap();
    let mut predictions = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for r in &test {
        let prob = probe::ensemble_predict(&classifiers, &weights, &r.vector)?;
        predictions.push(if prob >= 0.5 { positive } else { negative });
        labels.push(r.label);
    }
    let metrics = probe::metrics(&predictions, &labels, positive)?;

    create_out_dir(&args.out)?;
    let report = EnsembleReport {
        mode: args.mode.clone(),
        classifiers: classifier_paths.iter().map(|p| p.display().to_string()).collect(),
        weights,
        support_size,
        metrics,
    };
    let path = args.out.join("ensemble_metrics.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| AppError::new(EXIT_IO, e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| io_error(&path, e))?;
    let config = serde_json::json!({
        "classifiers": args.classifiers.display().to_string(),
        "embeddings": args.embeddings.display().to_string(),
        "mode": args.mode,
        "support_frac": args.support_frac,
    });
    write_run_manifest(&args.out, "ensemble", args.seed, config, &[path])?;
    println!("{} ensemble accuracy {:.4} on {} test records", report.mode, report.metrics.accuracy, test.len());
    Ok(())
}

/// Deterministic per-class support sample from the train split.
fn select_support(
    records: &[EmbeddingRecord],
    assignment: &[Split],
    frac: f64,
    seed: u64,
) -> Vec<EmbeddingRecord> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if assignment[i] == Split::Train {
            by_class.entry(r.label).or_default().push(i);
        }
    }
    let mut support = Vec::new();
    for (class_idx, (_, mut members)) in by_class.into_iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            "support",
            &[class_idx as u64],
        ));
        members.shuffle(&mut rng);
        let quota = ((frac * members.len() as f64).round() as usize).max(1).min(members.len());
        for &i in &members[..quota] {
            support.push(records[i].clone());
        }
    }
    support
}

fn cmd_attn(args: AttnArgs) -> AppResult<()> {
    let layer_sel: LayerSel = args
        .layer
        .parse()
        .map_err(|e: String| AppError::new(EXIT_VALIDATION, e))?;
    let ckpt = trainer::load_checkpoint(&args.ckpt, None)?;
    let manifest = ingest::load_manifest(&args.manifest)?;
    let cohort = ingest::load_cohort(&manifest)?;
    let mut fcs = Vec::with_capacity(cohort.len());
    for scan in &cohort {
        fcs.push(fcssl::connectome::pearson_fc(&scan.data, &scan.subject_id)?);
    }
    let heatmap = attention_heatmap(&ckpt.model.encoder, &fcs, layer_sel)?;
    create_out_dir(&args.out)?;
    let path = args.out.join("heatmap.csv");
    ingest::write_scan_csv(&heatmap, &path)?;
    let config = serde_json::json!({
        "ckpt": args.ckpt.display().to_string(),
        "layer": args.layer,
        "subjects": cohort.len(),
    });
    write_run_manifest(&args.out, "attn", 0, config, &[path])?;
    println!("wrote {}x{} heatmap for {} subjects", heatmap.rows(), heatmap.cols(), cohort.len());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> AppResult<()> {
    if args.precision != 64 {
        return Err(AppError::new(
            EXIT_VALIDATION,
            format!("only --precision 64 is supported, got {}", args.precision),
        ));
    }
    let config = match &args.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig {
            encoder: EncoderConfig::tiny(),
            train: trainer::TrainConfig::default(),
        },
    };
    let spec = SynthSpec::standard(
        4,
        config.encoder.v_rois,
        40,
        2,
        0.2,
        0.5,
        derive_seed(args.seed, "gradcheck-cohort", &[]),
    );
    let scans = synth::gen_cohort(&spec)?;
    let refs: Vec<&ingest::TimeseriesScan> = scans.iter().collect();
    let step_cfg = StepConfig {
        drop_rate: config.train.drop_rate,
        weights: config.train.weights(),
        toggles: config.train.toggles(),
        symmetric_lra: config.train.symmetric_lra,
        seed: derive_seed(args.seed, "gradcheck-step", &[]),
        epoch: 0,
        step: 0,
    };
    let report = objective_grad_check(&config.encoder, &refs, &step_cfg, args.seed, 1e-5)?;
    println!(
        "max relative error {:.3e} (worst parameter: {}, {} evaluations)",
        report.max_rel_err, report.worst_param, report.evaluations
    );
    if report.max_rel_err >= 1e-3 {
        return Err(AppError::new(
            EXIT_NUMERIC,
            format!("gradient check failed: {:.3e} >= 1e-3", report.max_rel_err),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Attn(args) => cmd_attn(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version exit 0; parse errors use the validation code
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
