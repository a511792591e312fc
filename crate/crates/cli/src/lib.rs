//! `pafa` subcommands. Every successful command ends with one `RESULT key=value ...` line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pafa_core::datamodel::{validate_manifest, Manifest, PatientId, Split};
use pafa_core::eval::{
    compare_runs, deltas_to_csv, eval_four_class, eval_two_class_from_four, export_embeddings, format_percent,
    load_predictions, load_reference_centroids, metrics_json_line, nearest_test_patients, EmbeddingSource,
    EmbeddingTable, MetricTriple,
};
use pafa_core::features::{extract_manifest, write_atomic};
use pafa_core::gradcheck::{run_gradcheck, GradcheckSettings, DEFAULT_STEP, DEFAULT_TOLERANCE};
use pafa_core::ingest::{build_manifest, generate_synthetic, write_synthetic, SplitSource, SynthConfig};
use pafa_core::losses::{LossWeights, DEFAULT_EPSILON};
use pafa_core::model::ParamSet;
use pafa_core::trainer::{
    ablation_suite, aggregate_runs, predict, train, PreparedData, Sampler, TrainConfig, Variant,
};
use pafa_core::{PafaError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable overriding the feature-cache directory.
pub const CACHE_ENV: &str = "PAFA_CACHE_DIR";

#[derive(Parser, Debug)]
#[command(name = "pafa", version, about = "Patient-aware feature alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (WAV files plus manifest.csv) with per-patient channel nuisance.
    Synth(SynthArgs),
    /// Build a manifest from an ICBHI-style directory of recordings and annotations.
    Prepare(PrepareArgs),
    /// Extract and cache log-mel filterbank features for every manifest row.
    Features(FeaturesArgs),
    /// Check the patient-loss gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one run and write its run directory.
    Train(TrainArgs),
    /// Score predictions (Sp, Se, Score).
    Eval(EvalArgs),
    /// Train the variant x seed grid, or aggregate existing run directories.
    Ablate(AblateArgs),
    /// Write per-sample embeddings from a checkpoint.
    ExportEmbeddings(ExportArgs),
    /// Rank test patients by distance to reference centroids and compare two runs on them.
    PatientAnalysis(PatientArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (receives wav/ and manifest.csv).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    patients: usize,
    /// Cycles per patient.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Scale of the per-patient gain/tilt/resonance nuisance (0 disables it).
    #[arg(long, default_value_t = 1.0)]
    nuisance: f64,
    /// Class probabilities normal,crackle,wheeze,both.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    class_mix: Option<Vec<f64>>,
    /// Dirichlet concentration of per-patient class profiles (`inf`: labels independent of patient).
    #[arg(long, default_value_t = f64::INFINITY)]
    label_concentration: f64,
    /// The bundled 64-sample fixture (16 patients x 4 cycles); overrides --patients/--samples.
    #[arg(long)]
    fixture: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Directory with `<patient>_<rec>_<loc>_<mode>_<equip>.wav/.txt` pairs.
    #[arg(long)]
    root: PathBuf,
    /// Official split file (`<recording> train|test` per line).
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Without a split file: fraction of patients assigned to train.
    #[arg(long, default_value_t = 0.6)]
    train_fraction: f64,
    /// Seed of the random patient split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path to write (default `<root>/manifest.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature cache directory (default: $PAFA_CACHE_DIR, else `<manifest dir>/cache`).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Worker threads; output bytes do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Rows per random batch.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    min_patients: usize,
    #[arg(long, default_value_t = 6)]
    max_patients: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Loss weights for the checked objective (unit weights exercise both terms equally).
    #[arg(long, default_value_t = 1.0)]
    lambda_pcsl: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_gpal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the per-trial table.
    #[arg(long)]
    verbose: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplerArg {
    Pk,
    Shuffle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Full,
    #[value(name = "ce_only")]
    CeOnly,
    #[value(name = "no_pcsl")]
    NoPcsl,
    #[value(name = "no_gpal")]
    NoGpal,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::CeOnly => Variant::CeOnly,
            VariantArg::NoPcsl => Variant::NoPcsl,
            VariantArg::NoGpal => Variant::NoGpal,
        }
    }
}

/// Training settings shared by `train` and `ablate`. Flags override `--config`.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Flat key=value file (same keys as a run's config.txt).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-scale optimizer settings instead of the desk-scale ones.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Patients per batch (pk sampler).
    #[arg(long)]
    pk_patients: Option<usize>,
    /// Samples per patient per batch (pk sampler).
    #[arg(long)]
    pk_samples: Option<usize>,
    #[arg(long)]
    lambda_pcsl: Option<f64>,
    #[arg(long)]
    lambda_gpal: Option<f64>,
    /// Encoder output width.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Projection-head output width.
    #[arg(long)]
    proj_dim: Option<usize>,
    /// Feature cache directory (default: $PAFA_CACHE_DIR, else `<manifest dir>/cache`).
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    #[value(name = "4class")]
    FourClass,
    #[value(name = "2class")]
    TwoClass,
}

impl TaskArg {
    fn name(self) -> &'static str {
        match self {
            TaskArg::FourClass => "4class",
            TaskArg::TwoClass => "2class",
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions CSV (`sample_id,patient,label,pred`).
    #[arg(long, conflicts_with_all = ["run", "checkpoint"])]
    predictions: Option<PathBuf>,
    /// Run directory; its predictions.csv is scored.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// Checkpoint to evaluate on a manifest split (needs --manifest).
    #[arg(long, requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "4class")]
    task: TaskArg,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Seed recorded in the metrics line.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append the metrics JSON line to this file.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Aggregate these existing run directories instead of training.
    #[arg(long, num_args = 1.., conflicts_with = "manifest")]
    runs: Vec<PathBuf>,
    #[arg(long, required_unless_present = "runs")]
    manifest: Option<PathBuf>,
    /// Output directory for ablation.csv, ablation_summary.csv and the run directories.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "full,ce_only,no_pcsl,no_gpal")]
    variants: Vec<VariantArg>,
    /// Runs trained concurrently; the table does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, conflicts_with = "run")]
    checkpoint: Option<PathBuf>,
    /// Run directory; its checkpoint.pafc is used.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Embedding CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Export the inference parameters (no projection head); falls back to encoder output.
    #[arg(long)]
    strip: bool,
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PatientArgs {
    /// Embedding CSV from export-embeddings (test rows are used).
    #[arg(long)]
    embeddings: PathBuf,
    /// Reference centroids CSV (`name,c0..`).
    #[arg(long)]
    references: PathBuf,
    #[arg(long, default_value_t = 6)]
    k: usize,
    /// Baseline run directory (e.g. ce_only).
    #[arg(long, requires = "run_b")]
    run_a: Option<PathBuf>,
    /// Compared run directory (e.g. full).
    #[arg(long, requires = "run_a")]
    run_b: Option<PathBuf>,
    /// CSV to write (nearest patients, or per-patient accuracy deltas when runs are given).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &PafaError) -> i32 {
    match e {
        PafaError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Features(a) => cmd_features(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::PatientAnalysis(a) => cmd_patients(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn result_line(pairs: &[(&str, String)]) {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("RESULT {}", body.join(" "));
}

fn cache_dir(flag: Option<&Path>, manifest: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => manifest_dir(manifest).join("cache"),
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn counts(c: [usize; 4]) -> String {
    c.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("/")
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let mut cfg = if a.fixture {
        SynthConfig::fixture()
    } else {
        SynthConfig {
            n_patients: a.patients,
            samples_per_patient: a.samples,
            ..SynthConfig::default()
        }
    };
    cfg.seed = a.seed;
    cfg.nuisance_strength = a.nuisance;
    cfg.label_concentration = a.label_concentration;
    if let Some(mix) = a.class_mix {
        cfg.class_mix = [mix[0], mix[1], mix[2], mix[3]];
    }
    let (manifest, samples) = generate_synthetic(&cfg)?;
    let path = write_synthetic(&a.out, &manifest, &samples)?;
    result_line(&[
        ("manifest", path.display().to_string()),
        ("samples", manifest.rows.len().to_string()),
        ("patients", cfg.n_patients.to_string()),
        ("train", manifest.split_rows(Split::Train).count().to_string()),
        ("test", manifest.split_rows(Split::Test).count().to_string()),
    ]);
    Ok(EXIT_OK)
}

fn cmd_prepare(a: PrepareArgs) -> Result<i32> {
    let source = match a.split_file {
        Some(f) => SplitSource::OfficialFile(f),
        None => SplitSource::Random {
            fraction: a.train_fraction,
            seed: a.seed,
        },
    };
    let (manifest, skips) = build_manifest(&a.root, &source)?;
    for w in &skips.warnings {
        eprintln!("warning: {w}");
    }
    for (name, why) in &skips.skipped {
        eprintln!("skipped {name}: {why}");
    }
    let report = validate_manifest(&manifest);
    for w in &report.warnings {
        eprintln!("warning: {} ({})", w.rule, w.subject);
    }
    if !report.is_valid() {
        for v in &report.violations {
            eprintln!("invalid: {} ({})", v.rule, v.subject);
        }
        return Err(PafaError::invalid("manifest failed validation"));
    }
    let out = a.out.unwrap_or_else(|| a.root.join("manifest.csv"));
    manifest.save(&out)?;
    result_line(&[
        ("manifest", out.display().to_string()),
        ("train", manifest.split_rows(Split::Train).count().to_string()),
        ("test", manifest.split_rows(Split::Test).count().to_string()),
        ("train_counts", counts(manifest.class_counts(Split::Train))),
        ("test_counts", counts(manifest.class_counts(Split::Test))),
        ("skipped", skips.skipped.len().to_string()),
    ]);
    Ok(EXIT_OK)
}

fn cmd_features(a: FeaturesArgs) -> Result<i32> {
    let manifest = Manifest::load(&a.manifest)?;
    let cache = cache_dir(a.cache.as_deref(), &a.manifest);
    let report = extract_manifest(&manifest, &manifest_dir(&a.manifest), &cache, a.jobs)?;
    for (id, why) in &report.failed {
        eprintln!("failed {id}: {why}");
    }
    if report.written == 0 && !manifest.rows.is_empty() {
        return Err(PafaError::MissingData("no features could be extracted".into()));
    }
    result_line(&[
        ("cache", cache.display().to_string()),
        ("written", report.written.to_string()),
        ("failed", report.failed.len().to_string()),
    ]);
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let settings = GradcheckSettings {
        trials: a.trials,
        batch: a.batch,
        dim: a.dim,
        min_patients: a.min_patients,
        max_patients: a.max_patients,
        step: a.step,
        tolerance: a.tolerance,
    };
    if settings.trials == 0 || settings.batch < 2 || settings.dim == 0 {
        return Err(PafaError::invalid("gradcheck needs trials >= 1, batch >= 2, dim >= 1"));
    }
    let w = LossWeights::new(a.lambda_pcsl, a.lambda_gpal, DEFAULT_EPSILON)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let report = run_gradcheck(&mut rng, &settings, &w)?;
    if a.verbose {
        println!("{report}");
    }
    let passed = report.passed();
    result_line(&[
        ("max_rel_err", format!("{:.3e}", report.max_rel_err())),
        ("trials", report.trials.len().to_string()),
        ("tolerance", format!("{:e}", report.tolerance)),
        ("passed", passed.to_string()),
    ]);
    if passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: gradient mismatch above tolerance");
        Ok(EXIT_NUMERIC)
    }
}

fn build_train_config(flags: &TrainFlags) -> Result<TrainConfig> {
    let base = if flags.full_scale {
        TrainConfig::default()
    } else {
        TrainConfig::desk()
    };
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| PafaError::io(path, e))?;
            TrainConfig::from_kv(&text, base)?
        }
        None => base,
    };
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = flags.sampler {
        cfg.set("sampler", if matches!(v, SamplerArg::Pk) { "pk" } else { "shuffle" })?;
    }
    if let Some(v) = flags.pk_patients {
        cfg.set("pk_patients", &v.to_string())?;
    }
    if let Some(v) = flags.pk_samples {
        cfg.set("pk_samples", &v.to_string())?;
    }
    match (flags.batch_size, cfg.sampler) {
        (Some(v), _) => cfg.batch_size = v,
        // keep the batch consistent with an overridden pk shape
        (None, Sampler::Pk { patients, per_patient }) => cfg.batch_size = patients * per_patient,
        (None, Sampler::Shuffle) => {}
    }
    if let Some(v) = flags.lambda_pcsl {
        cfg.weights.lambda_pcsl = v;
    }
    if let Some(v) = flags.lambda_gpal {
        cfg.weights.lambda_gpal = v;
    }
    if let Some(v) = flags.embed_dim {
        cfg.model.embed_dim = v;
    }
    if let Some(v) = flags.proj_dim {
        cfg.model.proj_dim = v;
    }
    Ok(cfg)
}

fn fmt_metric(m: Option<MetricTriple>, f: fn(&MetricTriple) -> f64) -> String {
    m.map_or_else(|| "na".to_string(), |m| format_percent(f(&m)))
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = build_train_config(&a.flags)?;
    if let Some(v) = a.variant {
        cfg.variant = v.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let manifest = Manifest::load(&a.manifest)?;
    let data = PreparedData::load(&manifest, &cache_dir(a.flags.cache.as_deref(), &a.manifest))?;
    let mut record = train(&cfg, &data)?;
    record.persist(&a.out)?;
    let last = record.epochs.last().expect("at least one epoch").mean;
    result_line(&[
        ("run_dir", a.out.display().to_string()),
        ("variant", record.config.variant.to_string()),
        ("seed", record.config.seed.to_string()),
        ("epochs", record.epochs.len().to_string()),
        ("final_total", format!("{:.6e}", last.total)),
        ("sp", fmt_metric(record.four_class, |m| m.sp)),
        ("se", fmt_metric(record.four_class, |m| m.se)),
        ("score", fmt_metric(record.four_class, |m| m.score)),
        ("score_2class", fmt_metric(record.two_class, |m| m.score)),
    ]);
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let preds = if let Some(p) = &a.predictions {
        load_predictions(p)?
    } else if let Some(run) = &a.run {
        load_predictions(&run.join("predictions.csv"))?
    } else if let (Some(ckpt), Some(manifest_path)) = (&a.checkpoint, &a.manifest) {
        let params = ParamSet::load(ckpt)?;
        let manifest = Manifest::load(manifest_path)?;
        let cache = cache_dir(a.cache.as_deref(), manifest_path);
        let data = PreparedData::load(&manifest, &cache)?;
        match a.split {
            SplitArg::Train => predict(&params, &data.train, &data.train_x)?,
            SplitArg::Test => predict(&params, &data.test, &data.test_x)?,
            SplitArg::All => {
                let mut p = predict(&params, &data.train, &data.train_x)?;
                p.extend(predict(&params, &data.test, &data.test_x)?);
                p
            }
        }
    } else {
        return Err(PafaError::invalid("eval needs --predictions, --run, or --checkpoint with --manifest"));
    };
    let yhat: Vec<_> = preds.iter().map(|p| p.pred).collect();
    let y: Vec<_> = preds.iter().map(|p| p.label).collect();
    let m = match a.task {
        TaskArg::FourClass => eval_four_class(&yhat, &y)?,
        TaskArg::TwoClass => eval_two_class_from_four(&yhat, &y)?,
    };
    if let Some(path) = &a.metrics_out {
        let mut text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(PafaError::io(path, e)),
        };
        text.push_str(&metrics_json_line(a.task.name(), &m, preds.len(), a.seed));
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
    }
    result_line(&[
        ("task", a.task.name().to_string()),
        ("sp", format_percent(m.sp)),
        ("se", format_percent(m.se)),
        ("score", format_percent(m.score)),
        ("n", preds.len().to_string()),
    ]);
    Ok(EXIT_OK)
}

fn cmd_ablate(a: AblateArgs) -> Result<i32> {
    let table = if !a.runs.is_empty() {
        let t = aggregate_runs(&a.runs)?;
        t.save(&a.out)?;
        t
    } else {
        let manifest_path = a.manifest.as_ref().expect("clap requires manifest without runs");
        let cfg = build_train_config(&a.flags)?;
        let manifest = Manifest::load(manifest_path)?;
        let data = PreparedData::load(&manifest, &cache_dir(a.flags.cache.as_deref(), manifest_path))?;
        let variants: Vec<Variant> = a.variants.iter().map(|v| (*v).into()).collect();
        ablation_suite(&data, &cfg, &variants, &a.seeds, Some(&a.out), a.jobs)?
    };
    print!("{}", table.summary_csv());
    let mut pairs = vec![
        ("out", a.out.display().to_string()),
        ("rows", table.rows.len().to_string()),
    ];
    let names: Vec<String> = table.summary().iter().map(|s| format!("{}_score", s.variant)).collect();
    for (s, name) in table.summary().iter().zip(&names) {
        pairs.push((name.as_str(), format_percent(s.score.mean)));
    }
    result_line(&pairs);
    Ok(EXIT_OK)
}

fn cmd_export(a: ExportArgs) -> Result<i32> {
    let ckpt = match (&a.checkpoint, &a.run) {
        (Some(c), _) => c.clone(),
        (None, Some(r)) => r.join("checkpoint.pafc"),
        (None, None) => return Err(PafaError::invalid("export-embeddings needs --checkpoint or --run")),
    };
    let mut params = ParamSet::load(&ckpt)?;
    if a.strip {
        params = params.strip_projection();
    }
    let manifest = Manifest::load(&a.manifest)?;
    let cache = cache_dir(a.cache.as_deref(), &a.manifest);
    let (table, missing) = export_embeddings(&params, &manifest, a.split.split(), &cache)?;
    for id in &missing {
        eprintln!("skipped {id}: no cached features");
    }
    if table.source == EmbeddingSource::EncoderFallback {
        eprintln!("warning: checkpoint has no projection head; exported encoder outputs");
    }
    table.save(&a.out)?;
    result_line(&[
        ("out", a.out.display().to_string()),
        ("rows", table.rows.len().to_string()),
        ("dim", table.values.ncols().to_string()),
        (
            "source",
            match table.source {
                EmbeddingSource::Projection => "projection",
                EmbeddingSource::EncoderFallback => "encoder_fallback",
            }
            .to_string(),
        ),
        ("skipped", missing.len().to_string()),
    ]);
    Ok(EXIT_OK)
}

fn cmd_patients(a: PatientArgs) -> Result<i32> {
    let table = EmbeddingTable::load(&a.embeddings)?.filter_split(Split::Test);
    if table.rows.is_empty() {
        return Err(PafaError::MissingData("embedding file has no test rows".into()));
    }
    let patients = table.patients();
    let emb = table.values.view();
    let refs = load_reference_centroids(&a.references)?;
    let nearest = nearest_test_patients(&refs, emb, &patients, a.k)?;
    let ids: Vec<PatientId> = nearest.iter().map(|n| n.patient).collect();
    let mut csv = String::from("rank,patient,distance,reference\n");
    for (i, n) in nearest.iter().enumerate() {
        csv.push_str(&format!("{},{},{:.6e},{}\n", i + 1, n.patient.0, n.distance, n.reference));
    }
    let mut pairs = vec![(
        "patients",
        ids.iter().map(|p| p.0.to_string()).collect::<Vec<_>>().join(","),
    )];
    if let (Some(ra), Some(rb)) = (&a.run_a, &a.run_b) {
        let pa = load_predictions(&ra.join("predictions.csv"))?;
        let pb = load_predictions(&rb.join("predictions.csv"))?;
        let deltas = compare_runs(&pa, &pb, &ids)?;
        csv = deltas_to_csv(&deltas);
        let mean = deltas.iter().map(|d| d.delta).sum::<f64>() / deltas.len() as f64;
        pairs.push(("mean_delta", format_percent(mean)));
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        write_atomic(out, csv.as_bytes())?;
    }
    result_line(&pairs);
    Ok(EXIT_OK)
}
