//! Patient-grouped batching, Adam, the training loop and the ablation suite.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{ClassLabel4, Manifest, PatientId, SampleMeta, Split};
use crate::error::{PafaError, Result};
use crate::eval::{
    eval_four_class, eval_two_class_from_four, format_percent, metrics_json_line, parse_metrics_lines,
    predictions_to_csv, load_cached, MetricTriple, Prediction,
};
use crate::features::write_atomic;
use crate::losses::{loss_bundle, LossWeights, PatientGroups};
use crate::model::{backward, cross_entropy, forward_pooled, logits, pool, ModelConfig, ParamGrads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    CeOnly,
    NoPcsl,
    NoGpal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::CeOnly, Variant::NoPcsl, Variant::NoGpal];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::CeOnly => "ce_only",
            Variant::NoPcsl => "no_pcsl",
            Variant::NoGpal => "no_gpal",
        }
    }

    /// Zeroes the weights of the terms this variant drops.
    pub fn gate(self, base: &LossWeights) -> LossWeights {
        let (p, g) = match self {
            Variant::Full => (base.lambda_pcsl, base.lambda_gpal),
            Variant::CeOnly => (0.0, 0.0),
            Variant::NoPcsl => (0.0, base.lambda_gpal),
            Variant::NoGpal => (base.lambda_pcsl, 0.0),
        };
        LossWeights {
            lambda_pcsl: p,
            lambda_gpal: g,
            epsilon: base.epsilon,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PafaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| PafaError::invalid(format!("unknown variant `{s}` (full|ce_only|no_pcsl|no_gpal)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// `patients` distinct patients with `per_patient` samples each.
    Pk { patients: usize, per_patient: usize },
    Shuffle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub sampler: Sampler,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            lr: 5e-5,
            weight_decay: 1e-6,
            epochs: 100,
            batch_size: 32,
            weights: LossWeights::default(),
            seed: 0,
            sampler: Sampler::Pk {
                patients: 8,
                per_patient: 4,
            },
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for the small pooled encoder on synthetic data.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 30,
            model: ModelConfig {
                embed_dim: 64,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(PafaError::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(PafaError::invalid("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(PafaError::invalid("lr must be positive and weight_decay non-negative"));
        }
        if let Sampler::Pk { patients, per_patient } = self.sampler {
            if patients < 2 || per_patient < 1 {
                return Err(PafaError::invalid("pk sampler needs P >= 2 and K >= 1"));
            }
            if patients * per_patient != self.batch_size {
                return Err(PafaError::invalid(format!(
                    "pk({patients},{per_patient}) gives batches of {} but batch_size is {}",
                    patients * per_patient,
                    self.batch_size
                )));
            }
        }
        LossWeights::new(self.weights.lambda_pcsl, self.weights.lambda_gpal, self.weights.epsilon)?;
        self.model.validate()
    }

    pub fn effective_weights(&self) -> LossWeights {
        self.variant.gate(&self.weights)
    }

    /// Flat `key=value` lines, in a fixed order.
    pub fn to_kv(&self) -> String {
        let (sampler, p, k) = match self.sampler {
            Sampler::Pk { patients, per_patient } => ("pk", patients, per_patient),
            Sampler::Shuffle => ("shuffle", 0, 0),
        };
        let hidden: Vec<String> = self.model.hidden.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        for (key, value) in [
            ("variant", self.variant.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda_pcsl", self.weights.lambda_pcsl.to_string()),
            ("lambda_gpal", self.weights.lambda_gpal.to_string()),
            ("epsilon", self.weights.epsilon.to_string()),
            ("seed", self.seed.to_string()),
            ("sampler", sampler.to_string()),
            ("pk_patients", p.to_string()),
            ("pk_samples", k.to_string()),
            ("mels", self.model.mels.to_string()),
            ("hidden", hidden.join(",")),
            ("embed_dim", self.model.embed_dim.to_string()),
            ("proj_dim", self.model.proj_dim.to_string()),
            ("n_classes", self.model.n_classes.to_string()),
        ] {
            let _ = writeln!(s, "{key}={value}");
        }
        s
    }

    /// Applies one `key=value` setting. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| PafaError::invalid(format!("bad value `{value}` for `{key}`")))
        }
        let value = value.trim();
        match key.trim() {
            "variant" => self.variant = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda_pcsl" => self.weights.lambda_pcsl = num(key, value)?,
            "lambda_gpal" => self.weights.lambda_gpal = num(key, value)?,
            "epsilon" => self.weights.epsilon = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sampler" => {
                self.sampler = match value {
                    "pk" => match self.sampler {
                        s @ Sampler::Pk { .. } => s,
                        Sampler::Shuffle => Sampler::Pk {
                            patients: 8,
                            per_patient: 4,
                        },
                    },
                    "shuffle" => Sampler::Shuffle,
                    _ => return Err(PafaError::invalid(format!("unknown sampler `{value}` (pk|shuffle)"))),
                }
            }
            "pk_patients" | "pk_samples" => {
                let n: usize = num(key, value)?;
                if let Sampler::Pk { patients, per_patient } = &mut self.sampler {
                    if key == "pk_patients" {
                        *patients = n;
                    } else {
                        *per_patient = n;
                    }
                }
            }
            "mels" => self.model.mels = num(key, value)?,
            "hidden" => {
                self.model.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|h| num(key, h)).collect::<Result<_>>()?
                }
            }
            "embed_dim" => self.model.embed_dim = num(key, value)?,
            "proj_dim" => self.model.proj_dim = num(key, value)?,
            "n_classes" => self.model.n_classes = num(key, value)?,
            other => return Err(PafaError::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str, base: TrainConfig) -> Result<Self> {
        let mut cfg = base;
        for (key, value) in parse_kv(text)? {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PafaError::parse("config", i + 1, format!("expected key=value, found `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indices into the training rows passed to [`make_batches`].
    pub rows: Vec<usize>,
    pub sample_ids: Vec<String>,
    pub groups: PatientGroups,
}

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

/// One epoch of batches, `ceil(n / batch_size)` of them. Deterministic per `(seed, epoch)`.
pub fn make_batches(
    train: &[SampleMeta],
    sampler: Sampler,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if train.is_empty() {
        return Err(PafaError::MissingData("no training samples".into()));
    }
    if batch_size == 0 {
        return Err(PafaError::invalid("batch_size must be at least 1"));
    }
    let mut rng = epoch_rng(seed, epoch);
    let n_batches = train.len().div_ceil(batch_size);
    let row_sets: Vec<Vec<usize>> = match sampler {
        Sampler::Shuffle => {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(batch_size).map(|c| c.to_vec()).collect()
        }
        Sampler::Pk { patients, per_patient } => {
            let mut by_patient: BTreeMap<PatientId, Vec<usize>> = BTreeMap::new();
            for (i, r) in train.iter().enumerate() {
                by_patient.entry(r.patient).or_default().push(i);
            }
            if by_patient.len() < patients {
                return Err(PafaError::invalid(format!(
                    "pk sampler needs {patients} patients per batch but the training set has {}; use the shuffle sampler",
                    by_patient.len()
                )));
            }
            let pool: Vec<&Vec<usize>> = by_patient.values().collect();
            (0..n_batches)
                .map(|_| {
                    let chosen: Vec<&Vec<usize>> = pool.choose_multiple(&mut rng, patients).copied().collect();
                    let mut rows = Vec::with_capacity(patients * per_patient);
                    for members in chosen {
                        if members.len() >= per_patient {
                            rows.extend(members.choose_multiple(&mut rng, per_patient).copied());
                        } else {
                            rows.extend(members.iter().copied());
                            for _ in members.len()..per_patient {
                                rows.push(members[rng.random_range(0..members.len())]);
                            }
                        }
                    }
                    rows
                })
                .collect()
        }
    };
    row_sets
        .into_iter()
        .map(|rows| {
            let groups = PatientGroups::from_assignment(rows.iter().map(|&i| train[i].patient).collect())?;
            Ok(Batch {
                sample_ids: rows.iter().map(|&i| train[i].sample_id.clone()).collect(),
                rows,
                groups,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One Adam step over matching parameter/gradient slices. Decoupled decay
/// `p <- p - lr*wd*p` comes first, then the bias-corrected update.
pub fn adam_step(params: &mut [&mut [f32]], grads: &[&[f64]], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(PafaError::invalid("parameter and gradient shapes differ"));
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            let mut x = p[i] as f64;
            x -= cfg.lr * cfg.weight_decay * x;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p[i] = x as f32;
        }
    }
    Ok(())
}

pub fn adam_step_params(params: &mut ParamSet, grads: &ParamGrads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let g = grads.slices();
    adam_step(&mut params.slices_mut(), &g, state, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub pcsl: f64,
    pub gpal: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    /// Every optimizer step, in order.
    pub steps: Vec<LossTerms>,
    pub four_class: Option<MetricTriple>,
    pub two_class: Option<MetricTriple>,
    pub predictions: Vec<Prediction>,
    pub params: ParamSet,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_s: f64,
}

pub const EPOCHS_HEADER: &str = "epoch,ce,pcsl,gpal,total";

impl RunRecord {
    pub fn epochs_csv(&self) -> String {
        let mut s = format!("{EPOCHS_HEADER}\n");
        for e in &self.epochs {
            let m = e.mean;
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, m.ce, m.pcsl, m.gpal, m.total);
        }
        s
    }

    pub fn metrics_lines(&self) -> String {
        let n = self.predictions.len();
        let mut s = String::new();
        for (task, m) in [("4class", &self.four_class), ("2class", &self.two_class)] {
            if let Some(m) = m {
                s.push_str(&metrics_json_line(task, m, n, self.config.seed));
                s.push('\n');
            }
        }
        s
    }

    /// Writes `config.txt`, `epochs.csv`, `checkpoint.pafc`, `metrics.json-lines`, `predictions.csv`.
    pub fn persist(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PafaError::io(dir, e))?;
        write_atomic(&dir.join("config.txt"), self.config.to_kv().as_bytes())?;
        write_atomic(&dir.join("epochs.csv"), self.epochs_csv().as_bytes())?;
        let ckpt = dir.join("checkpoint.pafc");
        self.params.save(&ckpt)?;
        write_atomic(&dir.join("metrics.json-lines"), self.metrics_lines().as_bytes())?;
        write_atomic(&dir.join("predictions.csv"), predictions_to_csv(&self.predictions).as_bytes())?;
        self.checkpoint = Some(ckpt);
        Ok(())
    }
}

/// Pooled encoder inputs for training and test rows, read from the feature cache.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<SampleMeta>,
    pub train_x: Array2<f64>,
    pub test: Vec<SampleMeta>,
    pub test_x: Array2<f64>,
}

impl PreparedData {
    pub fn load(manifest: &Manifest, cache_dir: &Path) -> Result<Self> {
        let (train, train_x) = load_split(manifest, Split::Train, cache_dir)?;
        if train.is_empty() {
            return Err(PafaError::MissingData("manifest has no training rows".into()));
        }
        let (test, test_x) = load_split(manifest, Split::Test, cache_dir)?;
        Ok(PreparedData {
            train,
            train_x,
            test,
            test_x,
        })
    }

    pub fn mels(&self) -> usize {
        self.train_x.ncols() / 2
    }
}

fn load_split(manifest: &Manifest, split: Split, cache_dir: &Path) -> Result<(Vec<SampleMeta>, Array2<f64>)> {
    let (found, missing) = load_cached(manifest.split_rows(split), cache_dir);
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(5).map(String::as_str).collect();
        return Err(PafaError::MissingData(format!(
            "{} {split} samples have no cached features under {} (e.g. {}); run `features` first",
            missing.len(),
            cache_dir.display(),
            shown.join(", ")
        )));
    }
    let width = found.first().map_or(0, |(_, f)| 2 * f.mels());
    let mut x = Array2::zeros((found.len(), width));
    for (i, (_, f)) in found.iter().enumerate() {
        if 2 * f.mels() != width {
            return Err(PafaError::invalid("cached features have mixed mel widths"));
        }
        if f.data().iter().any(|v| !v.is_finite()) {
            return Err(PafaError::Numeric(format!("non-finite cached feature for {}", found[i].0.sample_id)));
        }
        for (dst, v) in x.row_mut(i).iter_mut().zip(pool(f)) {
            *dst = v;
        }
    }
    Ok((found.into_iter().map(|(r, _)| r.clone()).collect(), x))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Labels predicted by the classification head alone.
pub fn predict(params: &ParamSet, rows: &[SampleMeta], x: &Array2<f64>) -> Result<Vec<Prediction>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let inference = params.strip_projection();
    let l = logits(&inference, x.view())?;
    Ok(rows
        .iter()
        .zip(l.rows())
        .map(|(r, row)| Prediction {
            sample_id: r.sample_id.clone(),
            patient: r.patient,
            label: r.label,
            pred: ClassLabel4::from_index(argmax(row)).expect("four logits"),
        })
        .collect())
}

pub fn train(cfg: &TrainConfig, data: &PreparedData) -> Result<RunRecord> {
    train_from(cfg, data, None)
}

/// Trains from `init` (or a fresh seeded initialization) and evaluates on the test rows.
pub fn train_from(cfg: &TrainConfig, data: &PreparedData, init: Option<ParamSet>) -> Result<RunRecord> {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    cfg.model.mels = data.mels();
    cfg.validate()?;
    let mut params = match init {
        Some(p) => p,
        None => ParamSet::init(&cfg.model, cfg.seed)?,
    };
    params.ensure_trainable()?;
    let weights = cfg.effective_weights();
    let adam = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let mut state = AdamState::default();
    let labels: Vec<usize> = data.train.iter().map(|r| r.label.index()).collect();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = make_batches(&data.train, cfg.sampler, cfg.batch_size, cfg.seed, epoch)?;
        let mut sum = LossTerms {
            ce: 0.0,
            pcsl: 0.0,
            gpal: 0.0,
            total: 0.0,
        };
        for (b, batch) in batches.iter().enumerate() {
            let at = |what: &str| PafaError::Numeric(format!("{what} at epoch {epoch} batch {b}"));
            let x = data.train_x.select(ndarray::Axis(0), &batch.rows);
            let y: Vec<usize> = batch.rows.iter().map(|&i| labels[i]).collect();
            let out = forward_pooled(&params, x.view()).map_err(|_| at("non-finite activations"))?;
            let (ce, grad_logits) = cross_entropy(&out.logits, &y)?;
            let proj = out.projection.as_ref().expect("trainable set has a projection head");
            let bundle = loss_bundle(ce, proj.view(), &batch.groups, &weights).map_err(|e| {
                if e.is_numeric() {
                    at("non-finite embedding")
                } else {
                    e
                }
            })?;
            if !bundle.total.is_finite() {
                return Err(at("NaN or infinite loss"));
            }
            let grads = backward(&params, &out, &grad_logits, Some(&bundle.grad_z))?;
            adam_step_params(&mut params, &grads, &mut state, &adam)?;
            if !params.is_finite() {
                return Err(at("parameters diverged"));
            }
            let terms = LossTerms {
                ce: bundle.ce,
                pcsl: bundle.pcsl,
                gpal: bundle.gpal,
                total: bundle.total,
            };
            sum.ce += terms.ce;
            sum.pcsl += terms.pcsl;
            sum.gpal += terms.gpal;
            sum.total += terms.total;
            steps.push(terms);
        }
        let n = batches.len() as f64;
        epochs.push(EpochStats {
            epoch,
            mean: LossTerms {
                ce: sum.ce / n,
                pcsl: sum.pcsl / n,
                gpal: sum.gpal / n,
                total: sum.total / n,
            },
        });
    }

    let predictions = predict(&params, &data.test, &data.test_x)?;
    let preds: Vec<ClassLabel4> = predictions.iter().map(|p| p.pred).collect();
    let truth: Vec<ClassLabel4> = predictions.iter().map(|p| p.label).collect();
    let four_class = eval_four_class(&preds, &truth).ok();
    let two_class = eval_two_class_from_four(&preds, &truth).ok();
    Ok(RunRecord {
        config: cfg,
        epochs,
        steps,
        four_class,
        two_class,
        predictions,
        params,
        checkpoint: None,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricTriple,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample standard deviation (n-1); zero for a single value.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub variant: Variant,
    pub n: usize,
    pub sp: MeanStd,
    pub se: MeanStd,
    pub score: MeanStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn summary(&self) -> Vec<AblationSummary> {
        let mut order: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        order
            .into_iter()
            .map(|v| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
                let col = |f: fn(&MetricTriple) -> f64| rows.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>();
                AblationSummary {
                    variant: v,
                    n: rows.len(),
                    sp: mean_std(&col(|m| m.sp)),
                    se: mean_std(&col(|m| m.se)),
                    score: mean_std(&col(|m| m.score)),
                }
            })
            .collect()
    }

    pub fn mean_score(&self, v: Variant) -> Option<f64> {
        self.summary().into_iter().find(|s| s.variant == v).map(|s| s.score.mean)
    }

    pub fn score(&self, v: Variant, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == v && r.seed == seed)
            .map(|r| r.metrics.score)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,sp,se,score\n");
        for r in &self.rows {
            let m = r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.variant,
                r.seed,
                format_percent(m.sp),
                format_percent(m.se),
                format_percent(m.score)
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,n,sp_mean,sp_std,se_mean,se_std,score_mean,score_std\n");
        for x in self.summary() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                x.variant,
                x.n,
                format_percent(x.sp.mean),
                format_percent(x.sp.std),
                format_percent(x.se.mean),
                format_percent(x.se.std),
                format_percent(x.score.mean),
                format_percent(x.score.std)
            );
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PafaError::io(dir, e))?;
        write_atomic(&dir.join("ablation.csv"), self.to_csv().as_bytes())?;
        write_atomic(&dir.join("ablation_summary.csv"), self.summary_csv().as_bytes())
    }
}

pub fn run_dir_name(v: Variant, seed: u64) -> String {
    format!("{v}_seed{seed}")
}

/// Trains every `variant x seed` pair. Runs are independent and may execute in parallel;
/// each is single-threaded, so the table does not depend on `jobs`.
pub fn ablation_suite(
    data: &PreparedData,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(PafaError::invalid("ablation needs at least one variant and one seed"));
    }
    let jobs_list: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PafaError::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<AblationRow>> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(variant, seed)| {
                let cfg = TrainConfig {
                    variant,
                    seed,
                    ..base.clone()
                };
                let mut record = train(&cfg, data)?;
                if let Some(dir) = out_dir {
                    record.persist(&dir.join(run_dir_name(variant, seed)))?;
                }
                let metrics = record.four_class.ok_or_else(|| {
                    PafaError::MissingData("test split lacks normal or abnormal samples; no score".into())
                })?;
                Ok(AblationRow { variant, seed, metrics })
            })
            .collect()
    });
    let table = AblationTable {
        rows: results.into_iter().collect::<Result<_>>()?,
    };
    if let Some(dir) = out_dir {
        table.save(dir)?;
    }
    Ok(table)
}

/// Builds an ablation table from existing run directories (their `config.txt` and 4-class metrics).
pub fn aggregate_runs(run_dirs: &[PathBuf]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| PafaError::io(&p, e))
        };
        let kv: HashMap<String, String> = parse_kv(&read("config.txt")?)?.into_iter().collect();
        let variant: Variant = kv
            .get("variant")
            .ok_or_else(|| PafaError::MissingData(format!("{}: config has no variant", dir.display())))?
            .parse()?;
        let seed: u64 = kv
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PafaError::MissingData(format!("{}: config has no seed", dir.display())))?;
        let metrics = parse_metrics_lines(&read("metrics.json-lines")?, &dir.display().to_string())?
            .into_iter()
            .find(|m| m.task == "4class")
            .ok_or_else(|| PafaError::MissingData(format!("{}: no 4class metrics", dir.display())))?;
        rows.push(AblationRow {
            variant,
            seed,
            metrics: metrics.metrics,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ClassLabel4;
    use std::collections::BTreeSet;

    fn rows(patients: u32, per: u32) -> Vec<SampleMeta> {
        (0..patients)
            .flat_map(|p| {
                (0..per).map(move |s| SampleMeta {
                    sample_id: format!("p{p}_{s}"),
                    patient: PatientId(p),
                    label: ClassLabel4::Normal,
                    split: Split::Train,
                    source_path: String::new(),
                    cycle_start_s: 0.0,
                    cycle_end_s: 1.0,
                })
            })
            .collect()
    }

    const PK: Sampler = Sampler::Pk {
        patients: 8,
        per_patient: 4,
    };

    #[test]
    fn pk_batches_have_fixed_shape() {
        let train = rows(20, 20);
        let batches = make_batches(&train, PK, 32, 1, 0).unwrap();
        assert_eq!(batches.len(), 400usize.div_ceil(32));
        for b in &batches {
            assert_eq!(b.rows.len(), 32);
            assert_eq!(b.groups.n_patients(), 8);
            assert!(b.groups.members().iter().all(|m| m.len() == 4));
            let distinct: BTreeSet<usize> = b.rows.iter().copied().collect();
            assert_eq!(distinct.len(), 32);
        }
        assert_eq!(batches, make_batches(&train, PK, 32, 1, 0).unwrap());
        assert_ne!(batches, make_batches(&train, PK, 32, 1, 1).unwrap());
    }

    #[test]
    fn pk_refills_small_patients_from_themselves() {
        let mut train = rows(8, 4);
        train.retain(|r| !(r.patient == PatientId(2) && r.sample_id != "p2_0"));
        let batches = make_batches(&train, PK, 32, 3, 0).unwrap();
        for b in &batches {
            assert_eq!(b.rows.len(), 32);
            let p2: Vec<usize> = b.rows.iter().copied().filter(|&i| train[i].patient == PatientId(2)).collect();
            assert_eq!(p2.len(), 4);
        }
        let err = make_batches(&rows(5, 10), PK, 32, 1, 0).unwrap_err().to_string();
        assert!(err.contains("shuffle"), "{err}");
    }

    #[test]
    fn shuffle_epoch_is_a_permutation() {
        let train = rows(10, 10);
        let batches = make_batches(&train, Sampler::Shuffle, 32, 9, 4).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.rows.len()).collect();
        assert_eq!(sizes, [32, 32, 32, 4]);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.rows.clone()).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn adam_first_step_by_hand() {
        let cfg = AdamConfig::new(0.01, 0.0);
        let mut p = [0.5f32];
        let mut state = AdamState::default();
        adam_step(&mut [&mut p[..]], &[&[1.0]], &mut state, &cfg).unwrap();
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; step = lr / (1 + eps)
        let expected = (0.5f32 as f64 - 0.01 / (1.0 + 1e-8)) as f32;
        assert_eq!(p[0], expected);

        // second step with the same gradient keeps m_hat = v_hat = 1
        adam_step(&mut [&mut p[..]], &[&[1.0]], &mut state, &cfg).unwrap();
        assert_eq!(p[0], (expected as f64 - 0.01 / (1.0 + 1e-8)) as f32);
    }

    #[test]
    fn adam_zero_gradient_and_decay() {
        let mut p = [0.25f32, -1.0];
        let mut state = AdamState::default();
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0]], &mut state, &AdamConfig::new(0.1, 0.0)).unwrap();
        assert_eq!(p, [0.25, -1.0]);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0]], &mut state, &AdamConfig::new(0.1, 0.5)).unwrap();
        assert_eq!(p, [(0.25f64 * 0.95) as f32, -0.95]);
        assert!(adam_step(&mut [&mut p[..]], &[&[0.0]], &mut state, &AdamConfig::new(0.1, 0.0)).is_err());
    }

    #[test]
    fn variant_gates() {
        let w = LossWeights::default();
        assert_eq!(Variant::CeOnly.gate(&w).lambda_pcsl, 0.0);
        assert_eq!(Variant::CeOnly.gate(&w).lambda_gpal, 0.0);
        assert_eq!(Variant::NoPcsl.gate(&w).lambda_gpal, w.lambda_gpal);
        assert_eq!(Variant::NoGpal.gate(&w).lambda_pcsl, w.lambda_pcsl);
        assert_eq!(Variant::Full.gate(&w), w);
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.seed = 42;
        cfg.variant = Variant::NoGpal;
        cfg.lr = 3.3e-4;
        let back = TrainConfig::from_kv(&cfg.to_kv(), TrainConfig::default()).unwrap();
        assert_eq!(back, cfg);
        cfg.sampler = Sampler::Shuffle;
        let back = TrainConfig::from_kv(&cfg.to_kv(), TrainConfig::default()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_kv("nope=1", TrainConfig::default()).is_err());
        assert!(TrainConfig::from_kv("epochs", TrainConfig::default()).is_err());
        let bad = TrainConfig {
            batch_size: 30,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sample_std() {
        let m = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]).std, 0.0);
    }
}
