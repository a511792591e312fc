//! Manifest construction from an ICBHI directory or from the synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::datamodel::{
    label_from_bits, ClassLabel4, Manifest, PatientId, Provenance, SampleMeta, Split,
};
use crate::error::{PafaError, Result};
use crate::features::{write_wav_pcm16, WaveBuffer, TARGET_RATE_HZ};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcbhiRecording {
    pub patient: PatientId,
    pub recording_index: String,
    pub chest_location: String,
    pub acquisition_mode: String,
    pub equipment: String,
    pub wav_path: String,
    pub annotation_path: String,
}

/// Parses `{patient}_{rec}_{loc}_{mode}_{equip}`, with or without extension.
pub fn parse_icbhi_filename(name: &str) -> Result<IcbhiRecording> {
    let base = Path::new(name)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    let stem = base
        .strip_suffix(".wav")
        .or_else(|| base.strip_suffix(".txt"))
        .unwrap_or(base);
    let tokens: Vec<&str> = stem.split('_').collect();
    if tokens.len() < 5 || tokens.iter().any(|t| t.is_empty()) {
        return Err(PafaError::parse(
            "icbhi filename",
            0,
            format!("`{stem}` does not have 5 underscore-delimited tokens"),
        ));
    }
    let patient = tokens[0].parse::<u32>().map_err(|_| {
        PafaError::parse(
            "icbhi filename",
            0,
            format!("patient token `{}` is not a number", tokens[0]),
        )
    })?;
    let dir = Path::new(name).parent().unwrap_or(Path::new(""));
    Ok(IcbhiRecording {
        patient: PatientId(patient),
        recording_index: tokens[1].to_string(),
        chest_location: tokens[2].to_string(),
        acquisition_mode: tokens[3].to_string(),
        equipment: tokens[4..].join("_"),
        wav_path: dir.join(format!("{stem}.wav")).display().to_string(),
        annotation_path: dir.join(format!("{stem}.txt")).display().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleAnnotation {
    pub start_s: f64,
    pub end_s: f64,
    pub crackle: bool,
    pub wheeze: bool,
}

impl CycleAnnotation {
    pub fn label(&self) -> ClassLabel4 {
        label_from_bits(self.crackle, self.wheeze)
    }
}

pub fn parse_annotation_str(text: &str, context: &str) -> Result<Vec<CycleAnnotation>> {
    let mut cycles = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |m: String| PafaError::parse(context, line_no, m);
        if fields.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", fields.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("non-numeric field `{s}`")))
        };
        let bit = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(err(format!("bit `{other}` is not 0 or 1"))),
        };
        let start_s = num(fields[0])?;
        let end_s = num(fields[1])?;
        if start_s < 0.0 || end_s <= start_s {
            return Err(err(format!("cycle end {end_s} is not after start {start_s}")));
        }
        cycles.push(CycleAnnotation {
            start_s,
            end_s,
            crackle: bit(fields[2])?,
            wheeze: bit(fields[3])?,
        });
    }
    Ok(cycles)
}

pub fn parse_annotation_file(path: &Path) -> Result<Vec<CycleAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| PafaError::io(path, e))?;
    parse_annotation_str(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSource {
    /// Two-column `basename train|test` file.
    OfficialFile(PathBuf),
    /// Subject-disjoint random split: `fraction` of patients go to train.
    Random { fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipReport {
    pub skipped: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

pub fn parse_split_file(text: &str, context: &str) -> Result<HashMap<String, Split>> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 2 {
            return Err(PafaError::parse(context, i + 1, "expected `basename train|test`"));
        }
        let split = fields[1]
            .parse::<Split>()
            .map_err(|e| PafaError::parse(context, i + 1, e.to_string()))?;
        let base = fields[0].strip_suffix(".wav").unwrap_or(fields[0]);
        map.insert(base.to_string(), split);
    }
    Ok(map)
}

/// Subject-disjoint split: patients shuffled by `seed`, the first `round(fraction * n)` train.
pub fn random_patient_split(
    patients: &BTreeSet<PatientId>,
    fraction: f64,
    seed: u64,
) -> BTreeMap<PatientId, Split> {
    let mut order: Vec<PatientId> = patients.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (fraction * order.len() as f64).round() as usize;
    order
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p, if i < n_train { Split::Train } else { Split::Test }))
        .collect()
}

/// Scans `root` for paired `.wav`/`.txt` files, one row per annotated cycle.
pub fn build_manifest(root: &Path, split_source: &SplitSource) -> Result<(Manifest, SkipReport)> {
    let mut report = SkipReport::default();
    let entries = std::fs::read_dir(root).map_err(|e| PafaError::io(root, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| PafaError::io(root, e))?;
        if let Some(name) = entry.file_name().to_str() {
            names.push(name.to_string());
        }
    }
    names.sort();
    let present: BTreeSet<&str> = names.iter().map(String::as_str).collect();

    let official = match split_source {
        SplitSource::OfficialFile(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| PafaError::io(path, e))?;
            Some(parse_split_file(&text, &path.display().to_string())?)
        }
        SplitSource::Random { .. } => None,
    };

    let mut pending: Vec<(String, IcbhiRecording, Vec<CycleAnnotation>)> = Vec::new();
    for name in names.iter().filter(|n| n.ends_with(".wav")) {
        let stem = name.trim_end_matches(".wav").to_string();
        let rec = match parse_icbhi_filename(name) {
            Ok(r) => r,
            Err(e) => {
                report.skipped.push((name.clone(), e.to_string()));
                continue;
            }
        };
        let annotation = format!("{stem}.txt");
        if !present.contains(annotation.as_str()) {
            report
                .skipped
                .push((name.clone(), "missing annotation file".to_string()));
            continue;
        }
        let cycles = parse_annotation_file(&root.join(&annotation))?;
        pending.push((stem, rec, cycles));
    }

    let split_of: Box<dyn Fn(&str, PatientId) -> Option<Split>> = match (&official, split_source)
    {
        (Some(map), _) => Box::new(move |stem: &str, _| map.get(stem).copied()),
        (None, SplitSource::Random { fraction, seed }) => {
            let patients: BTreeSet<PatientId> = pending.iter().map(|(_, r, _)| r.patient).collect();
            let by_patient = random_patient_split(&patients, *fraction, *seed);
            Box::new(move |_, p| by_patient.get(&p).copied())
        }
        (None, SplitSource::OfficialFile(_)) => unreachable!(),
    };

    let mut rows = Vec::new();
    for (stem, rec, cycles) in &pending {
        let Some(split) = split_of(stem, rec.patient) else {
            report
                .skipped
                .push((format!("{stem}.wav"), "not listed in split file".to_string()));
            continue;
        };
        let wav = root.join(format!("{stem}.wav"));
        for (i, c) in cycles.iter().enumerate() {
            rows.push(SampleMeta {
                sample_id: format!("{stem}_{i}"),
                patient: rec.patient,
                label: c.label(),
                split,
                source_path: wav.display().to_string(),
                cycle_start_s: c.start_s,
                cycle_end_s: c.end_s,
            });
        }
    }
    if rows.is_empty() {
        report
            .warnings
            .push(format!("no annotated recordings found under {}", root.display()));
    }
    Ok((Manifest::new(rows, Provenance::Icbhi), report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub samples_per_patient: usize,
    pub seed: u64,
    /// Probabilities for (Normal, Crackle, Wheeze, Both).
    pub class_mix: [f64; 4],
    pub nuisance_strength: f64,
    /// Dirichlet concentration of each patient's own class profile around `class_mix`.
    /// `INFINITY` gives every patient `class_mix` itself.
    pub label_concentration: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 20,
            samples_per_patient: 20,
            seed: 1,
            class_mix: [0.4, 0.3, 0.15, 0.15],
            nuisance_strength: 1.0,
            label_concentration: f64::INFINITY,
        }
    }
}

impl SynthConfig {
    /// 16 patients x 4 cycles = 64 samples; 10 train patients, so `pk(8,4)` works.
    pub fn fixture() -> Self {
        SynthConfig {
            n_patients: 16,
            samples_per_patient: 4,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 2 {
            return Err(PafaError::invalid(
                "synthetic data needs at least 2 patients (patient losses are undefined otherwise)",
            ));
        }
        if self.samples_per_patient < 1 {
            return Err(PafaError::invalid("samples_per_patient must be at least 1"));
        }
        let sum: f64 = self.class_mix.iter().sum();
        if self.class_mix.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(PafaError::invalid(format!(
                "class_mix must be non-negative and sum to 1 (sum={sum})"
            )));
        }
        if !(self.label_concentration > 0.0) {
            return Err(PafaError::invalid("label_concentration must be positive (inf for no patient profile)"));
        }
        if !(self.nuisance_strength >= 0.0) || !self.nuisance_strength.is_finite() {
            return Err(PafaError::invalid("nuisance_strength must be non-negative"));
        }
        Ok(())
    }
}

/// Per-patient channel: overall gain, spectral tilt and a shifted chest resonance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceTransform {
    pub gain_db: f64,
    pub tilt_db_per_octave: f64,
    pub resonance_shift: f64,
}

const RESONANCE_HZ: f64 = 400.0;
const RESONANCE_WIDTH_HZ: f64 = 120.0;
const RESONANCE_BOOST: f64 = 2.0;
const TILT_PIVOT_HZ: f64 = 500.0;
const BASE_RMS: f64 = 0.05;
const PEAK_LIMIT: f64 = 0.99;

impl NuisanceTransform {
    pub fn draw<R: Rng>(rng: &mut R, strength: f64) -> Self {
        NuisanceTransform {
            gain_db: rng.random_range(-6.0..=6.0) * strength,
            tilt_db_per_octave: rng.random_range(-3.0..=3.0) * strength,
            resonance_shift: rng.random_range(-0.15..=0.15) * strength,
        }
    }

    fn response(&self, freq_hz: f64) -> f64 {
        let gain = 10f64.powf(self.gain_db / 20.0);
        let octaves = (freq_hz.max(50.0) / TILT_PIVOT_HZ).log2();
        let tilt = 10f64.powf(self.tilt_db_per_octave * octaves / 20.0);
        let centre = RESONANCE_HZ * (1.0 + self.resonance_shift);
        let resonance =
            1.0 + RESONANCE_BOOST * (-((freq_hz - centre) / RESONANCE_WIDTH_HZ).powi(2)).exp();
        gain * tilt * resonance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub meta: SampleMeta,
    pub waveform: WaveBuffer,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Applies `gain(f)` to a real signal through its full-length spectrum.
fn filter_spectrum(signal: &[f64], rate: f64, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = signal.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|s| Complex::new(*s, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = if k <= n / 2 { k } else { n - k };
        *c *= gain(bin as f64 * rate / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn synth_waveform<R: Rng>(rng: &mut R, label: ClassLabel4, channel: &NuisanceTransform) -> Vec<f64> {
    let rate = TARGET_RATE_HZ as f64;
    let duration = rng.random_range(1.5..3.0);
    let n = (duration * rate).round() as usize;
    let crackle = matches!(label, ClassLabel4::Crackle | ClassLabel4::Both);
    let wheeze = matches!(label, ClassLabel4::Wheeze | ClassLabel4::Both);

    // breath noise, band-limited; adventitious cycles are a little brighter
    let upper = if crackle { 1400.0 } else { 1000.0 };
    let white: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = filter_spectrum(&white, rate, |f| if (100.0..=upper).contains(&f) { 1.0 } else { 0.0 });
    let envelope = |i: usize| (PI * i as f64 / n as f64).sin().sqrt();
    for (i, v) in x.iter_mut().enumerate() {
        *v *= envelope(i);
    }
    let noise_rms = rms(&x).max(1e-12);

    if crackle {
        let bursts = rng.random_range(6..=14);
        for _ in 0..bursts {
            let at = rng.random_range(0..n);
            let freq = rng.random_range(300.0..1500.0);
            let decay_s = rng.random_range(0.001..0.004);
            let amp = 3.0 * noise_rms * rng.random_range(0.6..1.4);
            let len = ((decay_s * 6.0 * rate) as usize).min(n - at);
            for k in 0..len {
                let t = k as f64 / rate;
                x[at + k] += amp * (-t / decay_s).exp() * (2.0 * PI * freq * t).sin();
            }
        }
    }
    if wheeze {
        let f0 = rng.random_range(250.0..700.0);
        let slope = rng.random_range(-0.3..0.3);
        let on = rng.random_range(0.1..0.3);
        let off = rng.random_range(0.7..0.9);
        let amp = 1.5 * noise_rms;
        let (lo, hi) = ((on * n as f64) as usize, (off * n as f64) as usize);
        let span = (hi - lo) as f64;
        let mut phase = 0.0;
        for (k, v) in x[lo..hi].iter_mut().enumerate() {
            let progress = k as f64 / span;
            let freq = f0 * (1.0 + slope * progress);
            phase += 2.0 * PI * freq / rate;
            let ramp = (PI * progress).sin();
            *v += amp * ramp * (phase.sin() + 0.3 * (2.0 * phase).sin());
        }
    }

    let scale = BASE_RMS / rms(&x).max(1e-12);
    for v in &mut x {
        *v *= scale;
    }
    let mut y = filter_spectrum(&x, rate, |f| channel.response(f));
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LIMIT {
        let shrink = PEAK_LIMIT / peak;
        for v in &mut y {
            *v *= shrink;
        }
    }
    y
}

/// Labels for `n` cycles: counts by largest remainder of `mix * n`, then shuffled.
/// Equal remainders are ordered starting from class `rotate % 4`, so small patients
/// do not always round the same way.
fn balanced_labels<R: Rng>(rng: &mut R, mix: &[f64; 4], n: usize, rotate: usize) -> Vec<ClassLabel4> {
    let exact: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..4).map(|i| (i + rotate) % 4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    let mut labels: Vec<ClassLabel4> = ClassLabel4::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(l, &k)| std::iter::repeat_n(*l, k))
        .collect();
    labels.shuffle(rng);
    labels
}

/// Each patient's class probabilities, Dirichlet around `class_mix`.
pub fn patient_class_profiles(cfg: &SynthConfig) -> Vec<[f64; 4]> {
    (0..cfg.n_patients)
        .map(|p| {
            if cfg.label_concentration.is_infinite() {
                return cfg.class_mix;
            }
            let mut rng = stream_rng(cfg.seed, 500_000 + p as u64);
            let mut g = [0.0; 4];
            for (gi, m) in g.iter_mut().zip(&cfg.class_mix) {
                if *m > 0.0 {
                    *gi = Gamma::new(cfg.label_concentration * m, 1.0)
                        .expect("positive shape")
                        .sample(&mut rng);
                }
            }
            let sum: f64 = g.iter().sum();
            if sum > 0.0 {
                g.map(|v| v / sum)
            } else {
                cfg.class_mix
            }
        })
        .collect()
}

pub fn patient_transforms(cfg: &SynthConfig) -> Vec<NuisanceTransform> {
    (0..cfg.n_patients)
        .map(|p| NuisanceTransform::draw(&mut stream_rng(cfg.seed, 1 + p as u64), cfg.nuisance_strength))
        .collect()
}

/// Generates labelled cycles through per-patient nuisance channels, split 60/40 by patient.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Manifest, Vec<SynthSample>)> {
    cfg.validate()?;
    let patients: BTreeSet<PatientId> = (1..=cfg.n_patients as u32).map(PatientId).collect();
    let splits = random_patient_split(&patients, 0.6, cfg.seed);
    let transforms = patient_transforms(cfg);
    let profiles = patient_class_profiles(cfg);
    let mut label_rng = stream_rng(cfg.seed, 0);

    let mut samples = Vec::with_capacity(cfg.n_patients * cfg.samples_per_patient);
    for (p_idx, patient) in patients.iter().enumerate() {
        let labels = balanced_labels(&mut label_rng, &profiles[p_idx], cfg.samples_per_patient, p_idx);
        for (s, &label) in labels.iter().enumerate() {
            let flat = (p_idx * cfg.samples_per_patient + s) as u64;
            let mut rng = stream_rng(cfg.seed, 1_000_000 + flat);
            let samples_f = synth_waveform(&mut rng, label, &transforms[p_idx]);
            let sample_id = format!("p{:03}_c{:03}", patient.0, s);
            let duration = samples_f.len() as f64 / TARGET_RATE_HZ as f64;
            samples.push(SynthSample {
                meta: SampleMeta {
                    source_path: format!("wav/{sample_id}.wav"),
                    sample_id,
                    patient: *patient,
                    label,
                    split: splits[patient],
                    cycle_start_s: 0.0,
                    cycle_end_s: duration,
                },
                waveform: WaveBuffer::new(samples_f, TARGET_RATE_HZ)?,
            });
        }
    }
    let manifest = Manifest::new(
        samples.iter().map(|s| s.meta.clone()).collect(),
        Provenance::Synthetic,
    );
    Ok((manifest, samples))
}

/// Writes `wav/*.wav` and `manifest.csv` under `out_dir`; returns the manifest path.
pub fn write_synthetic(out_dir: &Path, manifest: &Manifest, samples: &[SynthSample]) -> Result<PathBuf> {
    for s in samples {
        write_wav_pcm16(&out_dir.join(&s.meta.source_path), &s.waveform)?;
    }
    let path = out_dir.join("manifest.csv");
    manifest.save(&path)?;
    Ok(path)
}
