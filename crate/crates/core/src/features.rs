//! Audio front end: resample to 16 kHz, fix length to 5 s, 128-bin log-mel fbank.
//!
//! Framing is 25 ms Hann windows at a 10 ms hop, 512-point FFT, 128 triangular
//! filters on the mel scale between 20 Hz and 8 kHz, natural log of
//! `energy + 1e-10`. A 5 s clip at 16 kHz gives 498 frames.
//!
//! Normalization is per utterance: one mean and one standard deviation over the
//! whole matrix. Per-bin statistics would erase exactly the temporal mean/std
//! that the pooled encoder consumes.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::datamodel::{Manifest, SampleMeta};
use crate::error::{PafaError, Result};

pub const TARGET_RATE_HZ: u32 = 16_000;
pub const TARGET_SECONDS: f64 = 5.0;
pub const TARGET_SAMPLES: usize = 80_000;
pub const FRAME_LEN: usize = 400;
pub const FRAME_HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 128;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 8_000.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const FRAMES_PER_CLIP: usize = (TARGET_SAMPLES - FRAME_LEN) / FRAME_HOP + 1;

const SINC_ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;
/// Spread (log-energy units) below which a matrix is treated as constant.
const CONSTANT_SPREAD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f64>,
    pub rate_hz: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f64>, rate_hz: u32) -> Result<Self> {
        if rate_hz == 0 {
            return Err(PafaError::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(PafaError::Numeric("non-finite audio sample".into()));
        }
        Ok(WaveBuffer { samples, rate_hz })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz as f64
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc resampling, Kaiser window, cutoff at the lower Nyquist rate.
pub fn resample(w: &WaveBuffer, target_hz: u32) -> Result<WaveBuffer> {
    if w.samples.is_empty() {
        return Err(PafaError::invalid("cannot resample empty audio"));
    }
    if w.rate_hz == 0 || target_hz == 0 {
        return Err(PafaError::invalid("sample rate must be positive"));
    }
    if w.rate_hz == target_hz {
        return Ok(w.clone());
    }
    let ratio = target_hz as f64 / w.rate_hz as f64;
    let n_in = w.samples.len();
    let n_out = (n_in as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_len = SINC_ZERO_CROSSINGS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);

    let out = (0..n_out)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = ((t - half_len).ceil().max(0.0)) as usize;
            let hi = ((t + half_len).floor() as usize).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let x = t - k as f64;
                let u = x / half_len;
                let window = if u.abs() >= 1.0 {
                    0.0
                } else {
                    bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta
                };
                acc += w.samples[k] * cutoff * sinc(cutoff * x) * window;
            }
            acc
        })
        .collect();
    Ok(WaveBuffer {
        samples: out,
        rate_hz: target_hz,
    })
}

/// Tiles short clips end to end and keeps the head of long ones.
pub fn fix_length(w: &WaveBuffer, target_s: f64) -> Result<WaveBuffer> {
    if w.samples.is_empty() {
        return Err(PafaError::invalid("cannot fix length of empty audio"));
    }
    let target = (target_s * w.rate_hz as f64).round() as usize;
    let samples = w.samples.iter().copied().cycle().take(target).collect();
    Ok(WaveBuffer {
        samples,
        rate_hz: w.rate_hz,
    })
}

/// `frames x mels` log energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankMatrix {
    frames: usize,
    mels: usize,
    data: Vec<f32>,
}

impl FbankMatrix {
    pub fn new(frames: usize, mels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * mels {
            return Err(PafaError::invalid(format!(
                "fbank data has {} values, expected {frames}x{mels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PafaError::Numeric("non-finite fbank value".into()));
        }
        Ok(FbankMatrix { frames, mels, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn mels(&self) -> usize {
        self.mels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.mels..(frame + 1) * self.mels]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(b"PAFB");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.mels as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| PafaError::parse("feature cache", 0, m.to_string());
        if bytes.len() < 16 || &bytes[..4] != b"PAFB" {
            return Err(bad("missing PAFB magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != 1 {
            return Err(bad("unsupported version"));
        }
        let frames = u32_at(8) as usize;
        let mels = u32_at(12) as usize;
        if bytes.len() != 16 + frames * mels * 4 {
            return Err(bad("truncated payload"));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FbankMatrix::new(frames, mels, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PafaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write to a sibling temp file, then rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| PafaError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| PafaError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| PafaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PafaError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| PafaError::io(path, e))
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

struct FrontEnd {
    window: Vec<f64>,
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

fn front_end() -> &'static FrontEnd {
    static FRONT_END: OnceLock<FrontEnd> = OnceLock::new();
    FRONT_END.get_or_init(|| {
        let window = (0..FRAME_LEN)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / FRAME_LEN as f64).cos())
            .collect();
        let mel_lo = hz_to_mel(MEL_LOW_HZ);
        let mel_hi = hz_to_mel(MEL_HIGH_HZ);
        let step = (mel_hi - mel_lo) / (N_MELS + 1) as f64;
        let bin_hz = TARGET_RATE_HZ as f64 / N_FFT as f64;
        let n_bins = N_FFT / 2 + 1;
        let filters = (0..N_MELS)
            .map(|m| {
                let left = mel_lo + step * m as f64;
                let center = left + step;
                let right = center + step;
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let mel = hz_to_mel(k as f64 * bin_hz);
                        let w = if mel > left && mel <= center {
                            (mel - left) / (center - left)
                        } else if mel > center && mel < right {
                            (right - mel) / (right - center)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                if weights.is_empty() {
                    // narrower than one bin: take the bin nearest the centre
                    let nearest = (0..n_bins)
                        .min_by(|a, b| {
                            let da = (hz_to_mel(*a as f64 * bin_hz) - center).abs();
                            let db = (hz_to_mel(*b as f64 * bin_hz) - center).abs();
                            da.total_cmp(&db)
                        })
                        .unwrap_or(0);
                    return (nearest, vec![1.0]);
                }
                let start = weights[0].0;
                (start, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        FrontEnd {
            window,
            filters,
            fft,
        }
    })
}

/// Log-mel energies before normalization, `T x 128` in `f64`.
pub fn raw_log_mel(w: &WaveBuffer) -> Result<Vec<Vec<f64>>> {
    if w.rate_hz != TARGET_RATE_HZ {
        return Err(PafaError::invalid(format!(
            "fbank expects {TARGET_RATE_HZ} Hz input, got {}",
            w.rate_hz
        )));
    }
    if w.samples.len() < FRAME_LEN {
        return Err(PafaError::invalid("audio shorter than one frame"));
    }
    let fe = front_end();
    let n_frames = (w.samples.len() - FRAME_LEN) / FRAME_HOP + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fe.fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; N_FFT / 2 + 1];
    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let frame = &w.samples[t * FRAME_HOP..t * FRAME_HOP + FRAME_LEN];
        for (slot, (x, win)) in buf.iter_mut().zip(frame.iter().zip(&fe.window)) {
            *slot = Complex::new(x * win, 0.0);
        }
        for slot in &mut buf[FRAME_LEN..] {
            *slot = Complex::new(0.0, 0.0);
        }
        fe.fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = fe
            .filters
            .iter()
            .map(|(start, weights)| {
                let energy: f64 = weights
                    .iter()
                    .zip(&power[*start..])
                    .map(|(wt, p)| wt * p)
                    .sum();
                (energy + LOG_FLOOR).ln()
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// Full front end on a 5 s, 16 kHz clip.
pub fn log_mel_fbank(w: &WaveBuffer) -> Result<FbankMatrix> {
    if w.samples.len() != TARGET_SAMPLES {
        return Err(PafaError::invalid(format!(
            "fbank expects {TARGET_SAMPLES} samples, got {}",
            w.samples.len()
        )));
    }
    let raw = raw_log_mel(w)?;
    let n = (raw.len() * N_MELS) as f64;
    let mean = raw.iter().flatten().sum::<f64>() / n;
    let var = raw.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let data: Vec<f32> = if std < CONSTANT_SPREAD {
        vec![0.0; raw.len() * N_MELS]
    } else {
        raw.iter()
            .flatten()
            .map(|v| ((v - mean) / std) as f32)
            .collect()
    };
    FbankMatrix::new(raw.len(), N_MELS, data)
}

pub fn load_wav(path: &Path) -> Result<WaveBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    WaveBuffer::new(samples, spec.sample_rate)
}

fn wav_err(path: &Path, e: hound::Error) -> PafaError {
    match e {
        hound::Error::IoError(io) => PafaError::io(path, io),
        other => PafaError::parse(path.display().to_string(), 0, other.to_string()),
    }
}

/// Mono 16-bit PCM.
pub fn write_wav_pcm16(path: &Path, w: &WaveBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut bytes = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut bytes, spec).map_err(|e| wav_err(path, e))?;
        for s in &w.samples {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(q).map_err(|e| wav_err(path, e))?;
        }
        writer.finalize().map_err(|e| wav_err(path, e))?;
    }
    write_atomic(path, &bytes.into_inner())
}

/// Resolves a manifest `source_path`; relative paths are taken from the manifest's directory.
pub fn resolve_source(base_dir: &Path, source_path: &str) -> PathBuf {
    let p = Path::new(source_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Cut the annotated cycle, resample, fix to 5 s, compute the fbank.
pub fn extract_cycle(recording: &WaveBuffer, start_s: f64, end_s: f64) -> Result<FbankMatrix> {
    let rate = recording.rate_hz as f64;
    let lo = ((start_s * rate).round() as usize).min(recording.samples.len());
    let hi = ((end_s * rate).round() as usize).min(recording.samples.len());
    if hi <= lo {
        return Err(PafaError::invalid(format!(
            "cycle [{start_s}, {end_s}) is empty in a {:.3} s recording",
            recording.duration_s()
        )));
    }
    let cycle = WaveBuffer {
        samples: recording.samples[lo..hi].to_vec(),
        rate_hz: recording.rate_hz,
    };
    let resampled = resample(&cycle, TARGET_RATE_HZ)?;
    let fixed = fix_length(&resampled, TARGET_SECONDS)?;
    log_mel_fbank(&fixed)
}

pub fn cache_path(cache_dir: &Path, sample_id: &str) -> PathBuf {
    cache_dir.join(format!("{sample_id}.pafb"))
}

#[derive(Debug, Default)]
pub struct ExtractionReport {
    pub written: usize,
    pub failed: Vec<(String, String)>,
}

fn extract_one(row: &SampleMeta, base_dir: &Path, cache_dir: &Path) -> Result<()> {
    let wav = load_wav(&resolve_source(base_dir, &row.source_path))?;
    let fbank = extract_cycle(&wav, row.cycle_start_s, row.cycle_end_s)?;
    fbank.save(&cache_path(cache_dir, &row.sample_id))
}

/// Extracts features for every manifest row. `jobs` only changes wall-clock time.
pub fn extract_manifest(
    manifest: &Manifest,
    base_dir: &Path,
    cache_dir: &Path,
    jobs: usize,
) -> Result<ExtractionReport> {
    std::fs::create_dir_all(cache_dir).map_err(|e| PafaError::io(cache_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PafaError::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<()>> = pool.install(|| {
        manifest
            .rows
            .par_iter()
            .map(|row| extract_one(row, base_dir, cache_dir))
            .collect()
    });
    let mut report = ExtractionReport::default();
    for (row, res) in manifest.rows.iter().zip(results) {
        match res {
            Ok(()) => report.written += 1,
            Err(e) => report.failed.push((row.sample_id.clone(), e.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, rate: u32, seconds: f64) -> WaveBuffer {
        let n = (rate as f64 * seconds) as usize;
        WaveBuffer::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
        .unwrap()
    }

    fn noise(seed: u64, amplitude: f64, n: usize) -> WaveBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WaveBuffer::new(
            (0..n).map(|_| amplitude * rng.random_range(-1.0..1.0)).collect(),
            TARGET_RATE_HZ,
        )
        .unwrap()
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(FRAMES_PER_CLIP, 498);
    }

    #[test]
    fn resample_passthrough_and_length() {
        let w = noise(1, 0.1, 1000);
        assert_eq!(resample(&w, 16_000).unwrap(), w);
        let w8 = WaveBuffer::new(vec![0.1; 8000], 8000).unwrap();
        let up = resample(&w8, 16_000).unwrap();
        assert_eq!(up.samples.len(), 16_000);
        assert_eq!(up.rate_hz, 16_000);
        assert!(resample(&WaveBuffer::new(vec![], 8000).unwrap(), 16_000).is_err());
    }

    #[test]
    fn resampled_tone_keeps_frequency() {
        let out = resample(&tone(440.0, 44_100, 1.0), 16_000).unwrap();
        assert_eq!(out.samples.len(), 16_000);
        // 16000-point DFT of 1 s has 1 Hz bins
        let mut buf: Vec<Complex<f64>> = out.samples.iter().map(|s| Complex::new(*s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let peak = (0..8000)
            .max_by(|a, b| buf[*a].norm().partial_cmp(&buf[*b].norm()).unwrap())
            .unwrap();
        assert!((peak as f64 - 440.0).abs() <= 1.0, "peak at {peak} Hz");
    }

    #[test]
    fn fix_length_pads_by_repetition() {
        let w = noise(2, 0.2, 48_000);
        let out = fix_length(&w, 5.0).unwrap();
        assert_eq!(out.samples.len(), 80_000);
        assert_eq!(&out.samples[..48_000], &w.samples[..]);
        assert_eq!(&out.samples[48_000..], &w.samples[..32_000]);
    }

    #[test]
    fn fix_length_truncates_and_is_idempotent() {
        let w = noise(3, 0.2, 112_000);
        let out = fix_length(&w, 5.0).unwrap();
        assert_eq!(&out.samples[..], &w.samples[..80_000]);
        assert_eq!(fix_length(&out, 5.0).unwrap(), out);
        assert!(fix_length(&WaveBuffer::new(vec![], 16_000).unwrap(), 5.0).is_err());
    }

    #[test]
    fn silence_gives_constant_then_zero() {
        let w = WaveBuffer::new(vec![0.0; TARGET_SAMPLES], TARGET_RATE_HZ).unwrap();
        let raw = raw_log_mel(&w).unwrap();
        let first = raw[0][0];
        assert!(raw.iter().flatten().all(|v| *v == first));
        let f = log_mel_fbank(&w).unwrap();
        assert_eq!((f.frames(), f.mels()), (498, 128));
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn louder_noise_has_more_energy() {
        let loud = raw_log_mel(&noise(4, 0.1, TARGET_SAMPLES)).unwrap();
        let quiet = raw_log_mel(&noise(5, 0.01, TARGET_SAMPLES)).unwrap();
        for (a, b) in loud.iter().zip(&quiet) {
            let ma: f64 = a.iter().sum::<f64>() / a.len() as f64;
            let mb: f64 = b.iter().sum::<f64>() / b.len() as f64;
            assert!(ma > mb);
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        assert!(log_mel_fbank(&noise(6, 0.1, 1000)).is_err());
        let w = WaveBuffer::new(vec![0.0; TARGET_SAMPLES], 8000).unwrap();
        assert!(log_mel_fbank(&w).is_err());
    }

    #[test]
    fn one_hop_shift_moves_frames() {
        let w = noise(7, 0.1, TARGET_SAMPLES);
        let mut shifted = w.samples[FRAME_HOP..].to_vec();
        shifted.extend_from_slice(&w.samples[..FRAME_HOP]);
        let a = raw_log_mel(&w).unwrap();
        let b = raw_log_mel(&WaveBuffer::new(shifted, TARGET_RATE_HZ).unwrap()).unwrap();
        let matching = (0..497).filter(|&t| b[t] == a[t + 1]).count();
        assert!(matching >= 400, "{matching}");
    }

    #[test]
    fn every_filter_covers_a_bin() {
        assert!(front_end().filters.iter().all(|(_, w)| !w.is_empty()));
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let f = log_mel_fbank(&noise(8, 0.1, TARGET_SAMPLES)).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"PAFB");
        assert_eq!(bytes.len(), 16 + 498 * 128 * 4);
        assert_eq!(FbankMatrix::from_bytes(&bytes).unwrap(), f);
        assert!(FbankMatrix::from_bytes(&bytes[..100]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = cache_path(dir.path(), "x_1");
        f.save(&p).unwrap();
        assert_eq!(FbankMatrix::load(&p).unwrap(), f);
    }

    #[test]
    fn wav_round_trip_is_quantized_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = noise(9, 0.5, 1600);
        write_wav_pcm16(&p, &w).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.rate_hz, 16_000);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }
    }

    #[test]
    fn finite_for_extreme_input() {
        let w = WaveBuffer::new(
            (0..TARGET_SAMPLES).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            TARGET_RATE_HZ,
        )
        .unwrap();
        assert!(log_mel_fbank(&w).unwrap().data().iter().all(|v| v.is_finite()));
    }
}
