//! One line per acceptance criterion. Exits nonzero if any hard criterion fails,
//! except those listed in `KNOWN_UNATTAINABLE`, which still print FAIL.
//! The directional training check reports SOFT-FAIL instead.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use pafa_core::datamodel::{Manifest, PatientId, Split};
use pafa_core::eval::{format_percent, MetricTriple};
use pafa_core::features::{extract_manifest, fix_length, log_mel_fbank, WaveBuffer, N_MELS};
use pafa_core::gradcheck::{random_batch, run_gradcheck, GradcheckSettings};
use pafa_core::ingest::{build_manifest, generate_synthetic, write_synthetic, SplitSource, SynthConfig};
use pafa_core::losses::{gpal_forward, pcsl_forward, total_loss, LossWeights, PatientGroups};
use pafa_core::model::{forward_pooled, logits, ModelConfig, ParamSet};
use pafa_core::trainer::{ablation_suite, train, PreparedData, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    SoftFail,
    Skipped,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome { status: Status::Pass, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome { status: Status::Fail, detail: detail.into() }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn groups(ids: &[u32]) -> PatientGroups {
    PatientGroups::from_assignment(ids.iter().copied().map(PatientId).collect()).unwrap()
}

fn loss_oracle() -> Outcome {
    let z = ndarray::array![[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [0.0, 6.0]];
    let g = groups(&[0, 0, 1, 1]);
    let w = LossWeights::default();
    let pcsl = pcsl_forward(z.view(), &g, w.epsilon).unwrap().pcsl;
    let gpal = gpal_forward(z.view(), &g).unwrap().gpal;
    let total = total_loss(1.0, pcsl, gpal, &w);
    let (ep, eg) = (4.0 / (52.0 + 1e-8), 6.5);
    check(
        rel(pcsl, ep) <= 1e-9 && rel(gpal, eg) <= 1e-9 && (total - 4.8494038).abs() <= 1e-6,
        format!("pcsl={pcsl:.12} gpal={gpal:.12} total={total:.9}"),
    )
}

fn gradient_check() -> Outcome {
    let settings = GradcheckSettings::default();
    let mut worst = 0.0f64;
    let mut ok = true;
    for (seed, w) in [(0, LossWeights::default()), (1, LossWeights::new(1.0, 1.0, 1e-8).unwrap())] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match run_gradcheck(&mut rng, &settings, &w) {
            Ok(r) => {
                worst = worst.max(r.max_rel_err());
                ok &= r.passed() && r.trials.len() == 100;
            }
            Err(e) => return fail(e.to_string()),
        }
    }
    check(ok, format!("2x100 trials B=16 d=8, max_rel_err={worst:.3e} tol=1e-4"))
}

fn invariance_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 1000;
    let mut failures = [0usize; 4];
    for _ in 0..trials {
        let b = rng.random_range(2..=24);
        let d = rng.random_range(1..=12);
        let p = rng.random_range(2..=b.min(6));
        let (z, g) = random_batch(&mut rng, b, d, p);
        let eps = 1e-8;
        let pc = pcsl_forward(z.view(), &g, eps).unwrap().pcsl;
        let gp = gpal_forward(z.view(), &g).unwrap().gpal;

        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted = Array2::from_shape_fn((b, d), |(i, j)| z[[i, j]] + shift[j]);
        let pc_s = pcsl_forward(shifted.view(), &g, eps).unwrap().pcsl;
        let gp_s = gpal_forward(shifted.view(), &g).unwrap().gpal;
        if rel(pc, pc_s) > 1e-9 || rel(gp, gp_s) > 1e-9 {
            failures[0] += 1;
        }

        for c in [0.5, 2.0, 10.0] {
            let scaled = z.mapv(|v| v * c);
            let gp_c = gpal_forward(scaled.view(), &g).unwrap().gpal;
            if rel(gp_c, c * c * gp) > 1e-9 {
                failures[1] += 1;
            }
        }

        let mut order: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted = Array2::from_shape_fn((b, d), |(i, j)| z[[order[i], j]]);
        let ids: Vec<PatientId> = order.iter().map(|&i| g.assignment()[i]).collect();
        let gperm = PatientGroups::from_assignment(ids).unwrap();
        let pc_p = pcsl_forward(permuted.view(), &gperm, eps).unwrap().pcsl;
        let gp_p = gpal_forward(permuted.view(), &gperm).unwrap().gpal;
        if rel(pc, pc_p) > 1e-9 || rel(gp, gp_p) > 1e-9 {
            failures[2] += 1;
        }

        if !(pc >= 0.0 && gp >= 0.0) {
            failures[3] += 1;
        }
    }
    check(
        failures.iter().all(|f| *f == 0),
        format!(
            "{trials} trials; failures translation={} scale={} permutation={} nonneg={}",
            failures[0], failures[1], failures[2], failures[3]
        ),
    )
}

fn score_arithmetic() -> Outcome {
    // (task, sp, se, printed score)
    let rows = [
        ("4class", 72.30, 40.10, "56.20"),
        ("4class", 75.95, 39.15, "57.55"),
        ("4class", 81.66, 43.07, "62.37"),
        ("4class", 79.87, 43.55, "61.71"),
        ("4class", 81.40, 45.67, "63.54"),
        ("4class", 78.77, 48.21, "63.49"),
        ("4class", 82.05, 47.63, "64.84"),
        ("2class", 79.34, 50.14, "64.74"),
        ("2class", 81.66, 55.77, "68.71"),
        ("2class", 79.87, 57.97, "68.93"),
        ("2class", 75.19, 66.34, "70.76"),
        ("2class", 74.87, 68.29, "72.08"),
    ];
    let mut bad = Vec::new();
    for (task, sp, se, printed) in rows {
        let got = format_percent(MetricTriple::from_sp_se(sp, se).score);
        if got != printed {
            bad.push(format!("{task}({sp},{se})->{got}!={printed}"));
        }
    }
    check(
        bad.is_empty(),
        format!("{}/{} rows match; mismatches: [{}]", rows.len() - bad.len(), rows.len(), bad.join(" ")),
    )
}

fn synth_data(dir: &Path, cfg: &SynthConfig) -> (PathBuf, PreparedData) {
    let (manifest, samples) = generate_synthetic(cfg).unwrap();
    let path = write_synthetic(dir, &manifest, &samples).unwrap();
    let cache = dir.join("cache");
    extract_manifest(&manifest, dir, &cache, 1).unwrap();
    let manifest = Manifest::load(&path).unwrap();
    (path, PreparedData::load(&manifest, &cache).unwrap())
}

fn ablation_structure() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = synth_data(dir.path(), &SynthConfig::fixture());
    let base = TrainConfig { epochs: 3, ..TrainConfig::desk() };
    let variants = [Variant::Full, Variant::CeOnly, Variant::NoPcsl, Variant::NoGpal];
    let table = match ablation_suite(&data, &base, &variants, &[1, 2], Some(&dir.path().join("abl")), 1) {
        Ok(t) => t,
        Err(e) => return fail(e.to_string()),
    };
    let complete = table.rows.len() == 8
        && variants.iter().all(|v| [1, 2].iter().all(|s| table.score(*v, *s).is_some()));
    let finite = table
        .rows
        .iter()
        .all(|r| r.metrics.sp.is_finite() && r.metrics.se.is_finite() && r.metrics.score.is_finite());

    let ce = train(&TrainConfig { variant: Variant::CeOnly, seed: 1, ..base.clone() }, &data).unwrap();
    let mut zero = TrainConfig { variant: Variant::Full, seed: 1, ..base.clone() };
    zero.weights = LossWeights::new(0.0, 0.0, zero.weights.epsilon).unwrap();
    let full0 = train(&zero, &data).unwrap();
    let identical = ce.params.to_checkpoint_bytes() == full0.params.to_checkpoint_bytes()
        && ce.steps == full0.steps
        && ce.predictions == full0.predictions;
    check(
        complete && finite && identical,
        format!("rows={} complete={complete} finite={finite} ce_only==full(lambda=0)={identical}", table.rows.len()),
    )
}

fn directional_benefit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = synth_data(dir.path(), &SynthConfig::default());
    let seeds = [1, 2, 3, 4, 5];
    let out = dir.path().join("abl");
    let table = match ablation_suite(&data, &TrainConfig::desk(), &[Variant::Full, Variant::CeOnly], &seeds, Some(&out), 1) {
        Ok(t) => t,
        Err(e) => return fail(e.to_string()),
    };
    println!("  per-seed table (variant,seed,sp,se,score):");
    for line in table.to_csv().lines().skip(1) {
        println!("    {line}");
    }
    let full = table.mean_score(Variant::Full).unwrap();
    let ce = table.mean_score(Variant::CeOnly).unwrap();
    let wins = seeds
        .iter()
        .filter(|s| table.score(Variant::Full, **s).unwrap() >= table.score(Variant::CeOnly, **s).unwrap())
        .count();
    let detail = format!("mean full={full:.2} ce_only={ce:.2}, full wins {wins}/5");
    if full >= ce && wins >= 4 {
        pass(detail)
    } else {
        Outcome { status: Status::SoftFail, detail }
    }
}

fn preprocessing_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let exact: Vec<f64> = (0..80_000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let w = WaveBuffer::new(exact, 16_000).unwrap();
    let f = log_mel_fbank(&fix_length(&w, 5.0).unwrap()).unwrap();
    let shape_ok = f.frames() == 498 && f.mels() == 128 && N_MELS == 128;

    let mut index_ok = true;
    for n in [1usize, 3_000, 48_000, 79_999, 80_001, 112_000] {
        let src: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = fix_length(&WaveBuffer::new(src.clone(), 16_000).unwrap(), 5.0).unwrap();
        index_ok &= out.samples.len() == 80_000
            && out.samples.iter().enumerate().all(|(i, v)| v.to_bits() == src[i % n].to_bits());
    }
    check(
        shape_ok && index_ok,
        format!("shape=({}, {}) pad/truncate out[i]==in[i mod n]: {index_ok}", f.frames(), f.mels()),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bin = env!("CARGO_BIN_EXE_pafa");
    let data = d.join("synth");
    let run = |args: &[&Path], extra: &[&str]| {
        let mut c = Command::new(bin);
        c.args(extra).args(args).env_remove("PAFA_CACHE_DIR");
        let out = c.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&[&data], &["synth", "--fixture", "--out"]);
    let manifest = data.join("manifest.csv");
    run(&[&manifest], &["features", "--manifest"]);
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let out = d.join(name);
        run(&[&manifest, Path::new("--out"), &out], &["train", "--epochs", "3", "--seed", "11", "--manifest"]);
        artifacts.push((
            std::fs::read(out.join("epochs.csv")).unwrap(),
            std::fs::read(out.join("checkpoint.pafc")).unwrap(),
        ));
    }
    let same_epochs = artifacts[0].0 == artifacts[1].0;
    let same_ckpt = artifacts[0].1 == artifacts[1].1;
    check(
        same_epochs && same_ckpt,
        format!("epochs.csv identical={same_epochs} checkpoint identical={same_ckpt} ({} bytes)", artifacts[0].1.len()),
    )
}

fn icbhi_counts() -> Outcome {
    let Some(root) = std::env::var_os("PAFA_ICBHI_ROOT").map(PathBuf::from) else {
        return Outcome { status: Status::Skipped, detail: "PAFA_ICBHI_ROOT not set".into() };
    };
    let split = std::env::var_os("PAFA_ICBHI_SPLIT")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("ICBHI_challenge_train_test.txt"));
    let manifest = match build_manifest(&root, &SplitSource::OfficialFile(split)) {
        Ok((m, _)) => m,
        Err(e) => return fail(e.to_string()),
    };
    let train = manifest.class_counts(Split::Train);
    let test = manifest.class_counts(Split::Test);
    check(
        train == [2063, 1215, 501, 363] && test == [1579, 649, 385, 143],
        format!(
            "train {} {train:?}, test {} {test:?}",
            train.iter().sum::<usize>(),
            test.iter().sum::<usize>()
        ),
    )
}

fn strip_equivalence() -> Outcome {
    let cfg = ModelConfig::default();
    let params = ParamSet::init(&cfg, 42).unwrap();
    let stripped = params.strip_projection();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatched = 0;
    for _ in 0..100 {
        let x = Array2::from_shape_fn((1, cfg.pooled_dim()), |_| rng.random_range(-3.0..3.0));
        let before = forward_pooled(&params, x.view()).unwrap().logits;
        let after = logits(&stripped, x.view()).unwrap();
        if before.iter().zip(after.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatched += 1;
        }
    }
    check(mismatched == 0, format!("100 inputs, {mismatched} differ bitwise"))
}

/// Criteria whose reference values cannot all be met by any correct implementation.
/// Four printed table rows disagree with (Sp + Se) / 2 under every rounding rule.
const KNOWN_UNATTAINABLE: [&str; 1] = ["4 score arithmetic"];

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 loss oracle", loss_oracle),
        ("2 gradient verification", gradient_check),
        ("3 invariance suite", invariance_suite),
        ("4 score arithmetic", score_arithmetic),
        ("5 ablation structure", ablation_structure),
        ("6 directional benefit", directional_benefit),
        ("7 preprocessing contract", preprocessing_contract),
        ("8 determinism", determinism),
        ("9 icbhi counts", icbhi_counts),
        ("10 projection strip", strip_equivalence),
    ];
    let mut hard_failures = 0;
    let mut known_failures = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let o = f();
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail if KNOWN_UNATTAINABLE.contains(&name) => {
                known_failures += 1;
                "FAIL"
            }
            Status::Fail => {
                hard_failures += 1;
                "FAIL"
            }
            Status::SoftFail => "SOFT-FAIL",
            Status::Skipped => "SKIPPED",
        };
        println!("{tag:<9} criterion {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
    }
    if known_failures > 0 {
        println!("{known_failures} failure(s) on criteria with inconsistent reference values");
    }
    if hard_failures > 0 {
        println!("{hard_failures} hard failure(s)");
        std::process::exit(1);
    }
}
