use std::path::Path;

use pafa_core::datamodel::{Manifest, Split};
use pafa_core::eval::{export_embeddings, EmbeddingSource, EmbeddingTable};
use pafa_core::features::extract_manifest;
use pafa_core::ingest::{generate_synthetic, write_synthetic, SynthConfig};
use pafa_core::losses::{total_loss, LossWeights};
use pafa_core::model::ParamSet;
use pafa_core::trainer::{ablation_suite, aggregate_runs, run_dir_name, train, PreparedData, TrainConfig, Variant};

fn fixture(dir: &Path) -> (Manifest, PreparedData) {
    let (manifest, samples) = generate_synthetic(&SynthConfig::fixture()).unwrap();
    let path = write_synthetic(dir, &manifest, &samples).unwrap();
    let cache = dir.join("cache");
    let report = extract_manifest(&manifest, dir, &cache, 2).unwrap();
    assert_eq!(report.written, 64);
    let manifest = Manifest::load(&path).unwrap();
    let data = PreparedData::load(&manifest, &cache).unwrap();
    (manifest, data)
}

fn quick(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        seed,
        epochs: 2,
        ..TrainConfig::desk()
    }
}

#[test]
fn fixture_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, data) = fixture(dir.path());
    assert_eq!(data.train.len() + data.test.len(), 64);
    assert_eq!(data.mels(), 128);

    let mut record = train(&quick(Variant::Full, 3), &data).unwrap();
    assert_eq!(record.epochs.len(), 2);
    assert!(record.epochs.iter().all(|e| e.mean.total.is_finite()));
    let w = record.config.effective_weights();
    for s in &record.steps {
        assert_eq!(s.total.to_bits(), total_loss(s.ce, s.pcsl, s.gpal, &w).to_bits());
    }
    assert_eq!(record.predictions.len(), data.test.len());
    assert!(record.four_class.is_some());

    let run = dir.path().join("run");
    record.persist(&run).unwrap();
    for f in ["config.txt", "epochs.csv", "checkpoint.pafc", "metrics.json-lines", "predictions.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ckpt = ParamSet::load(&run.join("checkpoint.pafc")).unwrap();
    assert!(ckpt.has_projection());
    assert_eq!(ckpt, record.params);

    let cache = dir.path().join("cache");
    let (table, missing) = export_embeddings(&ckpt, &manifest, Some(Split::Test), &cache).unwrap();
    assert!(missing.is_empty());
    assert_eq!(table.rows.len(), data.test.len());
    assert_eq!(table.values.ncols(), record.config.model.proj_dim);
    let csv = table.to_csv();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 4 + record.config.model.proj_dim);
    let (again, _) = export_embeddings(&ckpt, &manifest, Some(Split::Test), &cache).unwrap();
    assert_eq!(again.to_csv(), csv);
    let back = EmbeddingTable::parse_csv(&csv, "t").unwrap();
    assert_eq!(back.rows.len(), table.rows.len());

    let (fallback, _) = export_embeddings(&ckpt.strip_projection(), &manifest, None, &cache).unwrap();
    assert_eq!(fallback.source, EmbeddingSource::EncoderFallback);
    assert!(fallback.to_csv().lines().next().unwrap().ends_with(",encoder_fallback"));

    std::fs::remove_file(cache.join(format!("{}.pafb", data.test[0].sample_id))).unwrap();
    let (partial, missing) = export_embeddings(&ckpt, &manifest, Some(Split::Test), &cache).unwrap();
    assert_eq!(missing, vec![data.test[0].sample_id.clone()]);
    assert_eq!(partial.rows.len(), data.test.len() - 1);
    assert!(PreparedData::load(&manifest, &cache).is_err());
}

#[test]
fn gate_equivalence_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = fixture(dir.path());
    let ce = train(&quick(Variant::CeOnly, 5), &data).unwrap();
    let mut zeroed = quick(Variant::Full, 5);
    zeroed.weights = LossWeights::new(0.0, 0.0, zeroed.weights.epsilon).unwrap();
    let full0 = train(&zeroed, &data).unwrap();
    assert_eq!(ce.steps, full0.steps);
    assert_eq!(ce.params, full0.params);
    assert_eq!(ce.predictions, full0.predictions);

    let again = train(&quick(Variant::CeOnly, 5), &data).unwrap();
    assert_eq!(again.params.to_checkpoint_bytes(), ce.params.to_checkpoint_bytes());
    assert_eq!(again.epochs_csv(), ce.epochs_csv());

    let stripped = ce.params.strip_projection();
    assert!(pafa_core::trainer::train_from(&quick(Variant::Full, 5), &data, Some(stripped)).is_err());
}

#[test]
fn ablation_table_and_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = fixture(dir.path());
    let out = dir.path().join("abl");
    let base = TrainConfig {
        epochs: 1,
        ..TrainConfig::desk()
    };
    let table = ablation_suite(&data, &base, &[Variant::Full, Variant::CeOnly], &[1], Some(&out), 2).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(table.rows.iter().all(|r| r.metrics.score.is_finite()));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,seed,sp,se,score\n"));
    assert!(out.join("ablation_summary.csv").is_file());

    let serial = ablation_suite(&data, &base, &[Variant::Full, Variant::CeOnly], &[1], None, 1).unwrap();
    assert_eq!(serial.to_csv(), table.to_csv());

    let dirs: Vec<_> = [Variant::Full, Variant::CeOnly]
        .iter()
        .map(|v| out.join(run_dir_name(*v, 1)))
        .collect();
    let agg = aggregate_runs(&dirs).unwrap();
    assert_eq!(agg.to_csv(), table.to_csv());
}
