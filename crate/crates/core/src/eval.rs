//! ICBHI metrics, per-patient accuracy, embedding export and nearest-patient analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::datamodel::{map_4to2, ClassLabel4, Manifest, PatientId, SampleMeta, Split};
use crate::error::{PafaError, Result};
use crate::features::{cache_path, write_atomic, FbankMatrix};
use crate::model::{forward_pooled, pool_batch, ParamSet};

/// Rows are true classes, columns predicted. Index 0 is Normal in both tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_indices(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(PafaError::invalid(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut counts = vec![0; classes * classes];
        for (&p, &y) in preds.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(PafaError::invalid(format!(
                    "class index out of range (pred {p}, label {y}, classes {classes})"
                )));
            }
            counts[y * classes + p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn four_class(preds: &[ClassLabel4], labels: &[ClassLabel4]) -> Result<Self> {
        let p: Vec<usize> = preds.iter().map(|c| c.index()).collect();
        let y: Vec<usize> = labels.iter().map(|c| c.index()).collect();
        Self::from_indices(&p, &y, 4)
    }

    pub fn two_class(preds: &[ClassLabel4], labels: &[ClassLabel4]) -> Result<Self> {
        let p: Vec<usize> = preds.iter().map(|c| map_4to2(*c).index()).collect();
        let y: Vec<usize> = labels.iter().map(|c| map_4to2(*c).index()).collect();
        Self::from_indices(&p, &y, 2)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }
}

/// Percentages. `score` is always `(sp + se) / 2` computed from the stored fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTriple {
    pub sp: f64,
    pub se: f64,
    pub score: f64,
}

impl MetricTriple {
    pub fn from_sp_se(sp: f64, se: f64) -> Self {
        MetricTriple {
            sp,
            se,
            score: (sp + se) / 2.0,
        }
    }
}

pub fn se_sp_score(cm: &ConfusionMatrix) -> Result<MetricTriple> {
    let normals = cm.row_total(0);
    let abnormals: u64 = (1..cm.classes()).map(|c| cm.row_total(c)).sum();
    match (normals, abnormals) {
        (0, 0) => return Err(PafaError::MissingData("no normal and no abnormal samples".into())),
        (0, _) => return Err(PafaError::MissingData("no normal samples: specificity undefined".into())),
        (_, 0) => return Err(PafaError::MissingData("no abnormal samples: sensitivity undefined".into())),
        _ => {}
    }
    let hits: u64 = (1..cm.classes()).map(|c| cm.get(c, c)).sum();
    let sp = 100.0 * cm.get(0, 0) as f64 / normals as f64;
    let se = 100.0 * hits as f64 / abnormals as f64;
    Ok(MetricTriple::from_sp_se(sp, se))
}

pub fn eval_four_class(preds: &[ClassLabel4], labels: &[ClassLabel4]) -> Result<MetricTriple> {
    se_sp_score(&ConfusionMatrix::four_class(preds, labels)?)
}

pub fn eval_two_class_from_four(preds: &[ClassLabel4], labels: &[ClassLabel4]) -> Result<MetricTriple> {
    se_sp_score(&ConfusionMatrix::two_class(preds, labels)?)
}

/// Two decimals, ties to even. Values within 1e-9 hundredths of a half count as ties,
/// so `62.365` (stored as 62.36499...) is treated as the tie it denotes.
pub fn format_percent(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let scaled = x.abs() * 100.0;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let mut hundredths = if (frac - 0.5).abs() < 1e-9 {
        if floor % 2.0 == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        scaled.round()
    } as u64;
    let negative = x < 0.0 && hundredths != 0;
    let whole = hundredths / 100;
    hundredths %= 100;
    format!("{}{whole}.{hundredths:02}", if negative { "-" } else { "" })
}

/// `{"task":..,"sp":..,"se":..,"score":..,"n":..,"seed":..}`
pub fn metrics_json_line(task: &str, m: &MetricTriple, n: usize, seed: u64) -> String {
    serde_json::json!({
        "task": task,
        "sp": m.sp,
        "se": m.se,
        "score": m.score,
        "n": n,
        "seed": seed,
    })
    .to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLine {
    pub task: String,
    pub metrics: MetricTriple,
    pub n: usize,
    pub seed: u64,
}

pub fn parse_metrics_lines(text: &str, context: &str) -> Result<Vec<MetricsLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| PafaError::parse(context, i + 1, m);
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
        let num = |k: &str| v.get(k).and_then(|x| x.as_f64()).ok_or_else(|| bad(&format!("missing {k}")));
        out.push(MetricsLine {
            task: v
                .get("task")
                .and_then(|x| x.as_str())
                .ok_or_else(|| bad("missing task"))?
                .to_string(),
            metrics: MetricTriple::from_sp_se(num("sp")?, num("se")?),
            n: v.get("n").and_then(|x| x.as_u64()).ok_or_else(|| bad("missing n"))? as usize,
            seed: v.get("seed").and_then(|x| x.as_u64()).ok_or_else(|| bad("missing seed"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub sample_id: String,
    pub patient: PatientId,
    pub label: ClassLabel4,
    pub pred: ClassLabel4,
}

pub const PREDICTIONS_HEADER: &str = "sample_id,patient,label,pred";

pub fn predictions_to_csv(preds: &[Prediction]) -> String {
    let mut s = format!("{PREDICTIONS_HEADER}\n");
    for p in preds {
        let _ = writeln!(s, "{},{},{},{}", p.sample_id, p.patient.0, p.label, p.pred);
    }
    s
}

pub fn parse_predictions_csv(text: &str, context: &str) -> Result<Vec<Prediction>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTIONS_HEADER => {}
        _ => return Err(PafaError::parse(context, 1, format!("expected header `{PREDICTIONS_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| PafaError::parse(context, i + 1, m);
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        out.push(Prediction {
            sample_id: f[0].to_string(),
            patient: PatientId(f[1].parse().map_err(|_| bad(format!("bad patient `{}`", f[1])))?),
            label: f[2].parse().map_err(|_| bad(format!("bad label `{}`", f[2])))?,
            pred: f[3].parse().map_err(|_| bad(format!("bad prediction `{}`", f[3])))?,
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| PafaError::io(path, e))?;
    parse_predictions_csv(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientStats {
    pub patient: PatientId,
    pub n_samples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub centroid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientReport {
    pub patients: Vec<PatientStats>,
}

impl PatientReport {
    /// Per-patient accuracy; if `embeddings` is given (one row per prediction) centroids are attached.
    pub fn build(preds: &[Prediction], embeddings: Option<ArrayView2<f64>>) -> Result<Self> {
        if let Some(e) = &embeddings {
            if e.nrows() != preds.len() {
                return Err(PafaError::invalid("embedding rows do not match predictions"));
            }
        }
        let mut by: BTreeMap<PatientId, Vec<usize>> = BTreeMap::new();
        for (i, p) in preds.iter().enumerate() {
            by.entry(p.patient).or_default().push(i);
        }
        let patients = by
            .into_iter()
            .map(|(patient, rows)| {
                let n_correct = rows.iter().filter(|&&i| preds[i].pred == preds[i].label).count();
                let centroid = embeddings.as_ref().map(|e| {
                    let mut c = vec![0.0; e.ncols()];
                    for &i in &rows {
                        for (acc, v) in c.iter_mut().zip(e.row(i)) {
                            *acc += v;
                        }
                    }
                    c.iter_mut().for_each(|v| *v /= rows.len() as f64);
                    c
                });
                PatientStats {
                    patient,
                    n_samples: rows.len(),
                    n_correct,
                    accuracy: 100.0 * n_correct as f64 / rows.len() as f64,
                    centroid,
                }
            })
            .collect();
        Ok(PatientReport { patients })
    }

    pub fn get(&self, patient: PatientId) -> Option<&PatientStats> {
        self.patients.iter().find(|p| p.patient == patient)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientDelta {
    pub patient: PatientId,
    pub acc_a: f64,
    pub acc_b: f64,
    pub delta: f64,
}

/// Accuracy of run b minus run a per patient. An empty list means every patient seen in either run.
pub fn compare_runs(a: &[Prediction], b: &[Prediction], patients: &[PatientId]) -> Result<Vec<PatientDelta>> {
    let ra = PatientReport::build(a, None)?;
    let rb = PatientReport::build(b, None)?;
    let wanted: Vec<PatientId> = if patients.is_empty() {
        let all: BTreeSet<PatientId> = ra
            .patients
            .iter()
            .chain(&rb.patients)
            .map(|p| p.patient)
            .collect();
        all.into_iter().collect()
    } else {
        patients.to_vec()
    };
    wanted
        .into_iter()
        .map(|p| {
            let sa = ra
                .get(p)
                .ok_or_else(|| PafaError::MissingData(format!("patient {p} absent from run a")))?;
            let sb = rb
                .get(p)
                .ok_or_else(|| PafaError::MissingData(format!("patient {p} absent from run b")))?;
            Ok(PatientDelta {
                patient: p,
                acc_a: sa.accuracy,
                acc_b: sb.accuracy,
                delta: sb.accuracy - sa.accuracy,
            })
        })
        .collect()
}

pub fn deltas_to_csv(deltas: &[PatientDelta]) -> String {
    let mut s = String::from("patient,acc_a,acc_b,delta\n");
    for d in deltas {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            d.patient.0,
            format_percent(d.acc_a),
            format_percent(d.acc_b),
            format_percent(d.delta)
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Projection,
    /// The checkpoint had no projection head; encoder outputs were exported instead.
    EncoderFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Vec<SampleMeta>,
    pub values: Array2<f64>,
    pub source: EmbeddingSource,
}

impl EmbeddingTable {
    pub fn patients(&self) -> Vec<PatientId> {
        self.rows.iter().map(|r| r.patient).collect()
    }

    pub fn filter_split(&self, split: Split) -> EmbeddingTable {
        let keep: Vec<usize> = (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect();
        EmbeddingTable {
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
            values: self.values.select(ndarray::Axis(0), &keep),
            source: self.source,
        }
    }

    pub fn to_csv(&self) -> String {
        let d = self.values.ncols();
        let mut s = String::from("sample_id,patient,label,split");
        for j in 0..d {
            let _ = write!(s, ",e{j}");
        }
        let fallback = self.source == EmbeddingSource::EncoderFallback;
        if fallback {
            s.push_str(",encoder_fallback");
        }
        s.push('\n');
        for (r, v) in self.rows.iter().zip(self.values.rows()) {
            let _ = write!(s, "{},{},{},{}", r.sample_id, r.patient.0, r.label, r.split);
            for x in v {
                let _ = write!(s, ",{x:.6e}");
            }
            if fallback {
                s.push_str(",1");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn parse_csv(text: &str, context: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header: Vec<&str> = match lines.next() {
            Some((_, h)) => h.split(',').collect(),
            None => return Err(PafaError::parse(context, 1, "empty embedding file")),
        };
        if header.len() < 5 || header[..4] != ["sample_id", "patient", "label", "split"] {
            return Err(PafaError::parse(context, 1, "expected header sample_id,patient,label,split,e0.."));
        }
        let fallback = header.last() == Some(&"encoder_fallback");
        let d = header.len() - 4 - usize::from(fallback);
        let mut rows = Vec::new();
        let mut flat = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| PafaError::parse(context, i + 1, m);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(format!("expected {} fields, found {}", header.len(), f.len())));
            }
            rows.push(SampleMeta {
                sample_id: f[0].to_string(),
                patient: PatientId(f[1].parse().map_err(|_| bad(format!("bad patient `{}`", f[1])))?),
                label: f[2].parse().map_err(|_| bad(format!("bad label `{}`", f[2])))?,
                split: f[3].parse().map_err(|_| bad(format!("bad split `{}`", f[3])))?,
                source_path: String::new(),
                cycle_start_s: 0.0,
                cycle_end_s: 0.0,
            });
            for x in &f[4..4 + d] {
                flat.push(x.parse::<f64>().map_err(|_| bad(format!("bad value `{x}`")))?);
            }
        }
        let values = Array2::from_shape_vec((rows.len(), d), flat).expect("row widths checked");
        Ok(EmbeddingTable {
            rows,
            values,
            source: if fallback {
                EmbeddingSource::EncoderFallback
            } else {
                EmbeddingSource::Projection
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PafaError::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }
}

/// Loads cached features for `rows`; rows whose cache entry is missing or unreadable are listed.
pub fn load_cached<'a>(
    rows: impl IntoIterator<Item = &'a SampleMeta>,
    cache_dir: &Path,
) -> (Vec<(&'a SampleMeta, FbankMatrix)>, Vec<String>) {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for r in rows {
        match FbankMatrix::load(&cache_path(cache_dir, &r.sample_id)) {
            Ok(f) => found.push((r, f)),
            Err(_) => missing.push(r.sample_id.clone()),
        }
    }
    (found, missing)
}

/// Projection-head embeddings for the rows of `split` (all rows if `None`).
/// Returns the table and the ids skipped for missing features.
pub fn export_embeddings(
    params: &ParamSet,
    manifest: &Manifest,
    split: Option<Split>,
    cache_dir: &Path,
) -> Result<(EmbeddingTable, Vec<String>)> {
    let rows = manifest.rows.iter().filter(|r| split.is_none_or(|s| r.split == s));
    let (found, missing) = load_cached(rows, cache_dir);
    if found.is_empty() {
        return Err(PafaError::MissingData(format!(
            "no cached features for the requested rows under {}",
            cache_dir.display()
        )));
    }
    let feats: Vec<FbankMatrix> = found.iter().map(|(_, f)| f.clone()).collect();
    let pooled = pool_batch(&feats)?;
    let out = forward_pooled(params, pooled.view())?;
    let (values, source) = match out.projection {
        Some(p) => (p, EmbeddingSource::Projection),
        None => (out.encoder_out, EmbeddingSource::EncoderFallback),
    };
    let table = EmbeddingTable {
        rows: found.into_iter().map(|(r, _)| r.clone()).collect(),
        values,
        source,
    };
    Ok((table, missing))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCentroid {
    pub name: String,
    pub values: Vec<f64>,
}

/// CSV `name,c0..c{d-1}`.
pub fn parse_reference_centroids(text: &str, context: &str) -> Result<Vec<ReferenceCentroid>> {
    let mut lines = text.lines().enumerate();
    let width = match lines.next() {
        Some((_, h)) if h.starts_with("name,") => h.split(',').count() - 1,
        _ => return Err(PafaError::parse(context, 1, "expected header name,c0..")),
    };
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width + 1 {
            return Err(PafaError::parse(context, i + 1, format!("expected {} fields", width + 1)));
        }
        let values = f[1..]
            .iter()
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| PafaError::parse(context, i + 1, format!("bad value `{x}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ReferenceCentroid {
            name: f[0].to_string(),
            values,
        });
    }
    Ok(out)
}

pub fn load_reference_centroids(path: &Path) -> Result<Vec<ReferenceCentroid>> {
    let text = std::fs::read_to_string(path).map_err(|e| PafaError::io(path, e))?;
    parse_reference_centroids(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestPatient {
    pub patient: PatientId,
    pub distance: f64,
    /// Name of the closest reference centroid.
    pub reference: String,
}

/// Ranks test patients by the distance from their centroid to the closest reference centroid.
pub fn nearest_test_patients(
    references: &[ReferenceCentroid],
    embeddings: ArrayView2<f64>,
    patients: &[PatientId],
    k: usize,
) -> Result<Vec<NearestPatient>> {
    if references.is_empty() {
        return Err(PafaError::invalid("no reference centroids given"));
    }
    if embeddings.nrows() != patients.len() {
        return Err(PafaError::invalid("embedding rows do not match patient ids"));
    }
    let d = embeddings.ncols();
    if let Some(r) = references.iter().find(|r| r.values.len() != d) {
        return Err(PafaError::invalid(format!(
            "reference `{}` has {} values, embeddings have {d}",
            r.name,
            r.values.len()
        )));
    }
    let mut sums: BTreeMap<PatientId, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, p) in embeddings.rows().into_iter().zip(patients) {
        let e = sums.entry(*p).or_insert_with(|| (vec![0.0; d], 0));
        for (acc, v) in e.0.iter_mut().zip(row) {
            *acc += v;
        }
        e.1 += 1;
    }
    if k > sums.len() {
        return Err(PafaError::invalid(format!(
            "k={k} exceeds the {} test patients available",
            sums.len()
        )));
    }
    let mut ranked: Vec<NearestPatient> = sums
        .into_iter()
        .map(|(patient, (sum, n))| {
            let centroid: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
            let (distance, reference) = references
                .iter()
                .map(|r| {
                    let d2: f64 = r.values.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2.sqrt(), &r.name)
                })
                .fold((f64::INFINITY, &references[0].name), |best, cur| {
                    if cur.0 < best.0 {
                        cur
                    } else {
                        best
                    }
                });
            NearestPatient {
                patient,
                distance,
                reference: reference.clone(),
            }
        })
        .collect();
    // sort is stable and the map iterates by ascending id, so ties keep id order
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    ranked.truncate(k);
    Ok(ranked)
}
