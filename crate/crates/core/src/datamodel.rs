//! Domain types shared across the crate: labels, patients, manifests.
//!
//! Class indices are fixed to `(Normal, Crackle, Wheeze, Both)` everywhere,
//! so confusion matrices and serialized files are stable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{PafaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel4 {
    Normal,
    Crackle,
    Wheeze,
    Both,
}

impl ClassLabel4 {
    pub const ALL: [ClassLabel4; 4] = [
        ClassLabel4::Normal,
        ClassLabel4::Crackle,
        ClassLabel4::Wheeze,
        ClassLabel4::Both,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel4::Normal => "normal",
            ClassLabel4::Crackle => "crackle",
            ClassLabel4::Wheeze => "wheeze",
            ClassLabel4::Both => "both",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self != ClassLabel4::Normal
    }
}

impl fmt::Display for ClassLabel4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel4 {
    type Err = PafaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ClassLabel4::Normal),
            "crackle" => Ok(ClassLabel4::Crackle),
            "wheeze" => Ok(ClassLabel4::Wheeze),
            "both" => Ok(ClassLabel4::Both),
            other => Err(PafaError::invalid(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel2 {
    Normal,
    Abnormal,
}

impl ClassLabel2 {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// ICBHI annotation convention: one crackle bit and one wheeze bit per cycle.
pub fn label_from_bits(crackle: bool, wheeze: bool) -> ClassLabel4 {
    match (crackle, wheeze) {
        (false, false) => ClassLabel4::Normal,
        (true, false) => ClassLabel4::Crackle,
        (false, true) => ClassLabel4::Wheeze,
        (true, true) => ClassLabel4::Both,
    }
}

pub fn map_4to2(label: ClassLabel4) -> ClassLabel2 {
    if label.is_abnormal() {
        ClassLabel2::Abnormal
    } else {
        ClassLabel2::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatientId(pub u32);

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = PafaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(PafaError::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub sample_id: String,
    pub patient: PatientId,
    pub label: ClassLabel4,
    pub split: Split,
    pub source_path: String,
    pub cycle_start_s: f64,
    pub cycle_end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Icbhi,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Icbhi => "icbhi",
            Provenance::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<SampleMeta>,
    pub provenance: Provenance,
}

pub const MANIFEST_HEADER: [&str; 7] = [
    "sample_id",
    "patient",
    "label",
    "split",
    "source_path",
    "cycle_start_s",
    "cycle_end_s",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub subject: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule, self.subject)
    }
}

/// Violations make a manifest invalid; warnings do not.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_manifest(m: &Manifest) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut seen = HashSet::new();
    for row in &m.rows {
        if !seen.insert(row.sample_id.as_str()) {
            report.violations.push(Violation {
                rule: "unique-sample-id",
                subject: row.sample_id.clone(),
            });
        }
        if !(row.cycle_start_s >= 0.0 && row.cycle_end_s > row.cycle_start_s) {
            report.violations.push(Violation {
                rule: "cycle-interval",
                subject: row.sample_id.clone(),
            });
        }
    }

    let mut splits: BTreeMap<PatientId, (bool, bool)> = BTreeMap::new();
    for row in &m.rows {
        let entry = splits.entry(row.patient).or_default();
        match row.split {
            Split::Train => entry.0 = true,
            Split::Test => entry.1 = true,
        }
    }
    for (patient, (train, test)) in splits {
        if train && test {
            let v = Violation {
                rule: "subject-disjoint",
                subject: format!("patient {patient}"),
            };
            // The official ICBHI split is recording-based and trusted as-is.
            match m.provenance {
                Provenance::Icbhi => report.warnings.push(v),
                Provenance::Synthetic => report.violations.push(v),
            }
        }
    }
    report
}

impl Manifest {
    pub fn new(rows: Vec<SampleMeta>, provenance: Provenance) -> Self {
        Manifest { rows, provenance }
    }

    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = &SampleMeta> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn class_counts(&self, split: Split) -> [usize; 4] {
        let mut counts = [0; 4];
        for row in self.split_rows(split) {
            counts[row.label.index()] += 1;
        }
        counts
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.sample_id.as_str(), i))
            .collect()
    }

    /// Writes the CSV form. The provenance travels in a leading `#` comment line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# provenance={}", self.provenance.as_str())
            .map_err(|e| PafaError::io("<manifest>", e))?;
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| PafaError::invalid(format!("manifest write: {e}"));
        w.write_record(MANIFEST_HEADER).map_err(to_err)?;
        for r in &self.rows {
            w.write_record([
                r.sample_id.as_str(),
                &r.patient.to_string(),
                r.label.as_str(),
                r.split.as_str(),
                r.source_path.as_str(),
                &format!("{:?}", r.cycle_start_s),
                &format!("{:?}", r.cycle_end_s),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| PafaError::io("<manifest>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("manifest is utf-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut text = String::new();
        let mut input = input;
        input
            .read_to_string(&mut text)
            .map_err(|e| PafaError::io("<manifest>", e))?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut provenance = Provenance::Synthetic;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            match line.trim_start_matches('#').trim() {
                "provenance=icbhi" => provenance = Provenance::Icbhi,
                "provenance=synthetic" => provenance = Provenance::Synthetic,
                _ => {}
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| PafaError::parse("manifest", 1, e.to_string()))?;
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(PafaError::parse(
                "manifest",
                1,
                format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(",")),
            ));
        }

        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                PafaError::parse("manifest", line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let field = |i: usize| record.get(i).unwrap_or_default();
            let bad = |m: String| PafaError::parse("manifest", line, m);
            let patient = field(1)
                .parse::<u32>()
                .map_err(|_| bad(format!("bad patient id `{}`", field(1))))?;
            let parse_s = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("bad seconds `{s}`")))
            };
            rows.push(SampleMeta {
                sample_id: field(0).to_string(),
                patient: PatientId(patient),
                label: field(2).parse().map_err(|e: PafaError| bad(e.to_string()))?,
                split: field(3).parse().map_err(|e: PafaError| bad(e.to_string()))?,
                source_path: field(4).to_string(),
                cycle_start_s: parse_s(field(5))?,
                cycle_end_s: parse_s(field(6))?,
            });
        }
        Ok(Manifest { rows, provenance })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PafaError::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| PafaError::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv_string()).map_err(|e| PafaError::io(path, e))
    }
}
