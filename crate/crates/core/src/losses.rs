//! Patient-aware losses on projection-head embeddings.
//!
//! * PCSL: within-patient scatter over between-patient centroid scatter,
//!   `S_W / (S_B + eps)`.
//! * GPAL: mean squared distance of patient centroids to their unweighted mean.
//!
//! `S_B` sums over ordered patient pairs, so each unordered pair counts twice.
//! Batches with fewer than two patients yield zero PCSL and zero gradient.
//! Everything here runs in `f64` whatever precision the model uses.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::datamodel::PatientId;
use crate::error::{PafaError, Result};

pub const DEFAULT_LAMBDA_PCSL: f64 = 50.0;
pub const DEFAULT_LAMBDA_GPAL: f64 = 0.0005;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_pcsl: f64,
    pub lambda_gpal: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pcsl: DEFAULT_LAMBDA_PCSL,
            lambda_gpal: DEFAULT_LAMBDA_GPAL,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_pcsl: f64, lambda_gpal: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !(lambda_pcsl >= 0.0) || !(lambda_gpal >= 0.0) {
            return Err(PafaError::invalid(format!(
                "loss weights must be non-negative with epsilon > 0 \
                 (got pcsl={lambda_pcsl}, gpal={lambda_gpal}, eps={epsilon})"
            )));
        }
        Ok(LossWeights {
            lambda_pcsl,
            lambda_gpal,
            epsilon,
        })
    }
}

/// Batch rows grouped by patient. Patients are ordered by first occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientGroups {
    assignment: Vec<PatientId>,
    patients: Vec<PatientId>,
    members: Vec<Vec<usize>>,
}

impl PatientGroups {
    pub fn from_assignment(assignment: Vec<PatientId>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(PafaError::invalid("patient assignment is empty"));
        }
        let mut patients: Vec<PatientId> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (row, patient) in assignment.iter().enumerate() {
            match patients.iter().position(|p| p == patient) {
                Some(slot) => members[slot].push(row),
                None => {
                    patients.push(*patient);
                    members.push(vec![row]);
                }
            }
        }
        Ok(PatientGroups {
            assignment,
            patients,
            members,
        })
    }

    pub fn batch_len(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn patients(&self) -> &[PatientId] {
        &self.patients
    }

    pub fn assignment(&self) -> &[PatientId] {
        &self.assignment
    }

    /// Row indices of each patient, aligned with [`PatientGroups::patients`].
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    fn check(&self, z: &ArrayView2<f64>) -> Result<()> {
        if z.nrows() != self.batch_len() {
            return Err(PafaError::invalid(format!(
                "embedding batch has {} rows but {} patient assignments",
                z.nrows(),
                self.batch_len()
            )));
        }
        if z.ncols() == 0 {
            return Err(PafaError::invalid("embedding dimension is zero"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(PafaError::Numeric("non-finite embedding".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `|P| x d`, one row per patient in first-occurrence order.
    pub means: Array2<f64>,
    pub counts: Vec<usize>,
}

pub fn patient_centroids(z: ArrayView2<f64>, g: &PatientGroups) -> Result<Centroids> {
    g.check(&z)?;
    Ok(centroids_unchecked(&z, g))
}

fn centroids_unchecked(z: &ArrayView2<f64>, g: &PatientGroups) -> Centroids {
    let mut means = Array2::zeros((g.n_patients(), z.ncols()));
    let mut counts = Vec::with_capacity(g.n_patients());
    for (slot, rows) in g.members.iter().enumerate() {
        let mut mean = means.row_mut(slot);
        for &i in rows {
            mean += &z.row(i);
        }
        mean /= rows.len() as f64;
        counts.push(rows.len());
    }
    Centroids { means, counts }
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcslValue {
    pub pcsl: f64,
    pub s_w: f64,
    pub s_b: f64,
    /// Set when the batch holds fewer than two patients.
    pub degenerate: bool,
}

fn scatter(z: &ArrayView2<f64>, g: &PatientGroups, c: &Centroids) -> (f64, f64) {
    let mut s_w = 0.0;
    for (slot, rows) in g.members.iter().enumerate() {
        let mu = c.means.row(slot);
        for &i in rows {
            s_w += squared_distance(z.row(i), mu);
        }
    }
    let mut s_b = 0.0;
    let n = g.n_patients();
    for p in 0..n {
        for q in 0..n {
            if p != q {
                s_b += squared_distance(c.means.row(p), c.means.row(q));
            }
        }
    }
    (s_w, s_b)
}

fn pcsl_from_scatter(s_w: f64, s_b: f64, n_patients: usize, epsilon: f64) -> PcslValue {
    if n_patients < 2 {
        return PcslValue {
            pcsl: 0.0,
            s_w,
            s_b,
            degenerate: true,
        };
    }
    PcslValue {
        pcsl: s_w / (s_b + epsilon),
        s_w,
        s_b,
        degenerate: false,
    }
}

pub fn pcsl_forward(z: ArrayView2<f64>, g: &PatientGroups, epsilon: f64) -> Result<PcslValue> {
    g.check(&z)?;
    let c = centroids_unchecked(&z, g);
    let (s_w, s_b) = scatter(&z, g, &c);
    Ok(pcsl_from_scatter(s_w, s_b, g.n_patients(), epsilon))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpalValue {
    pub gpal: f64,
    pub global_centroid: Array1<f64>,
}

fn gpal_from_centroids(c: &Centroids) -> GpalValue {
    let n = c.means.nrows() as f64;
    let global_centroid = c.means.sum_axis(Axis(0)) / n;
    let gpal = c
        .means
        .rows()
        .into_iter()
        .map(|mu| squared_distance(mu, global_centroid.view()))
        .sum::<f64>()
        / n;
    GpalValue {
        gpal,
        global_centroid,
    }
}

pub fn gpal_forward(z: ArrayView2<f64>, g: &PatientGroups) -> Result<GpalValue> {
    g.check(&z)?;
    Ok(gpal_from_centroids(&centroids_unchecked(&z, g)))
}

pub fn total_loss(ce: f64, pcsl: f64, gpal: f64, w: &LossWeights) -> f64 {
    ce + w.lambda_pcsl * pcsl + w.lambda_gpal * gpal
}

fn backward_unchecked(
    z: &ArrayView2<f64>,
    g: &PatientGroups,
    w: &LossWeights,
    c: &Centroids,
    pcsl: &PcslValue,
    global_centroid: &Array1<f64>,
) -> Array2<f64> {
    let mut grad = Array2::zeros(z.raw_dim());
    let n_p = g.n_patients();
    if n_p < 2 {
        // One patient: PCSL is guarded and GPAL is identically zero.
        return grad;
    }
    let n_p = n_p as f64;
    let denom = pcsl.s_b + w.epsilon;
    // d pcsl = dS_W / denom - S_W dS_B / denom^2
    let coef_w = w.lambda_pcsl / denom;
    let coef_b = w.lambda_pcsl * pcsl.s_w / (denom * denom);
    for (slot, rows) in g.members.iter().enumerate() {
        let mu = c.means.row(slot);
        let n_rows = rows.len() as f64;
        // dS_B/dz_i = 4|P| (mu_p - mu_G) / N_p ; dgpal/dz_i = 2 (mu_p - mu_G) / (|P| N_p)
        let offset = &mu - global_centroid;
        let shared = &offset * (-coef_b * 4.0 * n_p / n_rows + w.lambda_gpal * 2.0 / (n_p * n_rows));
        for &i in rows {
            let mut out = grad.row_mut(i);
            // dS_W/dz_i = 2 (z_i - mu_p); the centroid's own dependence sums to zero.
            out.assign(&((&z.row(i) - &mu) * (2.0 * coef_w)));
            out += &shared;
        }
    }
    grad
}

/// Gradient of `lambda_pcsl * pcsl + lambda_gpal * gpal` with respect to the embeddings.
pub fn patient_loss_backward(
    z: ArrayView2<f64>,
    g: &PatientGroups,
    w: &LossWeights,
) -> Result<Array2<f64>> {
    g.check(&z)?;
    let c = centroids_unchecked(&z, g);
    let (s_w, s_b) = scatter(&z, g, &c);
    let pcsl = pcsl_from_scatter(s_w, s_b, g.n_patients(), w.epsilon);
    let gpal = gpal_from_centroids(&c);
    Ok(backward_unchecked(
        &z,
        g,
        w,
        &c,
        &pcsl,
        &gpal.global_centroid,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub ce: f64,
    pub pcsl: f64,
    pub gpal: f64,
    pub total: f64,
    pub s_w: f64,
    pub s_b: f64,
    pub degenerate: bool,
    pub centroids: Array2<f64>,
    pub global_centroid: Array1<f64>,
    pub grad_z: Array2<f64>,
}

/// Evaluates both patient losses, the weighted total and the embedding gradient in one pass.
pub fn loss_bundle(
    ce: f64,
    z: ArrayView2<f64>,
    g: &PatientGroups,
    w: &LossWeights,
) -> Result<LossBundle> {
    g.check(&z)?;
    let c = centroids_unchecked(&z, g);
    let (s_w, s_b) = scatter(&z, g, &c);
    let pcsl = pcsl_from_scatter(s_w, s_b, g.n_patients(), w.epsilon);
    let gpal = gpal_from_centroids(&c);
    let grad_z = backward_unchecked(&z, g, w, &c, &pcsl, &gpal.global_centroid);
    Ok(LossBundle {
        ce,
        pcsl: pcsl.pcsl,
        gpal: gpal.gpal,
        total: total_loss(ce, pcsl.pcsl, gpal.gpal, w),
        s_w,
        s_b,
        degenerate: pcsl.degenerate,
        centroids: c.means,
        global_centroid: gpal.global_centroid,
        grad_z,
    })
}
