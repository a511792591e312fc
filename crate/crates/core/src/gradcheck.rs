//! Central-difference verification of the patient-loss gradient.

use std::fmt;

use ndarray::Array2;
use rand::Rng;

use crate::datamodel::PatientId;
use crate::error::Result;
use crate::losses::{gpal_forward, patient_loss_backward, pcsl_forward, LossWeights, PatientGroups};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

fn objective(z: &Array2<f64>, g: &PatientGroups, w: &LossWeights) -> Result<f64> {
    let pcsl = pcsl_forward(z.view(), g, w.epsilon)?.pcsl;
    let gpal = gpal_forward(z.view(), g)?.gpal;
    Ok(w.lambda_pcsl * pcsl + w.lambda_gpal * gpal)
}

/// Relative error with denominator `max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares the analytic gradient with `(f(z+h) - f(z-h)) / 2h` on every coordinate.
pub fn finite_diff_check(
    z: &Array2<f64>,
    g: &PatientGroups,
    w: &LossWeights,
    h: f64,
) -> Result<CoordinateCheck> {
    let analytic = patient_loss_backward(z.view(), g, w)?;
    let mut probe = z.clone();
    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for idx in 0..z.len() {
        let (r, c) = (idx / z.ncols(), idx % z.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = objective(&probe, g, w)?;
        probe[[r, c]] = orig - h;
        let down = objective(&probe, g, w)?;
        probe[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[[r, c]];
        max_rel_err = max_rel_err.max(relative_error(a, numeric));
        max_abs_err = max_abs_err.max((a - numeric).abs());
    }
    Ok(CoordinateCheck {
        max_rel_err,
        max_abs_err,
    })
}

/// Random `batch x dim` embeddings in `[-1, 1)` with `patients` distinct ids, each used at least once.
pub fn random_batch<R: Rng>(
    rng: &mut R,
    batch: usize,
    dim: usize,
    patients: usize,
) -> (Array2<f64>, PatientGroups) {
    assert!(patients >= 1 && patients <= batch);
    let z = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-1.0..1.0));
    let mut ids: Vec<u32> = (0..batch)
        .map(|i| {
            if i < patients {
                i as u32
            } else {
                rng.random_range(0..patients as u32)
            }
        })
        .collect();
    // Fisher-Yates so the guaranteed rows are not always first.
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let g = PatientGroups::from_assignment(ids.into_iter().map(PatientId).collect())
        .expect("non-empty batch");
    (z, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckTrial {
    pub trial: usize,
    pub batch: usize,
    pub patients: usize,
    pub dim: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub trials: Vec<GradcheckTrial>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.trials.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.trials.iter().all(|t| t.max_rel_err <= self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trial, B, |P|, d, max_rel_err")?;
        for t in &self.trials {
            writeln!(
                f,
                "{}, {}, {}, {}, {:.3e}",
                t.trial, t.batch, t.patients, t.dim, t.max_rel_err
            )?;
        }
        write!(
            f,
            "{} tol={:e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckSettings {
    pub trials: usize,
    pub batch: usize,
    pub dim: usize,
    pub min_patients: usize,
    pub max_patients: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            trials: 100,
            batch: 16,
            dim: 8,
            min_patients: 2,
            max_patients: 6,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

pub fn run_gradcheck<R: Rng>(
    rng: &mut R,
    settings: &GradcheckSettings,
    w: &LossWeights,
) -> Result<GradcheckReport> {
    let mut trials = Vec::with_capacity(settings.trials);
    let max_p = settings.max_patients.min(settings.batch);
    let min_p = settings.min_patients.clamp(1, max_p);
    for trial in 0..settings.trials {
        let patients = rng.random_range(min_p..=max_p);
        let (z, g) = random_batch(rng, settings.batch, settings.dim, patients);
        let check = finite_diff_check(&z, &g, w, settings.step)?;
        trials.push(GradcheckTrial {
            trial,
            batch: settings.batch,
            patients,
            dim: settings.dim,
            max_rel_err: check.max_rel_err,
        });
    }
    Ok(GradcheckReport {
        trials,
        tolerance: settings.tolerance,
    })
}
