//! Quadratic Lyapunov stability profile: fit the positive-definite matrix P
//! so that V(s) = s'Ps decreases on as many recorded transitions as possible,
//! and verify the convex structure of that optimization executably.
//!
//! The objective sum of hinge terms is positively homogeneous in P, so the
//! open cone P > 0 alone admits no attained minimizer (P -> 0 drives the
//! objective to its infimum). Fitting therefore pins trace(P) = 6, which
//! selects a canonical scale without changing which decrease patterns are
//! achievable.

use crate::dataset::{Dataset, TransitionSample};
use crate::dynamics::State;
use crate::fmtio::{fmt_f64, meta_get, parse_f64, parse_header, short_digest};
use crate::numerics::{jacobi_eigen_sym, spectral_reconstruct, trace_product, SymMat6, Vec6, N};
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

pub const PROFILE_FORMAT: &str = "pimpcs-profile";
pub const PROFILE_VERSION: u32 = 1;

/// Fixed data partition for parallel reductions, so sums are identical for
/// any worker count.
const REDUCE_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("eps_floor must be positive, got {0}")]
    BadEpsFloor(f64),
    #[error("objective went non-finite at iteration {iteration}")]
    NonFinite { iteration: usize, iterate: Box<SymMat6> },
    #[error("eigendecomposition failed: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported profile version {found} (this build reads v{expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed profile file: {message}")]
    Malformed { message: String },
}

/// Solver knobs for the profile fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Eigenvalue floor closing the open constraint P > 0.
    pub eps_floor: f64,
    pub max_iters: usize,
    /// Step scale a in the schedule a / sqrt(t + 1).
    pub step: f64,
    /// Recorded for provenance; the descent itself is deterministic.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            eps_floor: 1e-6,
            max_iters: 2000,
            step: 0.1,
            seed: 0,
        }
    }
}

/// The fitted profile with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityProfile {
    pub p: SymMat6,
    pub eps_floor: f64,
    pub final_objective: f64,
    /// Fraction of dataset transitions with V(s_plus) > V(s) under `p`.
    pub violation_fraction: f64,
    pub iterations: usize,
    /// Objective value at every visited iterate, starting from P = I.
    pub objective_curve: Vec<f64>,
    /// Digest of the dataset the profile was fitted on.
    pub dataset_digest: String,
}

/// V(s) = s'Ps.
pub fn lyapunov_value(profile: &StabilityProfile, s: &State) -> f64 {
    profile.p.quadratic_form(&s.as_vec6())
}

fn hinge_terms(p: &SymMat6, samples: &[TransitionSample]) -> (f64, usize) {
    let mut total = 0.0;
    let mut violations = 0;
    for t in samples {
        let diff = p.quadratic_form(&t.s_plus.as_vec6()) - p.quadratic_form(&t.s.as_vec6());
        if diff > 0.0 {
            total += diff;
            violations += 1;
        }
    }
    (total, violations)
}

/// Sum over all transitions of max(V(s_plus) - V(s), 0).
pub fn profile_objective(p: &SymMat6, d: &Dataset) -> f64 {
    d.samples
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| hinge_terms(p, chunk).0)
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Fraction of transitions that violate the decrease condition under `p`.
pub fn violation_fraction(p: &SymMat6, d: &Dataset) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    let violations: usize = d
        .samples
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| hinge_terms(p, chunk).1)
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    violations as f64 / d.len() as f64
}

/// Objective plus one subgradient: each active hinge contributes
/// s_plus s_plus' - s s'. Terms exactly at the kink contribute zero.
fn objective_and_subgradient(p: &SymMat6, d: &Dataset) -> (f64, SymMat6, usize) {
    let partials: Vec<(f64, SymMat6, usize)> = d
        .samples
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut obj = 0.0;
            let mut grad = SymMat6::zeros();
            let mut violations = 0;
            for t in chunk {
                let sp = t.s_plus.as_vec6();
                let s = t.s.as_vec6();
                let diff = p.quadratic_form(&sp) - p.quadratic_form(&s);
                if diff > 0.0 {
                    obj += diff;
                    violations += 1;
                    grad = grad.add(&SymMat6::outer(&sp).sub(&SymMat6::outer(&s)));
                }
            }
            (obj, grad, violations)
        })
        .collect();
    let mut obj = 0.0;
    let mut grad = SymMat6::zeros();
    let mut violations = 0;
    for (o, g, v) in partials {
        obj += o;
        grad = grad.add(&g);
        violations += v;
    }
    (obj, grad, violations)
}

/// Projects onto {lambda_min >= eps, trace = 6}: clamp the spectrum, rescale
/// the trace, and repeat until both hold to 1e-12 (the rescale can nudge
/// clamped eigenvalues a hair below the floor, so one pass is not always
/// enough).
pub fn project_feasible(m: &SymMat6, eps: f64) -> Result<SymMat6, crate::numerics::NumericsError> {
    let target = N as f64;
    let (mut lambda, basis) = jacobi_eigen_sym(m)?;
    for _ in 0..16 {
        for v in &mut lambda.0 {
            if *v < eps {
                *v = eps;
            }
        }
        let tr: f64 = lambda.0.iter().sum();
        let scale = target / tr;
        for v in &mut lambda.0 {
            *v *= scale;
        }
        let done = lambda.0.iter().all(|v| *v >= eps - 1e-12)
            && (lambda.0.iter().sum::<f64>() - target).abs() <= 1e-12;
        if done {
            break;
        }
    }
    Ok(spectral_reconstruct(&lambda, &basis))
}

/// Projected subgradient descent from P = I with step a / sqrt(t + 1) on the
/// normalized subgradient, best-iterate tracking, and the spectral
/// projection after every step.
pub fn fit_profile(d: &Dataset, cfg: &FitConfig) -> Result<StabilityProfile, LyapunovError> {
    if d.is_empty() {
        return Err(LyapunovError::EmptyDataset);
    }
    if !(cfg.eps_floor > 0.0) {
        return Err(LyapunovError::BadEpsFloor(cfg.eps_floor));
    }

    let mut p = project_feasible(&SymMat6::identity(), cfg.eps_floor)?;
    let mut best_p = p;
    let mut best_obj = f64::INFINITY;
    let mut curve = Vec::with_capacity(cfg.max_iters + 1);
    let mut iterations = 0;

    for iter in 0..=cfg.max_iters {
        let (obj, grad, _violations) = objective_and_subgradient(&p, d);
        if !obj.is_finite() {
            return Err(LyapunovError::NonFinite {
                iteration: iter,
                iterate: Box::new(p),
            });
        }
        curve.push(obj);
        if obj < best_obj {
            best_obj = obj;
            best_p = p;
        }
        if iter == cfg.max_iters || obj == 0.0 {
            iterations = iter;
            break;
        }
        let gnorm = grad.frobenius_norm();
        if gnorm == 0.0 {
            iterations = iter;
            break;
        }
        let alpha = cfg.step / ((iter + 1) as f64).sqrt();
        let stepped = p.sub(&grad.scale(alpha / gnorm));
        p = project_feasible(&stepped, cfg.eps_floor)?;
        iterations = iter + 1;
    }

    Ok(StabilityProfile {
        p: best_p,
        eps_floor: cfg.eps_floor,
        final_objective: best_obj,
        violation_fraction: violation_fraction(&best_p, d),
        iterations,
        objective_curve: curve,
        dataset_digest: d.digest(),
    })
}

/// Executable check of the Tr(CP) reformulation: over a subset restricted to
/// violating transitions, the direct hinge sum must equal the trace form with
/// C = sum(s_plus s_plus' - s s').
pub fn trace_reform_check(subset: &[TransitionSample], p: &SymMat6) -> (f64, f64) {
    let mut lhs = 0.0;
    let mut c = SymMat6::zeros();
    for t in subset {
        let sp = t.s_plus.as_vec6();
        let s = t.s.as_vec6();
        lhs += p.quadratic_form(&sp) - p.quadratic_form(&s);
        c = c.add(&SymMat6::outer(&sp)).sub(&SymMat6::outer(&s));
    }
    (lhs, trace_product(&c, p))
}

impl StabilityProfile {
    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "# {PROFILE_FORMAT} v{PROFILE_VERSION}; eps={}; objective={}; violations={}; iterations={}; dataset={}\n",
            fmt_f64(self.eps_floor),
            fmt_f64(self.final_objective),
            fmt_f64(self.violation_fraction),
            self.iterations,
            self.dataset_digest,
        );
        for i in 0..N {
            let row: Vec<String> = (0..N).map(|j| fmt_f64(self.p.get(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Short provenance digest of the serialized profile.
    pub fn digest(&self) -> String {
        short_digest(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), LyapunovError> {
        std::fs::write(path, self.to_file_string()).map_err(|source| LyapunovError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<StabilityProfile, LyapunovError> {
        let text = std::fs::read_to_string(path).map_err(|source| LyapunovError::Io {
            path: path.display().to_string(),
            source,
        })?;
        StabilityProfile::from_file_string(&text)
    }

    pub fn from_file_string(text: &str) -> Result<StabilityProfile, LyapunovError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| LyapunovError::Malformed {
            message: "empty file".to_string(),
        })?;
        let (version, meta) = parse_header(header, PROFILE_FORMAT)
            .map_err(|message| LyapunovError::Malformed { message })?;
        if version != PROFILE_VERSION {
            return Err(LyapunovError::VersionMismatch {
                found: version,
                expected: PROFILE_VERSION,
            });
        }
        let getf = |key: &str| {
            meta_get(&meta, key)
                .and_then(parse_f64)
                .map_err(|message| LyapunovError::Malformed { message })
        };
        let mut rows = [[0.0; N]; N];
        for (i, row) in rows.iter_mut().enumerate() {
            let line = lines.next().ok_or_else(|| LyapunovError::Malformed {
                message: format!("missing matrix row {}", i + 1),
            })?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != N {
                return Err(LyapunovError::Malformed {
                    message: format!("row {} has {} entries, expected {N}", i + 1, fields.len()),
                });
            }
            for (slot, field) in row.iter_mut().zip(fields) {
                *slot = parse_f64(field).map_err(|message| LyapunovError::Malformed { message })?;
            }
        }
        let p = SymMat6::from_rows(rows).map_err(|e| LyapunovError::Malformed {
            message: e.to_string(),
        })?;
        Ok(StabilityProfile {
            p,
            eps_floor: getf("eps")?,
            final_objective: getf("objective")?,
            violation_fraction: getf("violations")?,
            iterations: meta_get(&meta, "iterations")
                .map_err(|message| LyapunovError::Malformed { message })?
                .parse()
                .map_err(|_| LyapunovError::Malformed {
                    message: "iterations must be an integer".to_string(),
                })?,
            objective_curve: Vec::new(),
            dataset_digest: meta_get(&meta, "dataset")
                .map(str::to_string)
                .map_err(|message| LyapunovError::Malformed { message })?,
        })
    }
}

/// Test and diagnostic helper: builds a dataset from raw transition pairs.
pub fn dataset_from_pairs(pairs: &[(Vec6, Vec6)]) -> Dataset {
    use crate::dataset::DatasetMeta;
    use crate::dynamics::Control;
    let samples = pairs
        .iter()
        .enumerate()
        .map(|(i, (s, sp))| TransitionSample {
            traj_id: 0,
            k: i as u32,
            s: State::from_vec6(s),
            u_c: Control::zero(),
            s_plus: State::from_vec6(sp),
        })
        .collect();
    Dataset {
        samples,
        meta: DatasetMeta {
            control_dt: 0.05,
            duration: 0.0,
            plant_digest: "-".to_string(),
            seed: 0,
        },
    }
}
