//! Reference-trajectory collection and the auxiliary state set.
//!
//! Generation sweeps a grid of initial hover positions, flies each one with a
//! fresh warm-starting MPC, and records (s, u_c, s_plus) tuples at the
//! control rate. The stored control is the controller term only; the
//! equilibrium and stabilizer thrusts are reconstructed from the plant
//! parameters, whose digest travels in the file header.

use crate::dynamics::{simulate, Control, PlantParams, State, Trajectory};
use crate::evaluate::classify_landing;
use crate::fmtio::{fmt_f64, meta_get, parse_f64, parse_header, sha256_hex};
use crate::mpc::{mpc_controller, MpcConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

pub const DATASET_FORMAT: &str = "pimpcs-dataset";
pub const AUX_FORMAT: &str = "pimpcs-aux";
pub const FORMAT_VERSION: u32 = 1;

const DATASET_COLUMNS: &str =
    "traj_id,k,x,y,theta,xdot,ydot,thetadot,ucr,ucl,xp,yp,thetap,xdotp,ydotp,thetadotp";
const AUX_COLUMNS: &str = "x,y,theta,xdot,ydot,thetadot";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported {kind} version {found} (this build reads v{expected})")]
    VersionMismatch {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("malformed header: {message}")]
    BadHeader { message: String },
    #[error("malformed row at line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("checksum mismatch: file body hashes to {actual} but header claims {claimed}")]
    ChecksumMismatch { claimed: String, actual: String },
    #[error("file ends without a `# sha256=` trailer (truncated?)")]
    MissingChecksum,
    #[error("dataset is empty")]
    Empty,
    #[error("simulation failed on trajectory {traj_id}: {message}")]
    Simulation { traj_id: u32, message: String },
}

/// One observed control tick of a reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSample {
    pub traj_id: u32,
    /// Control tick index, strictly increasing within a trajectory.
    pub k: u32,
    pub s: State,
    /// Controller term only, excluding the equilibrium and stabilizer parts.
    pub u_c: Control,
    pub s_plus: State,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub control_dt: f64,
    pub duration: f64,
    pub plant_digest: String,
    pub seed: u64,
}

/// The reference collection D.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TransitionSample>,
    pub meta: DatasetMeta,
}

/// Grid specification for reference generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub duration: f64,
    pub control_dt: f64,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for GridSpec {
    /// 21 x 13 points at 0.25 m spacing over the initial hover box, the only
    /// integer grid that covers it with round spacing and 273 cells.
    fn default() -> Self {
        GridSpec {
            nx: 21,
            ny: 13,
            x_min: -2.5,
            x_max: 2.5,
            y_min: 3.5,
            y_max: 6.5,
            duration: 15.0,
            control_dt: 0.05,
            substeps: 5,
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.nx == 0 || self.ny == 0 {
            return Err("grid must have at least one cell per axis".to_string());
        }
        if !(self.x_min <= self.x_max && self.y_min <= self.y_max) {
            return Err("grid ranges must be ordered min <= max".to_string());
        }
        if !(self.control_dt > 0.0 && self.duration > 0.0) {
            return Err("duration and control_dt must be positive".to_string());
        }
        if self.substeps == 0 {
            return Err("substeps must be >= 1".to_string());
        }
        Ok(())
    }

    fn axis(&self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Initial states, x-major and in ascending axis order.
    pub fn initial_states(&self) -> Vec<State> {
        let xs = self.axis(self.nx, self.x_min, self.x_max);
        let ys = self.axis(self.ny, self.y_min, self.y_max);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for &x in &xs {
            for &y in &ys {
                out.push(State::new(x, y, 0.0, 0.0, 0.0, 0.0));
            }
        }
        out
    }
}

/// Per-generation warning manifest: trajectory ids that did not satisfy the
/// landing success criterion.
#[derive(Debug, Clone, Default)]
pub struct GenerationReport {
    pub flagged: Vec<u32>,
}

/// Flies the MPC from every grid point and collects the transition tuples.
/// Trajectories run in parallel; the sample order is the deterministic
/// x-major grid order regardless of worker count.
pub fn generate_reference(
    grid: &GridSpec,
    mpc_cfg: &MpcConfig,
    plant: &PlantParams,
) -> Result<(Dataset, GenerationReport), DatasetError> {
    let starts = grid.initial_states();
    let results: Vec<Result<(Trajectory, bool), DatasetError>> = starts
        .par_iter()
        .enumerate()
        .map(|(id, s0)| {
            let mut policy = mpc_controller(mpc_cfg, plant);
            let traj = simulate(
                s0,
                &mut policy,
                grid.duration,
                grid.control_dt,
                grid.substeps,
                plant,
            )
            .map_err(|e| DatasetError::Simulation {
                traj_id: id as u32,
                message: e.to_string(),
            })?;
            let verdict = classify_landing(&traj).map_err(|e| DatasetError::Simulation {
                traj_id: id as u32,
                message: e.to_string(),
            })?;
            Ok((traj, verdict.success))
        })
        .collect();

    let mut samples = Vec::new();
    let mut report = GenerationReport::default();
    for (id, result) in results.into_iter().enumerate() {
        let (traj, success) = result?;
        if !success {
            report.flagged.push(id as u32);
        }
        for (k, step) in traj.steps.iter().enumerate() {
            samples.push(TransitionSample {
                traj_id: id as u32,
                k: k as u32,
                s: step.state,
                u_c: step.control_term,
                s_plus: step.next_state,
            });
        }
    }
    let dataset = Dataset {
        samples,
        meta: DatasetMeta {
            control_dt: grid.control_dt,
            duration: grid.duration,
            plant_digest: plant.digest(),
            seed: grid.seed,
        },
    };
    Ok((dataset, report))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_trajectories(&self) -> usize {
        self.samples
            .iter()
            .map(|t| t.traj_id)
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    /// Component-wise closed bounding box over every recorded state
    /// (both s and s_plus).
    pub fn state_bounds(&self) -> Option<([f64; 6], [f64; 6])> {
        if self.samples.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 6];
        let mut hi = [f64::NEG_INFINITY; 6];
        for t in &self.samples {
            for sv in [t.s.as_vec6(), t.s_plus.as_vec6()] {
                for i in 0..6 {
                    lo[i] = lo[i].min(sv.0[i]);
                    hi[i] = hi[i].max(sv.0[i]);
                }
            }
        }
        Some((lo, hi))
    }

    /// Serialized file image, checksum trailer included.
    pub fn to_file_string(&self) -> String {
        let mut body = String::with_capacity(self.samples.len() * 200 + 256);
        body.push_str(&format!(
            "# {DATASET_FORMAT} v{FORMAT_VERSION}; control_dt={}; duration={}; plant={}; seed={}\n",
            fmt_f64(self.meta.control_dt),
            fmt_f64(self.meta.duration),
            self.meta.plant_digest,
            self.meta.seed
        ));
        body.push_str(DATASET_COLUMNS);
        body.push('\n');
        for t in &self.samples {
            let sv = t.s.as_vec6();
            let pv = t.s_plus.as_vec6();
            body.push_str(&format!("{},{}", t.traj_id, t.k));
            for v in sv.0 {
                body.push(',');
                body.push_str(&fmt_f64(v));
            }
            body.push(',');
            body.push_str(&fmt_f64(t.u_c.u_r));
            body.push(',');
            body.push_str(&fmt_f64(t.u_c.u_l));
            for v in pv.0 {
                body.push(',');
                body.push_str(&fmt_f64(v));
            }
            body.push('\n');
        }
        let digest = sha256_hex(body.as_bytes());
        format!("{body}# sha256={digest}\n")
    }

    /// Full SHA-256 of the serialized file image; the provenance identity of
    /// this dataset.
    pub fn digest(&self) -> String {
        let text = self.to_file_string();
        let line_start = text.rfind("# sha256=").unwrap();
        text[line_start + 9..].trim().to_string()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_file_string()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Dataset::from_file_string(&text)
    }

    pub fn from_file_string(text: &str) -> Result<Dataset, DatasetError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatasetError::Empty)?;
        let (version, meta_kv) = parse_header(header, DATASET_FORMAT)
            .map_err(|message| DatasetError::BadHeader { message })?;
        if version != FORMAT_VERSION {
            return Err(DatasetError::VersionMismatch {
                kind: "dataset",
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta = DatasetMeta {
            control_dt: meta_get(&meta_kv, "control_dt")
                .and_then(parse_f64)
                .map_err(|message| DatasetError::BadHeader { message })?,
            duration: meta_get(&meta_kv, "duration")
                .and_then(parse_f64)
                .map_err(|message| DatasetError::BadHeader { message })?,
            plant_digest: meta_get(&meta_kv, "plant")
                .map(str::to_string)
                .map_err(|message| DatasetError::BadHeader { message })?,
            seed: meta_get(&meta_kv, "seed")
                .map_err(|message| DatasetError::BadHeader { message })?
                .parse()
                .map_err(|_| DatasetError::BadHeader {
                    message: "seed must be an integer".to_string(),
                })?,
        };

        let (line_no, columns) = lines.next().ok_or(DatasetError::MissingChecksum)?;
        if columns != DATASET_COLUMNS {
            return Err(DatasetError::MalformedRow {
                line: line_no + 1,
                message: format!("unexpected column header {columns:?}"),
            });
        }

        let mut samples = Vec::new();
        let mut checksum: Option<String> = None;
        for (idx, line) in lines {
            if let Some(rest) = line.strip_prefix("# sha256=") {
                checksum = Some(rest.trim().to_string());
                break;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 16 {
                return Err(DatasetError::MalformedRow {
                    line: idx + 1,
                    message: format!("expected 16 fields, found {}", fields.len()),
                });
            }
            let mut nums = [0.0f64; 14];
            for (slot, field) in nums.iter_mut().zip(&fields[2..]) {
                *slot = parse_f64(field).map_err(|message| DatasetError::MalformedRow {
                    line: idx + 1,
                    message,
                })?;
            }
            let int_field = |f: &str| {
                f.trim()
                    .parse::<u32>()
                    .map_err(|_| DatasetError::MalformedRow {
                        line: idx + 1,
                        message: format!("bad integer {f:?}"),
                    })
            };
            samples.push(TransitionSample {
                traj_id: int_field(fields[0])?,
                k: int_field(fields[1])?,
                s: State::new(nums[0], nums[1], nums[2], nums[3], nums[4], nums[5]),
                u_c: Control::new(nums[6], nums[7]),
                s_plus: State::new(nums[8], nums[9], nums[10], nums[11], nums[12], nums[13]),
            });
        }
        let claimed = checksum.ok_or(DatasetError::MissingChecksum)?;
        let body_end = text
            .rfind("# sha256=")
            .expect("checksum line located above");
        let actual = sha256_hex(&text.as_bytes()[..body_end]);
        if actual != claimed {
            return Err(DatasetError::ChecksumMismatch { claimed, actual });
        }
        Ok(Dataset { samples, meta })
    }
}

/// Approximate in-distribution test: membership in the per-dimension closed
/// bounding box of the recorded states. Exact hull membership in six
/// dimensions is deliberately out of scope.
pub fn in_distribution(s: &State, d: &Dataset) -> bool {
    match d.state_bounds() {
        None => false,
        Some((lo, hi)) => {
            let sv = s.as_vec6();
            (0..6).all(|i| sv.0[i] >= lo[i] && sv.0[i] <= hi[i])
        }
    }
}

/// The near-origin feasibility box: the landing-pad footprint with small
/// tilt and rate margins.
pub const ORIGIN_BOX: [(f64, f64); 6] = [
    (-0.5, 0.5),
    (0.0, 0.5),
    (-0.2, 0.2),
    (-0.5, 0.5),
    (-0.5, 0.5),
    (-0.5, 0.5),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AuxMeta {
    pub n_box: usize,
    pub n_origin: usize,
    pub seed: u64,
    pub dataset_digest: String,
}

/// Auxiliary states augmenting the state-only losses: half sampled from the
/// bounding box of D (uniform sampling naturally over-weights its low-density
/// volumes), half from the near-origin box.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxSet {
    pub states: Vec<State>,
    pub meta: AuxMeta,
}

pub fn sample_auxiliary(d: &Dataset, n_total: usize, seed: u64) -> Result<AuxSet, DatasetError> {
    if d.is_empty() {
        return Err(DatasetError::Empty);
    }
    let n_box = n_total / 2;
    let n_origin = n_total - n_box;
    let (lo, hi) = d.state_bounds().expect("non-empty dataset has bounds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(n_total);
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    };
    for _ in 0..n_box {
        let mut v = [0.0; 6];
        for i in 0..6 {
            v[i] = draw(&mut rng, lo[i], hi[i]);
        }
        states.push(State::new(v[0], v[1], v[2], v[3], v[4], v[5]));
    }
    for _ in 0..n_origin {
        let mut v = [0.0; 6];
        for (i, item) in v.iter_mut().enumerate() {
            *item = draw(&mut rng, ORIGIN_BOX[i].0, ORIGIN_BOX[i].1);
        }
        states.push(State::new(v[0], v[1], v[2], v[3], v[4], v[5]));
    }
    Ok(AuxSet {
        states,
        meta: AuxMeta {
            n_box,
            n_origin,
            seed,
            dataset_digest: d.digest(),
        },
    })
}

impl AuxSet {
    pub fn to_file_string(&self) -> String {
        let mut body = format!(
            "# {AUX_FORMAT} v{FORMAT_VERSION}; n_box={}; n_origin={}; seed={}; dataset={}\n{AUX_COLUMNS}\n",
            self.meta.n_box, self.meta.n_origin, self.meta.seed, self.meta.dataset_digest
        );
        for s in &self.states {
            let sv = s.as_vec6();
            let row: Vec<String> = sv.0.iter().map(|v| fmt_f64(*v)).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        let digest = sha256_hex(body.as_bytes());
        format!("{body}# sha256={digest}\n")
    }

    pub fn digest(&self) -> String {
        let text = self.to_file_string();
        let line_start = text.rfind("# sha256=").unwrap();
        text[line_start + 9..].trim().to_string()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_file_string()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<AuxSet, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        AuxSet::from_file_string(&text)
    }

    pub fn from_file_string(text: &str) -> Result<AuxSet, DatasetError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatasetError::Empty)?;
        let (version, meta_kv) = parse_header(header, AUX_FORMAT)
            .map_err(|message| DatasetError::BadHeader { message })?;
        if version != FORMAT_VERSION {
            return Err(DatasetError::VersionMismatch {
                kind: "auxiliary set",
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let get_usize = |key: &str| -> Result<usize, DatasetError> {
            meta_get(&meta_kv, key)
                .map_err(|message| DatasetError::BadHeader { message })?
                .parse()
                .map_err(|_| DatasetError::BadHeader {
                    message: format!("{key} must be an integer"),
                })
        };
        let meta = AuxMeta {
            n_box: get_usize("n_box")?,
            n_origin: get_usize("n_origin")?,
            seed: get_usize("seed")? as u64,
            dataset_digest: meta_get(&meta_kv, "dataset")
                .map(str::to_string)
                .map_err(|message| DatasetError::BadHeader { message })?,
        };
        let (line_no, columns) = lines.next().ok_or(DatasetError::MissingChecksum)?;
        if columns != AUX_COLUMNS {
            return Err(DatasetError::MalformedRow {
                line: line_no + 1,
                message: format!("unexpected column header {columns:?}"),
            });
        }
        let mut states = Vec::new();
        let mut checksum = None;
        for (idx, line) in lines {
            if let Some(rest) = line.strip_prefix("# sha256=") {
                checksum = Some(rest.trim().to_string());
                break;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(DatasetError::MalformedRow {
                    line: idx + 1,
                    message: format!("expected 6 fields, found {}", fields.len()),
                });
            }
            let mut v = [0.0; 6];
            for (slot, field) in v.iter_mut().zip(&fields) {
                *slot = parse_f64(field).map_err(|message| DatasetError::MalformedRow {
                    line: idx + 1,
                    message,
                })?;
            }
            states.push(State::new(v[0], v[1], v[2], v[3], v[4], v[5]));
        }
        let claimed = checksum.ok_or(DatasetError::MissingChecksum)?;
        let body_end = text.rfind("# sha256=").expect("checksum line located");
        let actual = sha256_hex(&text.as_bytes()[..body_end]);
        if actual != claimed {
            return Err(DatasetError::ChecksumMismatch { claimed, actual });
        }
        Ok(AuxSet { states, meta })
    }
}
