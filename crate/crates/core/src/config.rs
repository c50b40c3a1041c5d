//! Plain-text key=value configuration and the resolved run settings.
//!
//! One flat namespace covers every module; a config file supplies defaults
//! and `--key value` command-line overrides win. Unknown keys are rejected
//! up front so typos surface before any work starts.

use crate::dataset::GridSpec;
use crate::dynamics::PlantParams;
use crate::evaluate::EvalConfig;
use crate::fmtio::{fmt_f64, parse_f64, short_digest};
use crate::lyapunov::FitConfig;
use crate::mpc::MpcConfig;
use crate::surrogate::{LossToggles, LossWeights, TrainConfig};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Every recognized key, used to reject typos early.
pub const KNOWN_KEYS: &[&str] = &[
    // plant
    "mass",
    "half_length",
    "inertia",
    "gravity",
    "kappa_row1",
    "kappa_row2",
    // mpc
    "mpc_horizon",
    "mpc_q",
    "mpc_r",
    "mpc_qf",
    "mpc_max_iters",
    "mpc_tol",
    "mpc_reg_init",
    // dataset grid
    "grid_nx",
    "grid_ny",
    "grid_x_min",
    "grid_x_max",
    "grid_y_min",
    "grid_y_max",
    "duration",
    "control_dt",
    "substeps",
    "data_seed",
    // auxiliary set
    "aux_count",
    "aux_seed",
    // lyapunov fit
    "lyap_eps_floor",
    "lyap_max_iters",
    "lyap_step",
    "lyap_seed",
    // training
    "epochs",
    "learning_rate",
    "batch_size",
    "loss_weights",
    "losses",
    "use_aux",
    "train_seed",
    // evaluation
    "eval_runs",
    "eval_seed",
    "ood_margin",
    // execution
    "jobs",
];

/// Ordered key=value store with provenance-friendly rendering.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        KvConfig::default()
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KvConfig::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: idx + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            kv.set(key.trim(), value.trim())?;
        }
        Ok(kv)
    }

    /// Inserts after validating the key against the known namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Layers `over` on top of self (command-line flags over file values).
    pub fn merged_with(&self, over: &KvConfig) -> KvConfig {
        let mut out = self.clone();
        for (k, v) in &over.values {
            out.values.insert(k.clone(), v.clone());
        }
        out
    }

    fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => parse_f64(v).map_err(|message| ConfigError::BadValue {
                key: key.to_string(),
                message,
            }),
        }
    }

    fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                message: format!("expected an integer, got {v:?}"),
            }),
        }
    }

    fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                message: format!("expected an integer, got {v:?}"),
            }),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                message: format!("expected true/false, got {v:?}"),
            }),
        }
    }

    fn get_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|f| {
                    parse_f64(f).map_err(|message| ConfigError::BadValue {
                        key: key.to_string(),
                        message,
                    })
                })
                .collect(),
        }
    }
}

/// The merged, validated view of every module's settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub plant: PlantParams,
    pub mpc: MpcConfig,
    pub grid: GridSpec,
    pub aux_count: usize,
    pub aux_seed: u64,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plant: PlantParams::default(),
            mpc: MpcConfig::default(),
            grid: GridSpec::default(),
            aux_count: 5000,
            aux_seed: 1,
            fit: FitConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            jobs: 0,
        }
    }
}

fn fixed_list<const N: usize>(key: &str, values: Vec<f64>) -> Result<[f64; N], ConfigError> {
    if values.len() != N {
        return Err(ConfigError::BadValue {
            key: key.to_string(),
            message: format!("expected {N} comma-separated values, got {}", values.len()),
        });
    }
    let mut out = [0.0; N];
    out.copy_from_slice(&values);
    Ok(out)
}

impl RunConfig {
    /// Builds a fully-validated config from a key=value store; absent keys
    /// take the defaults above.
    pub fn resolve(kv: &KvConfig) -> Result<RunConfig, ConfigError> {
        let defaults = RunConfig::default();

        let plant = PlantParams {
            m: kv.get_f64("mass", defaults.plant.m)?,
            l_half: kv.get_f64("half_length", defaults.plant.l_half)?,
            j: kv.get_f64("inertia", defaults.plant.j)?,
            g: kv.get_f64("gravity", defaults.plant.g)?,
            kappa: [
                fixed_list::<6>(
                    "kappa_row1",
                    kv.get_f64_list("kappa_row1", &defaults.plant.kappa[0])?,
                )?,
                fixed_list::<6>(
                    "kappa_row2",
                    kv.get_f64_list("kappa_row2", &defaults.plant.kappa[1])?,
                )?,
            ],
        };
        plant.validate().map_err(ConfigError::Invalid)?;

        let mpc = MpcConfig {
            horizon: kv.get_usize("mpc_horizon", defaults.mpc.horizon)?,
            state_weight: fixed_list::<6>(
                "mpc_q",
                kv.get_f64_list("mpc_q", &defaults.mpc.state_weight)?,
            )?,
            input_weight: fixed_list::<2>(
                "mpc_r",
                kv.get_f64_list("mpc_r", &defaults.mpc.input_weight)?,
            )?,
            terminal_weight: fixed_list::<6>(
                "mpc_qf",
                kv.get_f64_list("mpc_qf", &defaults.mpc.terminal_weight)?,
            )?,
            max_iters: kv.get_usize("mpc_max_iters", defaults.mpc.max_iters)?,
            tol: kv.get_f64("mpc_tol", defaults.mpc.tol)?,
            reg_init: kv.get_f64("mpc_reg_init", defaults.mpc.reg_init)?,
        };
        mpc.validate().map_err(ConfigError::Invalid)?;

        let grid = GridSpec {
            nx: kv.get_usize("grid_nx", defaults.grid.nx)?,
            ny: kv.get_usize("grid_ny", defaults.grid.ny)?,
            x_min: kv.get_f64("grid_x_min", defaults.grid.x_min)?,
            x_max: kv.get_f64("grid_x_max", defaults.grid.x_max)?,
            y_min: kv.get_f64("grid_y_min", defaults.grid.y_min)?,
            y_max: kv.get_f64("grid_y_max", defaults.grid.y_max)?,
            duration: kv.get_f64("duration", defaults.grid.duration)?,
            control_dt: kv.get_f64("control_dt", defaults.grid.control_dt)?,
            substeps: kv.get_usize("substeps", defaults.grid.substeps)?,
            seed: kv.get_u64("data_seed", defaults.grid.seed)?,
        };
        grid.validate().map_err(ConfigError::Invalid)?;

        let fit = FitConfig {
            eps_floor: kv.get_f64("lyap_eps_floor", defaults.fit.eps_floor)?,
            max_iters: kv.get_usize("lyap_max_iters", defaults.fit.max_iters)?,
            step: kv.get_f64("lyap_step", defaults.fit.step)?,
            seed: kv.get_u64("lyap_seed", defaults.fit.seed)?,
        };
        if !(fit.eps_floor > 0.0) {
            return Err(ConfigError::Invalid(
                "lyap_eps_floor must be positive".to_string(),
            ));
        }

        let lw = kv.get_f64_list(
            "loss_weights",
            &[
                defaults.train.weights.w1,
                defaults.train.weights.w2,
                defaults.train.weights.w3,
                defaults.train.weights.w4,
            ],
        )?;
        let lw = fixed_list::<4>("loss_weights", lw)?;
        let toggles = match kv.get("losses") {
            None => defaults.train.toggles,
            Some(text) => LossToggles::parse(text).map_err(|message| ConfigError::BadValue {
                key: "losses".to_string(),
                message,
            })?,
        };
        let train = TrainConfig {
            epochs: kv.get_usize("epochs", defaults.train.epochs)?,
            learning_rate: kv.get_f64("learning_rate", defaults.train.learning_rate)?,
            batch_size: kv.get_usize("batch_size", defaults.train.batch_size)?,
            weights: LossWeights {
                w1: lw[0],
                w2: lw[1],
                w3: lw[2],
                w4: lw[3],
            },
            toggles,
            use_aux: kv.get_bool("use_aux", defaults.train.use_aux)?,
            seed: kv.get_u64("train_seed", defaults.train.seed)?,
            ..TrainConfig::default()
        };
        train.validate().map_err(ConfigError::Invalid)?;

        let eval = EvalConfig {
            n_runs: kv.get_usize("eval_runs", defaults.eval.n_runs)?,
            seed: kv.get_u64("eval_seed", defaults.eval.seed)?,
            duration: grid.duration,
            control_dt: grid.control_dt,
            substeps: grid.substeps,
            x_range: (grid.x_min, grid.x_max),
            y_range: (grid.y_min, grid.y_max),
            ood_margin: kv.get_f64("ood_margin", defaults.eval.ood_margin)?,
        };
        eval.validate().map_err(ConfigError::Invalid)?;

        Ok(RunConfig {
            plant,
            mpc,
            grid,
            aux_count: kv.get_usize("aux_count", defaults.aux_count)?,
            aux_seed: kv.get_u64("aux_seed", defaults.aux_seed)?,
            fit,
            train,
            eval,
            jobs: kv.get_usize("jobs", defaults.jobs)?,
        })
    }

    /// Canonical rendering of every resolved value; written alongside each
    /// output artifact so runs are auditable.
    pub fn resolved_dump(&self, inputs: &[(&str, &str)]) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| fmt_f64(*x))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::from("# resolved pimpcs configuration\n");
        for (name, digest) in inputs {
            out.push_str(&format!("# input {name}={digest}\n"));
        }
        out.push_str(&format!("mass={}\n", fmt_f64(self.plant.m)));
        out.push_str(&format!("half_length={}\n", fmt_f64(self.plant.l_half)));
        out.push_str(&format!("inertia={}\n", fmt_f64(self.plant.j)));
        out.push_str(&format!("gravity={}\n", fmt_f64(self.plant.g)));
        out.push_str(&format!("kappa_row1={}\n", list(&self.plant.kappa[0])));
        out.push_str(&format!("kappa_row2={}\n", list(&self.plant.kappa[1])));
        out.push_str(&format!("mpc_horizon={}\n", self.mpc.horizon));
        out.push_str(&format!("mpc_q={}\n", list(&self.mpc.state_weight)));
        out.push_str(&format!("mpc_r={}\n", list(&self.mpc.input_weight)));
        out.push_str(&format!("mpc_qf={}\n", list(&self.mpc.terminal_weight)));
        out.push_str(&format!("mpc_max_iters={}\n", self.mpc.max_iters));
        out.push_str(&format!("mpc_tol={}\n", fmt_f64(self.mpc.tol)));
        out.push_str(&format!("mpc_reg_init={}\n", fmt_f64(self.mpc.reg_init)));
        out.push_str(&format!("grid_nx={}\n", self.grid.nx));
        out.push_str(&format!("grid_ny={}\n", self.grid.ny));
        out.push_str(&format!("grid_x_min={}\n", fmt_f64(self.grid.x_min)));
        out.push_str(&format!("grid_x_max={}\n", fmt_f64(self.grid.x_max)));
        out.push_str(&format!("grid_y_min={}\n", fmt_f64(self.grid.y_min)));
        out.push_str(&format!("grid_y_max={}\n", fmt_f64(self.grid.y_max)));
        out.push_str(&format!("duration={}\n", fmt_f64(self.grid.duration)));
        out.push_str(&format!("control_dt={}\n", fmt_f64(self.grid.control_dt)));
        out.push_str(&format!("substeps={}\n", self.grid.substeps));
        out.push_str(&format!("data_seed={}\n", self.grid.seed));
        out.push_str(&format!("aux_count={}\n", self.aux_count));
        out.push_str(&format!("aux_seed={}\n", self.aux_seed));
        out.push_str(&format!("lyap_eps_floor={}\n", fmt_f64(self.fit.eps_floor)));
        out.push_str(&format!("lyap_max_iters={}\n", self.fit.max_iters));
        out.push_str(&format!("lyap_step={}\n", fmt_f64(self.fit.step)));
        out.push_str(&format!("lyap_seed={}\n", self.fit.seed));
        out.push_str(&format!("epochs={}\n", self.train.epochs));
        out.push_str(&format!(
            "learning_rate={}\n",
            fmt_f64(self.train.learning_rate)
        ));
        out.push_str(&format!("batch_size={}\n", self.train.batch_size));
        out.push_str(&format!(
            "loss_weights={}\n",
            list(&[
                self.train.weights.w1,
                self.train.weights.w2,
                self.train.weights.w3,
                self.train.weights.w4
            ])
        ));
        out.push_str(&format!("losses={}\n", self.train.toggles.label()));
        out.push_str(&format!("use_aux={}\n", self.train.use_aux));
        out.push_str(&format!("train_seed={}\n", self.train.seed));
        out.push_str(&format!("eval_runs={}\n", self.eval.n_runs));
        out.push_str(&format!("eval_seed={}\n", self.eval.seed));
        out.push_str(&format!("ood_margin={}\n", fmt_f64(self.eval.ood_margin)));
        out.push_str(&format!("jobs={}\n", self.jobs));
        out
    }

    pub fn digest(&self) -> String {
        short_digest(self.resolved_dump(&[]).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = RunConfig::resolve(&KvConfig::new()).unwrap();
        assert_eq!(cfg.grid.nx * cfg.grid.ny, 273);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.train.weights.w2, 1000.0);
        assert_eq!(cfg.eval.n_runs, 100);
        assert_eq!(cfg.aux_count, 5000);
    }

    #[test]
    fn file_values_and_overrides_layer_correctly() {
        let file = KvConfig::from_str_checked(
            "# comment\nmass=2.0\nepochs=50\n\nmpc_horizon=25\n",
        )
        .unwrap();
        let mut flags = KvConfig::new();
        flags.set("epochs", "75").unwrap();
        let merged = file.merged_with(&flags);
        let cfg = RunConfig::resolve(&merged).unwrap();
        assert_eq!(cfg.plant.m, 2.0);
        assert_eq!(cfg.train.epochs, 75);
        assert_eq!(cfg.mpc.horizon, 25);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            KvConfig::from_str_checked("masss=2.0\n"),
            Err(ConfigError::UnknownKey(k)) if k == "masss"
        ));
    }

    #[test]
    fn malformed_lines_name_their_line() {
        match KvConfig::from_str_checked("mass=1.0\nnot a pair\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn structural_kappa_zeros_enforced() {
        let mut kv = KvConfig::new();
        kv.set("kappa_row1", "1,0,-4,0.3,-1.5,-2").unwrap();
        assert!(matches!(
            RunConfig::resolve(&kv),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut kv = KvConfig::new();
        kv.set("epochs", "many").unwrap();
        assert!(matches!(
            RunConfig::resolve(&kv),
            Err(ConfigError::BadValue { key, .. }) if key == "epochs"
        ));
    }

    #[test]
    fn resolved_dump_round_trips_through_parser() {
        let cfg = RunConfig::default();
        let dump = cfg.resolved_dump(&[("dataset", "abc123")]);
        let parsed = KvConfig::from_str_checked(&dump).unwrap();
        let back = RunConfig::resolve(&parsed).unwrap();
        assert_eq!(back.digest(), cfg.digest());
    }
}
