//! Command-line pipeline for the pimpcs toolkit.
//!
//! Subcommands mirror the pipeline stages: gen-data, fit-profile, train,
//! evaluate, bench, simulate. Settings come from a key=value config file
//! (via --config or the PIMPCS_CONFIG environment variable) with `--key
//! value` flag overrides; every output artifact gets a sibling `.config`
//! dump recording the fully-resolved settings and input digests.

use pimpcs_core::config::{ConfigError, KvConfig, RunConfig};
use pimpcs_core::dataset::{generate_reference, sample_auxiliary, AuxSet, Dataset};
use pimpcs_core::dynamics::{simulate, State};
use pimpcs_core::evaluate::{
    bench_cpu, cpu_reduction, emit_report, render_report_table, render_timing_histogram_svg,
    run_campaign, Controller, ReportFormat,
};
use pimpcs_core::lyapunov::{fit_profile, StabilityProfile};
use pimpcs_core::mpc::mpc_controller;
use pimpcs_core::surrogate::{load_model, save_model, train, SurrogateParams, SurrogatePolicy};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE: &str = "\
pimpcs - physics-informed MPC surrogate toolkit for planar quadcopter landing

Usage: pimpcs <command> [flags]

Commands:
  gen-data      fly the reference MPC over the initial grid and write the dataset
  fit-profile   fit the quadratic stability profile from a dataset
  train         train a surrogate controller
  evaluate      Monte Carlo landing campaign over any mix of controllers
  bench         sequential CPU-time benchmark of controllers
  simulate      single rollout to a trajectory CSV

Common flags:
  --config PATH     key=value config file (or set PIMPCS_CONFIG)
  --seed N          seed for this command's randomness
  --jobs N          worker threads (0 = all cores; 1 = fully sequential)
  --key VALUE       override any config key (see README for the key list)

Command flags:
  gen-data:     --out FILE  [--grid NxM]
  fit-profile:  --data FILE --out FILE
  train:        --data FILE --out FILE [--profile FILE] [--losses l1,l2,l3,l4]
                [--aux] [--aux-out FILE]
  evaluate:     --out FILE  [--mpc] [--model FILE]... [--runs N]
                [--format csv|text-table|svg-hist] [--ood-margin X]
  bench:        --out FILE  [--mpc] [--model FILE]... [--runs N] [--svg FILE]
  simulate:     --out FILE  (--mpc | --model FILE) [--x0 x,y,th,xd,yd,thd]
";

/// Exit code 1: bad flags, config, or input files. Exit code 2: the work
/// itself failed.
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn report(&self) -> ExitCode {
        match self {
            CliError::Validation(m) => {
                eprintln!("pimpcs: {m}");
                ExitCode::from(1)
            }
            CliError::Runtime(m) => {
                eprintln!("pimpcs: {m}");
                ExitCode::from(2)
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Default)]
struct Args {
    command: String,
    config_path: Option<PathBuf>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    profile: Option<PathBuf>,
    models: Vec<PathBuf>,
    aux_out: Option<PathBuf>,
    svg: Option<PathBuf>,
    use_mpc: bool,
    x0: Option<String>,
    format: Option<String>,
    overrides: KvConfig,
}

fn parse_args(argv: &[String]) -> Result<Args, CliError> {
    let mut args = Args {
        command: argv
            .first()
            .cloned()
            .ok_or_else(|| CliError::Validation(format!("missing command\n\n{USAGE}")))?,
        ..Args::default()
    };
    // --seed maps to the seed that governs this command's randomness.
    let seed_key = match args.command.as_str() {
        "gen-data" => "data_seed",
        "fit-profile" => "lyap_seed",
        "train" => "train_seed",
        _ => "eval_seed",
    };

    let mut it = argv[1..].iter().peekable();
    let need_value = |it: &mut std::iter::Peekable<std::slice::Iter<String>>,
                          flag: &str|
     -> Result<String, CliError> {
        it.next()
            .cloned()
            .ok_or_else(|| CliError::Validation(format!("flag {flag} needs a value")))
    };
    while let Some(flag) = it.next() {
        match flag.as_str() {
            "--help" | "-h" => return Err(CliError::Validation(USAGE.to_string())),
            "--config" => args.config_path = Some(need_value(&mut it, flag)?.into()),
            "--out" => args.out = Some(need_value(&mut it, flag)?.into()),
            "--data" => args.data = Some(need_value(&mut it, flag)?.into()),
            "--profile" => args.profile = Some(need_value(&mut it, flag)?.into()),
            "--model" => args.models.push(need_value(&mut it, flag)?.into()),
            "--aux-out" => args.aux_out = Some(need_value(&mut it, flag)?.into()),
            "--svg" => args.svg = Some(need_value(&mut it, flag)?.into()),
            "--mpc" => args.use_mpc = true,
            "--aux" => {
                args.overrides.set("use_aux", "true")?;
            }
            "--x0" => args.x0 = Some(need_value(&mut it, flag)?),
            "--format" => args.format = Some(need_value(&mut it, flag)?),
            "--seed" => {
                let v = need_value(&mut it, flag)?;
                args.overrides.set(seed_key, &v)?;
            }
            "--runs" => {
                let v = need_value(&mut it, flag)?;
                args.overrides.set("eval_runs", &v)?;
            }
            "--losses" => {
                let v = need_value(&mut it, flag)?;
                args.overrides.set("losses", &v)?;
            }
            "--ood-margin" => {
                let v = need_value(&mut it, flag)?;
                args.overrides.set("ood_margin", &v)?;
            }
            "--jobs" => {
                let v = need_value(&mut it, flag)?;
                args.overrides.set("jobs", &v)?;
            }
            "--grid" => {
                let v = need_value(&mut it, flag)?;
                let (nx, ny) = v.split_once('x').ok_or_else(|| {
                    CliError::Validation(format!("--grid expects NxM, got {v:?}"))
                })?;
                args.overrides.set("grid_nx", nx)?;
                args.overrides.set("grid_ny", ny)?;
            }
            other => {
                // Any config key doubles as a flag: --key value.
                let key = other.strip_prefix("--").ok_or_else(|| {
                    CliError::Validation(format!("unexpected argument {other:?}\n\n{USAGE}"))
                })?;
                let v = need_value(&mut it, flag)?;
                args.overrides
                    .set(key, &v)
                    .map_err(|e| CliError::Validation(format!("{e} (run with --help)")))?;
            }
        }
    }
    Ok(args)
}

fn resolve_config(args: &Args) -> Result<RunConfig, CliError> {
    let file_kv = match args
        .config_path
        .clone()
        .or_else(|| std::env::var("PIMPCS_CONFIG").ok().map(PathBuf::from))
    {
        Some(path) => KvConfig::from_file(&path)?,
        None => KvConfig::new(),
    };
    let merged = file_kv.merged_with(&args.overrides);
    Ok(RunConfig::resolve(&merged)?)
}

fn init_worker_pool(jobs: usize) {
    if jobs > 0 {
        // Ignore the error if a pool already exists (repeated calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

fn require_out(args: &Args) -> Result<&Path, CliError> {
    args.out
        .as_deref()
        .ok_or_else(|| CliError::Validation("--out is required".to_string()))
}

fn require_data(args: &Args) -> Result<&Path, CliError> {
    args.data
        .as_deref()
        .ok_or_else(|| CliError::Validation("--data is required".to_string()))
}

/// Writes the resolved-config dump that accompanies every artifact.
fn write_config_dump(out: &Path, cfg: &RunConfig, inputs: &[(&str, &str)]) -> Result<(), CliError> {
    let mut path = out.as_os_str().to_owned();
    path.push(".config");
    std::fs::write(PathBuf::from(path), cfg.resolved_dump(inputs)).map_err(runtime)
}

fn load_dataset_checked(path: &Path, cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = Dataset::load(path).map_err(validation)?;
    let plant_digest = cfg.plant.digest();
    if d.meta.plant_digest != plant_digest {
        return Err(CliError::Validation(format!(
            "dataset {} was generated with plant digest {} but the resolved config has {}; \
             regenerate the dataset or fix the plant keys",
            path.display(),
            d.meta.plant_digest,
            plant_digest
        )));
    }
    Ok(d)
}

fn load_models(args: &Args, cfg: &RunConfig) -> Result<Vec<(String, SurrogateParams)>, CliError> {
    let mut out = Vec::new();
    for path in &args.models {
        let params = load_model(path).map_err(validation)?;
        if let Some(p) = &params.provenance {
            if p.plant_digest != cfg.plant.digest() {
                return Err(CliError::Validation(format!(
                    "model {} was trained against plant digest {} but the resolved config has {}",
                    path.display(),
                    p.plant_digest,
                    cfg.plant.digest()
                )));
            }
        }
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string());
        out.push((label, params));
    }
    Ok(out)
}

fn cmd_gen_data(args: &Args) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let out = require_out(args)?;
    init_worker_pool(cfg.jobs);
    let (dataset, report) = generate_reference(&cfg.grid, &cfg.mpc, &cfg.plant).map_err(runtime)?;
    for id in &report.flagged {
        eprintln!(
            "pimpcs: warning: trajectory {id} did not satisfy the landing success criterion"
        );
    }
    dataset.save(out).map_err(runtime)?;
    write_config_dump(out, &cfg, &[("plant", &cfg.plant.digest())])?;
    println!(
        "wrote {} trajectories ({} samples) to {}{}",
        dataset.num_trajectories(),
        dataset.len(),
        out.display(),
        if report.flagged.is_empty() {
            String::new()
        } else {
            format!("; {} flagged", report.flagged.len())
        }
    );
    Ok(())
}

fn cmd_fit_profile(args: &Args) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let out = require_out(args)?;
    let data_path = require_data(args)?;
    init_worker_pool(cfg.jobs);
    let dataset = Dataset::load(data_path).map_err(validation)?;
    let profile = fit_profile(&dataset, &cfg.fit).map_err(runtime)?;
    profile.save(out).map_err(runtime)?;
    write_config_dump(out, &cfg, &[("dataset", &dataset.digest())])?;
    println!(
        "fitted profile in {} iterations: objective {:.6e}, violation fraction {:.4} -> {}",
        profile.iterations,
        profile.final_objective,
        profile.violation_fraction,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let out = require_out(args)?;
    let data_path = require_data(args)?;
    init_worker_pool(cfg.jobs);
    let dataset = load_dataset_checked(data_path, &cfg)?;

    let profile: Option<StabilityProfile> = match &args.profile {
        Some(path) => {
            let p = StabilityProfile::load(path).map_err(validation)?;
            if p.dataset_digest != dataset.digest() {
                return Err(CliError::Validation(format!(
                    "profile {} was fitted on dataset digest {}.. but --data has {}..; \
                     refit the profile or pass the matching dataset",
                    path.display(),
                    &p.dataset_digest[..12.min(p.dataset_digest.len())],
                    &dataset.digest()[..12]
                )));
            }
            Some(p)
        }
        None => None,
    };
    if cfg.train.toggles.l3 && profile.is_none() {
        return Err(CliError::Validation(
            "losses include l3: pass --profile <file> fitted on this dataset".to_string(),
        ));
    }

    let aux: Option<AuxSet> = if cfg.train.use_aux {
        let set = sample_auxiliary(&dataset, cfg.aux_count, cfg.aux_seed).map_err(runtime)?;
        if let Some(path) = &args.aux_out {
            set.save(path).map_err(runtime)?;
        }
        Some(set)
    } else {
        None
    };

    let result = train(
        &dataset,
        aux.as_ref(),
        profile.as_ref(),
        &cfg.train,
        &cfg.plant,
    )
    .map_err(runtime)?;
    save_model(&result.params, out).map_err(runtime)?;

    let mut inputs: Vec<(String, String)> = vec![("dataset".into(), dataset.digest())];
    if let Some(p) = &profile {
        inputs.push(("profile".into(), p.digest()));
    }
    if let Some(a) = &aux {
        inputs.push(("auxset".into(), a.digest()));
    }
    let inputs_ref: Vec<(&str, &str)> = inputs
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();
    write_config_dump(out, &cfg, &inputs_ref)?;
    println!(
        "trained with losses {} (aux {}), {} epochs: epoch-mean loss {:.6e} -> {:.6e}; model -> {}",
        cfg.train.toggles.label(),
        if cfg.train.use_aux { "yes" } else { "no" },
        cfg.train.epochs,
        result.epoch_losses.first().unwrap(),
        result.epoch_losses.last().unwrap(),
        out.display()
    );
    Ok(())
}

fn build_controllers<'a>(
    args: &Args,
    cfg: &'a RunConfig,
    models: &'a [(String, SurrogateParams)],
) -> Result<Vec<Controller<'a>>, CliError> {
    let mut controllers = Vec::new();
    if args.use_mpc {
        controllers.push(Controller::Mpc {
            label: "mpc".to_string(),
            cfg: &cfg.mpc,
        });
    }
    for (label, params) in models {
        controllers.push(Controller::Surrogate {
            label: label.clone(),
            params,
        });
    }
    if controllers.is_empty() {
        return Err(CliError::Validation(
            "no controllers: pass --mpc and/or --model <file>".to_string(),
        ));
    }
    Ok(controllers)
}

fn cmd_evaluate(args: &Args) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let out = require_out(args)?;
    init_worker_pool(cfg.jobs);
    let models = load_models(args, &cfg)?;
    let controllers = build_controllers(args, &cfg, &models)?;
    let format = match &args.format {
        Some(text) => ReportFormat::parse(text).map_err(validation)?,
        None => ReportFormat::Csv,
    };
    let reports = run_campaign(&controllers, &cfg.eval, &cfg.plant).map_err(runtime)?;
    emit_report(&reports, out, format).map_err(runtime)?;

    let mut inputs: Vec<(String, String)> = models
        .iter()
        .map(|(label, params)| {
            let digest = params
                .provenance
                .as_ref()
                .map(|p| p.dataset_digest.clone())
                .unwrap_or_else(|| "-".to_string());
            (format!("model:{label}"), digest)
        })
        .collect();
    inputs.push(("plant".into(), cfg.plant.digest()));
    let inputs_ref: Vec<(&str, &str)> = inputs
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();
    write_config_dump(out, &cfg, &inputs_ref)?;
    print!("{}", render_report_table(&reports));
    println!("report -> {}", out.display());
    Ok(())
}

fn cmd_bench(args: &Args) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let out = require_out(args)?;
    let models = load_models(args, &cfg)?;
    let controllers = build_controllers(args, &cfg, &models)?;
    let summaries = bench_cpu(&controllers, &cfg.eval, &cfg.plant).map_err(runtime)?;

    let mut text = String::new();
    if let Some(warning) = summaries.iter().find_map(|s| s.timer_warning.clone()) {
        text.push_str(&format!("# warning: {warning}\n"));
    }
    text.push_str("controller,mean_cpu_s,std_cpu_s,mean_tick_latency_s,cpu_reduction_vs_first\n");
    for s in &summaries {
        let reduction = cpu_reduction(&summaries[0], s);
        text.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            s.label, s.mean_cpu_s, s.std_cpu_s, s.mean_tick_latency_s, reduction
        ));
    }
    std::fs::write(out, &text).map_err(runtime)?;
    if let Some(svg_path) = &args.svg {
        std::fs::write(svg_path, render_timing_histogram_svg(&summaries)).map_err(runtime)?;
    }
    write_config_dump(out, &cfg, &[("plant", &cfg.plant.digest())])?;
    print!("{text}");
    Ok(())
}

fn cmd_simulate(args: &Args) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let out = require_out(args)?;
    let models = load_models(args, &cfg)?;
    if args.use_mpc == !models.is_empty() {
        return Err(CliError::Validation(
            "simulate needs exactly one controller: --mpc or one --model".to_string(),
        ));
    }
    if models.len() > 1 {
        return Err(CliError::Validation(
            "simulate takes a single --model".to_string(),
        ));
    }
    let s0 = match &args.x0 {
        None => State::new(0.0, 5.0, 0.0, 0.0, 0.0, 0.0),
        Some(text) => {
            let vals: Vec<f64> = text
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse()
                        .map_err(|_| CliError::Validation(format!("--x0: bad number {f:?}")))
                })
                .collect::<Result<_, _>>()?;
            if vals.len() != 6 {
                return Err(CliError::Validation(format!(
                    "--x0 expects 6 comma-separated values, got {}",
                    vals.len()
                )));
            }
            State::new(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5])
        }
    };

    let (label, traj) = if args.use_mpc {
        let mut policy = mpc_controller(&cfg.mpc, &cfg.plant);
        let traj = simulate(
            &s0,
            &mut policy,
            cfg.grid.duration,
            cfg.grid.control_dt,
            cfg.grid.substeps,
            &cfg.plant,
        )
        .map_err(runtime)?;
        ("mpc".to_string(), traj)
    } else {
        let (label, params) = &models[0];
        let mut policy = SurrogatePolicy { params };
        let traj = simulate(
            &s0,
            &mut policy,
            cfg.grid.duration,
            cfg.grid.control_dt,
            cfg.grid.substeps,
            &cfg.plant,
        )
        .map_err(runtime)?;
        (label.clone(), traj)
    };

    let mut text = format!(
        "# pimpcs-traj v1; controller={label}; x0={},{},{},{},{},{}\n",
        s0.x, s0.y, s0.theta, s0.xdot, s0.ydot, s0.thetadot
    );
    text.push_str("k,t,x,y,theta,xdot,ydot,thetadot,ucr,ucl\n");
    for (k, step) in traj.steps.iter().enumerate() {
        let s = step.state;
        text.push_str(&format!(
            "{k},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            k as f64 * traj.control_dt,
            s.x,
            s.y,
            s.theta,
            s.xdot,
            s.ydot,
            s.thetadot,
            step.control_term.u_r,
            step.control_term.u_l
        ));
    }
    if let Some(last) = traj.steps.last() {
        let s = last.next_state;
        let k = traj.steps.len();
        text.push_str(&format!(
            "{k},{:e},{:e},{:e},{:e},{:e},{:e},{:e},0e0,0e0\n",
            k as f64 * traj.control_dt,
            s.x,
            s.y,
            s.theta,
            s.xdot,
            s.ydot,
            s.thetadot
        ));
    }
    std::fs::write(out, text).map_err(runtime)?;
    write_config_dump(out, &cfg, &[("plant", &cfg.plant.digest())])?;

    let class = pimpcs_core::evaluate::classify_landing(&traj).map_err(runtime)?;
    println!(
        "{label}: success={} safe={} landing_time={} -> {}",
        class.success,
        class.safe,
        class
            .landing_time
            .map(|t| format!("{t:.2}s"))
            .unwrap_or_else(|| "-".to_string()),
        out.display()
    );
    Ok(())
}

fn dispatch(args: &Args) -> Result<(), CliError> {
    match args.command.as_str() {
        "gen-data" => cmd_gen_data(args),
        "fit-profile" => cmd_fit_profile(args),
        "train" => cmd_train(args),
        "evaluate" => cmd_evaluate(args),
        "bench" => cmd_bench(args),
        "simulate" => cmd_simulate(args),
        other => Err(CliError::Validation(format!(
            "unknown command {other:?}\n\n{USAGE}"
        ))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match parse_args(&argv) {
        Ok(args) => match dispatch(&args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => e.report(),
        },
        Err(e) => e.report(),
    }
}
