//! Landing-quality metrics, Monte Carlo evaluation campaigns, and the
//! MPC-versus-surrogate CPU benchmark.
//!
//! Campaigns are paired: every controller flies the same initial-state draws,
//! and when an MPC is among the controllers its trajectories serve as the
//! tracking reference for the matching run.

use crate::dynamics::{simulate, PlantParams, Policy, State, Trajectory};
use crate::fmtio::{fmt_f64, short_digest};
use crate::mpc::{mpc_controller, MpcConfig};
use crate::surrogate::{SurrogateParams, SurrogatePolicy};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// The landing pad: closed intervals in x and y.
pub const SUCCESS_X: (f64, f64) = (-0.5, 0.5);
pub const SUCCESS_Y: (f64, f64) = (0.0, 0.5);

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("campaign needs at least one controller")]
    NoControllers,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Thread CPU time
// ---------------------------------------------------------------------------

#[cfg(unix)]
fn raw_thread_cpu() -> Option<f64> {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return None;
    }
    Some(ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9)
}

#[cfg(not(unix))]
fn raw_thread_cpu() -> Option<f64> {
    None
}

/// Reported resolution of the thread CPU clock, in seconds.
#[cfg(unix)]
pub fn timer_resolution() -> Option<f64> {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    let rc = unsafe { libc::clock_getres(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return None;
    }
    Some(ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9)
}

#[cfg(not(unix))]
pub fn timer_resolution() -> Option<f64> {
    None
}

fn monotonic_seconds() -> f64 {
    use std::sync::OnceLock;
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_secs_f64()
}

/// Calibration verdict: whether the thread CPU clock actually tracks work at
/// microsecond scale. Virtualized kernels frequently report a 1 ns
/// `clock_getres` while accounting CPU time in multi-millisecond quanta, so
/// the only trustworthy check is empirical.
fn cpu_clock_usable() -> (bool, Option<String>) {
    use std::sync::OnceLock;
    static VERDICT: OnceLock<(bool, Option<String>)> = OnceLock::new();
    VERDICT
        .get_or_init(|| {
            let Some(c0) = raw_thread_cpu() else {
                return (
                    false,
                    Some("thread CPU clock unavailable; timings use the monotonic clock".into()),
                );
            };
            // Busy-spin ~500 us of real work three times; the CPU clock on an
            // unloaded thread must track at least half of it to be usable.
            let mut tracked = false;
            for _ in 0..3 {
                let w0 = Instant::now();
                let mut x = 1.0f64;
                while w0.elapsed().as_secs_f64() < 5e-4 {
                    for _ in 0..512 {
                        x = x * 1.000_000_1 + 1e-12;
                    }
                }
                std::hint::black_box(x);
                let wall = w0.elapsed().as_secs_f64();
                let cpu = raw_thread_cpu().unwrap_or(c0) - c0;
                if cpu > 0.5 * wall {
                    tracked = true;
                    break;
                }
            }
            if tracked {
                let warning = match timer_resolution() {
                    Some(res) if res > 1e-6 => Some(format!(
                        "thread CPU clock resolution {res:e} s is coarser than 1 microsecond"
                    )),
                    None => Some("thread CPU clock resolution unavailable".into()),
                    _ => None,
                };
                (true, warning)
            } else {
                (
                    false,
                    Some(
                        "thread CPU clock is coarser than 1 microsecond (it missed a busy spin); \
                         timings fall back to the monotonic clock on a sequential run"
                            .into(),
                    ),
                )
            }
        })
        .clone()
}

/// CPU seconds consumed by the calling thread. Wall time would charge the
/// controller for scheduler noise, so the thread CPU clock is preferred;
/// when the platform only accounts CPU time in coarse quanta this degrades
/// to the monotonic clock, which matches CPU time on the sequential
/// benchmark path.
pub fn thread_cpu_time() -> f64 {
    if cpu_clock_usable().0 {
        raw_thread_cpu().unwrap_or_else(monotonic_seconds)
    } else {
        monotonic_seconds()
    }
}

/// Warning annotation for timing reports, if the clock needed a fallback or
/// its resolution is coarser than 1 microsecond.
pub fn timing_warning() -> Option<String> {
    cpu_clock_usable().1
}

/// Policy decorator recording per-tick controller CPU latency.
pub struct TimedPolicy<P> {
    pub inner: P,
    pub tick_cpu_s: Vec<f64>,
}

impl<P> TimedPolicy<P> {
    pub fn new(inner: P) -> Self {
        TimedPolicy {
            inner,
            tick_cpu_s: Vec::new(),
        }
    }

    pub fn mean_latency(&self) -> f64 {
        if self.tick_cpu_s.is_empty() {
            0.0
        } else {
            self.tick_cpu_s.iter().sum::<f64>() / self.tick_cpu_s.len() as f64
        }
    }
}

impl<P: Policy> Policy for TimedPolicy<P> {
    fn control(&mut self, state: &State) -> Result<crate::dynamics::Control, String> {
        let t0 = thread_cpu_time();
        let out = self.inner.control(state);
        self.tick_cpu_s.push(thread_cpu_time() - t0);
        out
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn in_pad(s: &State) -> bool {
    s.x >= SUCCESS_X.0 && s.x <= SUCCESS_X.1 && s.y >= SUCCESS_Y.0 && s.y <= SUCCESS_Y.1
}

/// Success, safety, and landing time for one rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandingClass {
    /// Reached the pad and stayed there through the end of the horizon.
    pub success: bool,
    /// Altitude never went negative at any recorded sample.
    pub safe: bool,
    /// Start of the final uninterrupted in-pad stretch; present iff success.
    pub landing_time: Option<f64>,
}

pub fn classify_landing(traj: &Trajectory) -> Result<LandingClass, EvalError> {
    if traj.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let states = traj.states();
    let safe = states.iter().all(|s| s.y >= 0.0);
    let success = in_pad(states.last().expect("non-empty"));
    let landing_time = if success {
        // Walk backward to the start of the final in-pad suffix. A visit
        // that ends before the horizon does not count.
        let mut first = states.len() - 1;
        while first > 0 && in_pad(&states[first - 1]) {
            first -= 1;
        }
        Some(first as f64 * traj.control_dt)
    } else {
        None
    };
    Ok(LandingClass {
        success,
        safe,
        landing_time,
    })
}

/// Positional tracking error per tick against a reference rollout, plus its
/// mean. Only x and y enter the error.
pub fn tracking_error(traj: &Trajectory, reference: &Trajectory) -> Result<(Vec<f64>, f64), EvalError> {
    if traj.len() != reference.len() {
        return Err(EvalError::LengthMismatch {
            a: traj.len(),
            b: reference.len(),
        });
    }
    if traj.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let ours = traj.states();
    let refs = reference.states();
    let per_tick: Vec<f64> = ours
        .iter()
        .zip(&refs)
        .map(|(a, b)| {
            let dx = a.x - b.x;
            let dy = a.y - b.y;
            (dx * dx + dy * dy).sqrt()
        })
        .collect();
    let mean = per_tick.iter().sum::<f64>() / per_tick.len() as f64;
    Ok((per_tick, mean))
}

fn trajectory_digest(traj: &Trajectory) -> String {
    let mut text = String::with_capacity(traj.len() * 120);
    for step in &traj.steps {
        let sv = step.state.as_vec6();
        for v in sv.0 {
            text.push_str(&fmt_f64(v));
            text.push(',');
        }
        text.push_str(&fmt_f64(step.control_term.u_r));
        text.push(',');
        text.push_str(&fmt_f64(step.control_term.u_l));
        text.push('\n');
    }
    short_digest(text.as_bytes())
}

// ---------------------------------------------------------------------------
// Campaigns
// ---------------------------------------------------------------------------

/// A controller under evaluation.
pub enum Controller<'a> {
    Mpc { label: String, cfg: &'a MpcConfig },
    Surrogate {
        label: String,
        params: &'a SurrogateParams,
    },
}

impl Controller<'_> {
    pub fn label(&self) -> &str {
        match self {
            Controller::Mpc { label, .. } => label,
            Controller::Surrogate { label, .. } => label,
        }
    }

    pub fn is_mpc(&self) -> bool {
        matches!(self, Controller::Mpc { .. })
    }

    /// Loss-set and auxiliary-set metadata for report rows.
    fn meta(&self) -> (String, String) {
        match self {
            Controller::Mpc { .. } => ("-".to_string(), "-".to_string()),
            Controller::Surrogate { params, .. } => match &params.provenance {
                Some(p) => (
                    p.toggles.label(),
                    if p.aux_used { "yes" } else { "no" }.to_string(),
                ),
                None => ("-".to_string(), "-".to_string()),
            },
        }
    }
}

/// Evaluation campaign settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_runs: usize,
    pub seed: u64,
    pub duration: f64,
    pub control_dt: f64,
    pub substeps: usize,
    /// Initial hover box the runs are drawn from.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Expands the box on every side to probe starts outside the training
    /// distribution; 0 keeps draws in-distribution by construction.
    pub ood_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_runs: 100,
            seed: 0,
            duration: 15.0,
            control_dt: 0.05,
            substeps: 5,
            x_range: (-2.5, 2.5),
            y_range: (3.5, 6.5),
            ood_margin: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_runs == 0 {
            return Err("eval_runs must be >= 1".to_string());
        }
        if !(self.ood_margin >= 0.0) {
            return Err("ood_margin must be non-negative".to_string());
        }
        Ok(())
    }

    /// The paired initial draws every controller sees.
    pub fn initial_states(&self) -> Vec<State> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let m = self.ood_margin;
        let x_lo = self.x_range.0 - m;
        let x_hi = self.x_range.1 + m;
        // Altitude stays non-negative even under margin expansion.
        let y_lo = (self.y_range.0 - m).max(0.0);
        let y_hi = self.y_range.1 + m;
        (0..self.n_runs)
            .map(|_| {
                let x = rng.random_range(x_lo..=x_hi);
                let y = rng.random_range(y_lo..=y_hi);
                State::new(x, y, 0.0, 0.0, 0.0, 0.0)
            })
            .collect()
    }
}

/// One run's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct LandingReport {
    pub success: bool,
    pub safe: bool,
    pub landing_time: Option<f64>,
    pub tracking_error_mean: Option<f64>,
    pub trajectory_digest: String,
    pub cpu_s: f64,
    pub mean_tick_latency_s: f64,
    /// Present when the run aborted (divergence or policy failure).
    pub error: Option<String>,
}

/// Aggregated Table-style row for one controller.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport {
    pub label: String,
    pub loss_set: String,
    pub aux: String,
    pub success_rate: f64,
    pub safe_rate: f64,
    /// Mean over successful runs only.
    pub mean_landing_time: Option<f64>,
    /// Mean over successful runs with a reference trajectory only.
    pub mean_tracking_error: Option<f64>,
    pub mean_cpu_s: f64,
    pub std_cpu_s: f64,
    pub runs: Vec<LandingReport>,
    pub seed: u64,
    pub total_wall_s: f64,
    pub total_cpu_s: f64,
}

struct RunOutcome {
    trajectory: Option<Trajectory>,
    report: LandingReport,
}

fn fly_one(
    controller: &Controller,
    s0: &State,
    cfg: &EvalConfig,
    plant: &PlantParams,
) -> RunOutcome {
    let cpu0 = thread_cpu_time();
    let (result, latency) = match controller {
        Controller::Mpc { cfg: mpc_cfg, .. } => {
            let mut policy = TimedPolicy::new(mpc_controller(mpc_cfg, plant));
            let r = simulate(
                s0,
                &mut policy,
                cfg.duration,
                cfg.control_dt,
                cfg.substeps,
                plant,
            );
            (r, policy.mean_latency())
        }
        Controller::Surrogate { params, .. } => {
            let mut policy = TimedPolicy::new(SurrogatePolicy { params });
            let r = simulate(
                s0,
                &mut policy,
                cfg.duration,
                cfg.control_dt,
                cfg.substeps,
                plant,
            );
            (r, policy.mean_latency())
        }
    };
    let cpu_s = thread_cpu_time() - cpu0;
    match result {
        Ok(traj) => {
            let class = classify_landing(&traj).expect("simulate returned samples");
            let digest = trajectory_digest(&traj);
            RunOutcome {
                trajectory: Some(traj),
                report: LandingReport {
                    success: class.success,
                    safe: class.safe,
                    landing_time: class.landing_time,
                    tracking_error_mean: None,
                    trajectory_digest: digest,
                    cpu_s,
                    mean_tick_latency_s: latency,
                    error: None,
                },
            }
        }
        Err(e) => RunOutcome {
            trajectory: None,
            report: LandingReport {
                success: false,
                safe: false,
                landing_time: None,
                tracking_error_mean: None,
                trajectory_digest: "-".to_string(),
                cpu_s,
                mean_tick_latency_s: latency,
                error: Some(e.to_string()),
            },
        },
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / values.len() as f64;
    (mean, var.sqrt())
}

/// Runs every controller over the same initial draws and aggregates the four
/// landing metrics per controller. Individual run failures are recorded and
/// the campaign continues.
pub fn run_campaign(
    controllers: &[Controller],
    cfg: &EvalConfig,
    plant: &PlantParams,
) -> Result<Vec<CampaignReport>, EvalError> {
    if controllers.is_empty() {
        return Err(EvalError::NoControllers);
    }
    let wall0 = Instant::now();
    let starts = cfg.initial_states();

    // The first MPC in the list is the tracking reference.
    let reference_idx = controllers.iter().position(|c| c.is_mpc());
    let mut reference_trajectories: Vec<Option<Trajectory>> = Vec::new();

    let mut all_outcomes: Vec<Vec<RunOutcome>> = Vec::with_capacity(controllers.len());
    // Fly the reference first so the others can measure against it.
    let mut order: Vec<usize> = (0..controllers.len()).collect();
    if let Some(r) = reference_idx {
        order.retain(|&i| i != r);
        order.insert(0, r);
    }
    let mut outcomes_by_controller: Vec<Option<Vec<RunOutcome>>> =
        (0..controllers.len()).map(|_| None).collect();
    for &ci in &order {
        let controller = &controllers[ci];
        let mut outcomes: Vec<RunOutcome> = starts
            .par_iter()
            .map(|s0| fly_one(controller, s0, cfg, plant))
            .collect();
        if Some(ci) == reference_idx {
            reference_trajectories = outcomes.iter().map(|o| o.trajectory.clone()).collect();
        }
        // Tracking error against the reference, gated on success.
        if reference_idx.is_some() {
            for (run, outcome) in outcomes.iter_mut().enumerate() {
                if !outcome.report.success {
                    continue;
                }
                if let (Some(traj), Some(Some(reference))) = (
                    outcome.trajectory.as_ref(),
                    reference_trajectories.get(run),
                ) {
                    if let Ok((_, mean)) = tracking_error(traj, reference) {
                        outcome.report.tracking_error_mean = Some(mean);
                    }
                }
            }
        }
        outcomes_by_controller[ci] = Some(outcomes);
    }
    for outcomes in outcomes_by_controller {
        all_outcomes.push(outcomes.expect("every controller was flown"));
    }

    let total_wall_s = wall0.elapsed().as_secs_f64();
    let reports = controllers
        .iter()
        .zip(all_outcomes)
        .map(|(controller, outcomes)| {
            let runs: Vec<LandingReport> = outcomes.into_iter().map(|o| o.report).collect();
            let n = runs.len() as f64;
            let successes: Vec<&LandingReport> = runs.iter().filter(|r| r.success).collect();
            let success_rate = successes.len() as f64 / n;
            let safe_rate = runs.iter().filter(|r| r.safe).count() as f64 / n;
            let times: Vec<f64> = successes.iter().filter_map(|r| r.landing_time).collect();
            let tracks: Vec<f64> = successes
                .iter()
                .filter_map(|r| r.tracking_error_mean)
                .collect();
            let cpus: Vec<f64> = runs.iter().map(|r| r.cpu_s).collect();
            let (mean_cpu_s, std_cpu_s) = mean_std(&cpus);
            let (loss_set, aux) = controller.meta();
            CampaignReport {
                label: controller.label().to_string(),
                loss_set,
                aux,
                success_rate,
                safe_rate,
                mean_landing_time: if times.is_empty() {
                    None
                } else {
                    Some(times.iter().sum::<f64>() / times.len() as f64)
                },
                mean_tracking_error: if tracks.is_empty() {
                    None
                } else {
                    Some(tracks.iter().sum::<f64>() / tracks.len() as f64)
                },
                mean_cpu_s,
                std_cpu_s,
                runs,
                seed: cfg.seed,
                total_wall_s,
                total_cpu_s: cpus.iter().sum(),
            }
        })
        .collect();
    Ok(reports)
}

/// CPU benchmark summary for one controller.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingSummary {
    pub label: String,
    pub mean_cpu_s: f64,
    pub std_cpu_s: f64,
    pub mean_tick_latency_s: f64,
    pub per_run_cpu_s: Vec<f64>,
    pub timer_warning: Option<String>,
}

/// Measures full-simulation CPU and per-tick controller latency. Runs are
/// forced sequential on the calling thread so contention cannot skew the
/// latency numbers.
pub fn bench_cpu(
    controllers: &[Controller],
    cfg: &EvalConfig,
    plant: &PlantParams,
) -> Result<Vec<TimingSummary>, EvalError> {
    if controllers.is_empty() {
        return Err(EvalError::NoControllers);
    }
    let starts = cfg.initial_states();
    let timer_warning = timing_warning();

    let mut out = Vec::with_capacity(controllers.len());
    for controller in controllers {
        let mut per_run = Vec::with_capacity(starts.len());
        let mut latencies = Vec::with_capacity(starts.len());
        for s0 in &starts {
            let outcome = fly_one(controller, s0, cfg, plant);
            per_run.push(outcome.report.cpu_s);
            latencies.push(outcome.report.mean_tick_latency_s);
        }
        let (mean_cpu_s, std_cpu_s) = mean_std(&per_run);
        let (mean_tick_latency_s, _) = mean_std(&latencies);
        out.push(TimingSummary {
            label: controller.label().to_string(),
            mean_cpu_s,
            std_cpu_s,
            mean_tick_latency_s,
            per_run_cpu_s: per_run,
            timer_warning: timer_warning.clone(),
        });
    }
    Ok(out)
}

/// Fractional CPU saving of `candidate` relative to `baseline`.
pub fn cpu_reduction(baseline: &TimingSummary, candidate: &TimingSummary) -> f64 {
    if baseline.mean_cpu_s == 0.0 {
        return 0.0;
    }
    1.0 - candidate.mean_cpu_s / baseline.mean_cpu_s
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    TextTable,
    SvgHist,
}

impl ReportFormat {
    pub fn parse(text: &str) -> Result<Self, String> {
        match text {
            "csv" => Ok(ReportFormat::Csv),
            "text-table" => Ok(ReportFormat::TextTable),
            "svg-hist" => Ok(ReportFormat::SvgHist),
            other => Err(format!(
                "unknown report format {other:?} (expected csv, text-table, or svg-hist)"
            )),
        }
    }
}

pub const REPORT_COLUMNS: &str = "controller,loss_set,aux,success_rate,safe_rate,mean_landing_time_s,mean_tracking_error_m,mean_cpu_s,std_cpu_s";

fn opt_metric(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "-".to_string())
}

pub fn render_report_csv(reports: &[CampaignReport]) -> String {
    let mut out = String::from(REPORT_COLUMNS);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.loss_set,
            r.aux,
            fmt_f64(r.success_rate),
            fmt_f64(r.safe_rate),
            opt_metric(r.mean_landing_time),
            opt_metric(r.mean_tracking_error),
            fmt_f64(r.mean_cpu_s),
            fmt_f64(r.std_cpu_s),
        ));
    }
    out
}

pub fn render_report_table(reports: &[CampaignReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:<12} {:<4} {:>8} {:>8} {:>9} {:>10} {:>11} {:>10}\n",
        "controller",
        "loss_set",
        "aux",
        "success",
        "safe",
        "time_s",
        "track_m",
        "mean_cpu_s",
        "std_cpu_s"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<18} {:<12} {:<4} {:>8.2} {:>8.2} {:>9} {:>10} {:>11.4} {:>10.4}\n",
            r.label,
            r.loss_set,
            r.aux,
            r.success_rate,
            r.safe_rate,
            r.mean_landing_time
                .map(|t| format!("{t:.2}"))
                .unwrap_or_else(|| "-".to_string()),
            r.mean_tracking_error
                .map(|t| format!("{t:.4}"))
                .unwrap_or_else(|| "-".to_string()),
            r.mean_cpu_s,
            r.std_cpu_s,
        ));
    }
    out
}

/// Renders per-run CPU times as a stacked per-controller histogram.
pub fn render_cpu_histogram_svg(reports: &[CampaignReport]) -> String {
    let groups: Vec<(String, Vec<f64>, f64)> = reports
        .iter()
        .map(|r| {
            (
                r.label.clone(),
                r.runs.iter().map(|run| run.cpu_s).collect(),
                r.mean_cpu_s,
            )
        })
        .collect();
    render_histogram_svg(&groups)
}

/// Histogram of benchmark summaries, one band per controller.
pub fn render_timing_histogram_svg(summaries: &[TimingSummary]) -> String {
    let groups: Vec<(String, Vec<f64>, f64)> = summaries
        .iter()
        .map(|s| (s.label.clone(), s.per_run_cpu_s.clone(), s.mean_cpu_s))
        .collect();
    render_histogram_svg(&groups)
}

fn render_histogram_svg(reports: &[(String, Vec<f64>, f64)]) -> String {
    const BINS: usize = 20;
    const BAND_H: usize = 120;
    const WIDTH: usize = 640;
    let palette = ["#4878cf", "#d65f5f", "#6acc65", "#b47cc7", "#c4ad66"];

    let all: Vec<f64> = reports
        .iter()
        .flat_map(|(_, runs, _)| runs.iter().copied())
        .collect();
    let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, v| {
        (acc.0.min(*v), acc.1.max(*v))
    });
    let span = if all.is_empty() || hi <= lo { 1.0 } else { hi - lo };

    let height = BAND_H * reports.len().max(1) + 30;
    let mut svg = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" viewBox=\"0 0 {WIDTH} {height}\">\n"
    );
    svg.push_str("  <rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (ri, (label, runs, mean_cpu)) in reports.iter().enumerate() {
        let y0 = ri * BAND_H + 20;
        let mut bins = [0usize; BINS];
        for cpu in runs {
            let frac = ((cpu - lo) / span).clamp(0.0, 1.0);
            let b = ((frac * BINS as f64) as usize).min(BINS - 1);
            bins[b] += 1;
        }
        let peak = bins.iter().copied().max().unwrap_or(1).max(1);
        let color = palette[ri % palette.len()];
        svg.push_str(&format!(
            "  <text x=\"8\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{} (mean {:.4} s)</text>\n",
            y0 - 6,
            xml_escape(label),
            mean_cpu
        ));
        let bin_w = (WIDTH - 20) / BINS;
        for (b, count) in bins.iter().enumerate() {
            if *count == 0 {
                continue;
            }
            let h = (BAND_H - 40) * count / peak;
            svg.push_str(&format!(
                "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                10 + b * bin_w,
                y0 + (BAND_H - 40) - h,
                bin_w.saturating_sub(1).max(1),
                h.max(1),
                color
            ));
        }
        svg.push_str(&format!(
            "  <text x=\"10\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{:.4}s</text>\n",
            y0 + BAND_H - 24,
            lo
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{:.4}s</text>\n",
            WIDTH - 10,
            y0 + BAND_H - 24,
            hi
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes campaign reports in the chosen format.
pub fn emit_report(
    reports: &[CampaignReport],
    path: &Path,
    format: ReportFormat,
) -> Result<(), EvalError> {
    let text = match format {
        ReportFormat::Csv => render_report_csv(reports),
        ReportFormat::TextTable => render_report_table(reports),
        ReportFormat::SvgHist => render_cpu_histogram_svg(reports),
    };
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
