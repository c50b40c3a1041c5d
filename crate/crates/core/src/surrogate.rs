//! The surrogate controller: a 312-parameter feed-forward network mapping a
//! plant state to a controller term, its four training losses, exact
//! reverse-mode gradients, Adam, and the training loop.
//!
//! Architecture 6 -> 10 -> 10 -> 10 -> 2 with sigmoid hidden activations and
//! a linear output: the unique small uniform-width four-layer shape with
//! exactly 312 scalars.

use crate::dataset::{AuxSet, Dataset, TransitionSample};
use crate::dynamics::{stabilizer_control, Control, PlantParams, Policy, State};
use crate::fmtio::{fmt_f64, parse_f64, sha256_hex};
use crate::lyapunov::StabilityProfile;
use crate::numerics::VecN;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

pub const LAYER_DIMS: [usize; 5] = [6, 10, 10, 10, 2];
pub const PARAM_COUNT: usize = 312;
pub const MODEL_FORMAT: &str = "pimpcs-model";
pub const MODEL_VERSION: u32 = 1;

/// Fixed partition width for parallel batch reductions; keeps the f64
/// summation tree identical for every worker count.
const REDUCE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    BadConfig(String),
    #[error("stability loss is active but no profile was supplied")]
    MissingProfile,
    #[error("augmented losses are active but no auxiliary set was supplied")]
    MissingAux,
    #[error("loss went non-finite at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        last_params: Box<SurrogateParams>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported model version {found} (this build reads v{expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed model file: {message}")]
    Malformed { message: String },
    #[error("model checksum mismatch: body hashes to {actual} but trailer claims {claimed}")]
    ChecksumMismatch { claimed: String, actual: String },
}

/// Which loss terms participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
    pub l4: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            l1: true,
            l2: true,
            l3: true,
            l4: true,
        }
    }
}

impl LossToggles {
    pub fn none() -> Self {
        LossToggles {
            l1: false,
            l2: false,
            l3: false,
            l4: false,
        }
    }

    pub fn any(&self) -> bool {
        self.l1 || self.l2 || self.l3 || self.l4
    }

    /// Parses a set like `l1,l2,l3`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut t = LossToggles::none();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "l1" => t.l1 = true,
                "l2" => t.l2 = true,
                "l3" => t.l3 = true,
                "l4" => t.l4 = true,
                other => return Err(format!("unknown loss {other:?} (expected l1..l4)")),
            }
        }
        if !t.any() {
            return Err("at least one loss must be active".to_string());
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.l1 {
            parts.push("l1");
        }
        if self.l2 {
            parts.push("l2");
        }
        if self.l3 {
            parts.push("l3");
        }
        if self.l4 {
            parts.push("l4");
        }
        parts.join(",")
    }
}

/// Weights for the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for LossWeights {
    /// The scales that bring the four terms to similar magnitudes.
    fn default() -> Self {
        LossWeights {
            w1: 1.0,
            w2: 1000.0,
            w3: 1.0,
            w4: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.w1, self.w2, self.w3, self.w4];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("loss weights must be finite and non-negative".to_string());
        }
        if !(self.w1 > 0.0) {
            return Err("w1 must be positive".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Minibatch size; 0 selects full-batch training.
    pub batch_size: usize,
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub use_aux: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            weights: LossWeights::default(),
            toggles: LossToggles::default(),
            use_aux: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".to_string());
        }
        if !self.toggles.any() {
            return Err("at least one loss must be active".to_string());
        }
        self.weights.validate()
    }
}

/// Training provenance embedded in the model file.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub toggles: LossToggles,
    pub aux_used: bool,
    pub weights: LossWeights,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dataset_digest: String,
    pub aux_digest: Option<String>,
    pub profile_digest: Option<String>,
    pub plant_digest: String,
    pub final_loss: f64,
}

/// The network parameters: per-layer weight matrices (row-major, one row per
/// output unit) and bias vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParams {
    pub weights: [Vec<f64>; 4],
    pub biases: [Vec<f64>; 4],
    pub seed: u64,
    pub provenance: Option<Provenance>,
}

impl SurrogateParams {
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Flattens layer by layer, weights before biases.
    pub fn to_flat(&self) -> VecN {
        let mut out = Vec::with_capacity(PARAM_COUNT);
        for l in 0..4 {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        VecN(out)
    }

    pub fn from_flat(flat: &VecN, seed: u64, provenance: Option<Provenance>) -> SurrogateParams {
        assert_eq!(flat.dim(), PARAM_COUNT, "flat parameter vector size");
        let mut weights: [Vec<f64>; 4] = Default::default();
        let mut biases: [Vec<f64>; 4] = Default::default();
        let mut pos = 0;
        for l in 0..4 {
            let (n_in, n_out) = (LAYER_DIMS[l], LAYER_DIMS[l + 1]);
            weights[l] = flat.0[pos..pos + n_in * n_out].to_vec();
            pos += n_in * n_out;
            biases[l] = flat.0[pos..pos + n_out].to_vec();
            pos += n_out;
        }
        SurrogateParams {
            weights,
            biases,
            seed,
            provenance,
        }
    }
}

/// Kaiming-uniform initialization: each weight uniform in
/// [-sqrt(6/fan_in), +sqrt(6/fan_in)], biases zero.
pub fn init_params(seed: u64) -> SurrogateParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: [Vec<f64>; 4] = Default::default();
    let mut biases: [Vec<f64>; 4] = Default::default();
    for l in 0..4 {
        let (n_in, n_out) = (LAYER_DIMS[l], LAYER_DIMS[l + 1]);
        let bound = (6.0 / n_in as f64).sqrt();
        weights[l] = (0..n_in * n_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        biases[l] = vec![0.0; n_out];
    }
    SurrogateParams {
        weights,
        biases,
        seed,
        provenance: None,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct ForwardCache {
    input: [f64; 6],
    hidden: [[f64; 10]; 3],
    output: [f64; 2],
}

fn affine(weights: &[f64], biases: &[f64], n_in: usize, input: &[f64], out: &mut [f64]) {
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &weights[o * n_in..(o + 1) * n_in];
        let mut acc = biases[o];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        *slot = acc;
    }
}

fn forward_cached(mu: &SurrogateParams, s: &State) -> ForwardCache {
    let input = s.as_vec6().0;
    let mut hidden = [[0.0; 10]; 3];
    let mut buf = [0.0; 10];

    affine(&mu.weights[0], &mu.biases[0], 6, &input, &mut buf);
    for (h, z) in hidden[0].iter_mut().zip(buf) {
        *h = sigmoid(z);
    }
    for l in 1..3 {
        let prev = hidden[l - 1];
        affine(&mu.weights[l], &mu.biases[l], 10, &prev, &mut buf);
        for (h, z) in hidden[l].iter_mut().zip(buf) {
            *h = sigmoid(z);
        }
    }
    let mut output = [0.0; 2];
    affine(&mu.weights[3], &mu.biases[3], 10, &hidden[2], &mut output);
    ForwardCache {
        input,
        hidden,
        output,
    }
}

/// Network evaluation: three sigmoid hidden layers, linear output.
pub fn forward(mu: &SurrogateParams, s: &State) -> Control {
    let cache = forward_cached(mu, s);
    Control::new(cache.output[0], cache.output[1])
}

/// Accumulates d(loss)/d(params) into `grad` (flat layout) given
/// d(loss)/d(output).
fn backward(mu: &SurrogateParams, cache: &ForwardCache, dl_du: [f64; 2], grad: &mut [f64]) {
    // Flat offsets: layer l weights start after all previous layers.
    const OFFSETS: [(usize, usize); 4] = {
        let mut off = [(0usize, 0usize); 4];
        let mut pos = 0;
        let mut l = 0;
        while l < 4 {
            off[l] = (pos, pos + LAYER_DIMS[l] * LAYER_DIMS[l + 1]);
            pos += LAYER_DIMS[l] * LAYER_DIMS[l + 1] + LAYER_DIMS[l + 1];
            l += 1;
        }
        off
    };

    // Output layer (linear).
    let (w_off, b_off) = OFFSETS[3];
    let mut delta_hidden = [0.0; 10];
    for o in 0..2 {
        let d = dl_du[o];
        let row = &mu.weights[3][o * 10..(o + 1) * 10];
        for i in 0..10 {
            grad[w_off + o * 10 + i] += d * cache.hidden[2][i];
            delta_hidden[i] += row[i] * d;
        }
        grad[b_off + o] += d;
    }

    // Hidden layers in reverse; sigmoid' = a (1 - a).
    let mut delta = delta_hidden;
    for l in (1..3).rev() {
        let (w_off, b_off) = OFFSETS[l];
        let act = &cache.hidden[l];
        let prev = &cache.hidden[l - 1];
        let mut next_delta = [0.0; 10];
        for o in 0..10 {
            let d = delta[o] * act[o] * (1.0 - act[o]);
            let row = &mu.weights[l][o * 10..(o + 1) * 10];
            for i in 0..10 {
                grad[w_off + o * 10 + i] += d * prev[i];
                next_delta[i] += row[i] * d;
            }
            grad[b_off + o] += d;
        }
        delta = next_delta;
    }

    let (w_off, b_off) = OFFSETS[0];
    let act = &cache.hidden[0];
    for o in 0..10 {
        let d = delta[o] * act[o] * (1.0 - act[o]);
        for i in 0..6 {
            grad[w_off + o * 6 + i] += d * cache.input[i];
        }
        grad[b_off + o] += d;
    }
}

/// Euler prediction of the closed loop under the network's control, plus the
/// quantities the loss heads need.
struct EulerPrediction {
    s_hat: [f64; 6],
    /// d(s_hat)/d(u_c) is dt * J_u with only the three acceleration rows
    /// nonzero; stored as those rows.
    dxdd_du: [f64; 2],
    dydd_du: [f64; 2],
    dtdd_du: [f64; 2],
    dt: f64,
}

fn euler_predict(s: &State, u_c: [f64; 2], plant: &PlantParams, dt: f64) -> EulerPrediction {
    let u_net = stabilizer_control(s, plant).add(&Control::new(u_c[0], u_c[1]));
    let f = crate::dynamics::derivative(s, &u_net, plant);
    let sv = s.as_vec6();
    let mut s_hat = [0.0; 6];
    for i in 0..6 {
        s_hat[i] = sv.0[i] + dt * f.0[i];
    }
    let (sin_t, cos_t) = s.theta.sin_cos();
    EulerPrediction {
        s_hat,
        dxdd_du: [-sin_t / plant.m, -sin_t / plant.m],
        dydd_du: [cos_t / plant.m, cos_t / plant.m],
        dtdd_du: [plant.l_half / plant.j, -plant.l_half / plant.j],
        dt,
    }
}

impl EulerPrediction {
    /// Maps d(loss)/d(s_hat) back to d(loss)/d(u_c).
    fn pull_back(&self, v: &[f64; 6]) -> [f64; 2] {
        [
            self.dt * (self.dxdd_du[0] * v[3] + self.dydd_du[0] * v[4] + self.dtdd_du[0] * v[5]),
            self.dt * (self.dxdd_du[1] * v[3] + self.dydd_du[1] * v[4] + self.dtdd_du[1] * v[5]),
        ]
    }
}

fn quad_form(p: &crate::numerics::SymMat6, v: &[f64; 6]) -> f64 {
    p.quadratic_form(&crate::numerics::Vec6(*v))
}

/// Mean squared control-mimicry error over a batch.
pub fn loss_control(mu: &SurrogateParams, batch: &[TransitionSample]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: f64 = batch
        .iter()
        .map(|t| {
            let u = forward(mu, &t.s);
            let dr = t.u_c.u_r - u.u_r;
            let dl = t.u_c.u_l - u.u_l;
            dr * dr + dl * dl
        })
        .sum();
    total / batch.len() as f64
}

/// Mean squared one-step residual between the recorded successor and the
/// Euler prediction under the network's net control.
pub fn loss_dynamics(
    mu: &SurrogateParams,
    batch: &[TransitionSample],
    plant: &PlantParams,
    dt: f64,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: f64 = batch
        .iter()
        .map(|t| {
            let u = forward(mu, &t.s);
            let pred = euler_predict(&t.s, [u.u_r, u.u_l], plant, dt);
            let sp = t.s_plus.as_vec6();
            (0..6).map(|i| {
                let r = sp.0[i] - pred.s_hat[i];
                r * r
            }).sum::<f64>()
        })
        .sum();
    total / batch.len() as f64
}

/// Mean squared stability hinge over a state set: terms activate when the
/// predicted step raises V.
pub fn loss_lyapunov(
    mu: &SurrogateParams,
    states: &[State],
    profile: &StabilityProfile,
    plant: &PlantParams,
    dt: f64,
) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let total: f64 = states
        .iter()
        .map(|s| {
            let u = forward(mu, s);
            let pred = euler_predict(s, [u.u_r, u.u_l], plant, dt);
            let diff =
                quad_form(&profile.p, &pred.s_hat) - profile.p.quadratic_form(&s.as_vec6());
            if diff > 0.0 {
                diff * diff
            } else {
                0.0
            }
        })
        .sum();
    total / states.len() as f64
}

/// Mean squared below-ground hinge on the predicted next-step altitude.
pub fn loss_feasibility(
    mu: &SurrogateParams,
    states: &[State],
    plant: &PlantParams,
    dt: f64,
) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let total: f64 = states
        .iter()
        .map(|s| {
            let u = forward(mu, s);
            let pred = euler_predict(s, [u.u_r, u.u_l], plant, dt);
            let neg = (-pred.s_hat[1]).max(0.0);
            neg * neg
        })
        .sum();
    total / states.len() as f64
}

/// One sample's contribution to the fused loss/gradient pass.
#[allow(clippy::too_many_arguments)]
fn accumulate_sample(
    mu: &SurrogateParams,
    s: &State,
    mimic_target: Option<&Control>,
    successor: Option<&State>,
    toggles: &LossToggles,
    weights: &LossWeights,
    inv_n_data: f64,
    inv_n_states: f64,
    profile: Option<&StabilityProfile>,
    plant: &PlantParams,
    dt: f64,
    losses: &mut [f64; 4],
    grad: &mut [f64],
) {
    let cache = forward_cached(mu, s);
    let u = cache.output;
    let mut dl_du = [0.0; 2];
    let is_data = mimic_target.is_some();

    if toggles.l1 {
        if let Some(target) = mimic_target {
            let dr = u[0] - target.u_r;
            let dl = u[1] - target.u_l;
            losses[0] += (dr * dr + dl * dl) * inv_n_data;
            dl_du[0] += weights.w1 * 2.0 * dr * inv_n_data;
            dl_du[1] += weights.w1 * 2.0 * dl * inv_n_data;
        }
    }

    let needs_prediction =
        (toggles.l2 && is_data) || toggles.l3 || toggles.l4;
    if needs_prediction {
        let pred = euler_predict(s, u, plant, dt);

        if toggles.l2 {
            if let Some(sp) = successor {
                let spv = sp.as_vec6();
                let mut v = [0.0; 6];
                let mut term = 0.0;
                for i in 0..6 {
                    let r = pred.s_hat[i] - spv.0[i];
                    term += r * r;
                    v[i] = weights.w2 * 2.0 * r * inv_n_data;
                }
                losses[1] += term * inv_n_data;
                let du = pred.pull_back(&v);
                dl_du[0] += du[0];
                dl_du[1] += du[1];
            }
        }

        if toggles.l3 {
            let p = &profile.expect("toggle validation happens upstream").p;
            let diff = quad_form(p, &pred.s_hat) - p.quadratic_form(&s.as_vec6());
            if diff > 0.0 {
                losses[2] += diff * diff * inv_n_states;
                // d(diff^2)/d(s_hat) = 4 diff P s_hat.
                let ps = p.mul_vec(&crate::numerics::Vec6(pred.s_hat));
                let mut v = [0.0; 6];
                for i in 0..6 {
                    v[i] = weights.w3 * 4.0 * diff * ps.0[i] * inv_n_states;
                }
                let du = pred.pull_back(&v);
                dl_du[0] += du[0];
                dl_du[1] += du[1];
            }
        }

        if toggles.l4 {
            let y_hat = pred.s_hat[1];
            if y_hat < 0.0 {
                losses[3] += y_hat * y_hat * inv_n_states;
                // The altitude row of the Euler step is control-independent,
                // so this head contributes loss value only; pull_back of a
                // pure position perturbation is exactly zero.
                let mut v = [0.0; 6];
                v[1] = weights.w4 * 2.0 * y_hat * inv_n_states;
                let du = pred.pull_back(&v);
                dl_du[0] += du[0];
                dl_du[1] += du[1];
            }
        }
    }

    if dl_du[0] != 0.0 || dl_du[1] != 0.0 {
        backward(mu, &cache, dl_du, grad);
    }
}

/// Weighted composite loss and its exact gradient over a data batch plus
/// auxiliary states. Inactive losses contribute nothing to either.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_and_grad(
    mu: &SurrogateParams,
    batch: &[TransitionSample],
    aux_states: &[State],
    weights: &LossWeights,
    toggles: &LossToggles,
    profile: Option<&StabilityProfile>,
    plant: &PlantParams,
    dt: f64,
) -> Result<(f64, VecN), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::BadConfig("empty batch".to_string()));
    }
    if toggles.l3 && profile.is_none() {
        return Err(TrainError::MissingProfile);
    }
    let n_data = batch.len();
    let n_states = n_data + aux_states.len();
    let inv_n_data = 1.0 / n_data as f64;
    let inv_n_states = 1.0 / n_states as f64;

    // Fixed-width chunks reduced in index order: bitwise reproducible for
    // any rayon pool size.
    let data_chunks: Vec<([f64; 4], Vec<f64>)> = batch
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut losses = [0.0; 4];
            let mut grad = vec![0.0; PARAM_COUNT];
            for t in chunk {
                accumulate_sample(
                    mu,
                    &t.s,
                    Some(&t.u_c),
                    Some(&t.s_plus),
                    toggles,
                    weights,
                    inv_n_data,
                    inv_n_states,
                    profile,
                    plant,
                    dt,
                    &mut losses,
                    &mut grad,
                );
            }
            (losses, grad)
        })
        .collect();
    let aux_chunks: Vec<([f64; 4], Vec<f64>)> = aux_states
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut losses = [0.0; 4];
            let mut grad = vec![0.0; PARAM_COUNT];
            for s in chunk {
                accumulate_sample(
                    mu,
                    s,
                    None,
                    None,
                    toggles,
                    weights,
                    inv_n_data,
                    inv_n_states,
                    profile,
                    plant,
                    dt,
                    &mut losses,
                    &mut grad,
                );
            }
            (losses, grad)
        })
        .collect();

    let mut losses = [0.0; 4];
    let mut grad = vec![0.0; PARAM_COUNT];
    for (partial, g) in data_chunks.into_iter().chain(aux_chunks) {
        for i in 0..4 {
            losses[i] += partial[i];
        }
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let total = weights.w1 * losses[0]
        + weights.w2 * losses[1]
        + weights.w3 * losses[2]
        + weights.w4 * losses[3];
    Ok((total, VecN(grad)))
}

/// Adam first/second moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Final parameters plus the per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: SurrogateParams,
    pub epoch_losses: Vec<f64>,
}

/// Runs Adam over shuffled minibatches of D (and a proportional slice of the
/// auxiliary set per batch when augmented losses are on).
pub fn train(
    d: &Dataset,
    aux: Option<&AuxSet>,
    profile: Option<&StabilityProfile>,
    cfg: &TrainConfig,
    plant: &PlantParams,
) -> Result<TrainResult, TrainError> {
    cfg.validate().map_err(TrainError::BadConfig)?;
    if d.is_empty() {
        return Err(TrainError::BadConfig("dataset is empty".to_string()));
    }
    if cfg.toggles.l3 && profile.is_none() {
        return Err(TrainError::MissingProfile);
    }
    let aux_needed = cfg.use_aux && (cfg.toggles.l3 || cfg.toggles.l4);
    if aux_needed && aux.is_none() {
        return Err(TrainError::MissingAux);
    }
    let aux_states: &[State] = if aux_needed {
        &aux.unwrap().states
    } else {
        &[]
    };

    let n = d.samples.len();
    let batch_size = if cfg.batch_size == 0 {
        n
    } else {
        cfg.batch_size.min(n)
    };
    let nb = n.div_ceil(batch_size);
    let dt = d.meta.control_dt;

    let mut flat = init_params(cfg.seed).to_flat().0;
    let mut adam = AdamState::new(PARAM_COUNT);
    // Separate stream for the shuffles so reordering the draws cannot alias
    // the initialization stream.
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));

    let mut data_idx: Vec<usize> = (0..n).collect();
    let mut aux_idx: Vec<usize> = (0..aux_states.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_buf: Vec<TransitionSample> = Vec::with_capacity(batch_size);
    let mut aux_buf: Vec<State> = Vec::new();

    for epoch in 0..cfg.epochs {
        data_idx.shuffle(&mut shuffle_rng);
        aux_idx.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        for b in 0..nb {
            let lo = b * batch_size;
            let hi = (lo + batch_size).min(n);
            batch_buf.clear();
            batch_buf.extend(data_idx[lo..hi].iter().map(|&i| d.samples[i]));

            // Per-batch auxiliary slice proportional to the batch count.
            let na = aux_idx.len();
            let a_lo = b * na / nb;
            let a_hi = (b + 1) * na / nb;
            aux_buf.clear();
            aux_buf.extend(aux_idx[a_lo..a_hi].iter().map(|&i| aux_states[i]));

            let params = SurrogateParams::from_flat(&VecN(flat.clone()), cfg.seed, None);
            let (loss, grad) = total_loss_and_grad(
                &params,
                &batch_buf,
                &aux_buf,
                &cfg.weights,
                &cfg.toggles,
                profile,
                plant,
                dt,
            )?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    last_params: Box::new(params),
                });
            }
            adam_step(&mut flat, &grad.0, &mut adam, cfg);
            epoch_sum += loss;
        }
        epoch_losses.push(epoch_sum / nb as f64);
    }

    let provenance = Provenance {
        toggles: cfg.toggles,
        aux_used: aux_needed,
        weights: cfg.weights,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        dataset_digest: d.digest(),
        aux_digest: if aux_needed {
            Some(aux.unwrap().digest())
        } else {
            None
        },
        profile_digest: profile.map(|p| p.digest()),
        plant_digest: plant.digest(),
        final_loss: *epoch_losses.last().unwrap(),
    };
    let params = SurrogateParams::from_flat(&VecN(flat), cfg.seed, Some(provenance));
    Ok(TrainResult {
        params,
        epoch_losses,
    })
}

/// Inference policy wrapping trained parameters; pure and re-entrant.
pub struct SurrogatePolicy<'a> {
    pub params: &'a SurrogateParams,
}

impl Policy for SurrogatePolicy<'_> {
    fn control(&mut self, state: &State) -> Result<Control, String> {
        Ok(forward(self.params, state))
    }
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

fn opt_field(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or("-")
}

pub fn save_model(mu: &SurrogateParams, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, model_to_string(mu)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn model_to_string(mu: &SurrogateParams) -> String {
    let mut body = format!("# {MODEL_FORMAT} v{MODEL_VERSION}\n");
    body.push_str("dims=6,10,10,10,2; act=sigmoid\n");
    body.push_str(&format!("# seed={}\n", mu.seed));
    if let Some(p) = &mu.provenance {
        body.push_str(&format!("# losses={}\n", p.toggles.label()));
        body.push_str(&format!("# aux={}\n", p.aux_used));
        body.push_str(&format!(
            "# loss_weights={},{},{},{}\n",
            fmt_f64(p.weights.w1),
            fmt_f64(p.weights.w2),
            fmt_f64(p.weights.w3),
            fmt_f64(p.weights.w4)
        ));
        body.push_str(&format!("# epochs={}\n", p.epochs));
        body.push_str(&format!("# lr={}\n", fmt_f64(p.learning_rate)));
        body.push_str(&format!("# batch={}\n", p.batch_size));
        body.push_str(&format!("# dataset={}\n", p.dataset_digest));
        body.push_str(&format!("# auxset={}\n", opt_field(&p.aux_digest)));
        body.push_str(&format!("# profile={}\n", opt_field(&p.profile_digest)));
        body.push_str(&format!("# plant={}\n", p.plant_digest));
        body.push_str(&format!("# final_loss={}\n", fmt_f64(p.final_loss)));
    }
    for l in 0..4 {
        let (n_in, n_out) = (LAYER_DIMS[l], LAYER_DIMS[l + 1]);
        for o in 0..n_out {
            let row: Vec<String> = mu.weights[l][o * n_in..(o + 1) * n_in]
                .iter()
                .map(|v| fmt_f64(*v))
                .collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        let row: Vec<String> = mu.biases[l].iter().map(|v| fmt_f64(*v)).collect();
        body.push_str(&row.join(","));
        body.push('\n');
    }
    let digest = sha256_hex(body.as_bytes());
    format!("{body}# sha256={digest}\n")
}

pub fn load_model(path: &Path) -> Result<SurrogateParams, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_string(&text)
}

pub fn model_from_string(text: &str) -> Result<SurrogateParams, TrainError> {
    let malformed = |message: String| TrainError::Malformed { message };
    let mut lines = text.lines().peekable();
    let header = lines
        .next()
        .ok_or_else(|| malformed("empty file".to_string()))?;
    let (version, _) =
        crate::fmtio::parse_header(header, MODEL_FORMAT).map_err(malformed)?;
    if version != MODEL_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let arch = lines
        .next()
        .ok_or_else(|| malformed("missing architecture line".to_string()))?;
    if arch.trim() != "dims=6,10,10,10,2; act=sigmoid" {
        return Err(malformed(format!("unsupported architecture {arch:?}")));
    }

    // Provenance block: leading `# key=value` lines.
    let mut meta: Vec<(String, String)> = Vec::new();
    while let Some(line) = lines.peek() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                if k.trim() == "sha256" {
                    break;
                }
                meta.push((k.trim().to_string(), v.trim().to_string()));
                lines.next();
                continue;
            }
        }
        break;
    }
    let get = |key: &str| meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let seed: u64 = get("seed")
        .ok_or_else(|| malformed("missing seed".to_string()))?
        .parse()
        .map_err(|_| malformed("seed must be an integer".to_string()))?;

    let provenance = if let Some(losses) = get("losses") {
        let opt = |v: Option<String>| v.filter(|s| s != "-");
        let weights_text =
            get("loss_weights").ok_or_else(|| malformed("missing loss_weights".to_string()))?;
        let wv: Vec<f64> = weights_text
            .split(',')
            .map(|f| parse_f64(f).map_err(malformed))
            .collect::<Result<_, _>>()?;
        if wv.len() != 4 {
            return Err(malformed("loss_weights must have 4 entries".to_string()));
        }
        Some(Provenance {
            toggles: LossToggles::parse(&losses).map_err(malformed)?,
            aux_used: get("aux").as_deref() == Some("true"),
            weights: LossWeights {
                w1: wv[0],
                w2: wv[1],
                w3: wv[2],
                w4: wv[3],
            },
            epochs: get("epochs")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| malformed("missing epochs".to_string()))?,
            learning_rate: get("lr")
                .ok_or_else(|| malformed("missing lr".to_string()))
                .and_then(|v| parse_f64(&v).map_err(malformed))?,
            batch_size: get("batch")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| malformed("missing batch".to_string()))?,
            dataset_digest: get("dataset")
                .ok_or_else(|| malformed("missing dataset digest".to_string()))?,
            aux_digest: opt(get("auxset")),
            profile_digest: opt(get("profile")),
            plant_digest: get("plant")
                .ok_or_else(|| malformed("missing plant digest".to_string()))?,
            final_loss: get("final_loss")
                .ok_or_else(|| malformed("missing final_loss".to_string()))
                .and_then(|v| parse_f64(&v).map_err(malformed))?,
        })
    } else {
        None
    };

    let mut weights: [Vec<f64>; 4] = Default::default();
    let mut biases: [Vec<f64>; 4] = Default::default();
    let mut parse_row = |expected: usize| -> Result<Vec<f64>, TrainError> {
        let line = lines
            .next()
            .ok_or_else(|| TrainError::Malformed {
                message: "file ends inside the parameter block".to_string(),
            })?;
        let row: Vec<f64> = line
            .split(',')
            .map(|f| parse_f64(f).map_err(|message| TrainError::Malformed { message }))
            .collect::<Result<_, _>>()?;
        if row.len() != expected {
            return Err(TrainError::Malformed {
                message: format!("row has {} entries, expected {expected}", row.len()),
            });
        }
        Ok(row)
    };
    for l in 0..4 {
        let (n_in, n_out) = (LAYER_DIMS[l], LAYER_DIMS[l + 1]);
        let mut w = Vec::with_capacity(n_in * n_out);
        for _ in 0..n_out {
            w.extend(parse_row(n_in)?);
        }
        weights[l] = w;
        biases[l] = parse_row(n_out)?;
    }

    let trailer = lines
        .next()
        .ok_or_else(|| malformed("missing checksum trailer".to_string()))?;
    let claimed = trailer
        .strip_prefix("# sha256=")
        .ok_or_else(|| malformed(format!("expected checksum trailer, got {trailer:?}")))?
        .trim()
        .to_string();
    let body_end = text.rfind("# sha256=").expect("trailer located above");
    let actual = sha256_hex(&text.as_bytes()[..body_end]);
    if actual != claimed {
        return Err(TrainError::ChecksumMismatch { claimed, actual });
    }

    Ok(SurrogateParams {
        weights,
        biases,
        seed,
        provenance,
    })
}
