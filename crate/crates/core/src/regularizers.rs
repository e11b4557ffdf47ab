//! Parameter-regularization methods for continual learning.
//!
//! Both methods add a weighted quadratic pull toward an anchor parameter
//! vector to the task loss:
//!
//! ```text
//! L(θ) = L_new(θ) + β Σ_i ω_i (θ_i − θ*_i)²
//! ```
//!
//! * EWC: `β = λ/2`, `ω = diag(F)` estimated at the end of the previous task,
//!   anchor = parameters at the end of the previous task. Each task boundary
//!   replaces the anchor and the Fisher diagonal.
//! * SI: `β = α`, `ω = Ω`, an importance accumulated over all finished tasks
//!   from each parameter's share of the loss decrease along the training
//!   path, normalized by its squared displacement plus a damping `ξ`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{FrameBatch, Matrix, Network, ParamVector};
use crate::seed;

/// Which continual-learning regularizer a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Ewc,
    Si,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::None, Method::Ewc, Method::Si];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Ewc => "ewc",
            Method::Si => "si",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::None => "No CL",
            Method::Ewc => "EWC",
            Method::Si => "SI",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "nocl" | "no-cl" => Ok(Method::None),
            "ewc" => Ok(Method::Ewc),
            "si" => Ok(Method::Si),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Unweighted sum over all classes of squared log-probability gradients.
    AllClasses,
    /// Class terms weighted by the model's own probabilities (true Fisher diagonal).
    ModelWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherConfig {
    pub mode: FisherMode,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig {
            mode: FisherMode::AllClasses,
            n_samples: 2000,
            seed: 0,
        }
    }
}

/// Diagonal Fisher estimate over `min(n_samples, frames)` frames drawn
/// without replacement from `data`.
///
/// Fails on `n_samples == 0`. When the data holds fewer frames than
/// requested, every frame is used.
pub fn estimate_fisher_diag(
    net: &Network,
    data: &FrameBatch,
    cfg: &FisherConfig,
) -> Result<ParamVector> {
    if cfg.n_samples == 0 {
        return Err(Error::Config("Fisher sample count must be positive".into()));
    }
    let available = data.len();
    let n = cfg.n_samples.min(available);
    let mut rng = seed::rng(cfg.seed);
    let mut picks = index::sample(&mut rng, available, n).into_vec();
    picks.sort_unstable();

    let cols = data.features().cols();
    let mut rows = Vec::with_capacity(n * cols);
    for &i in &picks {
        rows.extend_from_slice(data.features().row(i));
    }
    let features = Matrix::new(n, cols, rows)?;
    let trace = net.trace(&features)?;

    let sizes = &net.config().layer_sizes;
    let layers = sizes.len() - 1;
    let c = net.vocab_size();
    let segs = net.layout().segments().to_vec();
    let params = net.params().values();
    let activation = net.config().activation;
    let mut fisher = net.params().zeros_like();
    let acc = fisher.values_mut();

    // Per-frame deltas of log p_k for every class k at once: [C × width].
    let mut delta = vec![0.0; c * c];
    for r in 0..n {
        let p = &trace.probs[r * c..(r + 1) * c];
        delta.resize(c * c, 0.0);
        for k in 0..c {
            let weight = match cfg.mode {
                FisherMode::AllClasses => 1.0,
                FisherMode::ModelWeighted => p[k].sqrt(),
            };
            let row = &mut delta[k * c..(k + 1) * c];
            for (j, d) in row.iter_mut().enumerate() {
                let indicator = if j == k { 1.0 } else { 0.0 };
                *d = weight * (indicator - p[j]);
            }
        }
        for l in (0..layers).rev() {
            let fan_in = sizes[l];
            let fan_out = sizes[l + 1];
            let h = &trace.inputs[l][r * fan_in..(r + 1) * fan_in];
            let wseg = segs[2 * l];
            let bseg = segs[2 * l + 1];
            for o in 0..fan_out {
                let sq: f64 = (0..c).map(|k| delta[k * fan_out + o].powi(2)).sum();
                if sq == 0.0 {
                    continue;
                }
                acc[bseg.offset + o] += sq;
                let wrow = &mut acc[wseg.offset + o * fan_in..wseg.offset + (o + 1) * fan_in];
                for (f, hi) in wrow.iter_mut().zip(h) {
                    *f += sq * hi * hi;
                }
            }
            if l == 0 {
                break;
            }
            let w = &params[wseg.range()];
            let mut prev = vec![0.0; c * fan_in];
            for k in 0..c {
                let d = &delta[k * fan_out..(k + 1) * fan_out];
                let pr = &mut prev[k * fan_in..(k + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (pi, wi) in pr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *pi += dv * wi;
                    }
                }
                for (pi, hi) in pr.iter_mut().zip(h) {
                    *pi *= activation.derivative_from_output(*hi);
                }
            }
            delta = prev;
        }
    }
    let inv_n = 1.0 / n as f64;
    for v in acc.iter_mut() {
        *v *= inv_n;
    }
    fisher.ensure_finite("Fisher estimate")?;
    Ok(fisher)
}

/// The shared quadratic form `β Σ ω_i (θ_i − θ*_i)²` and its gradient.
pub fn weighted_quadratic(
    theta: &ParamVector,
    anchor: &ParamVector,
    importance: &ParamVector,
    beta: f64,
) -> Result<(f64, ParamVector)> {
    theta.ensure_same_layout(anchor, "quadratic penalty anchor")?;
    theta.ensure_same_layout(importance, "quadratic penalty importance")?;
    let mut grad = theta.zeros_like();
    let mut sum = 0.0;
    for (((g, t), a), w) in grad
        .values_mut()
        .iter_mut()
        .zip(theta.values())
        .zip(anchor.values())
        .zip(importance.values())
    {
        let d = t - a;
        sum += w * d * d;
        *g = 2.0 * beta * w * d;
    }
    Ok((beta * sum, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub theta_star: ParamVector,
    pub fisher_diag: ParamVector,
    pub lambda: f64,
    /// Number of task boundaries this state has been rebuilt at.
    pub consolidations: u32,
}

impl EwcState {
    pub fn new(theta_star: ParamVector, fisher_diag: ParamVector, lambda: f64) -> Result<EwcState> {
        theta_star.ensure_same_layout(&fisher_diag, "EWC state")?;
        check_strength("lambda", lambda)?;
        fisher_diag.ensure_finite("Fisher diagonal")?;
        if fisher_diag.values().iter().any(|&f| f < 0.0) {
            return Err(Error::Domain("Fisher diagonal has a negative entry".into()));
        }
        Ok(EwcState {
            theta_star,
            fisher_diag,
            lambda,
            consolidations: 0,
        })
    }

    /// A state with zero importance everywhere: contributes no penalty until
    /// the first task boundary.
    pub fn unanchored(theta: &ParamVector, lambda: f64) -> Result<EwcState> {
        EwcState::new(theta.clone(), theta.zeros_like(), lambda)
    }

    pub fn beta(&self) -> f64 {
        self.lambda / 2.0
    }

    /// `(λ/2) Σ F_ii (θ_i − θ*_i)²` and its gradient `λ F_ii (θ_i − θ*_i)`.
    pub fn penalty(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        theta.ensure_same_layout(&self.theta_star, "EWC penalty")?;
        let mut grad = theta.zeros_like();
        let mut sum = 0.0;
        for (((g, t), a), f) in grad
            .values_mut()
            .iter_mut()
            .zip(theta.values())
            .zip(self.theta_star.values())
            .zip(self.fisher_diag.values())
        {
            let d = t - a;
            sum += f * d * d;
            *g = self.lambda * f * d;
        }
        Ok((0.5 * self.lambda * sum, grad))
    }

    /// Replace the anchor and Fisher diagonal with those of the task just finished.
    pub fn consolidate(&mut self, net: &Network, data: &FrameBatch, cfg: &FisherConfig) -> Result<()> {
        net.params().ensure_same_layout(&self.theta_star, "EWC consolidation")?;
        self.fisher_diag = estimate_fisher_diag(net, data, cfg)?;
        self.theta_star = net.params().clone();
        self.consolidations += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiState {
    /// Per-parameter contribution to the loss decrease during the current task.
    pub omega_running: ParamVector,
    /// Importance accumulated over every finished task.
    pub big_omega: ParamVector,
    /// Parameters at the end of the previous task.
    pub theta_anchor: ParamVector,
    /// Parameters at the start of the current task.
    pub theta_task_start: ParamVector,
    pub alpha: f64,
    pub xi: f64,
    pub consolidations: u32,
}

impl SiState {
    pub fn new(theta: &ParamVector, alpha: f64, xi: f64) -> Result<SiState> {
        check_strength("alpha", alpha)?;
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::Config(format!("SI damping xi must be positive, got {xi}")));
        }
        Ok(SiState {
            omega_running: theta.zeros_like(),
            big_omega: theta.zeros_like(),
            theta_anchor: theta.clone(),
            theta_task_start: theta.clone(),
            alpha,
            xi,
            consolidations: 0,
        })
    }

    pub fn beta(&self) -> f64 {
        self.alpha
    }

    fn check_layout(&self, v: &ParamVector, what: &str) -> Result<()> {
        self.theta_anchor.ensure_same_layout(v, what)
    }

    pub fn begin_task(&mut self, theta: &ParamVector) -> Result<()> {
        self.check_layout(theta, "SI begin_task")?;
        self.omega_running.values_mut().fill(0.0);
        self.theta_task_start = theta.clone();
        Ok(())
    }

    /// `ω_k += −g_k · Δθ_k` for one optimizer step, where `g` is the task-loss
    /// gradient at the pre-step parameters.
    pub fn accumulate(&mut self, grad_before_step: &ParamVector, delta: &ParamVector) -> Result<()> {
        self.check_layout(grad_before_step, "SI accumulate gradient")?;
        self.check_layout(delta, "SI accumulate delta")?;
        for ((w, g), d) in self
            .omega_running
            .values_mut()
            .iter_mut()
            .zip(grad_before_step.values())
            .zip(delta.values())
        {
            *w -= g * d;
        }
        Ok(())
    }

    /// `Ω_k += ω_k / ((θ_end,k − θ_start,k)² + ξ)`, then re-anchor at `θ_end`.
    pub fn consolidate(&mut self, theta_end: &ParamVector) -> Result<()> {
        self.check_layout(theta_end, "SI consolidate")?;
        for (((big, w), end), start) in self
            .big_omega
            .values_mut()
            .iter_mut()
            .zip(self.omega_running.values())
            .zip(theta_end.values())
            .zip(self.theta_task_start.values())
        {
            let disp = end - start;
            *big += w / (disp * disp + self.xi);
        }
        self.big_omega.ensure_finite("SI importance")?;
        self.theta_anchor = theta_end.clone();
        self.omega_running.values_mut().fill(0.0);
        self.consolidations += 1;
        Ok(())
    }

    /// Importance used by the penalty: negative entries of Ω clamped to 0.
    pub fn effective_importance(&self) -> ParamVector {
        let mut v = self.big_omega.clone();
        for x in v.values_mut() {
            *x = x.max(0.0);
        }
        v
    }

    /// `α Σ max(Ω_k, 0) (θ_k − θ_anchor,k)²` and its gradient.
    pub fn penalty(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        self.check_layout(theta, "SI penalty")?;
        let mut grad = theta.zeros_like();
        let mut sum = 0.0;
        for (((g, t), a), big) in grad
            .values_mut()
            .iter_mut()
            .zip(theta.values())
            .zip(self.theta_anchor.values())
            .zip(self.big_omega.values())
        {
            let w = big.max(0.0);
            let d = t - a;
            sum += w * d * d;
            *g = 2.0 * self.alpha * w * d;
        }
        Ok((self.alpha * sum, grad))
    }
}

fn check_strength(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

/// Regularizer state carried alongside a network.
#[derive(Debug, Clone, PartialEq)]
pub enum RegState {
    None,
    Ewc(EwcState),
    Si(SiState),
}

impl RegState {
    /// Fresh state for `method`, anchored at `theta` with zero importance.
    pub fn fresh(method: Method, theta: &ParamVector, strength: f64, xi: f64) -> Result<RegState> {
        Ok(match method {
            Method::None => RegState::None,
            Method::Ewc => RegState::Ewc(EwcState::unanchored(theta, strength)?),
            Method::Si => RegState::Si(SiState::new(theta, strength, xi)?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            RegState::None => Method::None,
            RegState::Ewc(_) => Method::Ewc,
            RegState::Si(_) => Method::Si,
        }
    }

    pub fn beta(&self) -> f64 {
        match self {
            RegState::None => 0.0,
            RegState::Ewc(s) => s.beta(),
            RegState::Si(s) => s.beta(),
        }
    }

    pub fn penalty(&self, theta: &ParamVector) -> Result<Option<(f64, ParamVector)>> {
        match self {
            RegState::None => Ok(None),
            RegState::Ewc(s) => s.penalty(theta).map(Some),
            RegState::Si(s) => s.penalty(theta).map(Some),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedLoss {
    pub total: f64,
    pub task_loss: f64,
    pub penalty: f64,
    pub beta: f64,
}

/// Loss and gradients of one regularized training step.
#[derive(Debug, Clone)]
pub struct RegularizedStep {
    pub loss: RegularizedLoss,
    /// Gradient of the total (task + penalty) loss.
    pub grad: ParamVector,
    /// Gradient of the task loss alone.
    pub task_grad: ParamVector,
}

pub fn regularized_step(net: &Network, batch: &FrameBatch, state: &RegState) -> Result<RegularizedStep> {
    let (task_loss, task_grad) = net.loss_and_grad(batch)?;
    let beta = state.beta();
    // A zero-strength penalty is skipped outright so the update is bitwise the plain one.
    let active = match state {
        RegState::None => None,
        _ if beta == 0.0 => None,
        _ => state.penalty(net.params())?,
    };
    let (penalty, grad) = match active {
        None => (0.0, task_grad.clone()),
        Some((penalty, pgrad)) => {
            let mut grad = task_grad.clone();
            grad.add_scaled(&pgrad, 1.0)?;
            grad.ensure_finite("regularized gradient")?;
            (penalty, grad)
        }
    };
    Ok(RegularizedStep {
        loss: RegularizedLoss {
            total: task_loss + penalty,
            task_loss,
            penalty,
            beta: if matches!(state, RegState::None) { 0.0 } else { beta },
        },
        grad,
        task_grad,
    })
}

/// Task loss plus the method's penalty, with the summed gradient.
pub fn regularized_loss_and_grad(
    net: &Network,
    batch: &FrameBatch,
    state: &RegState,
) -> Result<(RegularizedLoss, ParamVector)> {
    let step = regularized_step(net, batch, state)?;
    Ok((step.loss, step.grad))
}
