//! Discrete, edge-only denoising diffusion.
//!
//! Edges are binary categories. The cumulative transition kernel at step t is
//! Q-bar(t) = alpha_bar(t) * I + (1 - alpha_bar(t)) * M, where M replicates
//! the stationary edge marginal m on both rows and alpha_bar follows the
//! squared-cosine retention curve
//!
//! ```text
//! alpha_bar(t) = cos(0.5 * pi * (t/T + s) / (1 + s))^2
//! ```
//!
//! with a small offset s. Nodes are never noised; the upper triangle is the
//! sampling unit and is mirrored to keep noisy graphs symmetric.
//!
//! The single-step kernel Q(t) = alpha(t) * I + (1 - alpha(t)) * M with
//! alpha(t) = alpha_bar(t) / alpha_bar(t-1) composes exactly:
//! Q-bar(t-1) . Q(t) = alpha(t) * Q-bar(t-1) + (1 - alpha(t)) * M
//! = alpha_bar(t) * I + (alpha(t) * beta_bar(t-1) + 1 - alpha(t)) * M
//! = Q-bar(t), since alpha(t) * (1 - alpha_bar(t-1)) + 1 - alpha(t)
//! = 1 - alpha_bar(t). The identity is also checked numerically in the
//! test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::AdjMatrix;
use crate::tensor::DTensor;

/// Cosine retention schedule plus the scalar edge marginal.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    horizon: usize,
    offset: f64,
    marginal: f64,
    alpha_bar: Vec<f64>,
}

/// Tabulates alpha_bar for t = 0..=T.
pub fn build_schedule(horizon: usize, offset: f64, marginal: f64) -> Result<DiffusionSchedule> {
    if horizon == 0 {
        return Err(Error::Validation("diffusion horizon T must be >= 1".into()));
    }
    if offset <= 0.0 {
        return Err(Error::Validation("schedule offset s must be > 0".into()));
    }
    if !(0.0 < marginal && marginal < 1.0) {
        return Err(Error::Validation(format!(
            "edge marginal m must lie in (0, 1), got {marginal}"
        )));
    }
    let t_max = horizon as f64;
    let alpha_bar: Vec<f64> = (0..=horizon)
        .map(|t| {
            let phase = 0.5 * std::f64::consts::PI * (t as f64 / t_max + offset) / (1.0 + offset);
            phase.cos().powi(2)
        })
        .collect();
    Ok(DiffusionSchedule {
        horizon,
        offset,
        marginal,
        alpha_bar,
    })
}

impl DiffusionSchedule {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn marginal(&self) -> f64 {
        self.marginal
    }

    /// Cumulative retention probability at step t (t in 0..=T).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Cumulative kernel rows over states (absent, present):
    /// row e = P(e_t | e_0 = e).
    pub fn q_bar(&self, t: usize) -> [[f64; 2]; 2] {
        let ab = self.alpha_bar[t];
        let bb = 1.0 - ab;
        let m = self.marginal;
        [
            [ab + bb * (1.0 - m), bb * m],
            [bb * (1.0 - m), ab + bb * m],
        ]
    }

    /// Single-step kernel Q(t) mapping state at t-1 to state at t.
    pub fn q_single(&self, t: usize) -> [[f64; 2]; 2] {
        let alpha = self.alpha_bar[t] / self.alpha_bar[t - 1];
        let beta = 1.0 - alpha;
        let m = self.marginal;
        [
            [alpha + beta * (1.0 - m), beta * m],
            [beta * (1.0 - m), alpha + beta * m],
        ]
    }
}

/// Posterior q(e_{t-1} | e_0, e_t) as [P(absent), P(present)].
pub fn posterior(schedule: &DiffusionSchedule, t: usize, e0: bool, e_t: bool) -> Result<[f64; 2]> {
    if t == 0 || t > schedule.horizon() {
        return Err(Error::Validation(format!(
            "posterior step t must lie in 1..=T, got {t}"
        )));
    }
    let q_t = schedule.q_single(t);
    let q_prev = schedule.q_bar(t - 1);
    let e0i = usize::from(e0);
    let eti = usize::from(e_t);
    let unnorm = [q_t[0][eti] * q_prev[e0i][0], q_t[1][eti] * q_prev[e0i][1]];
    let z = unnorm[0] + unnorm[1];
    if !(z > 0.0) {
        return Err(Error::Numeric(format!(
            "posterior normalizer vanished at t={t} (e0={e0}, e_t={e_t})"
        )));
    }
    Ok([unnorm[0] / z, unnorm[1] / z])
}

/// Edges after t forward steps. Nodes are untouched by construction; the
/// noisy adjacency stays symmetric with a zero diagonal.
#[derive(Clone, Debug)]
pub struct NoisyGraph {
    pub edges: AdjMatrix,
    pub t: usize,
}

/// Samples the forward process: each strict-upper-triangle entry moves
/// independently under the row of q_bar(t) selected by its clean state.
pub fn forward_noise(
    label: &AdjMatrix,
    schedule: &DiffusionSchedule,
    t: usize,
    rng: &mut impl Rng,
) -> Result<NoisyGraph> {
    if t > schedule.horizon() {
        return Err(Error::Validation(format!(
            "forward step {t} beyond horizon {}",
            schedule.horizon()
        )));
    }
    let q = schedule.q_bar(t);
    let n = label.n();
    let mut edges = AdjMatrix::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let row = q[usize::from(label.get(i, j))];
            edges.set_sym(i, j, rng.random::<f64>() < row[1]);
        }
    }
    Ok(NoisyGraph { edges, t })
}

/// Pre-drawn uniforms for one reverse trajectory: one symmetric matrix for
/// the init draw and one per reverse step. Keeping the noise explicit makes
/// the sampler a deterministic function of (plan, denoiser), which the
/// permutation-consistency tests rely on.
#[derive(Clone, Debug)]
pub struct NoisePlan {
    n: usize,
    init: Vec<f64>,
    steps: Vec<Vec<f64>>,
}

impl NoisePlan {
    /// Draws upper-triangle uniforms (mirrored) for T steps plus the init.
    pub fn draw(n: usize, horizon: usize, rng: &mut impl Rng) -> NoisePlan {
        let draw_matrix = |rng: &mut dyn FnMut() -> f64| {
            let mut mat = vec![0.0; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let u = rng();
                    mat[i * n + j] = u;
                    mat[j * n + i] = u;
                }
            }
            mat
        };
        let mut gen = || rng.random::<f64>();
        let init = draw_matrix(&mut gen);
        let steps = (0..horizon).map(|_| draw_matrix(&mut gen)).collect();
        NoisePlan { n, init, steps }
    }

    /// Relabels the noise consistently with a node permutation: entry (i, j)
    /// moves to (perm[i], perm[j]).
    pub fn permuted(&self, perm: &[usize]) -> NoisePlan {
        let n = self.n;
        let map = |mat: &Vec<f64>| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[perm[i] * n + perm[j]] = mat[i * n + j];
                }
            }
            out
        };
        NoisePlan {
            n,
            init: map(&self.init),
            steps: self.steps.iter().map(map).collect(),
        }
    }

    fn at(mat: &[f64], n: usize, i: usize, j: usize) -> f64 {
        mat[i * n + j]
    }
}

/// How the final clean-edge estimate leaves the sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalStep {
    /// Expected clean state thresholded at 0.5 (default; lower variance).
    Threshold,
    /// Sample the final state like every other step.
    Sample,
}

/// A denoising model: given the noisy edges and the step index, predict
/// P(e_0 = 1) for every pair.
pub trait Denoiser {
    fn predict(&self, noisy: &AdjMatrix, t: usize) -> Result<DTensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&AdjMatrix, usize) -> Result<DTensor>,
{
    fn predict(&self, noisy: &AdjMatrix, t: usize) -> Result<DTensor> {
        self(noisy, t)
    }
}

/// Reverse sampling (deterministic given the plan): initialize every pair at
/// Bernoulli(m), then walk t = T..1 mixing the posterior over the model's
/// clean-edge belief:
///
/// ```text
/// P(e_{t-1} = v) = sum_{e0} q(v | e0, e_t) * p_theta(e0 | G_t)
/// ```
///
/// At t = 1 the same marginalization yields the clean-state distribution,
/// which is thresholded (or sampled, per `final_step`).
pub fn sample_reverse_with_plan(
    schedule: &DiffusionSchedule,
    n: usize,
    denoiser: &dyn Denoiser,
    plan: &NoisePlan,
    final_step: FinalStep,
) -> Result<AdjMatrix> {
    if plan.n != n || plan.steps.len() != schedule.horizon() {
        return Err(Error::Contract(format!(
            "noise plan shaped for (n={}, T={}) used with (n={n}, T={})",
            plan.n,
            plan.steps.len(),
            schedule.horizon()
        )));
    }
    let m = schedule.marginal();
    let mut current = AdjMatrix::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            current.set_sym(i, j, NoisePlan::at(&plan.init, n, i, j) < m);
        }
    }
    for t in (1..=schedule.horizon()).rev() {
        let p_hat = denoiser.predict(&current, t)?;
        let mut next = AdjMatrix::new(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let p1 = p_hat.at2(i, j).clamp(0.0, 1.0);
                let e_t = current.get(i, j);
                let post_absent = posterior(schedule, t, false, e_t)?;
                let post_present = posterior(schedule, t, true, e_t)?;
                let prob_prev = (1.0 - p1) * post_absent[1] + p1 * post_present[1];
                let bit = if t == 1 && final_step == FinalStep::Threshold {
                    prob_prev >= 0.5
                } else {
                    NoisePlan::at(&plan.steps[t - 1], n, i, j) < prob_prev
                };
                next.set_sym(i, j, bit);
            }
        }
        current = next;
    }
    Ok(current)
}

/// Reverse sampling with noise drawn from an RNG (deterministic per seed).
pub fn sample_reverse(
    schedule: &DiffusionSchedule,
    n: usize,
    denoiser: &dyn Denoiser,
    seed: u64,
    final_step: FinalStep,
) -> Result<AdjMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = NoisePlan::draw(n, schedule.horizon(), &mut rng);
    sample_reverse_with_plan(schedule, n, denoiser, &plan, final_step)
}
