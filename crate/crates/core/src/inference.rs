//! Stochastic variational EM.
//!
//! The E-step runs coordinate ascent on each location's posterior
//! (`γ → q_BD → flood → wind`), every update non-decreasing in that
//! location's bound. The M-step is one gradient-ascent step on the edge
//! weights. The objective ascended by the M-step is the mean per-location
//! bound, so the learning rate does not depend on the map size.

use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use crate::elbo::{elbo_gradient, elbo_location_unchecked, location_gradient, WeightGradient};
use crate::error::{Error, Result};
use crate::geodata::{LocationRecord, LocationTable};
use crate::model::{
    damage_logit_moments, jaakkola_g_unchecked, sigmoid, EdgeWeights, GraphVariant, Hazard, LocationPosterior,
    MomentPair,
};
use crate::oracle::{mcmc_posterior, stream_rng, McmcConfig};

pub const Q_MIN: f64 = 1e-6;
pub const Q_MAX: f64 = 1.0 - 1e-6;
const GAMMA_MIN: f64 = 1e-8;
/// Smallest magnitude a noise weight may take after an M-step.
const NOISE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PosteriorMethod {
    Variational,
    Mcmc(McmcConfig),
}

/// Starting point for the edge weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Initialization {
    /// Couplings and leaks uniform in (−0.1, 0.1); prior and noise weights 1.
    Uniform,
    /// `Uniform` plus sign-informed causal edges: hazards → damage start
    /// at +2, flood/damage → DPM at +1, and the damage leak is set so the
    /// median prior damage logit over the map is −2 (damage is rare).
    ///
    /// From the `Uniform` start, q_BD is nearly flat across locations, which
    /// drives the DPM coupling of damage to zero and the fit never leaves
    /// that saddle.
    Informed,
    Given(EdgeWeights),
}

const INFORMED_HAZARD_EDGE: f64 = 2.0;
const INFORMED_DPM_EDGE: f64 = 1.0;
const INFORMED_MEDIAN_LOGIT: f64 = -2.0;

impl Initialization {
    pub fn weights(&self, records: &[LocationRecord], rng: &mut impl Rng) -> EdgeWeights {
        match self {
            Initialization::Uniform => initial_weights(rng),
            Initialization::Informed => {
                let mut w = initial_weights(rng);
                w.flood_to_damage += INFORMED_HAZARD_EDGE;
                w.wind_to_damage += INFORMED_HAZARD_EDGE;
                w.flood_to_dpm += INFORMED_DPM_EDGE;
                w.damage_to_dpm += INFORMED_DPM_EDGE;
                let mut logits: Vec<f64> = records
                    .iter()
                    .map(|r| {
                        w.flood_to_damage * w.hazard_conditional_mean(Hazard::Flood, r.a_f).exp()
                            + w.wind_to_damage * w.hazard_conditional_mean(Hazard::Wind, r.a_w).exp()
                    })
                    .collect();
                if !logits.is_empty() {
                    let mid = logits.len() / 2;
                    let (_, median, _) = logits.select_nth_unstable_by(mid, f64::total_cmp);
                    w.damage_leak = INFORMED_MEDIAN_LOGIT - *median;
                }
                w
            }
            Initialization::Given(w) => *w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Learning rate ρ.
    pub learning_rate: f64,
    /// Use `ρ / √t` at the t-th M-step instead of a constant rate.
    pub decay: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the relative change of the full-data bound over an epoch
    /// falls below this.
    pub elbo_rel_tol: f64,
    pub seed: u64,
    pub e_step_sweeps: usize,
    /// Drop damage nodes where there is no building footprint.
    pub pruning: bool,
    /// Halve the M-step until the batch bound does not decrease.
    pub m_step_backtracking: bool,
    pub method: PosteriorMethod,
    pub init: Initialization,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-2,
            decay: false,
            batch_size: 256,
            max_epochs: 200,
            elbo_rel_tol: 1e-5,
            seed: 0,
            e_step_sweeps: 3,
            pruning: true,
            m_step_backtracking: false,
            method: PosteriorMethod::Variational,
            init: Initialization::Informed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-location lower bound on `log p(y)`, constants included.
    pub elbo: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub weights: EdgeWeights,
    /// Aligned with the table's records.
    pub posteriors: Vec<LocationPosterior>,
    pub variants: Vec<GraphVariant>,
    pub elbo_history: Vec<EpochRecord>,
    pub wall_time_seconds: f64,
    pub pruned_count: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn final_elbo(&self) -> f64 {
        self.elbo_history.last().map(|e| e.elbo).unwrap_or(f64::NAN)
    }

    pub fn epochs_run(&self) -> usize {
        self.elbo_history.last().map(|e| e.epoch).unwrap_or(0)
    }

    /// Mean wall time of one epoch, initialization excluded.
    pub fn seconds_per_epoch(&self) -> f64 {
        let (Some(first), Some(last)) = (self.elbo_history.first(), self.elbo_history.last()) else {
            return f64::NAN;
        };
        if last.epoch == 0 {
            return f64::NAN;
        }
        (last.seconds - first.seconds) / last.epoch as f64
    }
}

/// Per-location node sets after pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    /// Record indices that remain in the model.
    pub indices: Vec<usize>,
    /// One entry per record of the table.
    pub variants: Vec<GraphVariant>,
    pub pruned_count: usize,
}

/// Removes the damage node wherever no building footprint exists. Wind is
/// then left without children and is dropped with it. Every record carries
/// a DPM observation, so no location leaves the model entirely.
pub fn prune(table: &LocationTable, enabled: bool) -> ActiveSet {
    let variants: Vec<GraphVariant> = table
        .records
        .iter()
        .map(|r| {
            if enabled && !r.has_footprint {
                GraphVariant::Pruned
            } else {
                GraphVariant::Full
            }
        })
        .collect();
    let pruned_count = variants.iter().filter(|v| **v == GraphVariant::Pruned).count();
    ActiveSet {
        indices: (0..table.len()).collect(),
        variants,
        pruned_count,
    }
}

/// A uniform sample of `m` locations without replacement.
pub fn sample_minibatch(active: &[usize], m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if m == 0 || m > active.len() {
        return Err(Error::invalid(format!("batch size {m} not in 1..={}", active.len())));
    }
    Ok(active.choose_multiple(rng, m).copied().collect())
}

/// Shuffles the active set and partitions it into consecutive batches of
/// `m` (the last one possibly shorter).
pub fn epoch_batches(active: &[usize], m: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if m == 0 || m > active.len() {
        return Err(Error::invalid(format!("batch size {m} not in 1..={}", active.len())));
    }
    let mut order = active.to_vec();
    order.shuffle(rng);
    Ok(order.chunks(m).map(|c| c.to_vec()).collect())
}

/// Starting weights: small uniform couplings and leaks, unit prior and
/// noise weights.
pub fn initial_weights(rng: &mut impl Rng) -> EdgeWeights {
    let mut w = EdgeWeights::from_array(std::array::from_fn(|_| rng.random_range(-0.1..0.1)));
    w.wind_prior = 1.0;
    w.flood_prior = 1.0;
    w.wind_noise = 1.0;
    w.flood_noise = 1.0;
    w.damage_noise = 1.0;
    w.dpm_noise = 1.0;
    w
}

/// Posterior at the prior conditional with `σ = 0.5`, `q = 0.5` and γ
/// tightened.
pub fn initial_posterior(record: &LocationRecord, weights: &EdgeWeights) -> LocationPosterior {
    let mut p = LocationPosterior {
        q_bd: 0.5,
        mu_w: weights.hazard_conditional_mean(Hazard::Wind, record.a_w),
        sigma_w: 0.5,
        mu_f: weights.hazard_conditional_mean(Hazard::Flood, record.a_f),
        sigma_f: 0.5,
        gamma_bd: 1.0,
    };
    p.gamma_bd = update_gamma(p.flood_moments(), p.wind_moments(), weights);
    p
}

/// Tightest Jaakkola parameter, `γ = √E(z²)`.
pub fn update_gamma(flood: MomentPair, wind: MomentPair, weights: &EdgeWeights) -> f64 {
    let z = damage_logit_moments(weights, flood, wind);
    z.second_moment.max(0.0).sqrt().max(GAMMA_MIN)
}

/// Exact maximizer of the bound in `q_BD`: the bound is linear in `q` apart
/// from the Bernoulli entropy, so `q = σ(Δ)` with Δ the linear coefficient.
pub fn update_q_bd(record: &LocationRecord, posterior: &LocationPosterior, w: &EdgeWeights) -> f64 {
    let flood = posterior.flood_moments();
    let z = damage_logit_moments(w, flood, posterior.wind_moments());
    let r = record.y.ln() - w.dpm_leak;
    let v_y = w.dpm_noise * w.dpm_noise;
    let obs = (2.0 * r * w.damage_to_dpm
        - w.damage_to_dpm * w.damage_to_dpm
        - 2.0 * w.flood_to_dpm * w.damage_to_dpm * flood.mean)
        / (2.0 * v_y);
    sigmoid(z.mean + obs).clamp(Q_MIN, Q_MAX)
}

/// The bound as a function of one hazard's `(μ, log σ)` with everything
/// else fixed:
/// `f = A·E(x) + B·E(x²) − (σ² + (μ − m)²) / (2v) + log σ`,
/// where `E(x) = e^{μ+σ²/2}` and `E(x²) = e^{2μ+2σ²}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardObjective {
    pub linear: f64,
    pub quadratic: f64,
    pub prior_mean: f64,
    pub prior_var: f64,
}

impl HazardObjective {
    pub fn new(
        hazard: Hazard,
        record: &LocationRecord,
        posterior: &LocationPosterior,
        w: &EdgeWeights,
        variant: GraphVariant,
    ) -> Self {
        let (prior, w_eps) = match hazard {
            Hazard::Wind => (record.a_w, w.wind_noise),
            Hazard::Flood => (record.a_f, w.flood_noise),
        };
        let prior_mean = w.hazard_conditional_mean(hazard, prior);
        let prior_var = w_eps * w_eps;
        let (mut linear, mut quadratic) = (0.0, 0.0);
        let has_damage = variant.has_damage();
        if hazard == Hazard::Flood {
            let v_y = w.dpm_noise * w.dpm_noise;
            let r = record.y.ln() - w.dpm_leak;
            let q = if has_damage { posterior.q_bd } else { 0.0 };
            linear += (r * w.flood_to_dpm - w.flood_to_dpm * w.damage_to_dpm * q) / v_y;
            quadratic -= w.flood_to_dpm * w.flood_to_dpm / (2.0 * v_y);
        }
        if has_damage {
            let g = jaakkola_g_unchecked(posterior.gamma_bd);
            let (own, other, other_mean) = match hazard {
                Hazard::Flood => (w.flood_to_damage, w.wind_to_damage, posterior.wind_moments().mean),
                Hazard::Wind => (w.wind_to_damage, w.flood_to_damage, posterior.flood_moments().mean),
            };
            linear += own * (posterior.q_bd - 0.5) - 2.0 * g * own * (w.damage_leak + other * other_mean);
            quadratic -= g * own * own;
        }
        HazardObjective {
            linear,
            quadratic,
            prior_mean,
            prior_var,
        }
    }

    fn moments(mu: f64, log_sigma: f64) -> (f64, f64, f64) {
        let s2 = (2.0 * log_sigma).exp();
        (s2, (mu + 0.5 * s2).exp(), (2.0 * mu + 2.0 * s2).exp())
    }

    fn coupling(&self, m: f64, sm: f64) -> (f64, f64) {
        let a = if self.linear != 0.0 { self.linear * m } else { 0.0 };
        let b = if self.quadratic != 0.0 { self.quadratic * sm } else { 0.0 };
        (a, b)
    }

    pub fn value(&self, mu: f64, log_sigma: f64) -> f64 {
        let (s2, m, sm) = Self::moments(mu, log_sigma);
        let (a, b) = self.coupling(m, sm);
        let d = mu - self.prior_mean;
        let v = a + b - (s2 + d * d) / (2.0 * self.prior_var) + log_sigma;
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// First and second derivative in μ.
    pub fn d_mu(&self, mu: f64, log_sigma: f64) -> (f64, f64) {
        let (_, m, sm) = Self::moments(mu, log_sigma);
        let (a, b) = self.coupling(m, sm);
        let d = mu - self.prior_mean;
        (a + 2.0 * b - d / self.prior_var, a + 4.0 * b - 1.0 / self.prior_var)
    }

    /// First and second derivative in log σ.
    pub fn d_log_sigma(&self, mu: f64, log_sigma: f64) -> (f64, f64) {
        let (s2, m, sm) = Self::moments(mu, log_sigma);
        let (a, b) = self.coupling(m, sm);
        let grad = a * s2 + 4.0 * b * s2 - s2 / self.prior_var + 1.0;
        let hess = a * s2 * (s2 + 2.0) + 4.0 * b * s2 * (4.0 * s2 + 2.0) - 2.0 * s2 / self.prior_var;
        (grad, hess)
    }

    /// Gradient and Hessian in `(μ, log σ)`.
    pub fn derivatives(&self, mu: f64, log_sigma: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let (_, g, h) = self.evaluate(mu, log_sigma);
        (g, h)
    }

    /// Value, gradient and Hessian from one set of moments.
    fn evaluate(&self, mu: f64, log_sigma: f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let (s2, m, sm) = Self::moments(mu, log_sigma);
        let (a, b) = self.coupling(m, sm);
        let iv = 1.0 / self.prior_var;
        let d = mu - self.prior_mean;
        let value = a + b - 0.5 * (s2 + d * d) * iv + log_sigma;
        let g = [a + 2.0 * b - d * iv, a * s2 + 4.0 * b * s2 - s2 * iv + 1.0];
        let h_mm = a + 4.0 * b - iv;
        let h_ms = a * s2 + 8.0 * b * s2;
        let h_ss = a * s2 * (s2 + 2.0) + 4.0 * b * s2 * (4.0 * s2 + 2.0) - 2.0 * s2 * iv;
        let value = if value.is_nan() { f64::NEG_INFINITY } else { value };
        (value, g, [[h_mm, h_ms], [h_ms, h_ss]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardUpdate {
    pub mu: f64,
    pub sigma: f64,
    /// False when the line search stalled before the gradient vanished; the
    /// returned point is still no worse than the starting one.
    pub converged: bool,
}

const MAX_NEWTON_ITERS: usize = 100;
const MAX_STEP: f64 = 1.0;
const GRAD_TOL: f64 = 1e-9;
const ROUNDING_SLACK: f64 = 1e-15;

/// Maximizes the bound over one hazard's `(μ, σ)`. Newton steps in
/// `(μ, log σ)` where the Hessian is negative definite, scaled gradient
/// steps elsewhere; every step backtracks until the objective does not
/// decrease.
pub fn update_continuous_posterior(
    hazard: Hazard,
    record: &LocationRecord,
    posterior: &LocationPosterior,
    weights: &EdgeWeights,
    variant: GraphVariant,
) -> HazardUpdate {
    let obj = HazardObjective::new(hazard, record, posterior, weights, variant);
    let (mu0, sigma0) = posterior.hazard(hazard);
    maximize_hazard(&obj, mu0, sigma0)
}

pub fn maximize_hazard(obj: &HazardObjective, mu0: f64, sigma0: f64) -> HazardUpdate {
    let mut x = [mu0, sigma0.ln()];
    let (mut f, mut g, mut h) = obj.evaluate(x[0], x[1]);
    let mut converged = false;
    for _ in 0..MAX_NEWTON_ITERS {
        if g[0].abs().max(g[1].abs()) < GRAD_TOL {
            converged = true;
            break;
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        let mut step = if h[0][0] < 0.0 && det > 0.0 {
            [
                -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                -(h[0][0] * g[1] - h[0][1] * g[0]) / det,
            ]
        } else {
            [g[0] * obj.prior_var, g[1] * 0.5]
        };
        let len = step[0].abs().max(step[1].abs());
        if len > MAX_STEP {
            step = [step[0] * MAX_STEP / len, step[1] * MAX_STEP / len];
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = [x[0] + t * step[0], x[1] + t * step[1]];
            let (fc, gc, hc) = obj.evaluate(cand[0], cand[1]);
            // differences near the optimum are at rounding level
            if fc >= f - ROUNDING_SLACK * (1.0 + f.abs()) {
                accepted = cand != x;
                (x, f, g, h) = (cand, fc, gc, hc);
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    HazardUpdate {
        mu: x[0],
        sigma: x[1].exp(),
        converged,
    }
}

/// Coordinate ascent on one location: `sweeps` cycles of
/// `γ → q_BD → flood → wind`, then γ is re-tightened.
pub fn update_location(
    record: &LocationRecord,
    posterior: &LocationPosterior,
    weights: &EdgeWeights,
    variant: GraphVariant,
    sweeps: usize,
) -> LocationPosterior {
    let mut p = *posterior;
    match variant {
        GraphVariant::Pruned => {
            // flood depends on nothing else here; one update is exact
            let u = update_continuous_posterior(Hazard::Flood, record, &p, weights, variant);
            p.mu_f = u.mu;
            p.sigma_f = u.sigma;
            p.mu_w = weights.hazard_conditional_mean(Hazard::Wind, record.a_w);
            p.sigma_w = weights.wind_noise.abs();
        }
        GraphVariant::Full => {
            for _ in 0..sweeps.max(1) {
                p.gamma_bd = update_gamma(p.flood_moments(), p.wind_moments(), weights);
                p.q_bd = update_q_bd(record, &p, weights);
                for hazard in [Hazard::Flood, Hazard::Wind] {
                    let u = update_continuous_posterior(hazard, record, &p, weights, variant);
                    p.set_hazard(hazard, u.mu, u.sigma);
                }
            }
            p.gamma_bd = update_gamma(p.flood_moments(), p.wind_moments(), weights);
        }
    }
    p
}

/// Runs the E-step on the listed locations. Updates are independent per
/// location and computed in parallel against a read-only weight snapshot.
pub fn e_step(
    batch: &[usize],
    records: &[LocationRecord],
    posteriors: &mut [LocationPosterior],
    variants: &[GraphVariant],
    weights: &EdgeWeights,
    sweeps: usize,
) {
    let updated: Vec<LocationPosterior> = batch
        .par_iter()
        .map(|&i| update_location(&records[i], &posteriors[i], weights, variants[i], sweeps))
        .collect();
    for (&i, p) in batch.iter().zip(updated) {
        posteriors[i] = p;
    }
}

/// E-step replacement that moment-matches per-location MCMC summaries.
/// Each location draws from its own stream derived from `(seed, index)`.
pub fn mcmc_e_step(
    batch: &[usize],
    records: &[LocationRecord],
    posteriors: &mut [LocationPosterior],
    variants: &[GraphVariant],
    weights: &EdgeWeights,
    config: McmcConfig,
    seed: u64,
) -> Result<()> {
    let updated: Vec<Result<LocationPosterior>> = batch
        .par_iter()
        .map(|&i| {
            let mut rng = stream_rng(seed, i as u64);
            let s = mcmc_posterior(&records[i], weights, variants[i], config, &mut rng)?;
            let mut p = s.to_posterior();
            if variants[i] == GraphVariant::Pruned {
                p.q_bd = posteriors[i].q_bd;
            }
            p.gamma_bd = update_gamma(p.flood_moments(), p.wind_moments(), weights);
            Ok(p)
        })
        .collect();
    for (&i, p) in batch.iter().zip(updated) {
        posteriors[i] = p?;
    }
    Ok(())
}

/// One ascent step `w + ρ·A·∇` with `A = I`.
pub fn m_step(weights: &EdgeWeights, gradient: &WeightGradient, rho: f64) -> Result<EdgeWeights> {
    if !gradient.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient {:?}", gradient.0)));
    }
    let mut a = weights.to_array();
    for (w, g) in a.iter_mut().zip(gradient.0.iter()) {
        *w += rho * g;
    }
    let mut next = EdgeWeights::from_array(a);
    for n in [&mut next.wind_noise, &mut next.flood_noise, &mut next.dpm_noise] {
        if n.abs() < NOISE_FLOOR {
            *n = NOISE_FLOOR.copysign(*n);
        }
    }
    Ok(next)
}

/// Mean per-location bound (constants included) over the given locations.
pub fn mean_elbo(
    indices: &[usize],
    records: &[LocationRecord],
    posteriors: &[LocationPosterior],
    variants: &[GraphVariant],
    weights: &EdgeWeights,
) -> f64 {
    let sum: f64 = indices
        .iter()
        .map(|&i| elbo_location_unchecked(&records[i], &posteriors[i], weights, variants[i]).full_bound())
        .sum();
    sum / indices.len() as f64
}

fn batch_gradient(
    batch: &[usize],
    records: &[LocationRecord],
    posteriors: &[LocationPosterior],
    variants: &[GraphVariant],
    weights: &EdgeWeights,
    population: usize,
) -> Result<WeightGradient> {
    if batch.len() < 64 {
        let sites: Vec<_> = batch.iter().map(|&i| (&records[i], &posteriors[i], variants[i])).collect();
        return elbo_gradient(&sites, weights, population);
    }
    // per-location gradients in parallel, reduced in batch order
    let parts: Vec<WeightGradient> = batch
        .par_iter()
        .map(|&i| location_gradient(&records[i], &posteriors[i], weights, variants[i]))
        .collect();
    let mut sum = WeightGradient::zeros();
    for g in &parts {
        sum.add_assign(g);
    }
    Ok(sum.scaled(population as f64 / batch.len() as f64))
}

/// Fits one location's posterior with the weights held fixed.
pub fn fit_location(
    record: &LocationRecord,
    weights: &EdgeWeights,
    variant: GraphVariant,
    sweeps: usize,
) -> LocationPosterior {
    let p = initial_posterior(record, weights);
    update_location(record, &p, weights, variant, sweeps)
}

pub fn run_em(table: &LocationTable, config: &OptimizerConfig) -> Result<FitResult> {
    run_em_with_progress(table, config, |_| {})
}

/// Alternates E-steps and M-steps over shuffled mini-batches, recording the
/// full-data bound after every epoch. `progress` sees each epoch record.
pub fn run_em_with_progress(
    table: &LocationTable,
    config: &OptimizerConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    if table.is_empty() {
        return Err(Error::Data("location table is empty".into()));
    }
    if !(config.learning_rate >= 0.0) || !config.learning_rate.is_finite() {
        return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", config.learning_rate)));
    }
    if config.max_epochs == 0 {
        return Err(Error::invalid("max_epochs must be positive"));
    }
    let start = Instant::now();
    let records = &table.records;
    let active = prune(table, config.pruning);
    if config.batch_size == 0 || config.batch_size > active.indices.len() {
        return Err(Error::invalid(format!(
            "batch size {} not in 1..={}",
            config.batch_size,
            active.indices.len()
        )));
    }
    let n = active.indices.len();

    let mut init_rng = stream_rng(config.seed, 0);
    let mut weights = config.init.weights(records, &mut init_rng);
    weights.validate()?;
    let mut posteriors: Vec<LocationPosterior> = records.iter().map(|r| initial_posterior(r, &weights)).collect();
    let variants = &active.variants;

    let mut batch_rng = stream_rng(config.seed, 1);
    let mut history = vec![EpochRecord {
        epoch: 0,
        elbo: mean_elbo(&active.indices, records, &posteriors, variants, &weights),
        seconds: start.elapsed().as_secs_f64(),
    }];
    progress(&history[0]);

    let mut t = 0usize;
    let mut converged = false;
    for epoch in 1..=config.max_epochs {
        let batches = epoch_batches(&active.indices, config.batch_size, &mut batch_rng)?;
        for (b, batch) in batches.iter().enumerate() {
            match config.method {
                PosteriorMethod::Variational => {
                    e_step(batch, records, &mut posteriors, variants, &weights, config.e_step_sweeps)
                }
                PosteriorMethod::Mcmc(mc) => {
                    let seed = config.seed ^ ((epoch as u64) << 32 | b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    mcmc_e_step(batch, records, &mut posteriors, variants, &weights, mc, seed)?
                }
            }
            let grad = batch_gradient(batch, records, &posteriors, variants, &weights, n)?;
            // ascend the per-location mean: the N/m-scaled sum divided by N
            let grad = grad.scaled(1.0 / n as f64);
            t += 1;
            let rho = if config.decay {
                config.learning_rate / (t as f64).sqrt()
            } else {
                config.learning_rate
            };
            let mut next = m_step(&weights, &grad, rho)?;
            if config.m_step_backtracking {
                let before = mean_elbo(batch, records, &posteriors, variants, &weights);
                let mut step = rho;
                let mut accepted = false;
                for _ in 0..30 {
                    if mean_elbo(batch, records, &posteriors, variants, &next) >= before {
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                    next = m_step(&weights, &grad, step)?;
                }
                if !accepted {
                    next = weights;
                }
            }
            weights = next;
        }
        let elbo = mean_elbo(&active.indices, records, &posteriors, variants, &weights);
        if !elbo.is_finite() {
            return Err(Error::Numeric(format!("bound became {elbo} at epoch {epoch}")));
        }
        let prev = history.last().map(|h| h.elbo).unwrap_or(elbo);
        let record = EpochRecord {
            epoch,
            elbo,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&record);
        history.push(record);
        if ((elbo - prev) / prev.abs().max(1e-12)).abs() < config.elbo_rel_tol {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        weights,
        posteriors,
        variants: active.variants.clone(),
        elbo_history: history,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        pruned_count: active.pruned_count,
        converged,
    })
}
