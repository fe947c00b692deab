//! Per-location variational lower bound and its gradient in the edge weights.
//!
//! The bound is `E_q[log p(y, X)] − E_q[log q(X)]` with the damage term
//! relaxed by the Jaakkola quadratic bound. Observation and hazard terms are
//! exact expectations of their log-densities, so only the damage term is a
//! bound. Constants that do not depend on any parameter are kept out of
//! `total` and reported in `dropped_constants`.

use std::f64::consts::{E, PI};

use crate::error::{Error, Result};
use crate::geodata::LocationRecord;
use crate::model::{
    damage_logit_moments, jaakkola_g_unchecked, log1pexp, EdgeWeights,
    GraphVariant, Hazard, LocationPosterior, MomentPair, NUM_WEIGHTS,
};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Decomposition of one location's bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    /// Expected log-density of the DPM value given flood and damage.
    pub obs_term: f64,
    /// Expected log-densities of the lognormal hazards given their priors.
    pub continuous_terms: f64,
    /// Quadratic-bound relaxation of the damage node's expected log-likelihood.
    pub discrete_term_bound: f64,
    /// Parameter-dependent part of `E_q[log q]`.
    pub entropy_term: f64,
    /// Constant part of `−E_q[log q]`; `total + dropped_constants` is the
    /// complete lower bound on `log p(y)`.
    pub dropped_constants: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn full_bound(&self) -> f64 {
        self.total + self.dropped_constants
    }
}

/// Partial derivatives of an objective in every edge weight, ordered as
/// [`EdgeWeights::NAMES`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightGradient(pub [f64; NUM_WEIGHTS]);

impl WeightGradient {
    pub fn zeros() -> Self {
        WeightGradient([0.0; NUM_WEIGHTS])
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        EdgeWeights::NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }

    pub fn add_assign(&mut self, other: &WeightGradient) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += b;
        }
    }

    pub fn scaled(&self, factor: f64) -> WeightGradient {
        WeightGradient(self.0.map(|v| v * factor))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Expected lognormal log-density of `y` given its parents flood and damage.
///
/// For a pruned location pass `MomentPair::new(0.0, 0.0)` as the damage moments.
pub fn obs_loglik_term(y: f64, weights: &EdgeWeights, flood: MomentPair, damage: MomentPair) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::invalid(format!("observation must be positive, got {y}")));
    }
    Ok(obs_term_unchecked(y.ln(), weights, flood, damage))
}

#[inline]
fn obs_quadratic(log_y: f64, w: &EdgeWeights, flood: MomentPair, damage: MomentPair) -> f64 {
    let r = log_y - w.dpm_leak;
    r * r - 2.0 * r * (w.flood_to_dpm * flood.mean + w.damage_to_dpm * damage.mean)
        + w.flood_to_dpm * w.flood_to_dpm * flood.second_moment
        + w.damage_to_dpm * w.damage_to_dpm * damage.second_moment
        + 2.0 * w.flood_to_dpm * w.damage_to_dpm * flood.mean * damage.mean
}

#[inline]
fn obs_term_unchecked(log_y: f64, w: &EdgeWeights, flood: MomentPair, damage: MomentPair) -> f64 {
    let v = w.dpm_noise * w.dpm_noise;
    -log_y - w.dpm_noise.abs().ln() - HALF_LN_2PI - obs_quadratic(log_y, w, flood, damage) / (2.0 * v)
}

/// Expected log-density of a lognormal hazard node given its prior estimate,
/// under a lognormal posterior with parameters `(mu, sigma)`.
pub fn continuous_node_term(
    hazard: Hazard,
    weights: &EdgeWeights,
    prior: f64,
    mu: f64,
    sigma: f64,
) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::invalid(format!("invalid hazard posterior ({mu}, {sigma})")));
    }
    Ok(continuous_term_unchecked(hazard, weights, prior, mu, sigma))
}

#[inline]
fn continuous_term_unchecked(hazard: Hazard, w: &EdgeWeights, prior: f64, mu: f64, sigma: f64) -> f64 {
    let (_, w_eps, _) = w.hazard(hazard);
    let d = mu - w.hazard_conditional_mean(hazard, prior);
    -mu - w_eps.abs().ln() - HALF_LN_2PI - (sigma * sigma + d * d) / (2.0 * w_eps * w_eps)
}

/// Jaakkola lower bound on the damage node's expected log-likelihood,
/// `q·E(z) − [g(γ)(E(z²) − γ²) + (E(z) − γ)/2 + log(1 + e^γ)]`.
pub fn discrete_node_bound(
    weights: &EdgeWeights,
    flood: MomentPair,
    wind: MomentPair,
    q_bd: f64,
    gamma: f64,
) -> Result<f64> {
    if !(q_bd > 0.0 && q_bd < 1.0) {
        return Err(Error::invalid(format!("damage probability must be in (0,1), got {q_bd}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("bound parameter must be positive, got {gamma}")));
    }
    Ok(discrete_bound_unchecked(weights, flood, wind, q_bd, gamma))
}

#[inline]
fn discrete_bound_unchecked(w: &EdgeWeights, flood: MomentPair, wind: MomentPair, q: f64, gamma: f64) -> f64 {
    let z = damage_logit_moments(w, flood, wind);
    q * z.mean
        - (jaakkola_g_unchecked(gamma) * (z.second_moment - gamma * gamma)
            + 0.5 * (z.mean - gamma)
            + log1pexp(gamma))
}

/// Parameter-dependent part of `E_q[log q]` for a full location.
pub fn entropy_term(posterior: &LocationPosterior) -> f64 {
    bernoulli_neg_entropy(posterior.q_bd) - (posterior.mu_w + posterior.sigma_w.ln())
        - (posterior.mu_f + posterior.sigma_f.ln())
}

fn entropy_term_variant(posterior: &LocationPosterior, variant: GraphVariant) -> f64 {
    match variant {
        GraphVariant::Full => entropy_term(posterior),
        GraphVariant::Pruned => -(posterior.mu_f + posterior.sigma_f.ln()),
    }
}

#[inline]
fn bernoulli_neg_entropy(q: f64) -> f64 {
    let mut h = 0.0;
    if q > 0.0 {
        h += q * q.ln();
    }
    if q < 1.0 {
        h += (1.0 - q) * (1.0 - q).ln();
    }
    h
}

/// `−E_q[log q]` constants: `½ log(2πe)` per lognormal factor.
pub fn dropped_constants(variant: GraphVariant) -> f64 {
    let per_factor = 0.5 * (2.0 * PI * E).ln();
    match variant {
        GraphVariant::Full => 2.0 * per_factor,
        GraphVariant::Pruned => per_factor,
    }
}

pub(crate) fn damage_moments(posterior: &LocationPosterior, variant: GraphVariant) -> MomentPair {
    match variant {
        GraphVariant::Full => MomentPair::bernoulli(posterior.q_bd),
        GraphVariant::Pruned => MomentPair::new(0.0, 0.0),
    }
}

/// Assembles the bound of one location.
pub fn elbo_location(
    record: &LocationRecord,
    posterior: &LocationPosterior,
    weights: &EdgeWeights,
    variant: GraphVariant,
) -> Result<ElboBreakdown> {
    if !(record.y > 0.0) || !record.y.is_finite() {
        return Err(Error::invalid(format!("observation must be positive, got {}", record.y)));
    }
    match variant {
        GraphVariant::Full => posterior.validate()?,
        GraphVariant::Pruned => {
            if !(posterior.sigma_f > 0.0) || !posterior.mu_f.is_finite() {
                return Err(Error::invalid(format!("invalid flood posterior {posterior:?}")));
            }
        }
    }
    Ok(elbo_location_unchecked(record, posterior, weights, variant))
}

pub(crate) fn elbo_location_unchecked(
    record: &LocationRecord,
    posterior: &LocationPosterior,
    weights: &EdgeWeights,
    variant: GraphVariant,
) -> ElboBreakdown {
    let flood = posterior.flood_moments();
    let damage = damage_moments(posterior, variant);
    let obs_term = obs_term_unchecked(record.y.ln(), weights, flood, damage);
    let mut continuous_terms =
        continuous_term_unchecked(Hazard::Flood, weights, record.a_f, posterior.mu_f, posterior.sigma_f);
    let mut discrete_term_bound = 0.0;
    if variant.has_damage() {
        continuous_terms +=
            continuous_term_unchecked(Hazard::Wind, weights, record.a_w, posterior.mu_w, posterior.sigma_w);
        discrete_term_bound = discrete_bound_unchecked(
            weights,
            flood,
            posterior.wind_moments(),
            posterior.q_bd,
            posterior.gamma_bd,
        );
    }
    let entropy_term = entropy_term_variant(posterior, variant);
    ElboBreakdown {
        obs_term,
        continuous_terms,
        discrete_term_bound,
        entropy_term,
        dropped_constants: dropped_constants(variant),
        total: obs_term + continuous_terms + discrete_term_bound - entropy_term,
    }
}

/// Analytic gradient of one location's bound in the edge weights, with the
/// posterior (including γ) held fixed.
pub fn location_gradient(
    record: &LocationRecord,
    posterior: &LocationPosterior,
    w: &EdgeWeights,
    variant: GraphVariant,
) -> WeightGradient {
    let mut g = EdgeWeights::zeros();
    let flood = posterior.flood_moments();
    let damage = damage_moments(posterior, variant);

    // observation
    let log_y = record.y.ln();
    let r = log_y - w.dpm_leak;
    let v_y = w.dpm_noise * w.dpm_noise;
    let quad = obs_quadratic(log_y, w, flood, damage);
    let pred = w.flood_to_dpm * flood.mean + w.damage_to_dpm * damage.mean;
    g.flood_to_dpm = (r * flood.mean
        - w.flood_to_dpm * flood.second_moment
        - w.damage_to_dpm * flood.mean * damage.mean)
        / v_y;
    g.damage_to_dpm = (r * damage.mean
        - w.damage_to_dpm * damage.second_moment
        - w.flood_to_dpm * flood.mean * damage.mean)
        / v_y;
    g.dpm_leak = (r - pred) / v_y;
    g.dpm_noise = -1.0 / w.dpm_noise + quad / (v_y * w.dpm_noise);

    // hazards
    let hazards: &[Hazard] = if variant.has_damage() { &Hazard::BOTH } else { &[Hazard::Flood] };
    for &hazard in hazards {
        let (prior, (mu, sigma)) = match hazard {
            Hazard::Wind => (record.a_w, posterior.hazard(hazard)),
            Hazard::Flood => (record.a_f, posterior.hazard(hazard)),
        };
        let (_, w_eps, _) = w.hazard(hazard);
        let v = w_eps * w_eps;
        let d = mu - w.hazard_conditional_mean(hazard, prior);
        let d_prior = d * prior / v;
        let d_leak = d / v;
        let d_noise = -1.0 / w_eps + (sigma * sigma + d * d) / (v * w_eps);
        match hazard {
            Hazard::Wind => {
                g.wind_prior = d_prior;
                g.wind_leak = d_leak;
                g.wind_noise = d_noise;
            }
            Hazard::Flood => {
                g.flood_prior = d_prior;
                g.flood_leak = d_leak;
                g.flood_noise = d_noise;
            }
        }
    }

    // damage
    if variant.has_damage() {
        let wind = posterior.wind_moments();
        let gam = jaakkola_g_unchecked(posterior.gamma_bd);
        let coef = posterior.q_bd - 0.5;
        let lin = w.flood_to_damage * flood.mean + w.wind_to_damage * wind.mean;
        g.flood_to_damage = coef * flood.mean
            - gam
                * (2.0 * w.flood_to_damage * flood.second_moment
                    + 2.0 * w.damage_leak * flood.mean
                    + 2.0 * w.wind_to_damage * flood.mean * wind.mean);
        g.wind_to_damage = coef * wind.mean
            - gam
                * (2.0 * w.wind_to_damage * wind.second_moment
                    + 2.0 * w.damage_leak * wind.mean
                    + 2.0 * w.flood_to_damage * flood.mean * wind.mean);
        g.damage_leak = coef - gam * (2.0 * w.damage_leak + 2.0 * lin);
        g.damage_noise = -gam * 2.0 * w.damage_noise;
    }
    WeightGradient(g.to_array())
}

/// Summed gradient over a batch, without stochastic rescaling. The reduction
/// runs in batch order.
pub fn elbo_gradient_sum(
    batch: &[(&LocationRecord, &LocationPosterior, GraphVariant)],
    weights: &EdgeWeights,
) -> WeightGradient {
    let mut total = WeightGradient::zeros();
    for (record, posterior, variant) in batch {
        total.add_assign(&location_gradient(record, posterior, weights, *variant));
    }
    total
}

/// Unbiased estimate of the full-data gradient from a batch drawn out of
/// `population` locations: the batch sum scaled by `N/m`.
pub fn elbo_gradient(
    batch: &[(&LocationRecord, &LocationPosterior, GraphVariant)],
    weights: &EdgeWeights,
    population: usize,
) -> Result<WeightGradient> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = population as f64 / batch.len() as f64;
    Ok(elbo_gradient_sum(batch, weights).scaled(scale))
}

/// Sum of `total` over a set of locations.
pub fn elbo_sum(
    batch: &[(&LocationRecord, &LocationPosterior, GraphVariant)],
    weights: &EdgeWeights,
) -> f64 {
    batch
        .iter()
        .map(|(r, p, v)| elbo_location_unchecked(r, p, weights, *v).total)
        .sum()
}
