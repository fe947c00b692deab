//! Probabilistic primitives of the hurricane damage chain.
//!
//! The graph is fixed:
//!
//! ```text
//!   a_W ─▶ x_W ─┐
//!               ├─▶ x_BD ─┐
//!   a_F ─▶ x_F ─┘         ├─▶ y (DPM)
//!           └─────────────┘
//! ```
//!
//! Every child also has a Gaussian noise parent and a constant leak parent.
//! Noise variables never carry their own posterior; they are marginalized
//! into conditional variances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    /// Continuous lognormal latent.
    Wind,
    /// Continuous lognormal latent.
    Flood,
    /// Binary latent, 1 = severe damage or destroyed.
    BuildingDamage,
    /// The DPM value, continuous and positive.
    Observation,
    /// Standard normal environmental noise.
    Noise,
    /// Constant 1.
    Leak,
}

impl NodeKind {
    pub fn is_latent(self) -> bool {
        matches!(self, NodeKind::Wind | NodeKind::Flood | NodeKind::BuildingDamage)
    }
}

/// The two continuous hazard nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hazard {
    Wind,
    Flood,
}

impl Hazard {
    pub const BOTH: [Hazard; 2] = [Hazard::Wind, Hazard::Flood];

    pub fn node(self) -> NodeKind {
        match self {
            Hazard::Wind => NodeKind::Wind,
            Hazard::Flood => NodeKind::Flood,
        }
    }
}

/// Which nodes a location carries after pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GraphVariant {
    /// Wind, flood and damage latents; y has parents {flood, damage}.
    Full,
    /// No building footprint: the damage node is removed, wind is left
    /// without children, and y has the single latent parent flood.
    Pruned,
}

impl GraphVariant {
    pub fn has_damage(self) -> bool {
        self == GraphVariant::Full
    }
}

pub const NUM_WEIGHTS: usize = 14;

/// Global causal coefficients shared by every location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeights {
    pub wind_prior: f64,
    pub wind_noise: f64,
    pub wind_leak: f64,
    pub flood_prior: f64,
    pub flood_noise: f64,
    pub flood_leak: f64,
    pub flood_to_damage: f64,
    pub wind_to_damage: f64,
    pub damage_noise: f64,
    pub damage_leak: f64,
    pub flood_to_dpm: f64,
    pub damage_to_dpm: f64,
    pub dpm_noise: f64,
    pub dpm_leak: f64,
}

impl EdgeWeights {
    pub const NAMES: [&'static str; NUM_WEIGHTS] = [
        "wind_prior",
        "wind_noise",
        "wind_leak",
        "flood_prior",
        "flood_noise",
        "flood_leak",
        "flood_to_damage",
        "wind_to_damage",
        "damage_noise",
        "damage_leak",
        "flood_to_dpm",
        "damage_to_dpm",
        "dpm_noise",
        "dpm_leak",
    ];

    pub fn zeros() -> Self {
        Self::from_array([0.0; NUM_WEIGHTS])
    }

    /// All couplings and leaks zero, every noise weight 1.
    pub fn decoupled() -> Self {
        EdgeWeights {
            wind_noise: 1.0,
            flood_noise: 1.0,
            damage_noise: 1.0,
            dpm_noise: 1.0,
            ..Self::zeros()
        }
    }

    pub fn to_array(&self) -> [f64; NUM_WEIGHTS] {
        [
            self.wind_prior,
            self.wind_noise,
            self.wind_leak,
            self.flood_prior,
            self.flood_noise,
            self.flood_leak,
            self.flood_to_damage,
            self.wind_to_damage,
            self.damage_noise,
            self.damage_leak,
            self.flood_to_dpm,
            self.damage_to_dpm,
            self.dpm_noise,
            self.dpm_leak,
        ]
    }

    pub fn from_array(a: [f64; NUM_WEIGHTS]) -> Self {
        EdgeWeights {
            wind_prior: a[0],
            wind_noise: a[1],
            wind_leak: a[2],
            flood_prior: a[3],
            flood_noise: a[4],
            flood_leak: a[5],
            flood_to_damage: a[6],
            wind_to_damage: a[7],
            damage_noise: a[8],
            damage_leak: a[9],
            flood_to_dpm: a[10],
            damage_to_dpm: a[11],
            dpm_noise: a[12],
            dpm_leak: a[13],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        let idx = Self::NAMES.iter().position(|n| *n == name)?;
        Some(self.to_array()[idx])
    }

    /// `(prior, noise, leak)` weights of a hazard node.
    pub fn hazard(&self, hazard: Hazard) -> (f64, f64, f64) {
        match hazard {
            Hazard::Wind => (self.wind_prior, self.wind_noise, self.wind_leak),
            Hazard::Flood => (self.flood_prior, self.flood_noise, self.flood_leak),
        }
    }

    /// Mean of `log x` given the prior estimate `a`.
    pub fn hazard_conditional_mean(&self, hazard: Hazard, prior: f64) -> f64 {
        let (w_a, _, w_0) = self.hazard(hazard);
        w_a * prior + w_0
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.to_array().iter().position(|w| !w.is_finite()) {
            return Err(Error::invalid(format!("weight {} is not finite", Self::NAMES[i])));
        }
        for (name, w) in [
            ("wind_noise", self.wind_noise),
            ("flood_noise", self.flood_noise),
            ("dpm_noise", self.dpm_noise),
        ] {
            if w == 0.0 {
                return Err(Error::invalid(format!("{name} must be nonzero")));
            }
        }
        Ok(())
    }
}

/// First and second raw moments of a scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPair {
    pub mean: f64,
    pub second_moment: f64,
}

impl MomentPair {
    pub fn new(mean: f64, second_moment: f64) -> Self {
        MomentPair { mean, second_moment }
    }

    /// Moments of a Bernoulli(q) variable: both equal q.
    pub fn bernoulli(q: f64) -> Self {
        MomentPair::new(q, q)
    }

    pub fn point(x: f64) -> Self {
        MomentPair::new(x, x * x)
    }

    pub fn variance(&self) -> f64 {
        self.second_moment - self.mean * self.mean
    }
}

/// Mean-field variational state of one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationPosterior {
    pub q_bd: f64,
    pub mu_w: f64,
    pub sigma_w: f64,
    pub mu_f: f64,
    pub sigma_f: f64,
    /// Jaakkola bound parameter of the damage node.
    pub gamma_bd: f64,
}

impl LocationPosterior {
    pub fn hazard(&self, hazard: Hazard) -> (f64, f64) {
        match hazard {
            Hazard::Wind => (self.mu_w, self.sigma_w),
            Hazard::Flood => (self.mu_f, self.sigma_f),
        }
    }

    pub fn set_hazard(&mut self, hazard: Hazard, mu: f64, sigma: f64) {
        match hazard {
            Hazard::Wind => {
                self.mu_w = mu;
                self.sigma_w = sigma;
            }
            Hazard::Flood => {
                self.mu_f = mu;
                self.sigma_f = sigma;
            }
        }
    }

    pub fn wind_moments(&self) -> MomentPair {
        lognormal_moments_unchecked(self.mu_w, self.sigma_w)
    }

    pub fn flood_moments(&self) -> MomentPair {
        lognormal_moments_unchecked(self.mu_f, self.sigma_f)
    }

    pub fn is_valid(&self) -> bool {
        self.q_bd > 0.0
            && self.q_bd < 1.0
            && self.sigma_w > 0.0
            && self.sigma_f > 0.0
            && self.gamma_bd > 0.0
            && [self.mu_w, self.mu_f, self.sigma_w, self.sigma_f, self.gamma_bd]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid posterior {self:?}")))
        }
    }
}

/// Moments of a lognormal variable with log-mean `mu` and log-std `sigma`.
///
/// The second moment `Var + mean² = (e^{σ²} − 1)e^{2μ+σ²} + e^{2μ+σ²}`
/// collapses to the single exponential `e^{2μ+2σ²}`, evaluated directly.
pub fn lognormal_moments(mu: f64, sigma: f64) -> Result<MomentPair> {
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::invalid(format!("non-finite lognormal parameters ({mu}, {sigma})")));
    }
    if sigma < 0.0 {
        return Err(Error::invalid(format!("negative lognormal sigma {sigma}")));
    }
    Ok(lognormal_moments_unchecked(mu, sigma))
}

#[inline]
pub(crate) fn lognormal_moments_unchecked(mu: f64, sigma: f64) -> MomentPair {
    let s2 = sigma * sigma;
    MomentPair {
        mean: (mu + 0.5 * s2).exp(),
        second_moment: (2.0 * mu + 2.0 * s2).exp(),
    }
}

/// Curvature coefficient of the Jaakkola bound,
/// `g(γ) = (σ(γ) − ½) / (2γ) = tanh(γ/2) / (4γ)`.
pub fn jaakkola_g(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("bound parameter must be positive, got {gamma}")));
    }
    Ok(jaakkola_g_unchecked(gamma))
}

#[inline]
pub(crate) fn jaakkola_g_unchecked(gamma: f64) -> f64 {
    if gamma < 1e-4 {
        // series of tanh(x)/x around 0
        let g2 = gamma * gamma;
        0.125 * (1.0 - g2 / 12.0)
    } else {
        (0.5 * gamma).tanh() / (4.0 * gamma)
    }
}

/// Quadratic upper bound on `log(1 + e^z)`, tight at `|z| = γ`.
pub fn quadratic_bound_log1pexp(z: f64, gamma: f64) -> Result<f64> {
    let g = jaakkola_g(gamma)?;
    if !z.is_finite() {
        return Err(Error::invalid(format!("non-finite argument {z}")));
    }
    Ok(g * (z * z - gamma * gamma) + 0.5 * (z - gamma) + log1pexp(gamma))
}

/// Stable `log(1 + e^x)`.
#[inline]
pub fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Moments of `z = Σ w_k x_k + w_ε ε + w_0` with mutually independent
/// parents and a standard normal `ε`.
pub fn linear_predictor_moments(parents: &[(f64, MomentPair)], w_eps: f64, w_0: f64) -> MomentPair {
    let linear: f64 = parents.iter().map(|(w, m)| w * m.mean).sum();
    let mean = linear + w_0;
    // E(z²) = Var(z) + E(z)²; the variance of independent terms adds up
    let variance: f64 =
        parents.iter().map(|(w, m)| w * w * m.variance()).sum::<f64>() + w_eps * w_eps;
    MomentPair::new(mean, variance + mean * mean)
}

/// Moments of the damage node's logit under the mean-field posterior.
pub fn damage_logit_moments(weights: &EdgeWeights, flood: MomentPair, wind: MomentPair) -> MomentPair {
    linear_predictor_moments(
        &[(weights.flood_to_damage, flood), (weights.wind_to_damage, wind)],
        weights.damage_noise,
        weights.damage_leak,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn lognormal_point_masses() {
        let m = lognormal_moments(0.0, 0.0).unwrap();
        assert_eq!((m.mean, m.second_moment), (1.0, 1.0));
        let m = lognormal_moments(2f64.ln(), 0.0).unwrap();
        assert!(close(m.mean, 2.0, 1e-15) && close(m.second_moment, 4.0, 1e-14));
    }

    #[test]
    fn lognormal_three_term_identity() {
        for &(mu, sigma) in &[(0.0, 1.0), (-1.3, 0.2), (0.7, 1.7), (2.0, 0.01)] {
            let s2: f64 = sigma * sigma;
            let three_term = (s2.exp() - 1.0) * (2.0 * mu + s2).exp() + (s2 + 2.0 * mu).exp();
            let m = lognormal_moments(mu, sigma).unwrap();
            assert!((m.second_moment - three_term).abs() <= 1e-12 * three_term);
        }
    }

    #[test]
    fn lognormal_unit_sigma_against_monte_carlo() {
        let m = lognormal_moments(0.0, 1.0).unwrap();
        assert!(close(m.mean, 1.64872, 1e-5));
        assert!(close(m.second_moment, 7.38906, 1e-5));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let x = e.exp();
            s1 += x;
            s2 += x * x;
        }
        let (mc1, mc2) = (s1 / n as f64, s2 / n as f64);
        assert!((mc1 - m.mean).abs() / m.mean < 0.01);
        assert!((mc2 - m.second_moment).abs() / m.second_moment < 0.01);
    }

    #[test]
    fn lognormal_rejects_non_finite() {
        assert!(lognormal_moments(f64::NAN, 1.0).is_err());
        assert!(lognormal_moments(0.0, f64::INFINITY).is_err());
        assert!(lognormal_moments(0.0, -1.0).is_err());
    }

    #[test]
    fn jaakkola_values() {
        assert!(close(jaakkola_g(1e-6).unwrap(), 0.125, 1e-6));
        let direct = (1.0 / (1.0 + (-1f64).exp()) - 0.5) / 2.0;
        assert!(close(jaakkola_g(1.0).unwrap(), direct, 1e-15));
        assert!(close(jaakkola_g(1.0).unwrap(), 0.1155293, 1e-7));
        let g20 = jaakkola_g(20.0).unwrap();
        assert!(close(g20 * 40.0, 0.5, 1e-8));
        assert!(close(g20, 0.0125, 1e-9));
        assert!(jaakkola_g(0.0).is_err());
        assert!(jaakkola_g(-1.0).is_err());
    }

    #[test]
    fn jaakkola_series_matches_closed_form_at_switch() {
        for g in [1e-4, 0.99e-4, 1.01e-4] {
            let closed = (0.5 * g as f64).tanh() / (4.0 * g);
            assert!(close(jaakkola_g_unchecked(g), closed, 1e-12), "mismatch at {g}");
        }
    }

    #[test]
    fn jaakkola_monotone_decreasing() {
        let mut prev = jaakkola_g(1e-9).unwrap();
        let mut gamma = 1e-3;
        while gamma < 50.0 {
            let g = jaakkola_g(gamma).unwrap();
            assert!(g < prev, "not decreasing at {gamma}");
            assert!(g > 0.0);
            prev = g;
            gamma *= 1.05;
        }
    }

    #[test]
    fn bound_examples() {
        let e = std::f64::consts::E;
        assert!(close(quadratic_bound_log1pexp(1.0, 1.0).unwrap(), (1.0 + e).ln(), 1e-14));
        assert!(close(quadratic_bound_log1pexp(1.0, 1.0).unwrap(), 1.313262, 1e-6));
        let at_zero = quadratic_bound_log1pexp(0.0, 1.0).unwrap();
        // log(1 + e) − 1/2 − g(1)
        assert!(close(at_zero, 0.697733, 1e-6));
        assert!(at_zero >= 2f64.ln());
        assert!(close(quadratic_bound_log1pexp(-1.0, 1.0).unwrap(), 0.313262, 1e-6));
    }

    #[test]
    fn bound_dominates_on_grid() {
        for gi in 1..=100 {
            let gamma = gi as f64 * 0.1;
            for zi in -100..=100 {
                let z = zi as f64 * 0.1;
                let b = quadratic_bound_log1pexp(z, gamma).unwrap();
                let exact = log1pexp(z);
                let tight = (z.abs() - gamma).abs() < 1e-9;
                if tight {
                    assert!(close(b, exact, 1e-10), "not tight at z={z}, gamma={gamma}");
                } else {
                    assert!(b > exact - 1e-12, "bound violated at z={z}, gamma={gamma}");
                }
            }
        }
    }

    #[test]
    fn linear_predictor_examples() {
        let m = linear_predictor_moments(&[], 1.0, 0.0);
        assert_eq!((m.mean, m.second_moment), (0.0, 1.0));

        let m = linear_predictor_moments(&[(2.0, MomentPair::bernoulli(0.5))], 0.0, 1.0);
        assert!(close(m.mean, 2.0, 1e-15) && close(m.second_moment, 5.0, 1e-14));
        // enumeration over the binary parent: z ∈ {1, 3} with equal mass
        let enumerated = (0.5 * 1.0 + 0.5 * 9.0, 0.5 * 1.0 + 0.5 * 3.0);
        assert!(close(m.second_moment, enumerated.0, 1e-14));
        assert!(close(m.mean, enumerated.1, 1e-14));

        let p = MomentPair::new(1.3, 2.5);
        let m = linear_predictor_moments(&[(0.0, p), (0.0, p)], 0.7, -1.5);
        assert!(close(m.mean, -1.5, 1e-15));
        assert!(close(m.second_moment, 0.49 + 2.25, 1e-14));
    }

    #[test]
    fn linear_predictor_expanded_form() {
        // cross-product expansion with r ≠ s terms
        let parents = [(0.8, MomentPair::new(1.2, 2.0)), (-0.4, MomentPair::new(0.3, 0.3))];
        let (w_eps, w_0) = (0.6, 0.9);
        let m = linear_predictor_moments(&parents, w_eps, w_0);
        let sum_w_mean: f64 = parents.iter().map(|(w, p)| w * p.mean).sum();
        let expanded = parents.iter().map(|(w, p)| w * w * p.second_moment).sum::<f64>()
            + w_eps * w_eps
            + w_0 * w_0
            + 2.0 * w_0 * sum_w_mean
            + 2.0 * parents[0].0 * parents[1].0 * parents[0].1.mean * parents[1].1.mean;
        assert!(close(m.second_moment, expanded, 1e-13));
    }

    #[test]
    fn linear_predictor_against_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mu_f, s_f, mu_w, s_w) = (0.2, 0.4, -0.3, 0.6);
        let (w_f, w_w, w_eps, w_0) = (1.1, -0.7, 0.5, 0.3);
        let m = linear_predictor_moments(
            &[
                (w_f, lognormal_moments(mu_f, s_f).unwrap()),
                (w_w, lognormal_moments(mu_w, s_w).unwrap()),
            ],
            w_eps,
            w_0,
        );
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            let z = w_f * (mu_f + s_f * e[0]).exp() + w_w * (mu_w + s_w * e[1]).exp() + w_eps * e[2] + w_0;
            s1 += z;
            s2 += z * z;
        }
        let (mc1, mc2) = (s1 / n as f64, s2 / n as f64);
        assert!((mc1 - m.mean).abs() / m.mean.abs() < 0.01);
        assert!((mc2 - m.second_moment).abs() / m.second_moment < 0.01);
    }

    #[test]
    fn weights_validation() {
        assert!(EdgeWeights::decoupled().validate().is_ok());
        assert!(EdgeWeights::zeros().validate().is_err());
        let mut w = EdgeWeights::decoupled();
        w.damage_leak = f64::NAN;
        assert!(w.validate().is_err());
        let w = EdgeWeights::from_array(std::array::from_fn(|i| i as f64 + 1.0));
        assert_eq!(EdgeWeights::from_array(w.to_array()), w);
        assert_eq!(w.get("dpm_leak"), Some(14.0));
    }

    proptest::proptest! {
        #[test]
        fn lognormal_variance_identity(mu in -5.0f64..5.0, sigma in 0.0f64..2.0) {
            let m = lognormal_moments(mu, sigma).unwrap();
            let expected = ((sigma * sigma).exp() - 1.0) * m.mean * m.mean;
            proptest::prop_assert!(m.variance() >= -1e-12 * m.second_moment);
            proptest::prop_assert!((m.variance() - expected).abs() <= 1e-9 * m.second_moment.max(1.0));
        }

        #[test]
        fn bound_dominates(z in -10.0f64..10.0, gamma in 1e-3f64..10.0) {
            let b = quadratic_bound_log1pexp(z, gamma).unwrap();
            proptest::prop_assert!(b >= log1pexp(z) - 1e-12);
        }
    }
}
