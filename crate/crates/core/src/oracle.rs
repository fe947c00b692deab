//! Ground truth for the variational engine: a forward sampler of the causal
//! chain, synthetic scenarios, a Metropolis-within-Gibbs posterior sampler,
//! a grid-integrated exact posterior and a Monte-Carlo estimate of the bound.
//!
//! Nothing here calls into the variational bound code; every quantity is
//! computed from log-densities directly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use gauss_quad::hermite::GaussHermite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geodata::{
    write_ascii_grid, write_labels_csv, GridGeometry, GridRaster, LabelRow, LocationRecord, LocationTable,
    DEFAULT_NODATA,
};
use crate::model::{log1pexp, sigmoid, EdgeWeights, GraphVariant, Hazard, LocationPosterior};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Independent random stream for one location (or any other sub-task) of a
/// seeded run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let d = (x - mean) / sd;
    -HALF_LN_2PI - sd.abs().ln() - 0.5 * d * d
}

/// Gauss–Hermite nodes and weights for expectations under N(0, 1).
fn standard_normal_rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let gh = GaussHermite::new(48.try_into().expect("nonzero degree"));
        gh.iter()
            .map(|(x, w)| (x * std::f64::consts::SQRT_2, w / PI.sqrt()))
            .collect()
    })
}

/// `E[f(ε)]` for a standard normal `ε`, by 48-point Gauss–Hermite.
pub fn standard_normal_expectation(mut f: impl FnMut(f64) -> f64) -> f64 {
    standard_normal_rule().iter().map(|(x, w)| w * f(*x)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardSample {
    pub x_w: f64,
    pub x_f: f64,
    /// `None` where no building exists.
    pub x_bd: Option<u8>,
    pub y: f64,
}

/// Draws one location from the causal chain.
pub fn sample_forward(weights: &EdgeWeights, a_w: f64, a_f: f64, rng: &mut impl Rng) -> ForwardSample {
    sample_forward_site(weights, a_w, a_f, true, rng)
}

/// Like [`sample_forward`]; without a building the damage node is absent
/// and contributes nothing to `y`.
pub fn sample_forward_site(
    w: &EdgeWeights,
    a_w: f64,
    a_f: f64,
    has_building: bool,
    rng: &mut impl Rng,
) -> ForwardSample {
    let e_w: f64 = StandardNormal.sample(rng);
    let e_f: f64 = StandardNormal.sample(rng);
    let e_bd: f64 = StandardNormal.sample(rng);
    let e_y: f64 = StandardNormal.sample(rng);
    let x_w = (w.wind_prior * a_w + w.wind_noise * e_w + w.wind_leak).exp();
    let x_f = (w.flood_prior * a_f + w.flood_noise * e_f + w.flood_leak).exp();
    let x_bd = has_building.then(|| {
        let z = w.flood_to_damage * x_f + w.wind_to_damage * x_w + w.damage_noise * e_bd + w.damage_leak;
        u8::from(rng.random::<f64>() < sigmoid(z))
    });
    let bd = f64::from(x_bd.unwrap_or(0));
    let y = (w.flood_to_dpm * x_f + w.damage_to_dpm * bd + w.dpm_noise * e_y + w.dpm_leak).exp();
    ForwardSample { x_w, x_f, x_bd, y }
}

/// Ground-truth weights used for synthetic scenarios unless overridden.
/// Flood inflates the DPM on its own, so the raw DPM is a confounded
/// damage signal.
pub fn default_weight_spec() -> EdgeWeights {
    EdgeWeights {
        wind_prior: 1.0,
        wind_noise: 0.25,
        wind_leak: 0.0,
        flood_prior: 1.0,
        flood_noise: 0.25,
        flood_leak: 0.0,
        flood_to_damage: 0.8,
        wind_to_damage: 2.0,
        damage_noise: 0.5,
        damage_leak: -6.75,
        flood_to_dpm: 1.2,
        damage_to_dpm: 0.7,
        dpm_noise: 0.5,
        dpm_leak: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub true_weights: EdgeWeights,
    /// One record per cell, in raster order; `label` holds the true damage
    /// state of footprint cells.
    pub location_table: LocationTable,
    pub latents: Vec<ForwardSample>,
    pub seed: u64,
}

fn grid_shape(n_cells: usize) -> (usize, usize) {
    let mut ncols = (n_cells as f64).sqrt().floor() as usize;
    while ncols > 1 && n_cells % ncols != 0 {
        ncols -= 1;
    }
    let ncols = ncols.max(1);
    (n_cells / ncols, ncols)
}

/// Smooth field on the unit square: a base level plus Gaussian bumps.
struct BumpField {
    base: f64,
    bumps: Vec<(f64, f64, f64, f64)>,
}

impl BumpField {
    fn random(rng: &mut impl Rng, base: f64, count: usize, amp: (f64, f64), radius: (f64, f64)) -> Self {
        let bumps = (0..count)
            .map(|_| {
                (
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random_range(amp.0..amp.1),
                    rng.random_range(radius.0..radius.1),
                )
            })
            .collect();
        BumpField { base, bumps }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        self.base
            + self
                .bumps
                .iter()
                .map(|(cu, cv, a, r)| a * (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * r * r)).exp())
                .sum::<f64>()
    }
}

/// Spatial (mean, standard deviation) of the log-scale prior fields. Fixing
/// them keeps the overall hazard level, and so the damage rate, comparable
/// across seeds; only the layout changes.
const FLOOD_FIELD: (f64, f64) = (-0.3, 0.4);
const WIND_FIELD: (f64, f64) = (0.3, 0.3);

fn standardize(mut values: Vec<f64>, (mean, sd): (f64, f64)) -> Vec<f64> {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let s = (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    let scale = if s > 0.0 { sd / s } else { 0.0 };
    for v in values.iter_mut() {
        *v = mean + (*v - m) * scale;
    }
    values
}

/// Builds a reproducible synthetic region of `n_cells` cells.
pub fn make_scenario(
    n_cells: usize,
    footprint_fraction: f64,
    weight_spec: &EdgeWeights,
    seed: u64,
) -> Result<SyntheticScenario> {
    if n_cells == 0 {
        return Err(Error::invalid("scenario needs at least one cell"));
    }
    if !(0.0..=1.0).contains(&footprint_fraction) {
        return Err(Error::invalid(format!("footprint fraction {footprint_fraction} outside [0, 1]")));
    }
    weight_spec.validate()?;
    let (nrows, ncols) = grid_shape(n_cells);
    let geometry = GridGeometry {
        ncols,
        nrows,
        xllcorner: 420_000.0,
        yllcorner: 2_950_000.0,
        cellsize: 20.0,
    };

    let mut field_rng = stream_rng(seed, 0);
    let flood_field = BumpField::random(&mut field_rng, 0.0, 8, (0.4, 1.4), (0.05, 0.2));
    let wind_field = BumpField::random(&mut field_rng, 0.0, 8, (0.25, 0.55), (0.15, 0.35));
    let span = nrows.max(ncols) as f64;
    let centers = (0..nrows).flat_map(|row| (0..ncols).map(move |col| ((col as f64 + 0.5) / span, (row as f64 + 0.5) / span)));
    let a_f = standardize(centers.clone().map(|(u, v)| flood_field.eval(u, v)).collect(), FLOOD_FIELD);
    let a_w = standardize(centers.map(|(u, v)| wind_field.eval(u, v)).collect(), WIND_FIELD);

    let mut rng = stream_rng(seed, 1);
    let mut records = Vec::with_capacity(n_cells);
    let mut latents = Vec::with_capacity(n_cells);
    for i in 0..n_cells {
        let has_footprint = rng.random::<f64>() < footprint_fraction;
        let s = sample_forward_site(weight_spec, a_w[i], a_f[i], has_footprint, &mut rng);
        records.push(LocationRecord {
            row: i / ncols,
            col: i % ncols,
            y: s.y,
            a_w: a_w[i],
            a_f: a_f[i],
            has_footprint,
            label: s.x_bd,
        });
        latents.push(s);
    }
    Ok(SyntheticScenario {
        true_weights: *weight_spec,
        location_table: LocationTable { geometry, records },
        latents,
        seed,
    })
}

/// Paths written by [`SyntheticScenario::export`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFiles {
    pub dpm: PathBuf,
    pub flood: PathBuf,
    pub wind: PathBuf,
    pub footprint: PathBuf,
    pub labels: PathBuf,
    pub manifest: PathBuf,
}

impl ScenarioFiles {
    pub fn in_dir(dir: &Path) -> Self {
        ScenarioFiles {
            dpm: dir.join("dpm.asc"),
            flood: dir.join("flood.asc"),
            wind: dir.join("wind.asc"),
            footprint: dir.join("footprint.asc"),
            labels: dir.join("labels.csv"),
            manifest: dir.join("manifest.txt"),
        }
    }

    pub fn all(&self) -> [&PathBuf; 6] {
        [&self.dpm, &self.flood, &self.wind, &self.footprint, &self.labels, &self.manifest]
    }
}

impl SyntheticScenario {
    pub fn n_cells(&self) -> usize {
        self.location_table.len()
    }

    pub fn damage_rate(&self) -> Option<f64> {
        let labels: Vec<u8> = self.latents.iter().filter_map(|s| s.x_bd).collect();
        (!labels.is_empty()).then(|| labels.iter().map(|&l| f64::from(l)).sum::<f64>() / labels.len() as f64)
    }

    fn layer(&self, f: impl Fn(&LocationRecord) -> f64) -> GridRaster {
        let mut r = GridRaster::filled(self.location_table.geometry, DEFAULT_NODATA, DEFAULT_NODATA);
        for rec in &self.location_table.records {
            r.set(rec.row, rec.col, f(rec));
        }
        r
    }

    /// Building-level damage annotations at cell centers, on the five-level
    /// scale (0–2 minor, 3–4 severe).
    pub fn label_rows(&self) -> Vec<LabelRow> {
        let mut rng = stream_rng(self.seed, 2);
        let g = self.location_table.geometry;
        self.location_table
            .records
            .iter()
            .filter_map(|r| {
                let bd = r.label?;
                let level = if bd == 1 { rng.random_range(3..=4) } else { rng.random_range(0..=2) };
                let (x, y) = g.cell_center(r.row, r.col);
                Some(LabelRow { lat: y, lon: x, level })
            })
            .collect()
    }

    /// Writes the rasters (DPM, flood and wind intensities, footprint mask),
    /// the label CSV and a key-value manifest into `dir`.
    pub fn export(&self, dir: &Path) -> Result<ScenarioFiles> {
        fs::create_dir_all(dir)?;
        let files = ScenarioFiles::in_dir(dir);
        write_ascii_grid(&self.layer(|r| r.y), &files.dpm)?;
        write_ascii_grid(&self.layer(|r| r.a_f.exp()), &files.flood)?;
        write_ascii_grid(&self.layer(|r| r.a_w.exp()), &files.wind)?;
        write_ascii_grid(&self.layer(|r| f64::from(u8::from(r.has_footprint))), &files.footprint)?;
        write_labels_csv(&self.label_rows(), &files.labels)?;
        let mut manifest = format!("seed={}\nn_cells={}\n", self.seed, self.n_cells());
        for (name, v) in EdgeWeights::NAMES.iter().zip(self.true_weights.to_array()) {
            manifest.push_str(&format!("true_{name}={v:?}\n"));
        }
        fs::write(&files.manifest, manifest)?;
        Ok(files)
    }
}

/// Monte-Carlo estimate of `E_q[log p(y, X)] − E_q[log q(X)]` and its
/// standard error. The damage noise has `q(ε) = p(ε)` and cancels.
pub fn monte_carlo_elbo(
    record: &LocationRecord,
    posterior: &LocationPosterior,
    w: &EdgeWeights,
    variant: GraphVariant,
    n_samples: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let log_y = record.y.ln();
    let m_f = w.hazard_conditional_mean(Hazard::Flood, record.a_f);
    let m_w = w.hazard_conditional_mean(Hazard::Wind, record.a_w);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let e_f: f64 = StandardNormal.sample(rng);
        let u_f = posterior.mu_f + posterior.sigma_f * e_f;
        let x_f = u_f.exp();
        // lognormal densities in x-space carry the −log x Jacobian
        let mut v = (-u_f + normal_logpdf(u_f, m_f, w.flood_noise))
            - (-u_f + normal_logpdf(u_f, posterior.mu_f, posterior.sigma_f));
        let mut bd = 0.0;
        if variant.has_damage() {
            let e_w: f64 = StandardNormal.sample(rng);
            let u_w = posterior.mu_w + posterior.sigma_w * e_w;
            let x_w = u_w.exp();
            v += (-u_w + normal_logpdf(u_w, m_w, w.wind_noise))
                - (-u_w + normal_logpdf(u_w, posterior.mu_w, posterior.sigma_w));
            let is_damaged = rng.random::<f64>() < posterior.q_bd;
            bd = f64::from(u8::from(is_damaged));
            let e_bd: f64 = StandardNormal.sample(rng);
            let z = w.flood_to_damage * x_f + w.wind_to_damage * x_w + w.damage_noise * e_bd + w.damage_leak;
            v += bd * z - log1pexp(z);
            v -= if is_damaged { posterior.q_bd.ln() } else { (1.0 - posterior.q_bd).ln() };
        }
        let pred = w.flood_to_dpm * x_f + w.damage_to_dpm * bd + w.dpm_leak;
        v += -log_y + normal_logpdf(log_y, pred, w.dpm_noise);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcConfig {
    /// Total iterations including burn-in.
    pub n_samples: usize,
    pub burn_in: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_samples: 100_000,
            burn_in: 5_000,
        }
    }
}

/// Posterior summaries from a chain, in the variational parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcSummary {
    /// Rao–Blackwellized `P(x_BD = 1 | y)`.
    pub q_bd: f64,
    pub mu_w: f64,
    pub sigma_w: f64,
    pub mu_f: f64,
    pub sigma_f: f64,
    /// Post-burn-in acceptance rates of (log flood, log wind, damage noise).
    pub acceptance: [f64; 3],
    /// Set when an acceptance rate ended outside [0.05, 0.95].
    pub warning: bool,
}

impl McmcSummary {
    /// Moment-matched variational posterior; `gamma_bd` is left at 1 and
    /// should be re-tightened by the caller.
    pub fn to_posterior(&self) -> LocationPosterior {
        LocationPosterior {
            q_bd: self.q_bd.clamp(1e-6, 1.0 - 1e-6),
            mu_w: self.mu_w,
            sigma_w: self.sigma_w.max(1e-6),
            mu_f: self.mu_f,
            sigma_f: self.sigma_f.max(1e-6),
            gamma_bd: 1.0,
        }
    }
}

struct SiteDensity<'a> {
    w: &'a EdgeWeights,
    log_y: f64,
    m_f: f64,
    m_w: f64,
}

impl SiteDensity<'_> {
    #[inline]
    fn logit(&self, u_f: f64, u_w: f64, eps: f64) -> f64 {
        self.w.flood_to_damage * u_f.exp() + self.w.wind_to_damage * u_w.exp() + self.w.damage_noise * eps
            + self.w.damage_leak
    }

    #[inline]
    fn obs(&self, u_f: f64, bd: f64) -> f64 {
        let pred = self.w.flood_to_dpm * u_f.exp() + self.w.damage_to_dpm * bd + self.w.dpm_leak;
        normal_logpdf(self.log_y, pred, self.w.dpm_noise)
    }

    /// Joint log-density over (u_F, u_W, ε, x_BD), up to a constant.
    #[inline]
    fn full(&self, u_f: f64, u_w: f64, eps: f64, bd: f64) -> f64 {
        let z = self.logit(u_f, u_w, eps);
        normal_logpdf(u_f, self.m_f, self.w.flood_noise)
            + normal_logpdf(u_w, self.m_w, self.w.wind_noise)
            - 0.5 * eps * eps
            + bd * z
            - log1pexp(z)
            + self.obs(u_f, bd)
    }

    #[inline]
    fn pruned(&self, u_f: f64) -> f64 {
        normal_logpdf(u_f, self.m_f, self.w.flood_noise) + self.obs(u_f, 0.0)
    }

    /// `P(x_BD = 1 | u_F, u_W, ε, y)`.
    #[inline]
    fn damage_conditional(&self, u_f: f64, u_w: f64, eps: f64) -> f64 {
        sigmoid(self.logit(u_f, u_w, eps) + self.obs(u_f, 1.0) - self.obs(u_f, 0.0))
    }
}

struct Running {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Running {
    fn new() -> Self {
        Running { n: 0.0, sum: 0.0, sum_sq: 0.0 }
    }

    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn sd(&self) -> f64 {
        let m = self.mean();
        (self.sum_sq / self.n - m * m).max(0.0).sqrt()
    }
}

/// Metropolis-within-Gibbs over `(log x_F, log x_W, ε_BD, x_BD)` targeting
/// the exact posterior of one location with the weights held fixed.
/// Continuous coordinates use Gaussian random walks whose scales adapt
/// toward 0.44 acceptance during burn-in; `x_BD` is drawn from its exact
/// full conditional.
pub fn mcmc_posterior(
    record: &LocationRecord,
    w: &EdgeWeights,
    variant: GraphVariant,
    config: McmcConfig,
    rng: &mut impl Rng,
) -> Result<McmcSummary> {
    if config.n_samples <= config.burn_in {
        return Err(Error::invalid(format!(
            "n_samples ({}) must exceed burn_in ({})",
            config.n_samples, config.burn_in
        )));
    }
    if !(record.y > 0.0) {
        return Err(Error::invalid(format!("observation must be positive, got {}", record.y)));
    }
    let d = SiteDensity {
        w,
        log_y: record.y.ln(),
        m_f: w.hazard_conditional_mean(Hazard::Flood, record.a_f),
        m_w: w.hazard_conditional_mean(Hazard::Wind, record.a_w),
    };
    let has_damage = variant.has_damage();
    let mut state = [d.m_f, d.m_w, 0.0];
    let mut bd = 0.0;
    let mut log_scale = [
        (0.5 * w.flood_noise.abs()).max(1e-3).ln(),
        (0.5 * w.wind_noise.abs()).max(1e-3).ln(),
        0.5f64.ln(),
    ];
    let n_coords = if has_damage { 3 } else { 1 };
    let mut accepted = [0usize; 3];
    let mut window = [0usize; 3];
    const ADAPT_EVERY: usize = 50;

    let mut stats_f = Running::new();
    let mut stats_w = Running::new();
    let mut q_sum = 0.0;
    let kept = config.n_samples - config.burn_in;

    let log_target = |s: &[f64; 3], bd: f64| {
        if has_damage {
            d.full(s[0], s[1], s[2], bd)
        } else {
            d.pruned(s[0])
        }
    };
    let mut current = log_target(&state, bd);

    for it in 0..config.n_samples {
        for k in 0..n_coords {
            let step: f64 = StandardNormal.sample(rng);
            let mut proposal = state;
            proposal[k] += log_scale[k].exp() * step;
            let cand = log_target(&proposal, bd);
            if rng.random::<f64>().ln() < cand - current {
                state = proposal;
                current = cand;
                window[k] += 1;
                if it >= config.burn_in {
                    accepted[k] += 1;
                }
            }
        }
        if has_damage {
            let p1 = d.damage_conditional(state[0], state[1], state[2]);
            bd = if rng.random::<f64>() < p1 { 1.0 } else { 0.0 };
            current = log_target(&state, bd);
            if it >= config.burn_in {
                q_sum += p1;
            }
        }
        if it < config.burn_in && (it + 1) % ADAPT_EVERY == 0 {
            let delta = (0.5 / ((it + 1) / ADAPT_EVERY) as f64).sqrt().min(0.3);
            for k in 0..n_coords {
                let rate = window[k] as f64 / ADAPT_EVERY as f64;
                log_scale[k] += if rate > 0.44 { delta } else { -delta };
                window[k] = 0;
            }
        }
        if it >= config.burn_in {
            stats_f.push(state[0]);
            stats_w.push(state[1]);
        }
    }

    let acceptance = accepted.map(|a| a as f64 / kept as f64);
    let warning = acceptance[..n_coords].iter().any(|r| !(0.05..=0.95).contains(r));
    let (mu_w, sigma_w) = if has_damage {
        (stats_w.mean(), stats_w.sd())
    } else {
        (d.m_w, w.wind_noise.abs())
    };
    Ok(McmcSummary {
        q_bd: if has_damage { q_sum / kept as f64 } else { 0.0 },
        mu_w,
        sigma_w,
        mu_f: stats_f.mean(),
        sigma_f: stats_f.sd(),
        acceptance,
        warning,
    })
}

/// Exact posterior summaries of one location from grid integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPosterior {
    pub q_bd: f64,
    pub mean_log_flood: f64,
    pub sd_log_flood: f64,
    pub mean_log_wind: f64,
    pub sd_log_wind: f64,
    /// Probability mass on the outermost grid lines.
    pub boundary_mass: f64,
}

/// Integrates the joint posterior on a uniform grid over `(log x_F, log x_W)`
/// spanning ±8 prior standard deviations, summing over `x_BD` and
/// marginalizing the damage noise by Gauss–Hermite quadrature.
pub fn brute_force_posterior(
    record: &LocationRecord,
    w: &EdgeWeights,
    variant: GraphVariant,
    grid_size: usize,
) -> Result<GridPosterior> {
    if !(3..=200).contains(&grid_size) {
        return Err(Error::invalid(format!("grid size {grid_size} outside 3..=200")));
    }
    let log_y = record.y.ln();
    let m_f = w.hazard_conditional_mean(Hazard::Flood, record.a_f);
    let m_w = w.hazard_conditional_mean(Hazard::Wind, record.a_w);
    let axis = |m: f64, s: f64| -> Vec<f64> {
        let half = 8.0 * s.abs();
        (0..grid_size)
            .map(|i| m - half + 2.0 * half * (i as f64) / (grid_size - 1) as f64)
            .collect()
    };
    let grid_f = axis(m_f, w.flood_noise);
    let grid_w = if variant.has_damage() { axis(m_w, w.wind_noise) } else { vec![m_w] };

    let obs = |u_f: f64, bd: f64| {
        normal_logpdf(log_y, w.flood_to_dpm * u_f.exp() + w.damage_to_dpm * bd + w.dpm_leak, w.dpm_noise)
    };
    // log-weights on the grid for bd = 0 and 1
    let mut logs = Vec::with_capacity(grid_f.len() * grid_w.len() * 2);
    for &u_f in &grid_f {
        let prior_f = normal_logpdf(u_f, m_f, w.flood_noise);
        for &u_w in &grid_w {
            if variant.has_damage() {
                let prior_w = normal_logpdf(u_w, m_w, w.wind_noise);
                let zbar = w.flood_to_damage * u_f.exp() + w.wind_to_damage * u_w.exp() + w.damage_leak;
                let p1 = standard_normal_expectation(|e| sigmoid(zbar + w.damage_noise * e));
                let p0 = standard_normal_expectation(|e| sigmoid(-zbar - w.damage_noise * e));
                let base = prior_f + prior_w;
                logs.push(base + p0.ln() + obs(u_f, 0.0));
                logs.push(base + p1.ln() + obs(u_f, 1.0));
            } else {
                logs.push(prior_f + obs(u_f, 0.0));
                logs.push(f64::NEG_INFINITY);
            }
        }
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("posterior density vanished on the grid".into()));
    }
    let probs: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();

    let nw = grid_w.len();
    let (mut q, mut boundary) = (0.0, 0.0);
    let (mut sf, mut sf2, mut sw, mut sw2) = (0.0, 0.0, 0.0, 0.0);
    for (i, &u_f) in grid_f.iter().enumerate() {
        for (j, &u_w) in grid_w.iter().enumerate() {
            let idx = 2 * (i * nw + j);
            let p = (probs[idx] + probs[idx + 1]) / total;
            q += probs[idx + 1] / total;
            sf += p * u_f;
            sf2 += p * u_f * u_f;
            sw += p * u_w;
            sw2 += p * u_w * u_w;
            let edge_f = i == 0 || i + 1 == grid_f.len();
            let edge_w = nw > 1 && (j == 0 || j + 1 == nw);
            if edge_f || edge_w {
                boundary += p;
            }
        }
    }
    if boundary > 0.01 {
        return Err(Error::Numeric(format!(
            "grid misses posterior mass: {:.3}% on the boundary",
            100.0 * boundary
        )));
    }
    let (sd_w, mean_w) = if variant.has_damage() {
        ((sw2 - sw * sw).max(0.0).sqrt(), sw)
    } else {
        (w.wind_noise.abs(), m_w)
    };
    Ok(GridPosterior {
        q_bd: if variant.has_damage() { q } else { 0.0 },
        mean_log_flood: sf,
        sd_log_flood: (sf2 - sf * sf).max(0.0).sqrt(),
        mean_log_wind: mean_w,
        sd_log_wind: sd_w,
        boundary_mass: boundary,
    })
}
