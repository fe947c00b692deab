//! End-to-end acceptance checks. Runs every criterion, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use causal_damage::elbo::{elbo_location, location_gradient};
use causal_damage::eval::{
    ablation_csv, ablation_report, dpm_baseline_scores, posterior_scores, roc_curve, table_labels, AblationConfig,
    AblationRow,
};
use causal_damage::geodata::{format_ascii_grid, parse_ascii_grid, GridGeometry, GridRaster, LocationRecord};
use causal_damage::inference::{
    fit_location, run_em, update_continuous_posterior, update_gamma, update_q_bd, OptimizerConfig, PosteriorMethod,
};
use causal_damage::model::{
    jaakkola_g, linear_predictor_moments, log1pexp, lognormal_moments, quadratic_bound_log1pexp, EdgeWeights,
    GraphVariant, Hazard, LocationPosterior, MomentPair, NUM_WEIGHTS,
};
use causal_damage::oracle::{
    brute_force_posterior, default_weight_spec, make_scenario, mcmc_posterior, monte_carlo_elbo, sample_forward,
    stream_rng, McmcConfig,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn record(y: f64, a_w: f64, a_f: f64) -> LocationRecord {
    LocationRecord {
        row: 0,
        col: 0,
        y,
        a_w,
        a_f,
        has_footprint: true,
        label: None,
    }
}

fn random_weights(rng: &mut impl Rng) -> EdgeWeights {
    let mut a = [0.0; NUM_WEIGHTS];
    for (name, v) in EdgeWeights::NAMES.iter().zip(a.iter_mut()) {
        *v = if name.ends_with("_noise") {
            rng.random_range(0.2..1.2)
        } else {
            rng.random_range(-1.5..1.5)
        };
    }
    EdgeWeights::from_array(a)
}

fn random_record(rng: &mut impl Rng) -> LocationRecord {
    record(rng.random_range(0.2..5.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn random_posterior(rng: &mut impl Rng) -> LocationPosterior {
    LocationPosterior {
        q_bd: rng.random_range(0.02..0.98),
        mu_w: rng.random_range(-1.0..1.0),
        sigma_w: rng.random_range(0.1..1.0),
        mu_f: rng.random_range(-1.0..1.0),
        sigma_f: rng.random_range(0.1..1.0),
        gamma_bd: rng.random_range(0.1..5.0),
    }
}

fn variant_for(i: usize) -> GraphVariant {
    if i % 5 == 4 {
        GraphVariant::Pruned
    } else {
        GraphVariant::Full
    }
}

fn bound_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut violations = 0;
    let mut worst_z = f64::NEG_INFINITY;
    for i in 0..200 {
        let w = random_weights(&mut rng);
        let r = random_record(&mut rng);
        let p = random_posterior(&mut rng);
        let v = variant_for(i);
        let b = elbo_location(&r, &p, &w, v).map_err(|e| e.to_string())?;
        let (mc, se) = monte_carlo_elbo(&r, &p, &w, v, 100_000, &mut rng);
        // the complete bound includes the entropy constants, so it is the
        // stronger of the two comparisons
        for value in [b.total, b.full_bound()] {
            if value > mc + 3.0 * se {
                violations += 1;
            }
        }
        worst_z = worst_z.max((b.full_bound() - mc) / se);
    }
    check(violations == 0, format!("{violations} violations, max (bound − MC)/SE = {worst_z:.2}"))
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let w = random_weights(&mut rng);
        let r = random_record(&mut rng);
        let p = random_posterior(&mut rng);
        let v = variant_for(i);
        let g = location_gradient(&r, &p, &w, v);
        let base = w.to_array();
        for k in 0..NUM_WEIGHTS {
            let at = |d: f64| {
                let mut a = base;
                a[k] += d;
                elbo_location(&r, &p, &EdgeWeights::from_array(a), v).unwrap().total
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let scale = g.0[k].abs().max(numeric.abs());
            if scale > 0.0 {
                worst = worst.max((g.0[k] - numeric).abs() / scale);
            }
        }
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over 50 points × {NUM_WEIGHTS} weights"))
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_drop: f64 = 0.0;
    for _ in 0..100 {
        let w = random_weights(&mut rng);
        let r = random_record(&mut rng);
        let mut p = random_posterior(&mut rng);
        let v = GraphVariant::Full;
        let bound = |p: &LocationPosterior| elbo_location(&r, p, &w, v).unwrap().total;
        let mut prev = bound(&p);
        for _ in 0..3 {
            for step in 0..4 {
                match step {
                    0 => p.gamma_bd = update_gamma(p.flood_moments(), p.wind_moments(), &w),
                    1 => p.q_bd = update_q_bd(&r, &p, &w),
                    _ => {
                        let hazard = if step == 2 { Hazard::Flood } else { Hazard::Wind };
                        let u = update_continuous_posterior(hazard, &r, &p, &w, v);
                        p.set_hazard(hazard, u.mu, u.sigma);
                    }
                }
                let now = bound(&p);
                worst_drop = worst_drop.max(prev - now);
                prev = now;
            }
        }
    }
    let per_location = worst_drop <= 1e-10;

    let s = make_scenario(1000, 0.6, &default_weight_spec(), 303).map_err(|e| e.to_string())?;
    let config = OptimizerConfig {
        batch_size: 1000,
        max_epochs: 50,
        elbo_rel_tol: 0.0,
        ..Default::default()
    };
    let fit = run_em(&s.location_table, &config).map_err(|e| e.to_string())?;
    let epoch_drop = fit
        .elbo_history
        .windows(2)
        .map(|p| p[0].elbo - p[1].elbo)
        .fold(f64::NEG_INFINITY, f64::max);
    check(
        per_location && epoch_drop <= 1e-6 && fit.epochs_run() == 50,
        format!("worst coordinate drop {worst_drop:.1e}; worst full-batch epoch drop {epoch_drop:.1e} over 50 epochs"),
    )
}

fn posterior_oracle() -> Outcome {
    // single locations drawn from the generating model
    let w = default_weight_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut vi_worst, mut mc_worst): (f64, f64) = (0.0, 0.0);
    let mut vi_over = 0;
    let n = 24;
    for i in 0..n {
        let a_w = 0.3 + 0.3 * rng.sample::<f64, _>(StandardNormal);
        let a_f = -0.3 + 0.4 * rng.sample::<f64, _>(StandardNormal);
        let y = sample_forward(&w, a_w, a_f, &mut rng).y;
        let r = record(y, a_w, a_f);
        let exact = brute_force_posterior(&r, &w, GraphVariant::Full, 160).map_err(|e| e.to_string())?;
        let vi = fit_location(&r, &w, GraphVariant::Full, 50);
        let mut chain_rng = stream_rng(404, i);
        let mc = mcmc_posterior(&r, &w, GraphVariant::Full, McmcConfig::default(), &mut chain_rng)
            .map_err(|e| e.to_string())?;
        vi_worst = vi_worst.max((vi.q_bd - exact.q_bd).abs());
        vi_over += usize::from((vi.q_bd - exact.q_bd).abs() >= 0.05);
        mc_worst = mc_worst.max((mc.q_bd - exact.q_bd).abs());
    }
    check(
        vi_worst < 0.05 && mc_worst < 0.01,
        format!(
            "{n} instances: max |q_VI − q_exact| = {vi_worst:.4} ({vi_over} at or above 0.05), \
             max |q_MCMC − q_exact| = {mc_worst:.4}"
        ),
    )
}

fn recovery() -> Outcome {
    let s = make_scenario(10_000, 0.6, &default_weight_spec(), 2024).map_err(|e| e.to_string())?;
    let t = &s.location_table;
    let labels = table_labels(t);
    let baseline = roc_curve(&dpm_baseline_scores(t), &labels).map_err(|e| e.to_string())?.auc;
    let fit = run_em(t, &OptimizerConfig::default()).map_err(|e| e.to_string())?;
    let scores = posterior_scores(t, &fit.posteriors).map_err(|e| e.to_string())?;
    let auc = roc_curve(&scores, &labels).map_err(|e| e.to_string())?.auc;
    check(
        auc > 0.5 && auc - baseline >= 0.03 && fit.wall_time_seconds < 600.0,
        format!(
            "VI AUC {auc:.4} vs DPM baseline {baseline:.4} (margin {:.4}), {} epochs, {:.1}s",
            auc - baseline,
            fit.epochs_run(),
            fit.wall_time_seconds
        ),
    )
}

fn ablation(out: &Path) -> Outcome {
    let start = Instant::now();
    let s = make_scenario(50_000, 0.6, &default_weight_spec(), 2024).map_err(|e| e.to_string())?;
    let t = &s.location_table;
    let vi = |batch_size: usize, pruning: bool| AblationConfig {
        optimizer: OptimizerConfig {
            batch_size,
            pruning,
            ..Default::default()
        },
    };
    // the sampler costs ~10³ model evaluations per location per E-step, so
    // its rows get a short epoch budget
    let mcmc = |pruning: bool| AblationConfig {
        optimizer: OptimizerConfig {
            batch_size: 1024,
            pruning,
            max_epochs: 5,
            method: PosteriorMethod::Mcmc(McmcConfig {
                n_samples: 2000,
                burn_in: 500,
            }),
            ..Default::default()
        },
    };
    let mut configs: Vec<AblationConfig> = [128, 256, 512, 1024].map(|m| vi(m, true)).to_vec();
    configs.push(vi(1024, false));
    configs.push(mcmc(false));
    configs.push(mcmc(true));
    let rows = ablation_report(t, &configs).map_err(|e| e.to_string())?;
    fs::write(out.join("ablation.csv"), ablation_csv(&rows)).map_err(|e| e.to_string())?;
    for r in &rows {
        eprintln!(
            "    {:<10} m={:<5} auc {:.4} vlb {:.5} {:.2}s ({} epochs, {:.3}s/epoch)",
            r.method, r.batch_size, r.auc, r.vlb, r.seconds, r.epochs, r.seconds_per_epoch
        );
    }
    let sweep: &[AblationRow] = &rows[..4];
    let decreasing = sweep.windows(2).all(|p| p[1].seconds < p[0].seconds);
    let aucs = sweep.iter().map(|r| r.auc);
    let spread = aucs.clone().fold(f64::NEG_INFINITY, f64::max) - aucs.fold(f64::INFINITY, f64::min);
    let vi_vlb = |label: &str| rows[..5].iter().filter(|r| r.method == label).map(|r| r.vlb).fold(f64::INFINITY, f64::min);
    let mc_vlb = |label: &str| rows[5..].iter().filter(|r| r.method == label).map(|r| r.vlb).fold(f64::NEG_INFINITY, f64::max);
    let dominates = vi_vlb("VI Full") > mc_vlb("MCMC Full") && vi_vlb("VI Local") > mc_vlb("MCMC Local");
    let elapsed = start.elapsed().as_secs_f64();
    let times: Vec<String> = sweep.iter().map(|r| format!("{:.1}", r.seconds)).collect();
    check(
        decreasing && spread <= 0.05 && dominates && elapsed < 1800.0,
        format!(
            "batch 128→1024 seconds [{}] strictly decreasing: {decreasing}; AUC spread {spread:.4}; \
             VI VLB > MCMC VLB: {dominates}; {elapsed:.0}s total",
            times.join(", ")
        ),
    )
}

fn pruning_speed() -> Outcome {
    let s = make_scenario(10_000, 0.3, &default_weight_spec(), 707).map_err(|e| e.to_string())?;
    let t = &s.location_table;
    let config = |pruning: bool| OptimizerConfig {
        pruning,
        max_epochs: 40,
        elbo_rel_tol: 0.0,
        ..Default::default()
    };
    let labels = table_labels(t);
    let (mut local_best, mut full_best) = (f64::INFINITY, f64::INFINITY);
    let (mut local_auc, mut full_auc) = (0.0, 0.0);
    // alternate the two and keep each one's fastest run
    for _ in 0..3 {
        for pruning in [true, false] {
            let fit = run_em(t, &config(pruning)).map_err(|e| e.to_string())?;
            let auc = roc_curve(&posterior_scores(t, &fit.posteriors).unwrap(), &labels).unwrap().auc;
            let secs = fit.seconds_per_epoch();
            if pruning {
                local_best = local_best.min(secs);
                local_auc = auc;
            } else {
                full_best = full_best.min(secs);
                full_auc = auc;
            }
        }
    }
    let speedup = full_best / local_best;
    check(
        speedup >= 2.0 && (local_auc - full_auc).abs() <= 0.05,
        format!(
            "Local {:.4}s/epoch vs Full {:.4}s/epoch: {speedup:.2}×; AUC Local {local_auc:.4} vs Full {full_auc:.4}",
            local_best, full_best
        ),
    )
}

fn numerics() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol * b.abs().max(1.0);

    // lognormal moments: closed forms, the three-term identity and sampling
    for (mu, sigma, mean, second) in [(0.0, 0.0, 1.0, 1.0), (0.0, 1.0, 1.64872, 7.38906), (2f64.ln(), 0.0, 2.0, 4.0)] {
        let m = lognormal_moments(mu, sigma).unwrap();
        if !close(m.mean, mean, 1e-5) || !close(m.second_moment, second, 1e-5) {
            failures.push(format!("lognormal({mu}, {sigma})"));
        }
    }
    for _ in 0..1000 {
        let (mu, sigma) = (rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0));
        let m = lognormal_moments(mu, sigma).unwrap();
        let s2: f64 = sigma * sigma;
        let three_term = (s2.exp() - 1.0) * (2.0 * mu + s2).exp() + (s2 + 2.0 * mu).exp();
        let excess = m.second_moment - m.mean * m.mean;
        if !close(m.second_moment, three_term, 1e-12) || !close(excess, (s2.exp() - 1.0) * m.mean * m.mean, 1e-9) {
            failures.push(format!("lognormal identity at ({mu}, {sigma})"));
        }
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..1_000_000 {
        let x = (0.3 + 0.5 * rng.sample::<f64, _>(StandardNormal)).exp();
        s1 += x;
        s2 += x * x;
    }
    let m = lognormal_moments(0.3, 0.5).unwrap();
    if (s1 / 1e6 / m.mean - 1.0).abs() > 0.01 || (s2 / 1e6 / m.second_moment - 1.0).abs() > 0.01 {
        failures.push("lognormal Monte Carlo".into());
    }

    // quadratic bound: dominance everywhere, equality exactly at |z| = γ
    for gi in 1..=100 {
        let gamma = gi as f64 * 0.1;
        for zi in -100..=100 {
            let z = zi as f64 * 0.1;
            let gap = quadratic_bound_log1pexp(z, gamma).unwrap() - log1pexp(z);
            let tight = (z.abs() - gamma).abs() < 1e-9;
            if (tight && gap.abs() > 1e-10) || (!tight && gap <= 0.0) || gap < -1e-12 {
                failures.push(format!("bound at z={z}, γ={gamma}: gap {gap:e}"));
            }
        }
    }
    if (jaakkola_g(1e-6).unwrap() - 0.125).abs() > 1e-6 {
        failures.push("g(γ→0)".into());
    }
    let mut prev = jaakkola_g(1e-9).unwrap();
    let mut gamma = 1e-3;
    while gamma < 50.0 {
        let g = jaakkola_g(gamma).unwrap();
        if !(g < prev && g > 0.0) {
            failures.push(format!("g not decreasing at {gamma}"));
        }
        prev = g;
        gamma *= 1.05;
    }

    // linear predictor moments against sampled independent parents
    let parents = [(1.3, (0.1, 0.4)), (-0.7, (0.5, 0.3))];
    let pairs: Vec<(f64, MomentPair)> =
        parents.iter().map(|&(w, (mu, s))| (w, lognormal_moments(mu, s).unwrap())).collect();
    let (w_eps, w_0) = (0.6, 0.8);
    let z = linear_predictor_moments(&pairs, w_eps, w_0);
    let (mut e1, mut e2) = (0.0, 0.0);
    for _ in 0..1_000_000 {
        let mut v = w_0 + w_eps * rng.sample::<f64, _>(StandardNormal);
        for &(w, (mu, s)) in &parents {
            v += w * (mu + s * rng.sample::<f64, _>(StandardNormal)).exp();
        }
        e1 += v;
        e2 += v * v;
    }
    if (e1 / 1e6 / z.mean - 1.0).abs() > 0.01 || (e2 / 1e6 / z.second_moment - 1.0).abs() > 0.01 {
        failures.push("linear predictor Monte Carlo".into());
    }

    // AUC equals the normalized Mann–Whitney statistic
    for trial in 0..50 {
        let n = rng.random_range(2..=1000);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse scores so ties occur
        let scores: Vec<f64> =
            labels.iter().map(|&l| (f64::from(l) + 2.0 * rng.random::<f64>() * 10.0).round() / 10.0).collect();
        let auc = roc_curve(&scores, &labels).unwrap().auc;
        let (mut u, mut n1, mut n0) = (0.0, 0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if li == 1 {
                n1 += 1.0;
                for (j, &lj) in labels.iter().enumerate() {
                    if lj == 0 {
                        u += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            } else {
                n0 += 1.0;
            }
        }
        if (auc - u / (n1 * n0)).abs() > 1e-12 {
            failures.push(format!("AUC vs Mann–Whitney, trial {trial}"));
        }
    }
    let detail = "lognormal moments, quadratic-bound tightness, g(γ) limits, predictor moments, AUC = Mann–Whitney";
    if failures.is_empty() {
        Ok(detail.into())
    } else {
        Err(format!("{} failures, first: {}", failures.len(), failures[0]))
    }
}

fn random_raster(rng: &mut impl Rng) -> GridRaster {
    let geometry = GridGeometry {
        ncols: rng.random_range(1..=12),
        nrows: rng.random_range(1..=12),
        xllcorner: rng.random_range(-1e6..1e6),
        yllcorner: rng.random_range(-1e6..1e6),
        cellsize: rng.random_range(1e-3..1e3),
    };
    let nodata = if rng.random_bool(0.5) { -9999.0 } else { rng.random_range(-1e9..-1e8) };
    let values = (0..geometry.len())
        .map(|_| match rng.random_range(0..5) {
            0 => nodata,
            1 => rng.random_range(-100i32..100).into(),
            2 => rng.random::<f64>() * 10f64.powi(rng.random_range(-300..300)),
            _ => rng.sample::<f64, _>(StandardNormal),
        })
        .collect();
    GridRaster::new(geometry, nodata, values).unwrap()
}

fn io_roundtrip(out: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let r = random_raster(&mut rng);
        let back = parse_ascii_grid(&format_ascii_grid(&r)).map_err(|e| e.to_string())?;
        let same_values =
            r.values.len() == back.values.len() && r.values.iter().zip(&back.values).all(|(a, b)| a.to_bits() == b.to_bits());
        let same_header = r.geometry() == back.geometry() && r.nodata_value.to_bits() == back.nodata_value.to_bits();
        if !(same_values && same_header) {
            mismatches += 1;
        }
    }

    let exe = env!("CARGO_BIN_EXE_causal-damage");
    let data = out.join("scenario");
    let run = |args: &[&str]| -> Result<i32, String> {
        let status = Command::new(exe)
            .args(args)
            .env("CAUSAL_DAMAGE_THREADS", "1")
            .output()
            .map_err(|e| e.to_string())?;
        Ok(status.status.code().unwrap_or(-1))
    };
    let data_s = data.to_str().unwrap();
    let mut codes = vec![run(&["simulate", "--seed", "5", "--set", "n_cells=2500", "--out", data_s])?];
    let mut posteriors = Vec::new();
    for k in 0..2 {
        let fit_dir = out.join(format!("fit{k}"));
        codes.push(run(&["infer", "--seed", "5", "--input", data_s, "--out", fit_dir.to_str().unwrap()])?);
        posteriors.push(fs::read(fit_dir.join("posterior.csv")).map_err(|e| e.to_string())?);
    }
    let eval_dir = out.join("eval");
    codes.push(run(&[
        "evaluate",
        "--input",
        data_s,
        "--set",
        &format!("posterior={}", out.join("fit0/posterior.csv").display()),
        "--out",
        eval_dir.to_str().unwrap(),
    ])?);
    let metrics = eval_dir.join("metrics.csv").is_file();
    let identical = posteriors[0] == posteriors[1] && !posteriors[0].is_empty();
    check(
        mismatches == 0 && codes.iter().all(|&c| c == 0) && identical && metrics,
        format!(
            "{mismatches}/1000 raster mismatches; exit codes {codes:?}; posterior.csv identical across runs: {identical}"
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 bound validity", Box::new(bound_validity)),
        ("2 gradient oracle", Box::new(gradient_oracle)),
        ("3 coordinate-ascent monotonicity", Box::new(monotonicity)),
        ("4 posterior-oracle agreement", Box::new(posterior_oracle)),
        ("5 label-free recovery", Box::new(recovery)),
        ("6 ablation trends", Box::new(|| ablation(dir.path()))),
        ("7 pruning", Box::new(pruning_speed)),
        ("8 numerics", Box::new(numerics)),
        ("9 I/O", Box::new(|| io_roundtrip(dir.path()))),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in &criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
