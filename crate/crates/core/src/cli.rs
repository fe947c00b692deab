//! Command-line pipeline: `simulate`, `infer`, `evaluate`, `ablate`.
//!
//! Settings come from a flat `key=value` file (`--config`), then from
//! `--set key=value` overrides, then from the dedicated flags. Keys are the
//! field names of [`RunConfig`].

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, ablation_report, classification_metrics, dpm_baseline_scores, roc_curve, table_labels,
    AblationConfig,
};
use crate::geodata::{
    build_location_table, join_labels, read_ascii_grid, resample_to_grid, write_ascii_grid, GridRaster,
    LocationTable, Resampling, DEFAULT_NODATA,
};
use crate::inference::{run_em_with_progress, FitResult, Initialization, OptimizerConfig, PosteriorMethod};
use crate::model::{EdgeWeights, GraphVariant};
use crate::oracle::{default_weight_spec, make_scenario, McmcConfig};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "CAUSAL_DAMAGE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Vi,
    Mcmc,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vi" => Ok(Method::Vi),
            "mcmc" => Ok(Method::Mcmc),
            other => Err(Error::invalid(format!("unknown method {other:?} (expected vi or mcmc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory with `dpm.asc`, `flood.asc`, `wind.asc`, `footprint.asc`
    /// and `labels.csv`; individual paths below override it.
    pub input_dir: Option<PathBuf>,
    pub dpm: Option<PathBuf>,
    pub flood: Option<PathBuf>,
    pub wind: Option<PathBuf>,
    pub footprint: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Posterior CSV read by `evaluate`; defaults to the one in `out`.
    pub posterior: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub n_cells: usize,
    pub footprint_fraction: f64,
    pub learning_rate: f64,
    pub decay: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub elbo_rel_tol: f64,
    pub e_step_sweeps: usize,
    pub pruning: bool,
    pub m_step_backtracking: bool,
    pub method: Method,
    /// `informed` (default) or `uniform`.
    pub init: Initialization,
    pub mcmc_samples: usize,
    pub mcmc_burn_in: usize,
    pub resampling: Resampling,
    pub ablate_batch_sizes: Vec<usize>,
    pub ablate_methods: Vec<Method>,
    /// `false` runs the full graph, `true` the pruned one.
    pub ablate_pruning: Vec<bool>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        RunConfig {
            input_dir: None,
            dpm: None,
            flood: None,
            wind: None,
            footprint: None,
            labels: None,
            posterior: None,
            out: PathBuf::from("out"),
            seed: opt.seed,
            n_cells: 10_000,
            footprint_fraction: 0.6,
            learning_rate: opt.learning_rate,
            decay: opt.decay,
            batch_size: opt.batch_size,
            max_epochs: opt.max_epochs,
            elbo_rel_tol: opt.elbo_rel_tol,
            e_step_sweeps: opt.e_step_sweeps,
            pruning: opt.pruning,
            m_step_backtracking: opt.m_step_backtracking,
            method: Method::Vi,
            init: opt.init,
            mcmc_samples: 2_000,
            mcmc_burn_in: 500,
            resampling: Resampling::Bilinear,
            ablate_batch_sizes: vec![128, 256, 512, 1024],
            ablate_methods: vec![Method::Vi, Method::Mcmc],
            ablate_pruning: vec![false, true],
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| f(s.trim())).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value.trim()));
        match key.trim() {
            "input_dir" => self.input_dir = path(),
            "dpm" => self.dpm = path(),
            "flood" => self.flood = path(),
            "wind" => self.wind = path(),
            "footprint" => self.footprint = path(),
            "labels" => self.labels = path(),
            "posterior" => self.posterior = path(),
            "out" => self.out = PathBuf::from(value.trim()),
            "seed" => self.seed = parse_value(key, value)?,
            "n_cells" => self.n_cells = parse_value(key, value)?,
            "footprint_fraction" => self.footprint_fraction = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "decay" => self.decay = parse_bool(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "elbo_rel_tol" => self.elbo_rel_tol = parse_value(key, value)?,
            "e_step_sweeps" => self.e_step_sweeps = parse_value(key, value)?,
            "pruning" => self.pruning = parse_bool(key, value)?,
            "m_step_backtracking" => self.m_step_backtracking = parse_bool(key, value)?,
            "method" => self.method = value.parse()?,
            "init" => {
                self.init = match value.trim().to_ascii_lowercase().as_str() {
                    "uniform" => Initialization::Uniform,
                    "informed" => Initialization::Informed,
                    other => return Err(Error::invalid(format!("unknown init {other:?}"))),
                }
            }
            "mcmc_samples" => self.mcmc_samples = parse_value(key, value)?,
            "mcmc_burn_in" => self.mcmc_burn_in = parse_value(key, value)?,
            "resampling" => {
                self.resampling = match value.trim().to_ascii_lowercase().as_str() {
                    "nearest" => Resampling::Nearest,
                    "bilinear" => Resampling::Bilinear,
                    other => return Err(Error::invalid(format!("unknown resampling {other:?}"))),
                }
            }
            "ablate_batch_sizes" => self.ablate_batch_sizes = parse_list(value, |s| parse_value(key, s))?,
            "ablate_methods" => self.ablate_methods = parse_list(value, str::parse)?,
            "ablate_pruning" => self.ablate_pruning = parse_list(value, |s| parse_bool(key, s))?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` text; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, got {line:?}")))?;
            self.set(k, v).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn optimizer(&self, method: Method, pruning: bool, batch_size: usize) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            decay: self.decay,
            batch_size,
            max_epochs: self.max_epochs,
            elbo_rel_tol: self.elbo_rel_tol,
            seed: self.seed,
            e_step_sweeps: self.e_step_sweeps,
            pruning,
            m_step_backtracking: self.m_step_backtracking,
            init: self.init,
            method: match method {
                Method::Vi => PosteriorMethod::Variational,
                Method::Mcmc => PosteriorMethod::Mcmc(McmcConfig {
                    n_samples: self.mcmc_samples,
                    burn_in: self.mcmc_burn_in,
                }),
            },
        }
    }

    fn input(&self, explicit: &Option<PathBuf>, file: &str) -> Option<PathBuf> {
        explicit.clone().or_else(|| self.input_dir.as_ref().map(|d| d.join(file)))
    }

    fn required_input(&self, explicit: &Option<PathBuf>, file: &str, key: &str) -> Result<PathBuf> {
        let p = self
            .input(explicit, file)
            .ok_or_else(|| Error::invalid(format!("no path for {key}: set {key} or input_dir")))?;
        if !p.is_file() {
            return Err(Error::Data(format!("{key} file {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn optional_input(&self, explicit: &Option<PathBuf>, file: &str, key: &str) -> Result<Option<PathBuf>> {
        match self.input(explicit, file) {
            Some(p) if p.is_file() => Ok(Some(p)),
            // an explicitly named file must exist
            Some(p) if explicit.is_some() => Err(Error::Data(format!("{key} file {} does not exist", p.display()))),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "causal-damage", version, about = "Label-free building damage inference from DPM and hazard rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding the input rasters and labels.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    method: Option<Method>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Keep the damage node at every location.
    #[arg(long, global = true)]
    no_prune: bool,
    /// Override a configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write a synthetic scenario (rasters, labels, manifest).
    Simulate,
    /// Fit the model and write posterior maps.
    Infer,
    /// Score an inferred map and the DPM baseline against labels.
    Evaluate,
    /// Run the method / graph / batch-size grid.
    Ablate,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(i) = &self.input {
            cfg.input_dir = Some(i.clone());
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if self.no_prune {
            cfg.pruning = false;
        }
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Parse { .. } | Error::Geometry(_) | Error::Data(_) | Error::Io(_) | Error::Csv(_) => EXIT_DATA,
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Ok(n) = std::env::var(THREADS_ENV) {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {n:?}");
                return EXIT_USAGE;
            }
        }
    }
    let result = cli.run_config().and_then(|cfg| match cli.command {
        Command::Simulate => cmd_simulate(&cfg).map(|_| ()),
        Command::Infer => cmd_infer(&cfg).map(|_| ()),
        Command::Evaluate => cmd_evaluate(&cfg).map(|_| ()),
        Command::Ablate => cmd_ablate(&cfg).map(|_| ()),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let scenario = make_scenario(cfg.n_cells, cfg.footprint_fraction, &default_weight_spec(), cfg.seed)?;
    let files = scenario.export(&cfg.out)?;
    for p in files.all() {
        println!("wrote\t{}", p.display());
    }
    Ok(files.all().into_iter().cloned().collect())
}

fn align(src: GridRaster, target: &GridRaster, method: Resampling) -> Result<GridRaster> {
    if src.geometry() == target.geometry() {
        Ok(src)
    } else {
        resample_to_grid(&src, target, method)
    }
}

/// Reads the rasters, aligns them on the DPM grid and joins labels when a
/// label file is available.
pub fn load_table(cfg: &RunConfig, with_labels: bool) -> Result<LocationTable> {
    let dpm = read_ascii_grid(cfg.required_input(&cfg.dpm, "dpm.asc", "dpm")?)?;
    let flood = align(read_ascii_grid(cfg.required_input(&cfg.flood, "flood.asc", "flood")?)?, &dpm, cfg.resampling)?;
    let wind = align(read_ascii_grid(cfg.required_input(&cfg.wind, "wind.asc", "wind")?)?, &dpm, cfg.resampling)?;
    let footprint = match cfg.optional_input(&cfg.footprint, "footprint.asc", "footprint")? {
        Some(p) => Some(align(read_ascii_grid(p)?, &dpm, Resampling::Nearest)?),
        None => None,
    };
    let mut table = build_location_table(&dpm, &flood, &wind, footprint.as_ref())?;
    if with_labels {
        let labels = cfg
            .optional_input(&cfg.labels, "labels.csv", "labels")?
            .ok_or_else(|| Error::Data("evaluation needs a labels CSV".into()))?;
        let report = join_labels(&mut table, labels)?;
        println!(
            "labels\tjoined\t{}\tout_of_extent\t{}\tunmatched\t{}",
            report.joined, report.out_of_extent, report.unmatched
        );
    }
    Ok(table)
}

pub struct InferOutputs {
    pub q_bd: PathBuf,
    pub flood_mean: PathBuf,
    pub wind_mean: PathBuf,
    pub posterior: PathBuf,
    pub elbo_history: PathBuf,
    pub manifest: PathBuf,
}

impl InferOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        InferOutputs {
            q_bd: dir.join("q_bd.asc"),
            flood_mean: dir.join("flood_mean.asc"),
            wind_mean: dir.join("wind_mean.asc"),
            posterior: dir.join("posterior.csv"),
            elbo_history: dir.join("elbo_history.csv"),
            manifest: dir.join("fit_manifest.txt"),
        }
    }
}

pub const POSTERIOR_HEADER: &str = "row,col,footprint,variant,q_bd,mu_f,sigma_f,mu_w,sigma_w,gamma_bd,flood_mean,wind_mean";

pub fn posterior_csv(table: &LocationTable, fit: &FitResult) -> String {
    let mut out = format!("{POSTERIOR_HEADER}\n");
    for ((r, p), v) in table.records.iter().zip(&fit.posteriors).zip(&fit.variants) {
        let variant = match v {
            GraphVariant::Full => "full",
            GraphVariant::Pruned => "pruned",
        };
        writeln!(
            out,
            "{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.row,
            r.col,
            u8::from(r.has_footprint),
            variant,
            p.q_bd,
            p.mu_f,
            p.sigma_f,
            p.mu_w,
            p.sigma_w,
            p.gamma_bd,
            p.flood_moments().mean,
            p.wind_moments().mean
        )
        .unwrap();
    }
    out
}

fn fit_manifest(cfg: &RunConfig, fit: &FitResult) -> String {
    let mut out = String::new();
    writeln!(out, "seed={}", cfg.seed).unwrap();
    writeln!(out, "method={}", if cfg.method == Method::Vi { "vi" } else { "mcmc" }).unwrap();
    writeln!(out, "pruning={}", cfg.pruning).unwrap();
    writeln!(out, "batch_size={}", cfg.batch_size).unwrap();
    writeln!(out, "epochs={}", fit.epochs_run()).unwrap();
    writeln!(out, "converged={}", fit.converged).unwrap();
    writeln!(out, "pruned_count={}", fit.pruned_count).unwrap();
    writeln!(out, "final_elbo={:?}", fit.final_elbo()).unwrap();
    for (name, v) in EdgeWeights::NAMES.iter().zip(fit.weights.to_array()) {
        writeln!(out, "{name}={v:?}").unwrap();
    }
    out
}

fn map_layer(table: &LocationTable, values: impl Iterator<Item = Option<f64>>) -> GridRaster {
    let mut r = GridRaster::filled(table.geometry, DEFAULT_NODATA, DEFAULT_NODATA);
    for (rec, v) in table.records.iter().zip(values) {
        if let Some(v) = v {
            r.set(rec.row, rec.col, v);
        }
    }
    r
}

/// Reads a posterior CSV back as `(row, col, q_bd)` triples.
pub fn read_posterior_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{} lacks column {name}", path.display())))
    };
    let (ri, ci, qi) = (col("row")?, col("col")?, col("q_bd")?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let bad = |what: &str| Error::parse(i + 2, format!("bad {what}"));
        out.push((
            field(ri).parse().map_err(|_| bad("row"))?,
            field(ci).parse().map_err(|_| bad("col"))?,
            field(qi).parse().map_err(|_| bad("q_bd"))?,
        ));
    }
    Ok(out)
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<(FitResult, InferOutputs)> {
    let table = load_table(cfg, false)?;
    fs::create_dir_all(&cfg.out)?;
    let opt = cfg.optimizer(cfg.method, cfg.pruning, cfg.batch_size);
    println!("cells\t{}\tpruned\t{}", table.len(), if cfg.pruning { table.len() - table.footprint_count() } else { 0 });
    let fit = run_em_with_progress(&table, &opt, |e| {
        println!("epoch\t{}\telbo\t{:.6}\tseconds\t{:.3}", e.epoch, e.elbo, e.seconds);
    })?;

    let outputs = InferOutputs::in_dir(&cfg.out);
    let q = fit
        .posteriors
        .iter()
        .zip(&fit.variants)
        .map(|(p, v)| v.has_damage().then_some(p.q_bd));
    write_ascii_grid(&map_layer(&table, q), &outputs.q_bd)?;
    write_ascii_grid(
        &map_layer(&table, fit.posteriors.iter().map(|p| Some(p.flood_moments().mean))),
        &outputs.flood_mean,
    )?;
    write_ascii_grid(
        &map_layer(&table, fit.posteriors.iter().map(|p| Some(p.wind_moments().mean))),
        &outputs.wind_mean,
    )?;
    fs::write(&outputs.posterior, posterior_csv(&table, &fit))?;
    let mut history = String::from("epoch,elbo\n");
    for e in &fit.elbo_history {
        writeln!(history, "{},{:?}", e.epoch, e.elbo).unwrap();
    }
    fs::write(&outputs.elbo_history, history)?;
    fs::write(&outputs.manifest, fit_manifest(cfg, &fit))?;

    // every declared output must parse back
    for p in [&outputs.q_bd, &outputs.flood_mean, &outputs.wind_mean] {
        read_ascii_grid(p)?;
    }
    if read_posterior_csv(&outputs.posterior)?.len() != table.len() {
        return Err(Error::Data("posterior CSV did not round-trip".into()));
    }
    println!(
        "done\tepochs\t{}\tconverged\t{}\telbo\t{:.6}\tseconds\t{:.3}",
        fit.epochs_run(),
        fit.converged,
        fit.final_elbo(),
        fit.wall_time_seconds
    );
    Ok((fit, outputs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutputs {
    pub metrics: PathBuf,
    pub roc_model: PathBuf,
    pub roc_dpm: PathBuf,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluateOutputs> {
    let table = load_table(cfg, true)?;
    let post_path = cfg.posterior.clone().unwrap_or_else(|| InferOutputs::in_dir(&cfg.out).posterior);
    if !post_path.is_file() {
        return Err(Error::Data(format!("posterior file {} does not exist", post_path.display())));
    }
    let q: HashMap<(usize, usize), f64> =
        read_posterior_csv(&post_path)?.into_iter().map(|(r, c, q)| ((r, c), q)).collect();
    let mut scores = Vec::new();
    for r in table.records.iter().filter(|r| r.label.is_some()) {
        let s = q
            .get(&(r.row, r.col))
            .ok_or_else(|| Error::Data(format!("no posterior for labeled cell ({}, {})", r.row, r.col)))?;
        scores.push(*s);
    }
    let labels = table_labels(&table);
    if labels.is_empty() {
        return Err(Error::Data("no labels joined to footprint cells".into()));
    }
    let baseline = dpm_baseline_scores(&table);

    fs::create_dir_all(&cfg.out)?;
    let outputs = EvaluateOutputs {
        metrics: cfg.out.join("metrics.csv"),
        roc_model: cfg.out.join("roc_model.csv"),
        roc_dpm: cfg.out.join("roc_dpm.csv"),
    };
    let mut metrics = String::from("model,n,auc,threshold,tpr,tnr\n");
    for (name, s, path) in [("causal", &scores, &outputs.roc_model), ("dpm", &baseline, &outputs.roc_dpm)] {
        let m = classification_metrics(s, &labels)?;
        writeln!(metrics, "{name},{},{:?},{:?},{:?},{:?}", labels.len(), m.auc, m.threshold, m.tpr, m.tnr).unwrap();
        fs::write(path, roc_curve(s, &labels)?.to_csv_string())?;
        println!("{name}\tauc\t{:.4}\ttpr\t{:.4}\ttnr\t{:.4}\tthreshold\t{:.4}", m.auc, m.tpr, m.tnr, m.threshold);
    }
    fs::write(&outputs.metrics, metrics)?;
    Ok(outputs)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    let table = load_table(cfg, true)?;
    let mut configs = Vec::new();
    for &method in &cfg.ablate_methods {
        for &pruning in &cfg.ablate_pruning {
            for &batch in &cfg.ablate_batch_sizes {
                configs.push(AblationConfig {
                    optimizer: cfg.optimizer(method, pruning, batch),
                });
            }
        }
    }
    if configs.is_empty() {
        return Err(Error::invalid("ablation grid is empty"));
    }
    let rows = ablation_report(&table, &configs)?;
    for r in &rows {
        println!(
            "{}\tbatch\t{}\tauc\t{:.4}\tvlb\t{:.4}\tseconds\t{:.3}",
            r.method, r.batch_size, r.auc, r.vlb, r.seconds
        );
    }
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("ablation.csv");
    fs::write(&path, ablation_csv(&rows))?;
    Ok(path)
}
