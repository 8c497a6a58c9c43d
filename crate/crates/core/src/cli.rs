//! Command-line surface: dataset CSV IO, config resolution, and the
//! `simulate`, `fit`, `predict`, `score`, and `replicate` commands. Every run
//! writes a manifest (config echo, seed, input hashes, version) and is a pure
//! function of its manifest.

use crate::covariance::{max_distance, Location};
use crate::error::{Error, Result};
use crate::models::{
    elicit_phi_prior, sample_variance, ModelFamily, ModelSpec, PriorMode, SpatialDataset,
};
use crate::nngp::build_graph;
use crate::predict::{predict_gaussian, predict_poisson, PredictMode, PredictiveDraws};
use crate::scoring::{empirical_quantile, score, ScoreReport};
use crate::simulate::{
    gen_gaussian_replicate, gen_poisson_replicate, split, VALIDATION_SIZE,
};
use crate::autodiff::AdamState;
use crate::sivi::{
    draw_posterior, load_checkpoint, save_checkpoint, train_observed, Checkpoint,
    GeneratorConfig, OptimizerKind, PsiLayout, TrainConfig, VarianceFamily, VariationalState,
    CHECKPOINT_VERSION,
};
use crate::tensor::Tensor;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const THREADS_ENV: &str = "SIVI_SPATIAL_THREADS";

// ---- dataset CSV -------------------------------------------------------------

/// Header `s1,s2,x1,...,xp,y`; the intercept column is implicit. Floats are
/// written in scientific notation, which round-trips f64 exactly.
pub fn write_dataset_csv(path: &Path, data: &SpatialDataset) -> Result<()> {
    let p = data.design_dim() - 1;
    let mut out = String::from("s1,s2");
    for k in 1..=p {
        out.push_str(&format!(",x{}", k));
    }
    out.push_str(",y\n");
    for i in 0..data.n() {
        out.push_str(&format!("{:e},{:e}", data.locations[i].coords[0], data.locations[i].coords[1]));
        for k in 1..=p {
            out.push_str(&format!(",{:e}", data.x.at(i, k)));
        }
        out.push_str(&format!(",{:e}\n", data.y[i]));
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_field(raw: &str, line: usize) -> Result<f64> {
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad float {:?}", raw.trim()),
    })
}

pub fn read_dataset_csv(path: &Path) -> Result<SpatialDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "s1" || cols[1] != "s2" || *cols.last().unwrap() != "y" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header s1,s2,x1,...,y, got {:?}", header),
        });
    }
    let p = cols.len() - 3;
    let mut locations = Vec::new();
    let mut xv = Vec::new();
    let mut y = Vec::new();
    for (idx, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let line = idx + 1;
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line,
                message: format!("{} fields, expected {}", fields.len(), cols.len()),
            });
        }
        locations.push(Location::new(
            parse_field(fields[0], line)?,
            parse_field(fields[1], line)?,
        ));
        xv.push(1.0);
        for f in &fields[2..2 + p] {
            xv.push(parse_field(f, line)?);
        }
        y.push(parse_field(fields[fields.len() - 1], line)?);
    }
    let n = y.len();
    SpatialDataset::new(locations, Tensor::matrix(n, p + 1, xv)?, y)
}

// ---- settings ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    /// Keep the spatial random effects as parameters.
    Conditional,
    /// Integrate the random effects out (Gaussian only, dense only).
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorModeOpt {
    Dense,
    Nngp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerOpt {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceFamilyOpt {
    InverseGamma,
    LogNormal,
}

/// Optional values read from a TOML config file; command-line flags win.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub family: Option<Family>,
    pub formulation: Option<Formulation>,
    pub prior_mode: Option<PriorModeOpt>,
    pub neighbors: Option<usize>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub elbo_samples: Option<usize>,
    pub mixture_draws: Option<usize>,
    pub optimizer: Option<OptimizerOpt>,
    pub variance_family: Option<VarianceFamilyOpt>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub desk: Option<bool>,
    pub draws: Option<usize>,
    pub n: Option<usize>,
    pub replicates: Option<usize>,
    pub validation: Option<usize>,
}

/// Shared flags; unset values fall back to the config file, then defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonOpts {
    /// TOML config file providing defaults for any unset flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub family: Option<Family>,
    #[arg(long, value_enum)]
    pub formulation: Option<Formulation>,
    #[arg(long, value_enum)]
    pub prior_mode: Option<PriorModeOpt>,
    /// Nearest-neighbor count M for the NNGP prior and prediction.
    #[arg(long)]
    pub neighbors: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Monte Carlo samples J per iteration.
    #[arg(long)]
    pub elbo_samples: Option<usize>,
    /// Auxiliary mixture draws K per iteration.
    #[arg(long)]
    pub mixture_draws: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerOpt>,
    #[arg(long, value_enum)]
    pub variance_family: Option<VarianceFamilyOpt>,
    /// Central interval level for the interval score.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the small generator architecture instead of the full one.
    #[arg(long)]
    pub desk: bool,
    /// Posterior draw count for prediction.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Dataset size for simulation.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Validation set size.
    #[arg(long)]
    pub validation: Option<usize>,
}

/// Fully resolved settings, echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub family: Family,
    pub formulation: Formulation,
    pub prior_mode: PriorModeOpt,
    pub neighbors: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub elbo_samples: usize,
    pub mixture_draws: usize,
    pub optimizer: OptimizerOpt,
    pub variance_family: VarianceFamilyOpt,
    pub alpha: f64,
    pub seed: u64,
    pub desk: bool,
    pub draws: usize,
    pub n: usize,
    pub replicates: usize,
    pub validation: usize,
}

impl CommonOpts {
    pub fn resolve(&self) -> Result<Settings> {
        let file: FileConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            }
            None => FileConfig::default(),
        };
        let s = Settings {
            family: self.family.or(file.family).unwrap_or(Family::Gaussian),
            formulation: self
                .formulation
                .or(file.formulation)
                .unwrap_or(Formulation::Conditional),
            prior_mode: self.prior_mode.or(file.prior_mode).unwrap_or(PriorModeOpt::Dense),
            neighbors: self.neighbors.or(file.neighbors).unwrap_or(10),
            iterations: self.iterations.or(file.iterations).unwrap_or(1000),
            learning_rate: self.learning_rate.or(file.learning_rate).unwrap_or(1e-3),
            elbo_samples: self.elbo_samples.or(file.elbo_samples).unwrap_or(50),
            mixture_draws: self.mixture_draws.or(file.mixture_draws).unwrap_or(1000),
            optimizer: self.optimizer.or(file.optimizer).unwrap_or(OptimizerOpt::Adam),
            variance_family: self
                .variance_family
                .or(file.variance_family)
                .unwrap_or(VarianceFamilyOpt::InverseGamma),
            alpha: self.alpha.or(file.alpha).unwrap_or(0.05),
            seed: self.seed.or(file.seed).unwrap_or(42),
            desk: self.desk || file.desk.unwrap_or(false),
            draws: self.draws.or(file.draws).unwrap_or(1000),
            n: self.n.or(file.n).unwrap_or(70),
            replicates: self.replicates.or(file.replicates).unwrap_or(1),
            validation: self.validation.or(file.validation).unwrap_or(VALIDATION_SIZE),
        };
        s.validate()?;
        Ok(s)
    }
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        if self.formulation == Formulation::Marginal && self.family != Family::Gaussian {
            return Err(Error::Config("marginal formulation requires the gaussian family".into()));
        }
        if self.formulation == Formulation::Marginal && self.prior_mode == PriorModeOpt::Nngp {
            return Err(Error::Config(
                "nngp prior requires the conditional formulation".into(),
            ));
        }
        if self.neighbors == 0 {
            return Err(Error::Config("neighbors must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.elbo_samples == 0 {
            return Err(Error::Config("elbo-samples must be at least 1".into()));
        }
        if self.draws == 0 {
            return Err(Error::Config("draws must be at least 1".into()));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            j: self.elbo_samples,
            k: self.mixture_draws,
            optimizer: match self.optimizer {
                OptimizerOpt::Adam => OptimizerKind::Adam,
                OptimizerOpt::Sgd => OptimizerKind::Sgd,
            },
        }
    }

    fn variance_family(&self) -> VarianceFamily {
        match self.variance_family {
            VarianceFamilyOpt::InverseGamma => VarianceFamily::InverseGamma,
            VarianceFamilyOpt::LogNormal => VarianceFamily::LogNormal,
        }
    }

    fn model_spec(&self, train: &SpatialDataset) -> Result<ModelSpec> {
        let p = train.design_dim() - 1;
        let phi_prior = elicit_phi_prior(max_distance(&train.locations))?;
        Ok(match (self.family, self.formulation) {
            (Family::Gaussian, Formulation::Conditional) => {
                ModelSpec::gaussian_conditional(p, sample_variance(&train.y), phi_prior)
            }
            (Family::Gaussian, Formulation::Marginal) => {
                ModelSpec::gaussian_marginal(p, sample_variance(&train.y), phi_prior)
            }
            (Family::Poisson, _) => ModelSpec::poisson(p, phi_prior),
        })
    }

    fn prior_mode(&self, train: &SpatialDataset) -> Result<PriorMode> {
        Ok(match self.prior_mode {
            PriorModeOpt::Dense => PriorMode::DenseGp,
            PriorModeOpt::Nngp => PriorMode::Nngp(std::sync::Arc::new(build_graph(
                &train.locations,
                self.neighbors,
            )?)),
        })
    }

    fn predict_mode(&self) -> PredictMode {
        match self.prior_mode {
            PriorModeOpt::Dense => PredictMode::Dense,
            PriorModeOpt::Nngp => PredictMode::Nngp(self.neighbors),
        }
    }
}

// ---- manifest ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub settings: Settings,
    pub input_hashes: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    settings: &Settings,
    inputs: &[&Path],
) -> Result<()> {
    let mut input_hashes = BTreeMap::new();
    for p in inputs {
        input_hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    let m = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        settings: settings.clone(),
        input_hashes,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Other(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

// ---- command-line definition ---------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "sivi-spatial", version, about = "Variational spatial interpolation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate replicate datasets (train/validation CSVs plus truth files).
    Simulate {
        #[command(flatten)]
        opts: CommonOpts,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the variational family on a dataset.
    Fit {
        #[command(flatten)]
        opts: CommonOpts,
        /// Training CSV.
        #[arg(long)]
        train: PathBuf,
        /// Output directory (checkpoint.json, trace.csv, manifest.json).
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw posterior-predictive samples at new locations.
    Predict {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training CSV the checkpoint was fitted on.
        #[arg(long)]
        train: PathBuf,
        /// CSV of locations/covariates to predict at.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (predictions.csv, manifest.json).
        #[arg(long)]
        out: PathBuf,
        /// Also write the first N response draws per location.
        #[arg(long)]
        retain_draws: Option<usize>,
    },
    /// Predict at held-out data and score against its responses.
    Score {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Held-out CSV with true responses.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (scores.csv, summary.txt, manifest.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end replicate study: simulate, fit, predict, score per seed.
    Replicate {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
}

// ---- commands ------------------------------------------------------------------

fn generate_replicate(
    settings: &Settings,
    seed: u64,
) -> Result<(SpatialDataset, crate::models::ThetaSample)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    match settings.family {
        Family::Gaussian => gen_gaussian_replicate(settings.n, &mut rng),
        Family::Poisson => gen_poisson_replicate(settings.n, &mut rng),
    }
}

pub fn cmd_simulate(opts: &CommonOpts, out: &Path) -> Result<()> {
    let settings = opts.resolve()?;
    fs::create_dir_all(out)?;
    let mut seeds = Vec::new();
    for r in 0..settings.replicates {
        let seed = settings.seed + r as u64;
        seeds.push(seed);
        let (data, truth) = generate_replicate(&settings, seed)?;
        let mut srng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let s = split(&data, settings.validation, &mut srng)?;
        write_dataset_csv(&out.join(format!("train_{}.csv", r)), &s.train)?;
        write_dataset_csv(&out.join(format!("validation_{}.csv", r)), &s.validation)?;
        let truth_text =
            serde_json::to_string_pretty(&truth).map_err(|e| Error::Other(e.to_string()))?;
        fs::write(out.join(format!("truth_{}.json", r)), truth_text)?;
    }
    let seed_lines: String =
        seeds.iter().enumerate().map(|(r, s)| format!("{},{}\n", r, s)).collect();
    fs::write(out.join("seeds.csv"), format!("replicate,seed\n{}", seed_lines))?;
    write_manifest(out, "simulate", &settings, &[])?;
    Ok(())
}

fn fit_state(
    settings: &Settings,
    train: &SpatialDataset,
    resume: Option<Checkpoint>,
) -> Result<(Checkpoint, Vec<(f64, u128)>)> {
    let spec = settings.model_spec(train)?;
    let mode = settings.prior_mode(train)?;
    let (mut state, mut opt, mut rng, mut trace) = match resume {
        Some(ck) => {
            if ck.spec.family != spec.family {
                return Err(Error::FamilyMismatch {
                    checkpoint: format!("{:?}", ck.spec.family),
                    data: format!("{:?}", spec.family),
                });
            }
            (ck.state, ck.optimizer, ck.rng, ck.trace)
        }
        None => {
            let layout = PsiLayout::for_model(&spec, train.n(), settings.variance_family());
            let config = if settings.desk {
                GeneratorConfig::desk(layout.output_dim())
            } else {
                GeneratorConfig::full(layout.output_dim())
            };
            let mut rng = ChaCha20Rng::seed_from_u64(settings.seed);
            let state = VariationalState::init(config, layout, &spec, &mut rng)?;
            let opt = AdamState::new(&state.params);
            (state, opt, rng, Vec::new())
        }
    };
    let cfg = settings.train_config();
    let start = Instant::now();
    let mut timed = Vec::with_capacity(cfg.iterations);
    let new_trace = train_observed(
        &mut state,
        train,
        &spec,
        &mode,
        &cfg,
        &mut opt,
        &mut rng,
        &mut |_, elbo| timed.push((elbo, start.elapsed().as_millis())),
    )?;
    trace.extend(new_trace);
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        spec,
        state,
        optimizer: opt,
        rng,
        trace,
    };
    Ok((ck, timed))
}

pub fn cmd_fit(opts: &CommonOpts, train_path: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let settings = opts.resolve()?;
    let train = read_dataset_csv(train_path)?;
    let resumed = match resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let (ck, timed) = fit_state(&settings, &train, resumed)?;
    fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint.json"), &ck)?;
    let mut trace_csv = String::from("iteration,elbo,elapsed_ms\n");
    for (i, (elbo, ms)) in timed.iter().enumerate() {
        trace_csv.push_str(&format!("{},{:e},{}\n", i, elbo, ms));
    }
    fs::write(out.join("trace.csv"), trace_csv)?;
    let mut inputs: Vec<&Path> = vec![train_path];
    if let Some(p) = resume {
        inputs.push(p);
    }
    write_manifest(out, "fit", &settings, &inputs)?;
    Ok(())
}

fn predictive_draws(
    settings: &Settings,
    ck: &Checkpoint,
    train: &SpatialDataset,
    data: &SpatialDataset,
) -> Result<PredictiveDraws> {
    if let Some(expect) = match settings.family {
        Family::Gaussian => Some(ModelFamily::Poisson),
        Family::Poisson => None,
    } {
        if ck.spec.family == expect {
            return Err(Error::FamilyMismatch {
                checkpoint: format!("{:?}", ck.spec.family),
                data: "gaussian".into(),
            });
        }
    } else if ck.spec.family != ModelFamily::Poisson {
        return Err(Error::FamilyMismatch {
            checkpoint: format!("{:?}", ck.spec.family),
            data: "poisson".into(),
        });
    }
    if train.design_dim() != ck.spec.covariate_count + 1 {
        return Err(Error::DimensionMismatch(format!(
            "training data has {} design columns, checkpoint expects {}",
            train.design_dim(),
            ck.spec.covariate_count + 1
        )));
    }
    if let Some(n_eff) = ck.state.layout.n_effects {
        if n_eff != train.n() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint fitted on {} locations, training data has {}",
                n_eff,
                train.n()
            )));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9);
    let samples = draw_posterior(&ck.state, settings.draws, &mut rng)?;
    let mode = settings.predict_mode();
    match ck.spec.family {
        ModelFamily::Poisson => predict_poisson(
            &samples,
            train,
            &ck.spec,
            &data.locations,
            &data.x,
            mode,
            &mut rng,
        ),
        _ => predict_gaussian(
            &samples,
            train,
            &ck.spec,
            &data.locations,
            &data.x,
            if ck.spec.family == ModelFamily::GaussianMarginal {
                PredictMode::Dense
            } else {
                mode
            },
            &mut rng,
        ),
    }
}

fn write_predictions_csv(
    path: &Path,
    data: &SpatialDataset,
    draws: &PredictiveDraws,
    retain: usize,
) -> Result<()> {
    let mut out = String::from("s1,s2,mean,sd,q025,q975");
    for d in 1..=retain {
        out.push_str(&format!(",d{}", d));
    }
    out.push('\n');
    for i in 0..draws.locations() {
        let resp = &draws.response[i];
        let m = resp.len() as f64;
        let mean = resp.iter().sum::<f64>() / m;
        let var = resp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
        let mut sorted = resp.clone();
        sorted.sort_by(f64::total_cmp);
        out.push_str(&format!(
            "{:e},{:e},{:e},{:e},{:e},{:e}",
            data.locations[i].coords[0],
            data.locations[i].coords[1],
            mean,
            var.sqrt(),
            empirical_quantile(&sorted, 0.025),
            empirical_quantile(&sorted, 0.975),
        ));
        for d in 0..retain.min(resp.len()) {
            out.push_str(&format!(",{:e}", resp[d]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_predict(
    opts: &CommonOpts,
    checkpoint: &Path,
    train_path: &Path,
    data_path: &Path,
    out: &Path,
    retain_draws: Option<usize>,
) -> Result<()> {
    let settings = opts.resolve()?;
    let ck = load_checkpoint(checkpoint)?;
    let train = read_dataset_csv(train_path)?;
    let data = read_dataset_csv(data_path)?;
    let draws = predictive_draws(&settings, &ck, &train, &data)?;
    fs::create_dir_all(out)?;
    write_predictions_csv(
        &out.join("predictions.csv"),
        &data,
        &draws,
        retain_draws.unwrap_or(0),
    )?;
    write_manifest(out, "predict", &settings, &[checkpoint, train_path, data_path])?;
    Ok(())
}

pub fn cmd_score(
    opts: &CommonOpts,
    checkpoint: &Path,
    train_path: &Path,
    data_path: &Path,
    out: &Path,
) -> Result<()> {
    let settings = opts.resolve()?;
    let ck = load_checkpoint(checkpoint)?;
    let train = read_dataset_csv(train_path)?;
    let data = read_dataset_csv(data_path)?;
    let draws = predictive_draws(&settings, &ck, &train, &data)?;
    let report = score(&draws, &data.y, settings.alpha)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("scores.csv"), report.to_csv())?;
    fs::write(out.join("summary.txt"), report.summary())?;
    write_manifest(out, "score", &settings, &[checkpoint, train_path, data_path])?;
    Ok(())
}

pub fn cmd_replicate(opts: &CommonOpts, out: &Path) -> Result<()> {
    let settings = opts.resolve()?;
    fs::create_dir_all(out)?;
    let reports: Vec<ScoreReport> = (0..settings.replicates)
        .into_par_iter()
        .map(|r| -> Result<ScoreReport> {
            let seed = settings.seed + r as u64;
            let mut rep = settings.clone();
            rep.seed = seed;
            let (data, _truth) = generate_replicate(&rep, seed)?;
            let mut srng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_5eed);
            let s = split(&data, rep.validation, &mut srng)?;
            let (ck, _) = fit_state(&rep, &s.train, None)?;
            let draws = predictive_draws(&rep, &ck, &s.train, &s.validation)?;
            let report = score(&draws, &s.validation.y, rep.alpha)?;
            fs::write(out.join(format!("scores_{}.csv", r)), report.to_csv())?;
            fs::write(out.join(format!("summary_{}.txt", r)), report.summary())?;
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&ScoreReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let pooled = format!(
        "replicates: {}\ncrps: {:.6}\ninterval_score: {:.6}\nnlpd: {:.6}\nrmse: {:.6}\n",
        reports.len(),
        mean(&|r| r.mean_crps),
        mean(&|r| r.mean_interval_score),
        mean(&|r| r.mean_nlpd),
        mean(&|r| r.rmse),
    );
    fs::write(out.join("pooled_summary.txt"), pooled)?;
    write_manifest(out, "replicate", &settings, &[])?;
    Ok(())
}

// ---- entry point ----------------------------------------------------------------

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { opts, out } => cmd_simulate(opts, out),
        Command::Fit { opts, train, out, resume } => {
            cmd_fit(opts, train, out, resume.as_deref())
        }
        Command::Predict { opts, checkpoint, train, data, out, retain_draws } => {
            cmd_predict(opts, checkpoint, train, data, out, *retain_draws)
        }
        Command::Score { opts, checkpoint, train, data, out } => {
            cmd_score(opts, checkpoint, train, data, out)
        }
        Command::Replicate { opts, out } => cmd_replicate(opts, out),
    }
}

/// Exit code taxonomy: 2 for configuration and input problems, 3 for
/// numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::ShapeMismatch(_)
        | Error::DimensionMismatch(_)
        | Error::FamilyMismatch { .. }
        | Error::DegenerateCovariate => 2,
        _ => 3,
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn run() -> i32 {
    init_threads();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}
