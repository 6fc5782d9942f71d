//! Monte Carlo epistemic uncertainty. The primary estimators perturb only
//! the lifting output and keep the deterministic remainder of the network
//! fixed; baselines perturb everywhere (naive MC-Dropout), perturb the
//! input coefficient, or average an ensemble of independently trained
//! models.

use crate::error::{Error, Result};
use crate::operator_net::{forward, forward_cached, Mask, MaskSet, OperatorConfig, OperatorParams};
use crate::tensor_field::{DatasetContainer, Field, Grid2D, RngStream, TensorBlob};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UqMethod {
    /// Method A: channel-wise inverted dropout on the lifted features.
    LiftDropout,
    /// Method B: channel-wise multiplicative Gaussian noise on the lifted
    /// features, matched to dropout's first two moments.
    LiftGaussian,
    /// Baseline: elementwise dropout in front of every linear map.
    NaiveDropout,
    /// Baseline: additive Gaussian noise on the input coefficient channel.
    InputPerturbation,
    /// Baseline: population statistics across independently trained models.
    Ensemble,
}

impl std::str::FromStr for UqMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lift-dropout" => Ok(UqMethod::LiftDropout),
            "lift-gaussian" => Ok(UqMethod::LiftGaussian),
            "naive-dropout" => Ok(UqMethod::NaiveDropout),
            "input-perturbation" => Ok(UqMethod::InputPerturbation),
            "ensemble" => Ok(UqMethod::Ensemble),
            other => Err(Error::Config(format!("unknown uq method '{}'", other))),
        }
    }
}

impl std::fmt::Display for UqMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            UqMethod::LiftDropout => "lift-dropout",
            UqMethod::LiftGaussian => "lift-gaussian",
            UqMethod::NaiveDropout => "naive-dropout",
            UqMethod::InputPerturbation => "input-perturbation",
            UqMethod::Ensemble => "ensemble",
        };
        f.write_str(s)
    }
}

/// Where the channel-wise multiplier enters; `Lift` is the paper's choice,
/// the others exist for the perturbation-site ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbSite {
    Input,
    Lift,
    Propagate,
    Recover,
}

impl std::str::FromStr for PerturbSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(PerturbSite::Input),
            "lift" => Ok(PerturbSite::Lift),
            "propagate" => Ok(PerturbSite::Propagate),
            "recover" => Ok(PerturbSite::Recover),
            other => Err(Error::Config(format!("unknown perturbation site '{}'", other))),
        }
    }
}

impl std::fmt::Display for PerturbSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PerturbSite::Input => "input",
            PerturbSite::Lift => "lift",
            PerturbSite::Propagate => "propagate",
            PerturbSite::Recover => "recover",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UqConfig {
    pub method: UqMethod,
    pub site: PerturbSite,
    /// Noise rate: dropout probability, or the variance parameter p for the
    /// matched Gaussian, or the additive noise standard deviation for input
    /// perturbation.
    pub p: f64,
    pub t_samples: usize,
    pub seed: u64,
    /// RNG stream selector so different cases draw statistically
    /// independent Monte Carlo noise: draw t of a prediction uses
    /// `RngStream::new(seed, case_stream).fork(t)`. Callers predicting many
    /// cases assign each one a distinct value; not part of the config file.
    #[serde(skip)]
    pub case_stream: u64,
}

impl UqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_samples == 0 {
            return Err(Error::Config("t_samples must be positive".into()));
        }
        match self.method {
            UqMethod::InputPerturbation => {
                if self.p < 0.0 || !self.p.is_finite() {
                    return Err(Error::Config("noise scale p must be nonnegative".into()));
                }
            }
            _ => {
                if !(0.0..1.0).contains(&self.p) {
                    return Err(Error::Config("noise rate p must lie in [0,1)".into()));
                }
            }
        }
        Ok(())
    }
}

/// Pointwise mean and population standard deviation of a Monte Carlo
/// prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub mean: Field,
    pub sigma: Field,
    pub t_samples: usize,
    /// Set when the estimator is in a statistically degenerate regime (for
    /// the baselines the spec asks us to flag rather than forbid it).
    pub degenerate: Option<String>,
}

/// Channel multipliers for inverted dropout: 0 with probability p, else
/// 1/(1-p), so the mean multiplier is exactly 1.
pub fn dropout_multipliers(rng: &mut RngStream, channels: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..channels)
        .map(|_| if rng.next_bernoulli(1.0 - p) { keep } else { 0.0 })
        .collect()
}

/// Channel multipliers 1 + eps with eps ~ N(0, p/(1-p)): the same first and
/// second moments as inverted dropout at rate p.
pub fn gaussian_multipliers(rng: &mut RngStream, channels: usize, p: f64) -> Vec<f64> {
    let std = (p / (1.0 - p)).sqrt();
    (0..channels).map(|_| 1.0 + std * rng.next_gaussian()).collect()
}

fn lift_site_multipliers(rng: &mut RngStream, channels: usize, method: UqMethod, p: f64) -> Vec<f64> {
    match method {
        UqMethod::LiftGaussian => gaussian_multipliers(rng, channels, p),
        _ => dropout_multipliers(rng, channels, p),
    }
}

/// Builds the mask set for one Monte Carlo draw of the lifting-restricted
/// estimators (and their site ablation). The propagate site draws an
/// independent channel multiplier in front of each propagation layer.
pub fn site_masks(rng: &mut RngStream, cfg: &OperatorConfig, uq: &UqConfig) -> MaskSet {
    let mut masks = MaskSet::none();
    match uq.site {
        PerturbSite::Input => {
            masks.input = Some(Mask::PerChannel(lift_site_multipliers(
                rng, cfg.d_a, uq.method, uq.p,
            )));
        }
        PerturbSite::Lift => {
            masks.lift_out = Some(Mask::PerChannel(lift_site_multipliers(
                rng, cfg.d_v, uq.method, uq.p,
            )));
        }
        PerturbSite::Propagate => {
            masks.layer_in = (0..cfg.layers)
                .map(|_| {
                    Some(Mask::PerChannel(lift_site_multipliers(
                        rng, cfg.d_v, uq.method, uq.p,
                    )))
                })
                .collect();
        }
        PerturbSite::Recover => {
            masks.recover_in = Some(Mask::PerChannel(lift_site_multipliers(
                rng, cfg.d_v, uq.method, uq.p,
            )));
        }
    }
    masks
}

/// Fixed-tree pairwise sum of equally shaped vectors, in input order.
fn pairwise_sum(mut items: Vec<Vec<f64>>) -> Vec<f64> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        items = next;
    }
    items.pop().unwrap_or_default()
}

/// Population moments of an ordered set of predictions; the summation order
/// does not depend on the worker count.
pub fn moments_from_outputs(outputs: Vec<Field>, degenerate: Option<String>) -> Result<McPrediction> {
    if outputs.is_empty() {
        return Err(Error::Config("no Monte Carlo outputs".into()));
    }
    let grid = outputs[0].grid;
    let channels = outputs[0].channels;
    let t = outputs.len();
    let squares: Vec<Vec<f64>> = outputs
        .iter()
        .map(|f| f.values.iter().map(|v| v * v).collect())
        .collect();
    let sums = pairwise_sum(outputs.into_iter().map(|f| f.values).collect());
    let sq_sums = pairwise_sum(squares);
    let tf = t as f64;
    let mean_vals: Vec<f64> = sums.iter().map(|s| s / tf).collect();
    let sigma_vals: Vec<f64> = sq_sums
        .iter()
        .zip(&mean_vals)
        .map(|(sq, m)| (sq / tf - m * m).max(0.0).sqrt())
        .collect();
    let mean = Field::from_values(grid, channels, mean_vals)?;
    let sigma = Field::from_values(grid, channels, sigma_vals)?;
    mean.validate_finite("mc mean")?;
    sigma.validate_finite("mc sigma")?;
    Ok(McPrediction {
        mean,
        sigma,
        t_samples: t,
        degenerate,
    })
}

/// Monte Carlo prediction for the lifting-restricted estimators (Methods A
/// and B) and their site ablation. Draw t uses the stream `fork(base, t)`,
/// so the estimate is reproducible and independent of the worker count.
pub fn mc_predict(
    input: &Field,
    params: &OperatorParams,
    cfg: &OperatorConfig,
    uq: &UqConfig,
) -> Result<McPrediction> {
    uq.validate()?;
    let base = RngStream::new(uq.seed, uq.case_stream);
    let outputs: Vec<Result<Field>> = (0..uq.t_samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = base.fork(t as u64);
            let masks = site_masks(&mut rng, cfg, uq);
            forward_cached(input, params, cfg, &masks).map(|(out, _)| out)
        })
        .collect();
    let outputs: Vec<Field> = outputs.into_iter().collect::<Result<_>>()?;
    moments_from_outputs(outputs, None)
}

/// Method A expressed through column-scaled lifting weights instead of a
/// mask on the lifted features: each draw runs the unmasked network with
/// `W_P`, `b_P` columns multiplied by that draw's dropout pattern. Consumes
/// the same random stream as `mc_predict`.
pub fn mc_predict_scaled_lift(
    input: &Field,
    params: &OperatorParams,
    cfg: &OperatorConfig,
    uq: &UqConfig,
) -> Result<McPrediction> {
    uq.validate()?;
    if uq.method != UqMethod::LiftDropout || uq.site != PerturbSite::Lift {
        return Err(Error::Config(
            "scaled-lift execution only applies to lift-dropout at the lift site".into(),
        ));
    }
    let base = RngStream::new(uq.seed, uq.case_stream);
    let outputs: Vec<Result<Field>> = (0..uq.t_samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = base.fork(t as u64);
            let xi = dropout_multipliers(&mut rng, cfg.d_v, uq.p);
            let scaled = params.with_scaled_lift_columns(&xi)?;
            forward(input, &scaled, cfg)
        })
        .collect();
    let outputs: Vec<Field> = outputs.into_iter().collect::<Result<_>>()?;
    moments_from_outputs(outputs, None)
}

/// Baseline: elementwise dropout in front of the lifting, every propagation
/// layer, and the recovery, as used during the baseline model's training.
pub fn naive_mcdropout_predict(
    input: &Field,
    params: &OperatorParams,
    cfg: &OperatorConfig,
    uq: &UqConfig,
) -> Result<McPrediction> {
    uq.validate()?;
    let degenerate = if uq.p > 0.9 {
        Some(format!("dropout rate {} above 0.9", uq.p))
    } else if uq.t_samples <= 5 {
        Some(format!("only {} Monte Carlo samples", uq.t_samples))
    } else {
        None
    };
    let base = RngStream::new(uq.seed, uq.case_stream);
    let n = input.grid.n_points();
    let outputs: Vec<Result<Field>> = (0..uq.t_samples)
        .into_par_iter()
        .map(|t| {
            let rng = base.fork(t as u64);
            let masks = crate::train::dropout_masks(&rng, n, cfg, uq.p);
            forward_cached(input, params, cfg, &masks).map(|(out, _)| out)
        })
        .collect();
    let outputs: Vec<Field> = outputs.into_iter().collect::<Result<_>>()?;
    moments_from_outputs(outputs, degenerate)
}

/// Baseline: additive Gaussian noise with standard deviation `p` on the
/// coefficient channel (channel 0) of the input; the network itself stays
/// deterministic.
pub fn input_perturbation_predict(
    input: &Field,
    params: &OperatorParams,
    cfg: &OperatorConfig,
    uq: &UqConfig,
) -> Result<McPrediction> {
    uq.validate()?;
    let base = RngStream::new(uq.seed, uq.case_stream);
    let outputs: Vec<Result<Field>> = (0..uq.t_samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = base.fork(t as u64);
            let mut noisy = input.clone();
            for p_idx in 0..noisy.grid.n_points() {
                noisy.values[p_idx * noisy.channels] += uq.p * rng.next_gaussian();
            }
            forward(&noisy, params, cfg)
        })
        .collect();
    let outputs: Vec<Field> = outputs.into_iter().collect::<Result<_>>()?;
    moments_from_outputs(outputs, None)
}

/// Baseline: population mean and standard deviation across independently
/// trained ensemble members.
pub fn ensemble_predict(
    input: &Field,
    members: &[OperatorParams],
    cfg: &OperatorConfig,
) -> Result<McPrediction> {
    if members.is_empty() {
        return Err(Error::Config("ensemble has no members".into()));
    }
    let degenerate = if members.len() < 3 {
        Some(format!("ensemble of only {} members", members.len()))
    } else {
        None
    };
    let outputs: Vec<Result<Field>> = members
        .par_iter()
        .map(|m| forward(input, m, cfg))
        .collect();
    let outputs: Vec<Field> = outputs.into_iter().collect::<Result<_>>()?;
    moments_from_outputs(outputs, degenerate)
}

/// Dispatches on the configured method. Ensemble members must be supplied
/// for `UqMethod::Ensemble`.
pub fn predict(
    input: &Field,
    params: &OperatorParams,
    cfg: &OperatorConfig,
    uq: &UqConfig,
    ensemble: &[OperatorParams],
) -> Result<McPrediction> {
    match uq.method {
        UqMethod::LiftDropout | UqMethod::LiftGaussian => mc_predict(input, params, cfg, uq),
        UqMethod::NaiveDropout => naive_mcdropout_predict(input, params, cfg, uq),
        UqMethod::InputPerturbation => input_perturbation_predict(input, params, cfg, uq),
        UqMethod::Ensemble => ensemble_predict(input, ensemble, cfg),
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Serializes a set of per-sample predictions as `mean` and `sigma` tensors
/// of shape `[samples][ny][nx][channels]` with the estimator settings in the
/// manifest.
pub fn predictions_to_container(
    preds: &[McPrediction],
    uq: &UqConfig,
) -> Result<DatasetContainer> {
    if preds.is_empty() {
        return Err(Error::Config("no predictions to store".into()));
    }
    let grid = preds[0].mean.grid;
    let channels = preds[0].mean.channels;
    let mut c = DatasetContainer::new();
    c.set_meta("kind", "prediction");
    c.set_meta("nx", grid.nx);
    c.set_meta("ny", grid.ny);
    c.set_meta("samples", preds.len());
    c.set_meta("method", uq.method);
    c.set_meta("site", uq.site);
    c.set_meta("p", uq.p);
    c.set_meta("t_samples", uq.t_samples);
    c.set_meta("seed", uq.seed);
    let shape = vec![preds.len(), grid.ny, grid.nx, channels];
    let mut mean = Vec::with_capacity(preds.len() * grid.n_points() * channels);
    let mut sigma = Vec::with_capacity(mean.capacity());
    for p in preds {
        if p.mean.grid != grid || p.mean.channels != channels {
            return Err(Error::Shape("inconsistent prediction shapes".into()));
        }
        mean.extend_from_slice(&p.mean.values);
        sigma.extend_from_slice(&p.sigma.values);
    }
    c.add_tensor("mean", TensorBlob::new(shape.clone(), mean)?)?;
    c.add_tensor("sigma", TensorBlob::new(shape, sigma)?)?;
    Ok(c)
}

/// Reads back one (mean, sigma) pair from a prediction container.
pub fn prediction_from_container(c: &DatasetContainer, index: usize) -> Result<(Field, Field)> {
    let nx: usize = c.meta_parsed("nx")?;
    let ny: usize = c.meta_parsed("ny")?;
    let samples: usize = c.meta_parsed("samples")?;
    if index >= samples {
        return Err(Error::Config(format!(
            "sample index {} out of range ({} stored)",
            index, samples
        )));
    }
    let grid = Grid2D::new(nx, ny)?;
    let mean_blob = c.tensor("mean")?;
    let sigma_blob = c.tensor("sigma")?;
    let channels = *mean_blob.shape.last().ok_or_else(|| {
        Error::Shape("prediction tensor has empty shape".into())
    })?;
    let per = grid.n_points() * channels;
    let take = |blob: &TensorBlob| -> Result<Field> {
        if blob.data.len() != samples * per {
            return Err(Error::Shape("prediction tensor length mismatch".into()));
        }
        Field::from_values(grid, channels, blob.data[index * per..(index + 1) * per].to_vec())
    };
    Ok((take(mean_blob)?, take(sigma_blob)?))
}
