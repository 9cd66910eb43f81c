//! Priors over scheme probabilities, Gumbel-Softmax sampling and the MAP
//! objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, standard_gumbel, Matrix, RngState};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before any
/// log-density evaluation.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    alpha: Vec<f64>,
}

impl DirichletPrior {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Domain("Dirichlet prior needs at least one concentration".into()));
        }
        if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Domain(format!("concentrations must be positive, got {alpha:?}")));
        }
        Ok(Self { alpha })
    }

    /// Symmetric prior with every concentration equal to `alpha`.
    pub fn symmetric(len: usize, alpha: f64) -> Result<Self> {
        Self::new(vec![alpha; len])
    }

    pub fn beta(a1: f64, a2: f64) -> Result<Self> {
        Self::new(vec![a1, a2])
    }

    /// Beta(1/2, 1/2).
    pub fn jeffreys() -> Self {
        Self {
            alpha: vec![0.5, 0.5],
        }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    fn log_normalizer(&self) -> f64 {
        let total: f64 = self.alpha.iter().sum();
        libm::lgamma(total) - self.alpha.iter().map(|&a| libm::lgamma(a)).sum::<f64>()
    }

    fn check(&self, pi: &[f64]) -> Result<()> {
        if pi.len() != self.alpha.len() {
            return Err(Error::Domain(format!(
                "probability vector has {} entries, prior has {}",
                pi.len(),
                self.alpha.len()
            )));
        }
        if pi.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("probability vector must be finite".into()));
        }
        Ok(())
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `log Γ(Σα) − Σ log Γ(α_k) + Σ (α_k − 1) log p_k`, with clamped `p_k`.
pub fn dirichlet_log_density(pi: &[f64], prior: &DirichletPrior) -> Result<f64> {
    prior.check(pi)?;
    let kernel: f64 = pi
        .iter()
        .zip(&prior.alpha)
        .map(|(&p, &a)| (a - 1.0) * clamp_prob(p).ln())
        .sum();
    Ok(prior.log_normalizer() + kernel)
}

/// Gradient of [`dirichlet_log_density`] w.r.t. `pi`. Entries outside the
/// clamp window have zero gradient.
pub fn dirichlet_log_density_grad(pi: &[f64], prior: &DirichletPrior) -> Result<Vec<f64>> {
    prior.check(pi)?;
    Ok(pi
        .iter()
        .zip(&prior.alpha)
        .map(|(&p, &a)| {
            if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                (a - 1.0) / p
            } else {
                0.0
            }
        })
        .collect())
}

/// Log-density of Beta(a1, a2) at `p`, i.e. the two-component Dirichlet at
/// `(p, 1 - p)`.
pub fn beta_log_density(p: f64, a1: f64, a2: f64) -> Result<f64> {
    let prior = DirichletPrior::beta(a1, a2)?;
    let p = clamp_prob(p);
    dirichlet_log_density(&[p, 1.0 - p], &prior)
}

/// Relaxed Categorical over sharing schemes: logits plus a temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeDistribution {
    logits: Vec<f64>,
    temperature: f64,
}

impl SchemeDistribution {
    pub fn new(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
        }
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain("scheme logits must be finite and non-empty".into()));
        }
        Ok(Self { logits, temperature })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Deterministic `softmax(logits)`, used at inference.
    pub fn mean(&self) -> Vec<f64> {
        softmax(&self.logits).expect("logits validated at construction")
    }
}

/// A relaxed sample together with the Gumbel noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub noise: Vec<f64>,
    pub pi: Vec<f64>,
}

/// `softmax((logits + g) / τ)` with fresh standard Gumbel noise `g`.
pub fn gumbel_softmax_sample(dist: &SchemeDistribution, rng: &mut RngState) -> GumbelSample {
    let noise: Vec<f64> = dist.logits.iter().map(|_| standard_gumbel(rng)).collect();
    gumbel_softmax_with_noise(dist, noise).expect("noise length matches logits")
}

/// Same as [`gumbel_softmax_sample`] with caller-supplied noise.
pub fn gumbel_softmax_with_noise(dist: &SchemeDistribution, noise: Vec<f64>) -> Result<GumbelSample> {
    if noise.len() != dist.logits.len() {
        return Err(Error::Contract(format!(
            "{} noise values for {} logits",
            noise.len(),
            dist.logits.len()
        )));
    }
    let scaled: Vec<f64> = dist
        .logits
        .iter()
        .zip(&noise)
        .map(|(l, g)| (l + g) / dist.temperature)
        .collect();
    let pi = softmax(&scaled)?;
    Ok(GumbelSample { noise, pi })
}

/// Vector-Jacobian product of the relaxed sample w.r.t. the logits:
/// `∂/∂φ_i = π_i (u_i − Σ_j π_j u_j) / τ`.
///
/// The sample must have been drawn from `dist` as it is now; a sample whose
/// probabilities no longer match the logits is rejected.
pub fn gumbel_softmax_backward(dist: &SchemeDistribution, sample: &GumbelSample, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != dist.logits.len() {
        return Err(Error::Contract(format!(
            "upstream has {} entries for {} logits",
            upstream.len(),
            dist.logits.len()
        )));
    }
    let replay = gumbel_softmax_with_noise(dist, sample.noise.clone())?;
    let mismatch = replay
        .pi
        .iter()
        .zip(&sample.pi)
        .any(|(a, b)| (a - b).abs() > 1e-12);
    if sample.pi.len() != replay.pi.len() || mismatch {
        return Err(Error::Contract(
            "Gumbel noise does not reproduce the forward sample for these logits".into(),
        ));
    }
    let pi = &sample.pi;
    let weighted: f64 = pi.iter().zip(upstream).map(|(p, u)| p * u).sum();
    Ok(pi
        .iter()
        .zip(upstream)
        .map(|(p, u)| p * (u - weighted) / dist.temperature)
        .collect())
}

/// Terms of the minibatch MAP objective.
#[derive(Clone, Debug, PartialEq)]
pub struct MapLossReport {
    pub total: f64,
    /// Summed cross-entropy over the batch.
    pub nll: f64,
    /// `−log p(pi | alpha)`, before scaling.
    pub neg_log_prior: f64,
    /// `B / N`, so one pass over the data counts the prior once.
    pub prior_scale: f64,
    pub pi_sample: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapLossGrad {
    /// `∂total/∂(class scores)`, shape `B x C`.
    pub logits: Matrix,
    /// `∂total/∂pi` from the prior term only.
    pub pi: Vec<f64>,
}

/// Summed categorical cross-entropy and its gradient w.r.t. the scores.
pub fn cross_entropy(batch_logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != batch_logits.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} score rows",
            labels.len(),
            batch_logits.rows()
        )));
    }
    let classes = batch_logits.cols();
    let mut grad = Matrix::zeros(batch_logits.rows(), classes);
    let mut nll = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        let row = batch_logits.row(i);
        let lse = log_sum_exp(row);
        nll += lse - row[y];
        let g = grad.row_mut(i);
        for (gc, &s) in g.iter_mut().zip(row) {
            *gc = (s - lse).exp();
        }
        g[y] -= 1.0;
    }
    Ok((nll, grad))
}

pub fn map_loss(
    batch_logits: &Matrix,
    labels: &[usize],
    pi_sample: &[f64],
    prior: &DirichletPrior,
    dataset_size: usize,
) -> Result<MapLossReport> {
    map_loss_with_grad(batch_logits, labels, pi_sample, prior, dataset_size).map(|(r, _)| r)
}

/// Minibatch objective `Σ_batch −log p(y|x) − (B/N) log p(pi|alpha)` and its
/// gradients.
pub fn map_loss_with_grad(
    batch_logits: &Matrix,
    labels: &[usize],
    pi_sample: &[f64],
    prior: &DirichletPrior,
    dataset_size: usize,
) -> Result<(MapLossReport, MapLossGrad)> {
    if dataset_size == 0 || labels.len() > dataset_size {
        return Err(Error::Domain(format!(
            "batch of {} from a dataset of {dataset_size}",
            labels.len()
        )));
    }
    let (nll, grad_logits) = cross_entropy(batch_logits, labels)?;
    let neg_log_prior = -dirichlet_log_density(pi_sample, prior)?;
    let prior_scale = labels.len() as f64 / dataset_size as f64;
    let pi_grad = dirichlet_log_density_grad(pi_sample, prior)?
        .into_iter()
        .map(|g| -prior_scale * g)
        .collect();
    Ok((
        MapLossReport {
            total: nll + prior_scale * neg_log_prior,
            nll,
            neg_log_prior,
            prior_scale,
            pi_sample: pi_sample.to_vec(),
        },
        MapLossGrad {
            logits: grad_logits,
            pi: pi_grad,
        },
    ))
}
