use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bayes::{
    gumbel_softmax_backward, gumbel_softmax_sample, gumbel_softmax_with_noise, map_loss_with_grad, cross_entropy,
    DirichletPrior, GumbelSample, SchemeDistribution,
};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::layers::{
    Activation, DenseLayer, FixedInvariantLayer, IdentityMode, LayerCache, ProbInvariantLayer, HIDDEN_ACTIVATION,
};
use crate::symmetry::{group_by_name, invariant_basis};
use crate::tensor::{argmax, softmax, Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    InvariantNet,
    RotNet,
    FlipNet,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::InvariantNet => "invariantnet",
            ModelKind::RotNet => "rotnet",
            ModelKind::FlipNet => "flipnet",
            ModelKind::Mlp => "mlp",
        })
    }
}

/// Prior over the scheme probabilities, as written in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorConfig {
    Dirichlet { alpha: Vec<f64> },
    Beta { alpha: Vec<f64> },
    Jeffreys {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<Vec<f64>>,
    },
}

impl PriorConfig {
    /// Jeffreys for a single group, `Dir(2, …, 2)` otherwise.
    pub fn default_for(groups: usize) -> Self {
        if groups == 1 {
            PriorConfig::Jeffreys { alpha: None }
        } else {
            PriorConfig::Dirichlet {
                alpha: vec![2.0; groups + 1],
            }
        }
    }

    pub fn to_prior(&self, groups: usize) -> Result<DirichletPrior> {
        let prior = match self {
            PriorConfig::Dirichlet { alpha } => DirichletPrior::new(alpha.clone())?,
            PriorConfig::Beta { alpha } => {
                if alpha.len() != 2 {
                    return Err(Error::Config("a beta prior takes exactly two concentrations".into()));
                }
                DirichletPrior::beta(alpha[0], alpha[1])?
            }
            PriorConfig::Jeffreys { alpha } => {
                if alpha.as_ref().is_some_and(|a| a.as_slice() != [0.5, 0.5]) {
                    return Err(Error::Config("the Jeffreys prior is fixed at alpha = [0.5, 0.5]".into()));
                }
                DirichletPrior::jeffreys()
            }
        };
        if prior.len() != groups + 1 {
            return Err(Error::Config(format!(
                "prior has {} concentrations but the model has {} schemes",
                prior.len(),
                groups + 1
            )));
        }
        Ok(prior)
    }
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_width: usize,
    pub class_count: usize,
    /// Candidate groups, by name (InvariantNet only).
    #[serde(default)]
    pub groups: Vec<String>,
    #[serde(default)]
    pub identity_mode: IdentityMode,
    #[serde(default)]
    pub prior: Option<PriorConfig>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, input_dim: usize, hidden_width: usize, class_count: usize) -> Self {
        let groups = match kind {
            ModelKind::InvariantNet => vec!["rot90".into(), "flip".into()],
            _ => Vec::new(),
        };
        Self {
            kind,
            input_dim,
            hidden_width,
            class_count,
            groups,
            identity_mode: IdentityMode::default(),
            prior: None,
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn with_groups(mut self, groups: &[&str]) -> Self {
        self.groups = groups.iter().map(|g| g.to_string()).collect();
        self
    }

    pub fn with_prior(mut self, prior: PriorConfig) -> Self {
        self.prior = Some(prior);
        self
    }

    pub fn with_identity_mode(mut self, mode: IdentityMode) -> Self {
        self.identity_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Side of the square input grid.
    pub fn grid_side(&self) -> Result<usize> {
        let n = (self.input_dim as f64).sqrt().round() as usize;
        if n * n != self.input_dim {
            return Err(Error::Config(format!(
                "input dimension {} is not a square grid",
                self.input_dim
            )));
        }
        Ok(n)
    }

    /// The effective prior (explicit or default) for InvariantNet.
    pub fn resolved_prior(&self) -> Result<Option<DirichletPrior>> {
        if self.kind != ModelKind::InvariantNet {
            return Ok(None);
        }
        let cfg = self.prior.clone().unwrap_or_else(|| PriorConfig::default_for(self.groups.len()));
        cfg.to_prior(self.groups.len()).map(Some)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        if self.input_dim == 0 || self.class_count == 0 {
            return Err(Error::Config("input dimension and class count must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        match self.kind {
            ModelKind::InvariantNet => {
                if self.groups.is_empty() {
                    return Err(Error::Config("invariantnet needs at least one group".into()));
                }
                self.grid_side()?;
                self.resolved_prior()?;
            }
            ModelKind::RotNet | ModelKind::FlipNet => {
                self.grid_side()?;
            }
            ModelKind::Mlp => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InputLayer {
    Dense(DenseLayer),
    Fixed(FixedInvariantLayer),
    Prob(ProbInvariantLayer),
}

/// Network `input layer -> relu -> dense(class_count)`; softmax lives in the
/// loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    spec: ModelSpec,
    input: InputLayer,
    output: DenseLayer,
    prior: Option<DirichletPrior>,
    pub final_pi: Option<Vec<f64>>,
}

/// Source of Gumbel noise for one training step.
pub enum Noise<'a> {
    Sample(&'a mut RngState),
    Fixed(&'a [f64]),
}

/// Loss and gradients for one minibatch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Objective being minimized (MAP total for InvariantNet, summed NLL
    /// otherwise).
    pub loss: f64,
    pub nll: f64,
    pub pi_sample: Option<Vec<f64>>,
    /// One entry per slice of [`TrainedModel::params`], same order.
    pub grads: Vec<Vec<f64>>,
}

/// Initializes a model: He-normal weights, zero biases, zero scheme logits.
pub fn build_model(spec: &ModelSpec, rng: &mut RngState) -> Result<TrainedModel> {
    spec.validate()?;
    let m = spec.hidden_width;
    let d = spec.input_dim;
    let input = match spec.kind {
        ModelKind::Mlp => InputLayer::Dense(DenseLayer::init(d, m, HIDDEN_ACTIVATION, rng)?),
        ModelKind::RotNet | ModelKind::FlipNet => {
            let name = if spec.kind == ModelKind::RotNet { "rot90" } else { "flip" };
            let basis = invariant_basis(&group_by_name(name, spec.grid_side()?)?)?;
            InputLayer::Fixed(FixedInvariantLayer::init(basis, m, HIDDEN_ACTIVATION, rng)?)
        }
        ModelKind::InvariantNet => {
            let n = spec.grid_side()?;
            let bases = spec
                .groups
                .iter()
                .map(|g| invariant_basis(&group_by_name(g, n)?))
                .collect::<Result<Vec<_>>>()?;
            InputLayer::Prob(ProbInvariantLayer::init(bases, d, m, spec.identity_mode, HIDDEN_ACTIVATION, rng)?)
        }
    };
    let output = DenseLayer::init(m, spec.class_count, Activation::None, rng)?;
    Ok(TrainedModel {
        prior: spec.resolved_prior()?,
        spec: spec.clone(),
        input,
        output,
        final_pi: None,
    })
}

impl TrainedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_layer(&self) -> &InputLayer {
        &self.input
    }

    pub fn output_layer(&self) -> &DenseLayer {
        &self.output
    }

    pub fn prior(&self) -> Option<&DirichletPrior> {
        self.prior.as_ref()
    }

    /// Parameter names, aligned with [`params`](Self::params).
    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = match &self.input {
            InputLayer::Dense(_) => vec!["input.weights", "input.bias"],
            InputLayer::Fixed(_) => vec!["input.coeffs", "input.bias"],
            InputLayer::Prob(_) => vec!["input.coeffs", "input.bias", "input.logits"],
        };
        names.extend(["output.weights", "output.bias"]);
        names
    }

    /// `(rows, cols)` of each parameter; vectors report one row.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = match &self.input {
            InputLayer::Dense(l) => vec![l.weights().shape(), (1, l.output_dim())],
            InputLayer::Fixed(l) => vec![l.coeffs().shape(), (1, l.output_dim())],
            InputLayer::Prob(l) => vec![l.coeffs().shape(), (1, l.output_dim()), (1, l.logits().len())],
        };
        shapes.extend([self.output.weights().shape(), (1, self.output.output_dim())]);
        shapes
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = match &self.input {
            InputLayer::Dense(l) => l.params(),
            InputLayer::Fixed(l) => l.params(),
            InputLayer::Prob(l) => {
                let mut p = l.params();
                p.push(l.logits());
                p
            }
        };
        p.extend(self.output.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = match &mut self.input {
            InputLayer::Dense(l) => l.params_mut(),
            InputLayer::Fixed(l) => l.params_mut(),
            InputLayer::Prob(l) => l.params_with_logits_mut(),
        };
        p.extend(self.output.params_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// `softmax(logits)` of the scheme distribution (InvariantNet only).
    pub fn scheme_mean(&self) -> Option<Vec<f64>> {
        match &self.input {
            InputLayer::Prob(l) => Some(softmax(l.logits()).expect("finite logits")),
            _ => None,
        }
    }

    fn scheme_distribution(&self) -> Option<SchemeDistribution> {
        match &self.input {
            InputLayer::Prob(l) => {
                Some(SchemeDistribution::new(l.logits().to_vec(), self.spec.temperature).expect("validated spec"))
            }
            _ => None,
        }
    }

    fn input_forward(&self, pi: Option<&[f64]>, x: &Matrix) -> Result<(Matrix, LayerCache)> {
        match &self.input {
            InputLayer::Dense(l) => l.forward(x),
            InputLayer::Fixed(l) => l.forward(x),
            InputLayer::Prob(l) => l.forward(pi.expect("probabilistic layer needs pi"), x),
        }
    }

    /// Class scores with the deterministic scheme mean (no sampling).
    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        self.scores_with_pi(self.scheme_mean().as_deref(), x)
    }

    /// Class scores for explicit scheme probabilities (ignored by models
    /// without a scheme distribution).
    pub fn scores_with_pi(&self, pi: Option<&[f64]>, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Data(format!(
                "inputs have {} features, model expects {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        let (h, _) = self.input_forward(pi, x)?;
        Ok(self.output.forward(&h)?.0)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let s = self.scores(x)?;
        Ok((0..s.rows()).map(|i| argmax(s.row(i))).collect())
    }

    /// Loss and gradients on one minibatch. `dataset_size` scales the prior
    /// term; `noise` feeds the Gumbel-Softmax sample.
    pub fn step(&self, x: &Matrix, labels: &[usize], noise: Noise<'_>, dataset_size: usize) -> Result<StepOutput> {
        let dist = self.scheme_distribution();
        let sample: Option<GumbelSample> = match (&dist, noise) {
            (Some(d), Noise::Sample(rng)) => Some(gumbel_softmax_sample(d, rng)),
            (Some(d), Noise::Fixed(g)) => Some(gumbel_softmax_with_noise(d, g.to_vec())?),
            (None, _) => None,
        };
        let pi = sample.as_ref().map(|s| s.pi.as_slice());
        let (h, input_cache) = self.input_forward(pi, x)?;
        let (scores, output_cache) = self.output.forward(&h)?;

        let (loss, nll, score_grad, prior_pi_grad) = match (&self.prior, pi) {
            (Some(prior), Some(pi)) => {
                let (report, grad) = map_loss_with_grad(&scores, labels, pi, prior, dataset_size)?;
                (report.total, report.nll, grad.logits, Some(grad.pi))
            }
            _ => {
                let (nll, grad) = cross_entropy(&scores, labels)?;
                (nll, nll, grad, None)
            }
        };

        let out_grads = self.output.backward(&output_cache, &score_grad)?;
        let hidden_grad = out_grads.input.expect("dense backward returns the input gradient");
        let in_grads = match &self.input {
            InputLayer::Dense(l) => l.backward_params(&input_cache, &hidden_grad)?,
            InputLayer::Fixed(l) => l.backward_params(&input_cache, &hidden_grad)?,
            InputLayer::Prob(l) => l.backward_params(&input_cache, &hidden_grad)?,
        };

        let mut grads = in_grads.params;
        if let (Some(dist), Some(sample)) = (&dist, &sample) {
            let mut upstream = in_grads.pi.expect("probabilistic layer returns a pi gradient");
            if let Some(pg) = prior_pi_grad {
                for (u, g) in upstream.iter_mut().zip(pg) {
                    *u += g;
                }
            }
            grads.push(gumbel_softmax_backward(dist, sample, &upstream)?);
        }
        grads.extend(out_grads.params);
        Ok(StepOutput {
            loss,
            nll,
            pi_sample: sample.map(|s| s.pi),
            grads,
        })
    }

    /// Overwrites one named parameter; used when restoring checkpoints.
    pub(crate) fn set_param(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let idx = self
            .param_names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        let mut params = self.params_mut();
        let slot = &mut params[idx];
        if slot.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has {} values, checkpoint holds {}",
                slot.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("parameter '{name}' contains non-finite values")));
        }
        slot.copy_from_slice(values);
        Ok(())
    }
}

/// Fraction of correctly classified images, using the deterministic scheme
/// mean. Ties in the scores go to the lower class id.
pub fn evaluate(model: &TrainedModel, ds: &ImageDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if ds.dim() != model.spec.input_dim {
        return Err(Error::Data(format!(
            "dataset images have {} pixels, model expects {}",
            ds.dim(),
            model.spec.input_dim
        )));
    }
    if ds.class_count() > model.spec.class_count {
        return Err(Error::Data(format!(
            "dataset has {} classes, model predicts {}",
            ds.class_count(),
            model.spec.class_count
        )));
    }
    const CHUNK: usize = 1000;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let x = ds.images().select_rows(chunk);
        let predictions = model.predict(&x)?;
        correct += predictions
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == ds.labels()[i])
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}
