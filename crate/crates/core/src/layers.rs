//! Network building blocks with hand-derived backward passes.
//!
//! All layers work on batches: inputs are `B x D` matrices with one example
//! per row, outputs are `B x m`. A single example is a one-row batch.
//!
//! Coefficient matrices are stored `m x d` (one row per neuron), which is the
//! transpose of the `A` that appears in the usual `W = Aᵀ(V + I p)` notation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symmetry::InvariantBasis;
use crate::tensor::{axpy, Matrix, RngState};

/// Tolerance for accepting a probability vector as lying on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Activation used after every hidden layer.
pub const HIDDEN_ACTIVATION: Activation = Activation::Relu;

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::None => v,
        }
    }

    /// Derivative at pre-activation `v`; relu uses 0 at the kink.
    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::None => 1.0,
        }
    }
}

/// How the "no sharing" option enters the probabilistic layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMode {
    /// A `d x D` generalized identity added to the stacked bases. When
    /// `d < D` the unshared option only sees the first `d` inputs.
    #[default]
    PaperLiteral,
    /// A full `D x D` identity block with `D` extra coefficient columns.
    Augmented,
}

/// Gradients for one backward call, in the order of the layer's `params()`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub params: Vec<Vec<f64>>,
    /// Gradient w.r.t. the scheme probabilities (probabilistic layer only).
    pub pi: Option<Vec<f64>>,
    /// Gradient w.r.t. the layer input, when requested.
    pub input: Option<Matrix>,
}

/// Intermediates retained by a forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Matrix,
    pre_activation: Matrix,
    weights: Matrix,
    pi: Option<Vec<f64>>,
    revision: u64,
}

impl LayerCache {
    pub fn pre_activation(&self) -> &Matrix {
        &self.pre_activation
    }

    /// Effective `m x D` weight matrix used by the forward pass.
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }
}

fn affine_forward(x: &Matrix, weights: &Matrix, bias: &[f64], activation: Activation) -> Result<(Matrix, Matrix)> {
    let mut pre = x.matmul_transposed(weights)?;
    for i in 0..pre.rows() {
        for (p, b) in pre.row_mut(i).iter_mut().zip(bias) {
            *p += b;
        }
    }
    let mut out = pre.clone();
    if activation != Activation::None {
        for v in out.as_mut_slice() {
            *v = activation.apply(*v);
        }
    }
    Ok((out, pre))
}

struct AffineGrads {
    weights: Matrix,
    bias: Vec<f64>,
    input: Option<Matrix>,
}

fn affine_backward(cache: &LayerCache, activation: Activation, upstream: &Matrix, want_input: bool) -> Result<AffineGrads> {
    if upstream.shape() != cache.pre_activation.shape() {
        return Err(Error::shape("layer backward", upstream.shape(), cache.pre_activation.shape()));
    }
    let mut delta = upstream.clone();
    if activation != Activation::None {
        for (d, &p) in delta.as_mut_slice().iter_mut().zip(cache.pre_activation.as_slice()) {
            *d *= activation.derivative(p);
        }
    }
    // Xᵀδ skips zero pixels, then one transpose gives the m x D gradient.
    let weights = cache.input.transposed_matmul(&delta)?.transpose();
    let mut bias = vec![0.0; delta.cols()];
    for i in 0..delta.rows() {
        axpy(1.0, delta.row(i), &mut bias);
    }
    let input = if want_input {
        Some(delta.matmul(&cache.weights)?)
    } else {
        None
    };
    Ok(AffineGrads { weights, bias, input })
}

fn check_input(op: &'static str, x: &Matrix, dim: usize) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::shape(op, x.shape(), (x.rows(), dim)));
    }
    Ok(())
}

fn check_revision(cache: &LayerCache, revision: u64) -> Result<()> {
    if cache.revision != revision {
        return Err(Error::Contract(
            "layer cache is stale: parameters changed after the forward pass".into(),
        ));
    }
    Ok(())
}

fn he_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    let scale = (2.0 / cols.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| scale * rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("finite He init")
}

/// Fully connected layer `σ(W x + b)` with `W` of shape `m x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
    revision: u64,
}

impl DenseLayer {
    pub const PARAM_NAMES: [&'static str; 2] = ["weights", "bias"];

    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.rows() == 0 || bias.len() != weights.rows() {
            return Err(Error::Domain(format!(
                "dense layer needs a bias per output row: {} rows, {} biases",
                weights.rows(),
                bias.len()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
            revision: 0,
        })
    }

    /// He-normal weights, zero bias.
    pub fn init(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut RngState) -> Result<Self> {
        Self::new(he_matrix(output_dim, input_dim, rng), vec![0.0; output_dim], activation)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![self.weights.as_slice(), &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        vec![self.weights.as_mut_slice(), &mut self.bias]
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LayerCache)> {
        check_input("dense forward", x, self.input_dim())?;
        let (out, pre) = affine_forward(x, &self.weights, &self.bias, self.activation)?;
        Ok((
            out,
            LayerCache {
                input: x.clone(),
                pre_activation: pre,
                weights: self.weights.clone(),
                pi: None,
                revision: self.revision,
            },
        ))
    }

    pub fn backward(&self, cache: &LayerCache, upstream: &Matrix) -> Result<GradientBundle> {
        self.backward_impl(cache, upstream, true)
    }

    /// Like [`backward`](Self::backward) but skips the input gradient.
    pub fn backward_params(&self, cache: &LayerCache, upstream: &Matrix) -> Result<GradientBundle> {
        self.backward_impl(cache, upstream, false)
    }

    fn backward_impl(&self, cache: &LayerCache, upstream: &Matrix, want_input: bool) -> Result<GradientBundle> {
        check_revision(cache, self.revision)?;
        let g = affine_backward(cache, self.activation, upstream, want_input)?;
        Ok(GradientBundle {
            params: vec![g.weights.into_vec(), g.bias],
            pi: None,
            input: g.input,
        })
    }
}

/// A basis in compressed-column form, so `coeffs · V` and its adjoint cost
/// one pass over the non-zeros (one per column for orbit bases).
#[derive(Clone, Debug, PartialEq)]
struct SparseBasis {
    rank: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseBasis {
    fn from_basis(basis: &InvariantBasis) -> Self {
        let v = basis.vectors();
        let mut col_ptr = vec![0];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for x in 0..v.cols() {
            for r in 0..v.rows() {
                let val = v.get(r, x);
                if val != 0.0 {
                    row_idx.push(r);
                    values.push(val);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            rank: v.rows(),
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `out += scale * coeffs[:, offset..offset+rank] · V`.
    fn expand_into(&self, coeffs: &Matrix, offset: usize, scale: f64, out: &mut Matrix) {
        for j in 0..out.rows() {
            let c = &coeffs.row(j)[offset..offset + self.rank];
            let o = out.row_mut(j);
            for (x, ox) in o.iter_mut().enumerate() {
                let mut s = 0.0;
                for k in self.col_ptr[x]..self.col_ptr[x + 1] {
                    s += c[self.row_idx[k]] * self.values[k];
                }
                *ox += scale * s;
            }
        }
    }

    /// `G · Vᵀ` for an `m x D` matrix `G`, returned as `m x rank`.
    fn contract(&self, g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(g.rows(), self.rank);
        for j in 0..g.rows() {
            let gj = g.row(j);
            let o = out.row_mut(j);
            for (x, &gx) in gj.iter().enumerate() {
                for k in self.col_ptr[x]..self.col_ptr[x + 1] {
                    o[self.row_idx[k]] += gx * self.values[k];
                }
            }
        }
        out
    }
}

/// Input layer whose neurons are constrained to the span of one invariant
/// basis: `W = coeffs · V`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedInvariantLayer {
    basis: InvariantBasis,
    sparse: SparseBasis,
    coeffs: Matrix,
    bias: Vec<f64>,
    activation: Activation,
    revision: u64,
}

impl FixedInvariantLayer {
    pub const PARAM_NAMES: [&'static str; 2] = ["coeffs", "bias"];

    pub fn new(basis: InvariantBasis, coeffs: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if coeffs.cols() != basis.rank() || coeffs.rows() == 0 || bias.len() != coeffs.rows() {
            return Err(Error::Domain(format!(
                "fixed invariant layer: coeffs {}x{}, basis rank {}, {} biases",
                coeffs.rows(),
                coeffs.cols(),
                basis.rank(),
                bias.len()
            )));
        }
        Ok(Self {
            sparse: SparseBasis::from_basis(&basis),
            basis,
            coeffs,
            bias,
            activation,
            revision: 0,
        })
    }

    pub fn init(basis: InvariantBasis, output_dim: usize, activation: Activation, rng: &mut RngState) -> Result<Self> {
        let coeffs = he_matrix(output_dim, basis.rank(), rng);
        Self::new(basis, coeffs, vec![0.0; output_dim], activation)
    }

    pub fn basis(&self) -> &InvariantBasis {
        &self.basis
    }

    pub fn coeffs(&self) -> &Matrix {
        &self.coeffs
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.coeffs.rows()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![self.coeffs.as_slice(), &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        vec![self.coeffs.as_mut_slice(), &mut self.bias]
    }

    /// `coeffs · V`, shape `m x D`.
    pub fn effective_weights(&self) -> Matrix {
        let mut w = Matrix::zeros(self.output_dim(), self.input_dim());
        self.sparse.expand_into(&self.coeffs, 0, 1.0, &mut w);
        w
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LayerCache)> {
        check_input("fixed invariant forward", x, self.input_dim())?;
        let weights = self.effective_weights();
        let (out, pre) = affine_forward(x, &weights, &self.bias, self.activation)?;
        Ok((
            out,
            LayerCache {
                input: x.clone(),
                pre_activation: pre,
                weights,
                pi: None,
                revision: self.revision,
            },
        ))
    }

    pub fn backward(&self, cache: &LayerCache, upstream: &Matrix) -> Result<GradientBundle> {
        self.backward_impl(cache, upstream, true)
    }

    pub fn backward_params(&self, cache: &LayerCache, upstream: &Matrix) -> Result<GradientBundle> {
        self.backward_impl(cache, upstream, false)
    }

    fn backward_impl(&self, cache: &LayerCache, upstream: &Matrix, want_input: bool) -> Result<GradientBundle> {
        check_revision(cache, self.revision)?;
        let g = affine_backward(cache, self.activation, upstream, want_input)?;
        let coeffs = self.sparse.contract(&g.weights);
        Ok(GradientBundle {
            params: vec![coeffs.into_vec(), g.bias],
            pi: None,
            input: g.input,
        })
    }
}

/// Input layer carrying a distribution over `q` sharing schemes plus "no
/// sharing". For scheme probabilities `pi = (p_1, …, p_q, p_{q+1})` the
/// weights are `coeffs · S(pi)` where `S` stacks `p_k V_k` and adds
/// `p_{q+1}` times the identity block selected by [`IdentityMode`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbInvariantLayer {
    bases: Vec<InvariantBasis>,
    sparse: Vec<SparseBasis>,
    offsets: Vec<usize>,
    stacked_rank: usize,
    input_dim: usize,
    identity_mode: IdentityMode,
    coeffs: Matrix,
    bias: Vec<f64>,
    logits: Vec<f64>,
    activation: Activation,
    revision: u64,
}

impl ProbInvariantLayer {
    pub const PARAM_NAMES: [&'static str; 2] = ["coeffs", "bias"];

    /// Number of coefficient columns for the given bases and mode.
    pub fn coeff_width(bases: &[InvariantBasis], input_dim: usize, mode: IdentityMode) -> usize {
        let d: usize = bases.iter().map(InvariantBasis::rank).sum();
        match mode {
            IdentityMode::PaperLiteral => d,
            IdentityMode::Augmented => d + input_dim,
        }
    }

    pub fn new(
        bases: Vec<InvariantBasis>,
        input_dim: usize,
        identity_mode: IdentityMode,
        coeffs: Matrix,
        bias: Vec<f64>,
        logits: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if let Some(b) = bases.iter().find(|b| b.dim() != input_dim) {
            return Err(Error::Domain(format!(
                "basis '{}' has dimension {}, layer input is {input_dim}",
                b.group_name(),
                b.dim()
            )));
        }
        let width = Self::coeff_width(&bases, input_dim, identity_mode);
        if coeffs.cols() != width || coeffs.rows() == 0 || bias.len() != coeffs.rows() {
            return Err(Error::Domain(format!(
                "probabilistic layer: coeffs {}x{}, expected {width} columns, {} biases",
                coeffs.rows(),
                coeffs.cols(),
                bias.len()
            )));
        }
        if logits.len() != bases.len() + 1 {
            return Err(Error::Domain(format!(
                "{} scheme logits for {} bases (need one extra for no sharing)",
                logits.len(),
                bases.len()
            )));
        }
        let mut offsets = Vec::with_capacity(bases.len());
        let mut acc = 0;
        for b in &bases {
            offsets.push(acc);
            acc += b.rank();
        }
        Ok(Self {
            sparse: bases.iter().map(SparseBasis::from_basis).collect(),
            bases,
            offsets,
            stacked_rank: acc,
            input_dim,
            identity_mode,
            coeffs,
            bias,
            logits,
            activation,
            revision: 0,
        })
    }

    /// He-normal coefficients, zero bias, zero logits (uniform scheme belief).
    pub fn init(
        bases: Vec<InvariantBasis>,
        input_dim: usize,
        output_dim: usize,
        identity_mode: IdentityMode,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        let width = Self::coeff_width(&bases, input_dim, identity_mode);
        let coeffs = he_matrix(output_dim, width, rng);
        let logits = vec![0.0; bases.len() + 1];
        Self::new(bases, input_dim, identity_mode, coeffs, vec![0.0; output_dim], logits, activation)
    }

    pub fn bases(&self) -> &[InvariantBasis] {
        &self.bases
    }

    /// Number of candidate groups `q`.
    pub fn scheme_count(&self) -> usize {
        self.bases.len()
    }

    /// `d = Σ d_k`.
    pub fn stacked_rank(&self) -> usize {
        self.stacked_rank
    }

    pub fn identity_mode(&self) -> IdentityMode {
        self.identity_mode
    }

    pub fn coeffs(&self) -> &Matrix {
        &self.coeffs
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.coeffs.rows()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![self.coeffs.as_slice(), &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        vec![self.coeffs.as_mut_slice(), &mut self.bias]
    }

    /// Coefficients, bias and scheme logits, in that order.
    pub fn params_with_logits_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        vec![self.coeffs.as_mut_slice(), &mut self.bias, &mut self.logits]
    }

    fn check_pi(&self, pi: &[f64]) -> Result<()> {
        if pi.len() != self.bases.len() + 1 {
            return Err(Error::Domain(format!(
                "pi has {} entries, layer has {} schemes",
                pi.len(),
                self.bases.len() + 1
            )));
        }
        let sum: f64 = pi.iter().sum();
        if pi.iter().any(|&p| !p.is_finite() || p < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("pi {pi:?} is not on the probability simplex")));
        }
        Ok(())
    }

    /// Effective `m x D` weights for scheme probabilities `pi`.
    pub fn assemble_weights(&self, pi: &[f64]) -> Result<Matrix> {
        self.check_pi(pi)?;
        let mut w = Matrix::zeros(self.output_dim(), self.input_dim);
        for (k, sparse) in self.sparse.iter().enumerate() {
            sparse.expand_into(&self.coeffs, self.offsets[k], pi[k], &mut w);
        }
        let p_free = pi[self.bases.len()];
        match self.identity_mode {
            IdentityMode::PaperLiteral => {
                let diag = self.stacked_rank.min(self.input_dim);
                for j in 0..w.rows() {
                    axpy(p_free, &self.coeffs.row(j)[..diag], &mut w.row_mut(j)[..diag]);
                }
            }
            IdentityMode::Augmented => {
                let d = self.stacked_rank;
                for j in 0..w.rows() {
                    axpy(p_free, &self.coeffs.row(j)[d..d + self.input_dim], w.row_mut(j));
                }
            }
        }
        Ok(w)
    }

    pub fn forward(&self, pi: &[f64], x: &Matrix) -> Result<(Matrix, LayerCache)> {
        check_input("probabilistic layer forward", x, self.input_dim)?;
        let weights = self.assemble_weights(pi)?;
        let (out, pre) = affine_forward(x, &weights, &self.bias, self.activation)?;
        Ok((
            out,
            LayerCache {
                input: x.clone(),
                pre_activation: pre,
                weights,
                pi: Some(pi.to_vec()),
                revision: self.revision,
            },
        ))
    }

    pub fn backward(&self, cache: &LayerCache, upstream: &Matrix) -> Result<GradientBundle> {
        self.backward_impl(cache, upstream, true)
    }

    pub fn backward_params(&self, cache: &LayerCache, upstream: &Matrix) -> Result<GradientBundle> {
        self.backward_impl(cache, upstream, false)
    }

    fn backward_impl(&self, cache: &LayerCache, upstream: &Matrix, want_input: bool) -> Result<GradientBundle> {
        check_revision(cache, self.revision)?;
        let pi = cache
            .pi
            .as_deref()
            .ok_or_else(|| Error::Contract("cache was not produced by a probabilistic layer".into()))?;
        let g = affine_backward(cache, self.activation, upstream, want_input)?;
        let gw = &g.weights;
        let q = self.bases.len();
        let mut coeff_grad = Matrix::zeros(self.coeffs.rows(), self.coeffs.cols());
        let mut pi_grad = vec![0.0; q + 1];

        for (k, sparse) in self.sparse.iter().enumerate() {
            // C_k = gW · V_kᵀ; dcoeffs_k = p_k C_k and dp_k = <coeffs_k, C_k>.
            let c = sparse.contract(gw);
            let off = self.offsets[k];
            for j in 0..c.rows() {
                let a = &self.coeffs.row(j)[off..off + sparse.rank];
                let cj = c.row(j);
                pi_grad[k] += crate::tensor::dot(a, cj);
                axpy(pi[k], cj, &mut coeff_grad.row_mut(j)[off..off + sparse.rank]);
            }
        }
        let (start, len) = match self.identity_mode {
            IdentityMode::PaperLiteral => (0, self.stacked_rank.min(self.input_dim)),
            IdentityMode::Augmented => (self.stacked_rank, self.input_dim),
        };
        for j in 0..gw.rows() {
            let gj = &gw.row(j)[..len];
            let a = &self.coeffs.row(j)[start..start + len];
            pi_grad[q] += crate::tensor::dot(a, gj);
            axpy(pi[q], gj, &mut coeff_grad.row_mut(j)[start..start + len]);
        }

        Ok(GradientBundle {
            params: vec![coeff_grad.into_vec(), g.bias],
            pi: Some(pi_grad),
            input: g.input,
        })
    }
}
