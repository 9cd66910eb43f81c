#![allow(dead_code)]

use std::path::PathBuf;

use symlearn::bayes::DirichletPrior;
use symlearn::data::ImageDataset;
use symlearn::layers::{Activation, DenseLayer, FixedInvariantLayer, IdentityMode, ProbInvariantLayer};
use symlearn::symmetry::{group_by_name, invariant_basis, InvariantBasis};
use symlearn::tensor::{Matrix, RngState};
use symlearn::training::{build_model, InputLayer, ModelKind, ModelSpec, Noise, PriorConfig, TrainedModel};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
/// Denominator floor for relative errors, so components that are zero up to
/// round-off do not divide by zero.
pub const REL_FLOOR: f64 = 1e-4;
/// Configurations whose ReLU pre-activations come this close to the kink are
/// redrawn; a central difference across the kink is not a derivative.
const KINK_MARGIN: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn pixel_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn weighted_sum(out: &Matrix, weights: &Matrix) -> f64 {
    out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
}

fn near_kink(pre: &Matrix, activation: Activation) -> bool {
    activation == Activation::Relu && pre.as_slice().iter().any(|v| v.abs() < KINK_MARGIN)
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// Max relative error over every entry of `analytic` against central
/// differences of `loss` in the corresponding coordinate.
fn compare_slice(analytic: &[f64], loss: impl Fn(usize, f64) -> f64) -> f64 {
    analytic
        .iter()
        .enumerate()
        .map(|(i, &a)| rel_err(a, central(|h| loss(i, h))))
        .fold(0.0, f64::max)
}

pub fn basis_for(name: &str, n: usize) -> InvariantBasis {
    invariant_basis(&group_by_name(name, n).unwrap()).unwrap()
}

fn activation_for(seed: u64) -> Activation {
    if seed.is_multiple_of(2) {
        Activation::Relu
    } else {
        Activation::None
    }
}

/// Dense layer under the loss `Σ R ⊙ layer(x)`: weights, bias and input.
pub fn dense_layer_error(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    loop {
        let (d, m, b) = (2 + rng.below(6), 1 + rng.below(5), 1 + rng.below(4));
        let act = activation_for(seed);
        let layer = DenseLayer::new(random_matrix(&mut rng, m, d), random_matrix(&mut rng, 1, m).into_vec(), act).unwrap();
        let x = random_matrix(&mut rng, b, d);
        let r = random_matrix(&mut rng, b, m);
        let (_, cache) = layer.forward(&x).unwrap();
        if near_kink(cache.pre_activation(), act) {
            continue;
        }
        let grads = layer.backward(&cache, &r).unwrap();
        let mut worst: f64 = 0.0;
        for (k, g) in grads.params.iter().enumerate() {
            worst = worst.max(compare_slice(g, |i, h| {
                let mut l = layer.clone();
                l.params_mut()[k][i] += h;
                weighted_sum(&l.forward(&x).unwrap().0, &r)
            }));
        }
        let gx = grads.input.unwrap();
        worst = worst.max(compare_slice(gx.as_slice(), |i, h| {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            weighted_sum(&layer.forward(&xp).unwrap().0, &r)
        }));
        return worst;
    }
}

const GRIDS: [usize; 3] = [2, 3, 4];
const GROUPS: [&str; 3] = ["rot90", "flip", "identity"];

/// Fixed-sharing layer: coefficients, bias and input.
pub fn fixed_layer_error(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    loop {
        let n = GRIDS[rng.below(GRIDS.len())];
        let basis = basis_for(GROUPS[rng.below(GROUPS.len())], n);
        let (m, b) = (1 + rng.below(5), 1 + rng.below(4));
        let act = activation_for(seed);
        let rank = basis.rank();
        let layer = FixedInvariantLayer::new(
            basis,
            random_matrix(&mut rng, m, rank),
            random_matrix(&mut rng, 1, m).into_vec(),
            act,
        )
        .unwrap();
        let x = random_matrix(&mut rng, b, n * n);
        let r = random_matrix(&mut rng, b, m);
        let (_, cache) = layer.forward(&x).unwrap();
        if near_kink(cache.pre_activation(), act) {
            continue;
        }
        let grads = layer.backward(&cache, &r).unwrap();
        let mut worst: f64 = 0.0;
        for (k, g) in grads.params.iter().enumerate() {
            worst = worst.max(compare_slice(g, |i, h| {
                let mut l = layer.clone();
                l.params_mut()[k][i] += h;
                weighted_sum(&l.forward(&x).unwrap().0, &r)
            }));
        }
        let gx = grads.input.unwrap();
        worst = worst.max(compare_slice(gx.as_slice(), |i, h| {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            weighted_sum(&layer.forward(&xp).unwrap().0, &r)
        }));
        return worst;
    }
}

fn random_simplex_point(rng: &mut RngState, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| 0.2 + rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn random_bases(rng: &mut RngState, n: usize) -> Vec<InvariantBasis> {
    let q = 1 + rng.below(2);
    let mut names = vec!["rot90", "flip"];
    if q == 1 {
        names.remove(rng.below(2));
    }
    names.into_iter().map(|g| basis_for(g, n)).collect()
}

/// Probabilistic layer: coefficients, bias, input, and the scheme
/// probabilities. Probabilities are perturbed along `e_i − e_last` so the
/// forward pass stays on the simplex; only gradient differences are
/// identifiable there.
pub fn prob_layer_error(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    loop {
        let n = GRIDS[rng.below(GRIDS.len())];
        let bases = random_bases(&mut rng, n);
        let mode = if rng.below(2) == 0 {
            IdentityMode::PaperLiteral
        } else {
            IdentityMode::Augmented
        };
        let q = bases.len();
        let d = n * n;
        let (m, b) = (1 + rng.below(5), 1 + rng.below(4));
        let act = activation_for(seed);
        let width = ProbInvariantLayer::coeff_width(&bases, d, mode);
        let layer = ProbInvariantLayer::new(
            bases,
            d,
            mode,
            random_matrix(&mut rng, m, width),
            random_matrix(&mut rng, 1, m).into_vec(),
            vec![0.0; q + 1],
            act,
        )
        .unwrap();
        let pi = random_simplex_point(&mut rng, q + 1);
        let x = random_matrix(&mut rng, b, d);
        let r = random_matrix(&mut rng, b, m);
        let (_, cache) = layer.forward(&pi, &x).unwrap();
        if near_kink(cache.pre_activation(), act) {
            continue;
        }
        let grads = layer.backward(&cache, &r).unwrap();
        let mut worst: f64 = 0.0;
        for (k, g) in grads.params.iter().enumerate() {
            worst = worst.max(compare_slice(g, |i, h| {
                let mut l = layer.clone();
                l.params_mut()[k][i] += h;
                weighted_sum(&l.forward(&pi, &x).unwrap().0, &r)
            }));
        }
        let gx = grads.input.unwrap();
        worst = worst.max(compare_slice(gx.as_slice(), |i, h| {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            weighted_sum(&layer.forward(&pi, &xp).unwrap().0, &r)
        }));
        let gpi = grads.pi.unwrap();
        let diffs: Vec<f64> = (0..q).map(|i| gpi[i] - gpi[q]).collect();
        worst = worst.max(compare_slice(&diffs, |i, h| {
            let mut p = pi.clone();
            p[i] += h;
            p[q] -= h;
            weighted_sum(&layer.forward(&p, &x).unwrap().0, &r)
        }));
        return worst;
    }
}

fn hidden_pre_activation(model: &TrainedModel, pi: Option<&[f64]>, x: &Matrix) -> Matrix {
    let cache = match model.input_layer() {
        InputLayer::Dense(l) => l.forward(x).unwrap().1,
        InputLayer::Fixed(l) => l.forward(x).unwrap().1,
        InputLayer::Prob(l) => l.forward(pi.unwrap(), x).unwrap().1,
    };
    cache.pre_activation().clone()
}

/// Full network objective (MAP for InvariantNet) with the Gumbel noise
/// frozen, checked against every parameter including the scheme logits.
pub fn model_loss_error(kind: ModelKind, seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    loop {
        let n = GRIDS[rng.below(GRIDS.len())];
        let (hidden, classes, b) = (2 + rng.below(4), 2 + rng.below(3), 2 + rng.below(5));
        let mut spec = ModelSpec::new(kind, n * n, hidden, classes).with_seed(seed);
        if kind == ModelKind::InvariantNet {
            let names: Vec<String> = random_bases(&mut rng, n).iter().map(|b| b.group_name().to_string()).collect();
            spec.groups = names;
            let q = spec.groups.len();
            spec.prior = Some(if q == 1 {
                PriorConfig::Jeffreys { alpha: None }
            } else {
                PriorConfig::Dirichlet {
                    alpha: vec![2.0; q + 1],
                }
            });
            if rng.below(2) == 1 {
                spec.identity_mode = IdentityMode::Augmented;
            }
            spec.temperature = 0.5 + rng.uniform();
        }
        let mut model = build_model(&spec, &mut rng).unwrap();
        // Non-zero logits so the softmax Jacobian is not at its symmetric point.
        if let Some(logits) = model.params_mut().get_mut(2).filter(|_| kind == ModelKind::InvariantNet) {
            for l in logits.iter_mut() {
                *l = rng.standard_normal() * 0.5;
            }
        }
        let x = pixel_matrix(&mut rng, b, n * n);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(classes)).collect();
        let noise: Vec<f64> = (0..spec.groups.len() + 1).map(|_| rng.standard_normal() * 0.3).collect();
        let dataset_size = 50;
        let step = model.step(&x, &labels, Noise::Fixed(&noise), dataset_size).unwrap();
        if near_kink(&hidden_pre_activation(&model, step.pi_sample.as_deref(), &x), Activation::Relu) {
            continue;
        }
        let mut worst: f64 = 0.0;
        for (k, g) in step.grads.iter().enumerate() {
            worst = worst.max(compare_slice(g, |i, h| {
                let mut m = model.clone();
                m.params_mut()[k][i] += h;
                m.step(&x, &labels, Noise::Fixed(&noise), dataset_size).unwrap().loss
            }));
        }
        return worst;
    }
}

/// Two well separated Gaussian blobs on a `side x side` grid, pixels clipped
/// to `[0, 1]`.
pub fn two_blob_dataset(count: usize, side: usize, seed: u64) -> ImageDataset {
    let mut rng = RngState::new(seed);
    let d = side * side;
    let mut data = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        for p in 0..d {
            let centre = if (p < d / 2) == (label == 0) { 0.8 } else { 0.2 };
            data.push((centre + 0.1 * rng.standard_normal()).clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    ImageDataset::new(Matrix::from_vec(count, d, data).unwrap(), labels, side, 2).unwrap()
}

/// Uniform random images with labels cycling through `classes`.
pub fn random_dataset(count: usize, side: usize, classes: usize, seed: u64) -> ImageDataset {
    let mut rng = RngState::new(seed);
    let labels = (0..count).map(|i| i % classes).collect();
    ImageDataset::new(pixel_matrix(&mut rng, count, side * side), labels, side, classes).unwrap()
}

pub fn dirichlet(alpha: &[f64]) -> DirichletPrior {
    DirichletPrior::new(alpha.to_vec()).unwrap()
}

/// Directory holding the MNIST IDX files: `$SYMLEARN_DATA_DIR` or
/// `<workspace>/data/mnist`.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("SYMLEARN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let ok = ["train-images-idx3-ubyte", "t10k-images-idx3-ubyte"]
        .iter()
        .all(|f| dir.join(f).exists() || dir.join(format!("{f}.gz")).exists());
    ok.then_some(dir)
}
