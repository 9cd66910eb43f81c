//! Finite permutation groups on flattened `n x n` grids, their Reynolds
//! operators and the eigenvalue-1 bases used as weight-sharing schemes.
//!
//! For a permutation group the Reynolds operator is block diagonal over the
//! orbits of the action: entry `(i, j)` is `1/|O|` when `i` and `j` share the
//! orbit `O` and zero otherwise. Its fixed space is therefore spanned by the
//! normalized orbit indicators, which is how [`invariant_basis`] builds it
//! (exact combinatorics, no eigensolver).

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, RngState};

/// A bijection of `0..dim` stored as an index map.
///
/// Acting on a vector, `(T x)[i] = x[map[i]]`; the permutation matrix has a
/// one at `(i, map[i])` in every row.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || seen[m] {
                return Err(Error::Domain(format!(
                    "index map is not a bijection of 0..{}",
                    map.len()
                )));
            }
            seen[m] = true;
        }
        Ok(Self { map })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            map: (0..dim).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.map.len()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    #[inline]
    pub fn image(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Permutation) -> Permutation {
        assert_eq!(self.dim(), other.dim(), "composing permutations of different size");
        Permutation {
            map: self.map.iter().map(|&s| other.map[s]).collect(),
        }
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { map: inv }
    }

    /// `T x` for a vector of length `dim`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "vector length does not match permutation");
        self.map.iter().map(|&m| x[m]).collect()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, &m) in out.iter_mut().zip(&self.map) {
            *o = x[m];
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        for (i, &j) in self.map.iter().enumerate() {
            m.set(i, j, 1.0);
        }
        m
    }

    /// 90° counter-clockwise rotation of an `n x n` grid: the value at grid
    /// cell `(i, j)` is read from `(j, n-1-i)`.
    pub fn rotate90(n: usize) -> Self {
        Self::from_grid_fn(n, |i, j| (j, n - 1 - i))
    }

    /// Mirror across the vertical axis (columns reversed).
    pub fn horizontal_flip(n: usize) -> Self {
        Self::from_grid_fn(n, |i, j| (i, n - 1 - j))
    }

    /// Mirror across the horizontal axis (rows reversed).
    pub fn vertical_flip(n: usize) -> Self {
        Self::from_grid_fn(n, |i, j| (n - 1 - i, j))
    }

    fn from_grid_fn(n: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut map = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (a, b) = f(i, j);
                map.push(a * n + b);
            }
        }
        Self { map }
    }
}

/// A finite group of permutations, all of the same dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryGroup {
    name: String,
    dim: usize,
    elements: Vec<Permutation>,
}

/// Outcome of [`closure_check`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClosureReport {
    pub closed: bool,
    pub missing_identity: bool,
    /// Products `a ∘ b` that are not members, with the indices of `a` and `b`.
    pub missing_products: Vec<(usize, usize, Permutation)>,
    /// Indices of elements whose inverse is not a member.
    pub missing_inverses: Vec<usize>,
}

impl fmt::Display for ClosureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.closed {
            return write!(f, "closed");
        }
        write!(
            f,
            "not closed: identity {}, {} missing products, {} missing inverses",
            if self.missing_identity { "missing" } else { "present" },
            self.missing_products.len(),
            self.missing_inverses.len()
        )
    }
}

impl SymmetryGroup {
    /// Wraps an explicit element list. Checks dimensions and distinctness
    /// but not closure; see [`closure_check`].
    pub fn from_elements(name: impl Into<String>, dim: usize, elements: Vec<Permutation>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Domain("a group needs at least one element".into()));
        }
        if let Some(p) = elements.iter().find(|p| p.dim() != dim) {
            return Err(Error::Domain(format!(
                "element of dimension {} in a group of dimension {dim}",
                p.dim()
            )));
        }
        let distinct: HashSet<&Permutation> = elements.iter().collect();
        if distinct.len() != elements.len() {
            return Err(Error::Domain("group elements must be distinct".into()));
        }
        Ok(Self {
            name: name.into(),
            dim,
            elements,
        })
    }

    /// The group generated by `generators`, enumerated breadth-first from the
    /// identity. Element order is deterministic.
    pub fn generate(name: impl Into<String>, dim: usize, generators: &[Permutation]) -> Result<Self> {
        if let Some(p) = generators.iter().find(|p| p.dim() != dim) {
            return Err(Error::Domain(format!(
                "generator of dimension {} for a group of dimension {dim}",
                p.dim()
            )));
        }
        let identity = Permutation::identity(dim);
        let mut seen: HashSet<Permutation> = HashSet::from([identity.clone()]);
        let mut elements = vec![identity.clone()];
        let mut queue = VecDeque::from([identity]);
        while let Some(p) = queue.pop_front() {
            for g in generators {
                let next = g.compose(&p);
                if seen.insert(next.clone()) {
                    elements.push(next.clone());
                    queue.push_back(next);
                }
            }
        }
        Self::from_elements(name, dim, elements)
    }

    pub fn identity_group(dim: usize) -> Self {
        Self {
            name: "identity".into(),
            dim,
            elements: vec![Permutation::identity(dim)],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn elements(&self) -> &[Permutation] {
        &self.elements
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn contains(&self, p: &Permutation) -> bool {
        self.elements.contains(p)
    }
}

/// Names accepted by [`group_by_name`].
pub const GROUP_NAMES: [&str; 3] = ["rot90", "flip", "identity"];

/// Cyclic group of quarter-turn rotations of an `n x n` grid.
pub fn rotation_group(n: usize) -> Result<SymmetryGroup> {
    if n == 0 {
        return Err(Error::Domain("grid side must be at least 1".into()));
    }
    SymmetryGroup::generate("rot90", n * n, &[Permutation::rotate90(n)])
}

/// Klein four-group {identity, horizontal flip, vertical flip, both}.
pub fn flip_group(n: usize) -> Result<SymmetryGroup> {
    if n == 0 {
        return Err(Error::Domain("grid side must be at least 1".into()));
    }
    SymmetryGroup::generate(
        "flip",
        n * n,
        &[Permutation::horizontal_flip(n), Permutation::vertical_flip(n)],
    )
}

pub fn group_by_name(name: &str, n: usize) -> Result<SymmetryGroup> {
    match name {
        "rot90" | "rotation" => rotation_group(n),
        "flip" => flip_group(n),
        "identity" => {
            if n == 0 {
                return Err(Error::Domain("grid side must be at least 1".into()));
            }
            Ok(SymmetryGroup::identity_group(n * n))
        }
        other => Err(Error::Config(format!(
            "unknown group '{other}' (expected one of {})",
            GROUP_NAMES.join(", ")
        ))),
    }
}

pub fn closure_check(g: &SymmetryGroup) -> ClosureReport {
    let members: HashSet<&Permutation> = g.elements.iter().collect();
    let mut report = ClosureReport {
        missing_identity: !members.contains(&Permutation::identity(g.dim)),
        ..Default::default()
    };
    let mut reported: HashSet<Permutation> = HashSet::new();
    for (i, a) in g.elements.iter().enumerate() {
        for (j, b) in g.elements.iter().enumerate() {
            let ab = a.compose(b);
            if !members.contains(&ab) && reported.insert(ab.clone()) {
                report.missing_products.push((i, j, ab));
            }
        }
        if !members.contains(&a.inverse()) {
            report.missing_inverses.push(i);
        }
    }
    report.closed =
        !report.missing_identity && report.missing_products.is_empty() && report.missing_inverses.is_empty();
    report
}

fn require_closed(g: &SymmetryGroup) -> Result<()> {
    let report = closure_check(g);
    if report.closed {
        Ok(())
    } else {
        Err(Error::Precondition(format!("group '{}' is {report}", g.name)))
    }
}

/// The Reynolds operator `(1/|G|) Σ_T P(T)` as a dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ReynoldsOperator {
    matrix: Matrix,
}

impl ReynoldsOperator {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matrix.matvec(x)
    }
}

pub fn reynolds_operator(g: &SymmetryGroup) -> Result<ReynoldsOperator> {
    require_closed(g)?;
    let d = g.dim;
    // Integer counts first so every entry is a single exact division.
    let mut counts = vec![0u32; d * d];
    for p in &g.elements {
        for (i, &j) in p.map.iter().enumerate() {
            counts[i * d + j] += 1;
        }
    }
    let order = g.order() as f64;
    let data = counts.into_iter().map(|c| f64::from(c) / order).collect();
    Ok(ReynoldsOperator {
        matrix: Matrix::from_vec(d, d, data)?,
    })
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Smaller root wins so roots stay canonical.
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Partition of `0..dim` into orbits, sorted by smallest member, members
/// ascending.
pub fn orbits(g: &SymmetryGroup) -> Result<Vec<Vec<usize>>> {
    require_closed(g)?;
    let mut sets = DisjointSets::new(g.dim);
    for p in &g.elements {
        for (i, &j) in p.map.iter().enumerate() {
            sets.union(i, j);
        }
    }
    let mut slot_of_root = vec![usize::MAX; g.dim];
    let mut out: Vec<Vec<usize>> = Vec::new();
    // Scanning indices in ascending order yields both orderings directly.
    for i in 0..g.dim {
        let r = sets.find(i);
        if slot_of_root[r] == usize::MAX {
            slot_of_root[r] = out.len();
            out.push(Vec::new());
        }
        out[slot_of_root[r]].push(i);
    }
    Ok(out)
}

/// Orthonormal row basis of the Reynolds operator's fixed space.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantBasis {
    group_name: String,
    #[serde(skip)]
    vectors: Matrix,
    orbit_sizes: Vec<usize>,
}

impl InvariantBasis {
    /// Wraps arbitrary basis rows. The orbit size reported for each row is
    /// its number of non-zero entries.
    pub fn from_matrix(group_name: impl Into<String>, vectors: Matrix) -> Self {
        let orbit_sizes = (0..vectors.rows())
            .map(|r| vectors.row(r).iter().filter(|v| **v != 0.0).count())
            .collect();
        Self {
            group_name: group_name.into(),
            vectors,
            orbit_sizes,
        }
    }

    pub fn group_name(&self) -> &str {
        &self.group_name
    }

    /// `d_k x D` matrix whose rows are the basis vectors.
    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn orbit_sizes(&self) -> &[usize] {
        &self.orbit_sizes
    }

    /// Number of basis vectors.
    pub fn rank(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// One row per orbit `O`, equal to `1/sqrt(|O|)` on `O` and zero elsewhere.
pub fn invariant_basis(g: &SymmetryGroup) -> Result<InvariantBasis> {
    let orbits = orbits(g)?;
    let mut v = Matrix::zeros(orbits.len(), g.dim);
    for (r, orbit) in orbits.iter().enumerate() {
        let value = 1.0 / (orbit.len() as f64).sqrt();
        for &i in orbit {
            v.set(r, i, value);
        }
    }
    Ok(InvariantBasis {
        group_name: g.name.clone(),
        vectors: v,
        orbit_sizes: orbits.iter().map(Vec::len).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const LAYER_INVARIANCE_TOL: f64 = 1e-9;

/// Draws random coefficient vectors `c` and inputs `x` and measures
/// `|(cᵀV)(Tx) - (cᵀV)x|` over every group element.
pub fn verify_layer_invariance(
    basis: &InvariantBasis,
    g: &SymmetryGroup,
    trials: usize,
    rng: &mut RngState,
) -> Result<InvarianceReport> {
    if basis.dim() != g.dim {
        return Err(Error::Precondition(format!(
            "basis dimension {} does not match group dimension {}",
            basis.dim(),
            g.dim
        )));
    }
    let v = basis.vectors();
    let mut max_deviation: f64 = 0.0;
    let mut tx = vec![0.0; g.dim];
    for _ in 0..trials {
        let c: Vec<f64> = (0..v.rows()).map(|_| rng.standard_normal()).collect();
        let mut w = vec![0.0; g.dim];
        for (r, &cr) in c.iter().enumerate() {
            crate::tensor::axpy(cr, v.row(r), &mut w);
        }
        let x: Vec<f64> = (0..g.dim).map(|_| rng.uniform()).collect();
        let base = dot(&w, &x);
        for t in &g.elements {
            t.apply_into(&x, &mut tx);
            max_deviation = max_deviation.max((dot(&w, &tx) - base).abs());
        }
    }
    Ok(InvarianceReport {
        trials,
        max_deviation,
        tolerance: LAYER_INVARIANCE_TOL,
        passed: max_deviation < LAYER_INVARIANCE_TOL,
    })
}
