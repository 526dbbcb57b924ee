//! Mercer spectral machinery: truncated eigen-expansions, head/tail kernel
//! splits, the tail-dominance diagnostic η(X), the head-only GP variance, a
//! Nyström eigensolver and constant-free bottleneck rates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{param, Error, Result};
use crate::kernel::{
    cosine_eigenfunction, cosine_eigenvalue, Covariance, KernelFamily, KernelSpec,
};
use crate::linalg::{cholesky_with_jitter, inv_sqrt};

/// Default series depth for cosine bases.
pub const DEFAULT_DEPTH: usize = 64;

/// Eigenvalue floor for A^{-1/2}, relative to trace(A).
pub const INV_SQRT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseMeasure {
    Uniform01,
}

#[derive(Debug, Clone)]
enum Eigenfunctions {
    Cosine,
    /// Column j holds e_{j+1} on `grid`; evaluated by linear interpolation.
    Grid { grid: Vec<f64>, values: DMatrix<f64> },
}

/// A truncated Mercer expansion k(x, x') ≈ Σ_{j ≤ depth} λ_j e_j(x) e_j(x').
#[derive(Debug, Clone)]
pub struct MercerBasis {
    eigenvalues: Vec<f64>,
    functions: Eigenfunctions,
    pub base_measure: BaseMeasure,
}

impl MercerBasis {
    /// Cosine basis λ_j = exp(-½(ℓjπ)²), e_j = √2 cos(jπx), j = 1..=depth.
    pub fn cosine(lengthscale: f64, depth: usize) -> Result<Self> {
        if depth == 0 {
            return param("basis depth must be positive");
        }
        let eigenvalues = (1..=depth)
            .map(|j| cosine_eigenvalue(lengthscale, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(MercerBasis {
            eigenvalues,
            functions: Eigenfunctions::Cosine,
            base_measure: BaseMeasure::Uniform01,
        })
    }

    fn from_grid(eigenvalues: Vec<f64>, grid: Vec<f64>, values: DMatrix<f64>) -> Self {
        MercerBasis {
            eigenvalues,
            functions: Eigenfunctions::Grid { grid, values },
            base_measure: BaseMeasure::Uniform01,
        }
    }

    pub fn depth(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// λ_j for 1-based `j`.
    pub fn eigenvalue(&self, j: usize) -> f64 {
        self.eigenvalues[j - 1]
    }

    /// e_j(x) for 1-based `j`.
    pub fn eigenfunction(&self, j: usize, x: f64) -> f64 {
        match &self.functions {
            Eigenfunctions::Cosine => cosine_eigenfunction(j, x),
            Eigenfunctions::Grid { grid, values } => interpolate(grid, values, j - 1, x),
        }
    }

    /// Grid the eigenfunctions were computed on, for Nyström bases.
    pub fn grid(&self) -> Option<(&[f64], &DMatrix<f64>)> {
        match &self.functions {
            Eigenfunctions::Grid { grid, values } => Some((grid, values)),
            Eigenfunctions::Cosine => None,
        }
    }

    /// φ(x) = (√λ_1 e_1(x), …, √λ_d e_d(x)).
    pub fn features(&self, d: usize, x: f64) -> DVector<f64> {
        DVector::from_iterator(
            d,
            (1..=d).map(|j| self.eigenvalue(j).sqrt() * self.eigenfunction(j, x)),
        )
    }

    /// Σ_{j ≤ d} λ_j e_j(x) e_j(x2).
    pub fn head_kernel(&self, d: usize, x: f64, x2: f64) -> f64 {
        self.partial_kernel(1, d, x, x2)
    }

    fn partial_kernel(&self, from: usize, to: usize, x: f64, x2: f64) -> f64 {
        (from..=to)
            .map(|j| self.eigenvalue(j) * self.eigenfunction(j, x) * self.eigenfunction(j, x2))
            .sum()
    }

    fn check_depth(&self, d: usize, inclusive: bool) -> Result<()> {
        let ok = if inclusive { d <= self.depth() } else { d < self.depth() };
        if ok {
            Ok(())
        } else {
            param(format!(
                "d = {d} not resolvable with a depth-{} basis",
                self.depth()
            ))
        }
    }
}

/// The full truncated series acts as a kernel in its own right.
impl Covariance for MercerBasis {
    fn eval(&self, x: f64, x2: f64) -> f64 {
        self.partial_kernel(1, self.depth(), x, x2)
    }

    fn signal_variance(&self) -> f64 {
        match self.functions {
            Eigenfunctions::Cosine => 2.0 * self.eigenvalues.iter().sum::<f64>(),
            Eigenfunctions::Grid { .. } => {
                let (grid, _) = self.grid().unwrap();
                grid.iter()
                    .map(|&x| self.eval(x, x))
                    .fold(0.0, f64::max)
            }
        }
    }
}

fn interpolate(grid: &[f64], values: &DMatrix<f64>, col: usize, x: f64) -> f64 {
    let n = grid.len();
    if x <= grid[0] {
        return values[(0, col)];
    }
    if x >= grid[n - 1] {
        return values[(n - 1, col)];
    }
    let hi = grid.partition_point(|&g| g <= x);
    let lo = hi - 1;
    let t = (x - grid[lo]) / (grid[hi] - grid[lo]);
    values[(lo, col)] * (1.0 - t) + values[(hi, col)] * t
}

/// τ_d(x*) = Σ_{j=d+1}^{depth} λ_j e_j(x*)². `d` may be 0 (empty head).
pub fn tail_sum(basis: &MercerBasis, d: usize, x_star: f64) -> Result<f64> {
    basis.check_depth(d, false)?;
    Ok(basis.partial_kernel(d + 1, basis.depth(), x_star, x_star))
}

#[derive(Debug, Clone)]
pub struct HeadTailSplit {
    pub d: usize,
    pub locations: Vec<f64>,
    pub sigma_eps_sq: f64,
    pub k_head: DMatrix<f64>,
    pub k_tail: DMatrix<f64>,
    /// K_H + σ_ε² I.
    pub a: DMatrix<f64>,
}

/// Splits the gram matrix at index `d`. `d = depth` is allowed and yields an
/// all-zero tail.
pub fn head_tail_split(
    basis: &MercerBasis,
    d: usize,
    xs: &[f64],
    sigma_eps_sq: f64,
) -> Result<HeadTailSplit> {
    if !(sigma_eps_sq > 0.0) {
        return param(format!("head/tail split needs sigma_eps^2 > 0, got {sigma_eps_sq}"));
    }
    basis.check_depth(d, true)?;
    let n = xs.len();
    let mut k_head = DMatrix::zeros(n, n);
    let mut k_tail = DMatrix::zeros(n, n);
    for i in 0..n {
        for l in 0..=i {
            let h = basis.partial_kernel(1, d, xs[i], xs[l]);
            let t = basis.partial_kernel(d + 1, basis.depth(), xs[i], xs[l]);
            k_head[(i, l)] = h;
            k_head[(l, i)] = h;
            k_tail[(i, l)] = t;
            k_tail[(l, i)] = t;
        }
    }
    let mut a = k_head.clone();
    for i in 0..n {
        a[(i, i)] += sigma_eps_sq;
    }
    Ok(HeadTailSplit {
        d,
        locations: xs.to_vec(),
        sigma_eps_sq,
        k_head,
        k_tail,
        a,
    })
}

/// η(X) = ‖A^{-1/2} K_T A^{-1/2}‖_op.
pub fn tail_operator_norm(split: &HeadTailSplit) -> Result<f64> {
    if split.a.nrows() == 0 {
        return Ok(0.0);
    }
    if split.a.clone().cholesky().is_none() {
        let min = split.a.symmetric_eigenvalues().min();
        return Err(Error::Numerical(format!(
            "A = K_H + sigma^2 I is not positive definite (min eigenvalue {min:e})"
        )));
    }
    let s = inv_sqrt(&split.a, INV_SQRT_FLOOR)?;
    let m = &s * &split.k_tail * &s;
    Ok(m.symmetric_eigenvalues().max().max(0.0))
}

/// σ_d² = k_H(x*, x*) - k_*ᴴᵀ A⁻¹ k_*ᴴ.
pub fn truncated_gp_variance(split: &HeadTailSplit, basis: &MercerBasis, x_star: f64) -> Result<f64> {
    let prior = basis.head_kernel(split.d, x_star, x_star);
    if split.locations.is_empty() {
        return Ok(prior);
    }
    let (chol, _) = cholesky_with_jitter(&split.a, &[0.0])?;
    let ks = DVector::from_iterator(
        split.locations.len(),
        split
            .locations
            .iter()
            .map(|&x| basis.head_kernel(split.d, x, x_star)),
    );
    let v = chol
        .l_dirty()
        .solve_lower_triangular(&ks)
        .expect("cholesky factor has a positive diagonal");
    Ok((prior - v.norm_squared()).clamp(0.0, prior))
}

/// Dense Nyström eigendecomposition of a kernel under Uniform[0, 1] on the
/// midpoint grid x_g = (g + ½)/N.
#[derive(Debug, Clone)]
pub struct Nystrom {
    pub grid: Vec<f64>,
    /// All N operator eigenvalues (grid eigenvalues / N), non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Unit-L² eigenfunctions on the grid, one per column, non-increasing λ.
    pub eigenfunctions: DMatrix<f64>,
}

impl Nystrom {
    pub fn decompose<K: Covariance + ?Sized>(kernel: &K, n: usize) -> Result<Self> {
        if n == 0 {
            return param("Nystrom grid must be nonempty");
        }
        let grid: Vec<f64> = (0..n).map(|g| (g as f64 + 0.5) / n as f64).collect();
        let eig = SymmetricEigen::new(kernel.gram(&grid));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let scale = (n as f64).sqrt();
        let mut eigenfunctions = DMatrix::zeros(n, n);
        let mut eigenvalues = Vec::with_capacity(n);
        for (col, &k) in order.iter().enumerate() {
            eigenvalues.push(eig.eigenvalues[k] / n as f64);
            let v = eig.eigenvectors.column(k);
            let sign = if v[0] < 0.0 { -1.0 } else { 1.0 };
            eigenfunctions.set_column(col, &(v * (sign * scale)));
        }
        Ok(Nystrom {
            grid,
            eigenvalues,
            eigenfunctions,
        })
    }

    /// Top-`j` eigenpairs as a grid-interpolated basis.
    pub fn basis(&self, j: usize) -> Result<MercerBasis> {
        if j == 0 || j > self.grid.len() {
            return param(format!("cannot take {j} eigenpairs from a {}-point grid", self.grid.len()));
        }
        Ok(MercerBasis::from_grid(
            self.eigenvalues[..j].to_vec(),
            self.grid.clone(),
            self.eigenfunctions.columns(0, j).into_owned(),
        ))
    }
}

/// Top-`j` Nyström eigenpairs from an `n`-point grid; requires n ≥ 10 j.
pub fn nystrom_eigendecomposition(spec: &KernelSpec, n: usize, j: usize) -> Result<MercerBasis> {
    if j == 0 || n < 10 * j {
        return param(format!("grid of {n} points cannot resolve {j} eigenpairs (need N >= 10 J)"));
    }
    spec.validate()?;
    Nystrom::decompose(spec, n)?.basis(j)
}

/// Truncation-error rate without its constant: exp(-c' d²) with c' = ½(ℓπ)²
/// for SE, d^{-2ν} for Matérn (one input dimension).
pub fn bottleneck_rate(spec: &KernelSpec, d: usize) -> f64 {
    let d = d as f64;
    match spec.family {
        KernelFamily::SquaredExponential => {
            let c = 0.5 * (spec.lengthscale * std::f64::consts::PI).powi(2);
            (-c * d * d).exp()
        }
        KernelFamily::Matern(nu) => d.powf(-2.0 * nu.value()),
    }
}

/// d_eff = (Σ λ_j²) / (Σ λ_j)².
pub fn effective_dimension(eigenvalues: &[f64]) -> Result<f64> {
    if eigenvalues.is_empty() {
        return param("effective dimension of an empty spectrum");
    }
    if eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return param("eigenvalues must be positive");
    }
    let s: f64 = eigenvalues.iter().sum();
    let s2: f64 = eigenvalues.iter().map(|l| l * l).sum();
    Ok(s2 / (s * s))
}
