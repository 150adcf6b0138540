//! The elliptic cell problem and the rate recipe.
//!
//! Solves `Delta u = a' V (1 + u)` with decay at infinity through its
//! second-kind integral formulation
//!
//! `u(x) = -c0 a' \int |x-y|^{2-d} V(y) (1 + u(y)) dy`
//!
//! discretised over the kernel support only; values elsewhere come from the
//! integral representation ([`eval_u`]). The macroscopic rate is
//! `beta(n,m) = alpha(n,m) \int V (1 + u)` and the effective-rate curve
//! `F(b) = b \int V (1 + u^b)` tends to the Newtonian capacity of the
//! support as `b` grows.

use crate::error::{CoagError, Result};
use crate::model::KernelV;
use crate::numeric::{newton_c0, sphere_surface_area};
use nalgebra::{DMatrix, DVector};

/// Above this node count the dense factorisation is replaced by a
/// matrix-free conjugate-gradient solve on the symmetrised system.
const DENSE_NODE_LIMIT: usize = 10_000;

pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-8;
pub const DEFAULT_RADIAL_SHELLS: usize = 400;

/// Quadrature grid covering the kernel support.
#[derive(Debug, Clone)]
pub enum CellGrid {
    /// Spherical shells over [0, C0]; nodes are shell midpoints and the
    /// Newtonian kernel is integrated exactly over each shell.
    Radial {
        dim: usize,
        boundaries: Vec<f64>,
        nodes: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Uniform cells of the cube [-C0, C0]^d restricted to the support;
    /// the singular self-cell uses the exact ball average of the kernel.
    Cartesian {
        dim: usize,
        spacing: f64,
        /// Flattened node coordinates, `len = n_nodes * dim`.
        nodes: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl CellGrid {
    /// Radial grid with `n_shells` equal-width shells over the support.
    pub fn radial(kernel: &KernelV, n_shells: usize) -> Self {
        let dim = kernel.dim();
        let c0 = kernel.support_radius();
        let omega = sphere_surface_area(dim);
        let h = c0 / n_shells as f64;
        let boundaries: Vec<f64> = (0..=n_shells).map(|k| k as f64 * h).collect();
        let nodes: Vec<f64> = (0..n_shells).map(|k| (k as f64 + 0.5) * h).collect();
        let weights: Vec<f64> = (0..n_shells)
            .map(|k| {
                omega / dim as f64
                    * (boundaries[k + 1].powi(dim as i32) - boundaries[k].powi(dim as i32))
            })
            .collect();
        CellGrid::Radial {
            dim,
            boundaries,
            nodes,
            weights,
        }
    }

    /// Cartesian grid with `cells_per_dim` cells per dimension over
    /// [-C0, C0]^d, keeping only cells whose center lies in the support.
    pub fn cartesian(kernel: &KernelV, cells_per_dim: usize) -> Self {
        let dim = kernel.dim();
        let c0 = kernel.support_radius();
        let h = 2.0 * c0 / cells_per_dim as f64;
        let mut nodes = Vec::new();
        let mut count = 0usize;
        let mut idx = vec![0usize; dim];
        loop {
            let center: Vec<f64> = idx
                .iter()
                .map(|&i| -c0 + (i as f64 + 0.5) * h)
                .collect();
            if kernel.eval(&center) > 0.0 {
                nodes.extend_from_slice(&center);
                count += 1;
            }
            // odometer over the d-dimensional index
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < cells_per_dim {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == dim {
                    return CellGrid::Cartesian {
                        dim,
                        spacing: h,
                        nodes,
                        weights: vec![h.powi(dim as i32); count],
                    };
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CellGrid::Radial { dim, .. } | CellGrid::Cartesian { dim, .. } => *dim,
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            CellGrid::Radial { nodes, .. } => nodes.len(),
            CellGrid::Cartesian { weights, .. } => weights.len(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            CellGrid::Radial { weights, .. } | CellGrid::Cartesian { weights, .. } => weights,
        }
    }

    /// Total quadrature volume; covers the support by construction.
    pub fn total_volume(&self) -> f64 {
        self.weights().iter().sum()
    }

    /// Kernel values at the nodes, rescaled so the grid quadrature of V is
    /// exactly 1 (keeps `beta <= alpha` exact in the discrete system).
    pub fn kernel_values(&self, kernel: &KernelV) -> Vec<f64> {
        let mut v: Vec<f64> = match self {
            CellGrid::Radial { nodes, .. } => {
                nodes.iter().map(|&r| kernel.eval_radial(r)).collect()
            }
            CellGrid::Cartesian { dim, nodes, .. } => nodes
                .chunks_exact(*dim)
                .map(|x| kernel.eval(x))
                .collect(),
        };
        let quad: f64 = v
            .iter()
            .zip(self.weights())
            .map(|(vi, wi)| vi * wi)
            .sum();
        let s = 1.0 / quad;
        for vi in &mut v {
            *vi *= s;
        }
        v
    }

    /// Row of Newtonian convolution weights for an arbitrary point:
    /// `conv(f)(x) ~= sum_k row[k] f[k]` approximates
    /// `c0 \int |x-y|^{2-d} f(y) dy` over the grid.
    ///
    /// `x` is a radius for radial grids and a point for cartesian grids.
    pub fn newton_row_radial(&self, r: f64) -> Vec<f64> {
        let c0n = newton_c0(self.dim());
        match self {
            CellGrid::Radial {
                dim, boundaries, ..
            } => {
                let omega = sphere_surface_area(*dim);
                (0..boundaries.len() - 1)
                    .map(|k| {
                        c0n * omega
                            * shell_kernel_integral(r, boundaries[k], boundaries[k + 1], *dim)
                    })
                    .collect()
            }
            CellGrid::Cartesian { .. } => {
                panic!("radial evaluation on a cartesian grid; use newton_row_point")
            }
        }
    }

    pub fn newton_row_point(&self, x: &[f64]) -> Vec<f64> {
        match self {
            CellGrid::Radial { .. } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                self.newton_row_radial(r)
            }
            CellGrid::Cartesian {
                dim,
                nodes,
                weights,
                ..
            } => {
                let c0n = newton_c0(*dim);
                let p = 2.0 - *dim as f64;
                nodes
                    .chunks_exact(*dim)
                    .zip(weights)
                    .map(|(y, &w)| {
                        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d2 < 1e-24 {
                            c0n * w * self_cell_average(*dim, w)
                        } else {
                            c0n * w * d2.sqrt().powf(p)
                        }
                    })
                    .collect()
            }
        }
    }

    /// Full convolution weight matrix, row j = weights at node j.
    fn newton_matrix(&self) -> Vec<Vec<f64>> {
        match self {
            CellGrid::Radial { nodes, .. } => nodes
                .iter()
                .map(|&r| self.newton_row_radial(r))
                .collect(),
            CellGrid::Cartesian { dim, nodes, .. } => nodes
                .chunks_exact(*dim)
                .map(|x| self.newton_row_point(x))
                .collect(),
        }
    }
}

/// Average of |y|^{2-d} over a ball of the cell's volume.
fn self_cell_average(dim: usize, cell_volume: f64) -> f64 {
    let omega = sphere_surface_area(dim);
    let a = (cell_volume * dim as f64 / omega).powf(1.0 / dim as f64);
    dim as f64 / 2.0 * a.powi(2 - dim as i32)
}

/// Exact `\int_a^b s^{d-1} max(r, s)^{2-d} ds` (the angular average of the
/// Newtonian kernel over a shell is `max(r, s)^{2-d}`).
fn shell_kernel_integral(r: f64, a: f64, b: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let inner = |a: f64, b: f64| r.powi(2 - dim as i32) * (b.powi(dim as i32) - a.powi(dim as i32)) / d;
    let outer = |a: f64, b: f64| 0.5 * (b * b - a * a);
    if b <= r {
        inner(a, b)
    } else if a >= r {
        outer(a, b)
    } else {
        inner(a, r) + outer(r, b)
    }
}

/// Newtonian potential `c0 \int |x-y|^{2-d} f(y) dy` of grid data at a point.
pub fn newtonian_convolve(grid: &CellGrid, f_at_nodes: &[f64], x: &[f64]) -> f64 {
    let row = grid.newton_row_point(x);
    row.iter().zip(f_at_nodes).map(|(a, b)| a * b).sum()
}

/// Converged discrete cell-problem solution.
#[derive(Debug, Clone)]
pub struct CellSolution {
    /// Microscopic rate alpha(n, m) the solve was run with.
    pub alpha: f64,
    /// Diffusion-normalised coupling alpha / (d(n) + d(m)).
    pub alpha_prime: f64,
    /// u at the grid nodes.
    pub u_values: Vec<f64>,
    /// Max-norm residual of the integral equation at the nodes.
    pub residual: f64,
    /// Grid quadrature of V (1 + u), in [0, 1].
    pub vu_integral: f64,
    /// Macroscopic rate alpha * \int V (1 + u).
    pub beta: f64,
    /// Effective-rate value F = alpha' * \int V (1 + u).
    pub f_of_beta: f64,
}

/// Solve the discretised second-kind equation for the given microscopic
/// rate and diffusion sum `d(n) + d(m)`.
pub fn solve_cell_problem(
    kernel: &KernelV,
    alpha: f64,
    dd_sum: f64,
    grid: &CellGrid,
    tol: f64,
) -> Result<CellSolution> {
    if alpha < 0.0 {
        return Err(CoagError::InvalidParameter(
            "alpha must be nonnegative".into(),
        ));
    }
    if !(dd_sum > 0.0) {
        return Err(CoagError::InvalidParameter(
            "diffusion sum must be positive".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(CoagError::InvalidParameter("tol must be positive".into()));
    }
    let alpha_prime = alpha / dd_sum;
    let n = grid.n_nodes();
    let v = grid.kernel_values(kernel);
    let w = grid.weights();

    if alpha_prime == 0.0 {
        return Ok(CellSolution {
            alpha,
            alpha_prime,
            u_values: vec![0.0; n],
            residual: 0.0,
            vu_integral: 1.0,
            beta: 0.0,
            f_of_beta: 0.0,
        });
    }

    let conv = grid.newton_matrix();
    let u = if n <= DENSE_NODE_LIMIT {
        solve_dense(&conv, &v, alpha_prime)?
    } else {
        solve_cg(&conv, &v, w, alpha_prime, tol)?
    };

    // residual of u + a' * conv(V (1 + u)) at the nodes
    let residual = (0..n)
        .map(|j| {
            let pot: f64 = (0..n).map(|k| conv[j][k] * v[k] * (1.0 + u[k])).sum();
            (u[j] + alpha_prime * pot).abs()
        })
        .fold(0.0f64, f64::max);
    if residual > tol {
        return Err(CoagError::LinearSolve {
            msg: format!("residual {residual:.3e} above tolerance {tol:.1e}"),
            cond: f64::NAN,
        });
    }

    let vu_integral: f64 = (0..n).map(|k| w[k] * v[k] * (1.0 + u[k])).sum();
    Ok(CellSolution {
        alpha,
        alpha_prime,
        u_values: u,
        residual,
        vu_integral,
        beta: alpha * vu_integral,
        f_of_beta: alpha_prime * vu_integral,
    })
}

fn solve_dense(conv: &[Vec<f64>], v: &[f64], alpha_prime: f64) -> Result<Vec<f64>> {
    let n = v.len();
    // (I + A) u = -A 1  with A[j][k] = a' conv[j][k] v[k]
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for j in 0..n {
        let mut row_sum = 0.0;
        for k in 0..n {
            let a = alpha_prime * conv[j][k] * v[k];
            m[(j, k)] = a + if j == k { 1.0 } else { 0.0 };
            row_sum += a;
        }
        rhs[j] = -row_sum;
    }
    let lu = m.lu();
    let upper = lu.u();
    let diag_max = (0..n).map(|i| upper[(i, i)].abs()).fold(0.0f64, f64::max);
    match lu.solve(&rhs) {
        Some(sol) => Ok(sol.iter().copied().collect()),
        None => {
            let diag_min = (0..n)
                .map(|i| upper[(i, i)].abs())
                .fold(f64::INFINITY, f64::min);
            Err(CoagError::LinearSolve {
                msg: "singular discretised operator (id + A)".into(),
                cond: diag_max / diag_min.max(f64::MIN_POSITIVE),
            })
        }
    }
}

/// Conjugate gradient on the symmetrised system: with `psi = 1 + u` and
/// `phi = sqrt(v w) psi`, `(I + a' S) phi = sqrt(v w)` where
/// `S = c0 sqrt(vw) G sqrt(vw)` is symmetric positive semidefinite.
fn solve_cg(
    conv: &[Vec<f64>],
    v: &[f64],
    w: &[f64],
    alpha_prime: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let n = v.len();
    let sq: Vec<f64> = (0..n).map(|k| (v[k] * w[k]).sqrt()).collect();
    // S[j][k] = sq_j * (conv[j][k] / w_k) * sq_k
    let apply = |x: &[f64], out: &mut Vec<f64>| {
        out.clear();
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += conv[j][k] / w[k] * sq[k] * x[k];
            }
            out.push(x[j] + alpha_prime * sq[j] * s);
        }
    };
    let b = sq.clone();
    let mut phi = vec![0.0; n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = Vec::with_capacity(n);
    let mut rs: f64 = r.iter().map(|x| x * x).sum();
    let b_norm = rs.sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..20 * n {
        if rs.sqrt() / b_norm < tol * 1e-3 {
            break;
        }
        apply(&p, &mut ap);
        let denom: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha_cg = rs / denom;
        for k in 0..n {
            phi[k] += alpha_cg * p[k];
            r[k] -= alpha_cg * ap[k];
        }
        let rs_new: f64 = r.iter().map(|x| x * x).sum();
        let beta_cg = rs_new / rs;
        rs = rs_new;
        for k in 0..n {
            p[k] = r[k] + beta_cg * p[k];
        }
    }
    Ok((0..n)
        .map(|k| if sq[k] > 0.0 { phi[k] / sq[k] - 1.0 } else { 0.0 })
        .collect())
}

/// `beta(n, m) = alpha(n, m) \int V (1 + u_{n,m})`.
pub fn compute_beta(
    n: u32,
    m: u32,
    kernel: &KernelV,
    alpha: &crate::model::RatePolicy,
    dd: &crate::model::DiffusionPolicy,
    grid: &CellGrid,
    tol: f64,
) -> Result<f64> {
    let a = alpha.rate(n, m);
    let dd_sum = dd.value(n) + dd.value(m);
    Ok(solve_cell_problem(kernel, a, dd_sum, grid, tol)?.beta)
}

/// The effective-rate curve `F(b) = b \int V (1 + u^b)` over ascending
/// couplings.
pub fn effective_rate_curve(
    kernel: &KernelV,
    grid: &CellGrid,
    beta_params: &[f64],
    tol: f64,
) -> Result<Vec<(f64, f64)>> {
    beta_params
        .iter()
        .map(|&b| {
            if b == 0.0 {
                return Ok((0.0, 0.0));
            }
            let sol = solve_cell_problem(kernel, b, 1.0, grid, tol)?;
            Ok((b, sol.f_of_beta))
        })
        .collect()
}

/// Newtonian capacity of the unit ball, `(d-2) omega_d`.
pub fn capacity_unit_ball(dim: usize) -> f64 {
    assert!(dim >= 3);
    (dim as f64 - 2.0) * sphere_surface_area(dim)
}

/// Reference capacity values for the sets the solvers compare against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapacitySet {
    UnitBall,
    /// Ball of the kernel support radius.
    KernelSupport { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityRef {
    pub set: CapacitySet,
    pub value: f64,
}

impl CapacityRef {
    pub fn new(dim: usize, set: CapacitySet) -> Self {
        let value = match set {
            CapacitySet::UnitBall => capacity_unit_ball(dim),
            CapacitySet::KernelSupport { radius } => {
                capacity_unit_ball(dim) * radius.powi(dim as i32 - 2)
            }
        };
        CapacityRef { set, value }
    }
}

/// Evaluate u anywhere from the integral representation
/// `u(x) = -a' c0 \int |x-y|^{2-d} V (1 + u) dy`.
pub fn eval_u(solution: &CellSolution, kernel: &KernelV, grid: &CellGrid, x: &[f64]) -> f64 {
    if solution.alpha_prime == 0.0 {
        return 0.0;
    }
    let v = grid.kernel_values(kernel);
    let row = grid.newton_row_point(x);
    let pot: f64 = (0..grid.n_nodes())
        .map(|k| row[k] * v[k] * (1.0 + solution.u_values[k]))
        .sum();
    -solution.alpha_prime * pot
}
