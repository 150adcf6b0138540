//! The truncated coagulation system driven by a beta matrix.
//!
//! `df_n/dt = d(n) lap f_n + gain - loss` with
//! `gain(n) = sum_{m=1}^{n-1} beta(m, n-m) f_m f_{n-m}` and
//! `loss(n) = 2 f_n sum_m beta(m, n) f_m`, truncated at `m_max`. Reactions
//! that would produce mass above `m_max` are dropped and their mass rate
//! is integrated into a ledger, so conservation stays testable:
//! `mass(t) + flux(t) = mass(0)` holds to quadrature accuracy.

use crate::cell::{solve_cell_problem, CellGrid};
use crate::error::{CoagError, Result};
use crate::model::{DiffusionPolicy, KernelV, RatePolicy};
use rayon::prelude::*;

/// Symmetric macroscopic rates for 1 <= n, m <= m_max.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaMatrix {
    m_max: u32,
    values: Vec<f64>,
}

impl BetaMatrix {
    /// Build from an arbitrary symmetric rate function; entries with
    /// n <= m are computed and mirrored so symmetry is exact.
    pub fn from_fn<F>(m_max: u32, mut f: F) -> Result<Self>
    where
        F: FnMut(u32, u32) -> Result<f64>,
    {
        let mm = m_max as usize;
        let mut values = vec![0.0; mm * mm];
        for n in 1..=m_max {
            for m in n..=m_max {
                let b = f(n, m)?;
                if b < 0.0 || !b.is_finite() {
                    return Err(CoagError::InvalidParameter(format!(
                        "beta({n}, {m}) = {b} must be finite and nonnegative"
                    )));
                }
                values[(n as usize - 1) * mm + m as usize - 1] = b;
                values[(m as usize - 1) * mm + n as usize - 1] = b;
            }
        }
        Ok(BetaMatrix { m_max, values })
    }

    pub fn constant(m_max: u32, b: f64) -> Self {
        let mm = m_max as usize;
        BetaMatrix {
            m_max,
            values: vec![b; mm * mm],
        }
    }

    pub fn m_max(&self) -> u32 {
        self.m_max
    }

    #[inline]
    pub fn get(&self, n: u32, m: u32) -> f64 {
        debug_assert!(n >= 1 && m >= 1 && n <= self.m_max && m <= self.m_max);
        self.values[(n as usize - 1) * self.m_max as usize + m as usize - 1]
    }

    /// Check every entry against `(d(n) + d(m)) * cap + tol`.
    pub fn check_capacity_bound(&self, dd: &DiffusionPolicy, cap: f64, tol: f64) -> Result<()> {
        for n in 1..=self.m_max {
            for m in 1..=self.m_max {
                let bound = (dd.value(n) + dd.value(m)) * cap + tol;
                let b = self.get(n, m);
                if b > bound {
                    return Err(CoagError::Validation(format!(
                        "beta({n}, {m}) = {b} exceeds capacity bound {bound}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Solve the cell problem for every mass pair up to `m_max`.
///
/// Pairs are solved in parallel; the result is deterministic because the
/// matrix slots are independent.
pub fn beta_matrix(
    m_max: u32,
    kernel: &KernelV,
    alpha: &RatePolicy,
    dd: &DiffusionPolicy,
    grid: &CellGrid,
    tol: f64,
) -> Result<BetaMatrix> {
    let pairs: Vec<(u32, u32)> = (1..=m_max)
        .flat_map(|n| (n..=m_max).map(move |m| (n, m)))
        .collect();
    let solved: Vec<Result<(u32, u32, f64)>> = pairs
        .par_iter()
        .map(|&(n, m)| {
            let a = alpha.rate(n, m);
            let dd_sum = dd.value(n) + dd.value(m);
            let sol = solve_cell_problem(kernel, a, dd_sum, grid, tol)?;
            Ok((n, m, sol.beta))
        })
        .collect();
    let mut table = std::collections::HashMap::new();
    for r in solved {
        let (n, m, b) = r?;
        table.insert((n, m), b);
    }
    BetaMatrix::from_fn(m_max, |n, m| Ok(table[&(n, m)]))
}

/// Boundary handling for the spatial lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Torus,
    ZeroFlux,
}

/// Uniform lattice over a box, `shape[k]` cells along axis k.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub shape: Vec<usize>,
    pub spacing: f64,
    pub boundary: Boundary,
}

impl SpatialGrid {
    pub fn n_cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.shape.len() as i32)
    }

    /// Largest stable explicit diffusion step for the fastest species.
    pub fn max_stable_dt(&self, max_d: f64) -> f64 {
        self.spacing * self.spacing / (2.0 * self.shape.len() as f64 * max_d)
    }
}

/// Running mass accounting: `current mass + truncation flux` should equal
/// the initial mass up to integration error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MassLedger {
    pub initial_mass: f64,
    pub truncation_flux: f64,
    /// Mass removed by clipping tiny negative values to zero.
    pub clipped_mass: f64,
}

/// State of the truncated system, homogeneous (one value per mass) or
/// spatial (one lattice field per mass).
#[derive(Debug, Clone, PartialEq)]
pub struct MacroField {
    pub m_max: u32,
    pub grid: Option<SpatialGrid>,
    /// `f[n - 1]` is the mass-n density; inner length 1 when homogeneous.
    pub f: Vec<Vec<f64>>,
    pub t: f64,
    pub ledger: MassLedger,
}

impl MacroField {
    pub fn homogeneous(m_max: u32, f0: &[f64]) -> Result<Self> {
        if f0.len() != m_max as usize {
            return Err(CoagError::InvalidParameter(format!(
                "need {m_max} initial densities, got {}",
                f0.len()
            )));
        }
        if f0.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(CoagError::InvalidParameter(
                "initial densities must be finite and nonnegative".into(),
            ));
        }
        let mut field = MacroField {
            m_max,
            grid: None,
            f: f0.iter().map(|&v| vec![v]).collect(),
            t: 0.0,
            ledger: MassLedger::default(),
        };
        field.ledger.initial_mass = field.total_mass();
        Ok(field)
    }

    pub fn spatial(m_max: u32, grid: SpatialGrid, f0: Vec<Vec<f64>>) -> Result<Self> {
        let nc = grid.n_cells();
        if f0.len() != m_max as usize || f0.iter().any(|g| g.len() != nc) {
            return Err(CoagError::InvalidParameter(
                "initial fields must hold m_max grids of matching size".into(),
            ));
        }
        if f0.iter().flatten().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(CoagError::InvalidParameter(
                "initial densities must be finite and nonnegative".into(),
            ));
        }
        let mut field = MacroField {
            m_max,
            grid: Some(grid),
            f: f0,
            t: 0.0,
            ledger: MassLedger::default(),
        };
        field.ledger.initial_mass = field.total_mass();
        Ok(field)
    }

    pub fn n_cells(&self) -> usize {
        self.grid.as_ref().map_or(1, |g| g.n_cells())
    }

    /// Total mass: `sum_n n f_n` in homogeneous mode, `sum_n n int f_n`
    /// in spatial mode.
    pub fn total_mass(&self) -> f64 {
        let w = self.grid.as_ref().map_or(1.0, |g| g.cell_volume());
        self.f
            .iter()
            .enumerate()
            .map(|(i, g)| (i + 1) as f64 * g.iter().sum::<f64>() * w)
            .sum()
    }

    /// Conservation defect `|mass + flux + clipped - initial| / initial`.
    pub fn conservation_defect(&self) -> f64 {
        let m0 = self.ledger.initial_mass;
        ((self.total_mass() + self.ledger.truncation_flux + self.ledger.clipped_mass) - m0)
            .abs()
            / m0.max(f64::MIN_POSITIVE)
    }

    /// Densities at one cell, as a contiguous per-mass slice.
    fn point(&self, cell: usize) -> Vec<f64> {
        self.f.iter().map(|g| g[cell]).collect()
    }
}

/// `sum_{m=1}^{n-1} beta(m, n-m) f_m f_{n-m}` (the absent f_0 makes the
/// nominal m = n term vanish).
pub fn gain(f: &[f64], beta: &BetaMatrix, n: u32) -> f64 {
    let mut s = 0.0;
    for m in 1..n {
        s += beta.get(m, n - m) * f[m as usize - 1] * f[(n - m) as usize - 1];
    }
    s
}

/// `2 f_n sum_{m=1}^{m_max} beta(m, n) f_m`.
pub fn loss(f: &[f64], beta: &BetaMatrix, n: u32) -> f64 {
    let mut s = 0.0;
    for m in 1..=beta.m_max() {
        s += beta.get(m, n) * f[m as usize - 1];
    }
    2.0 * f[n as usize - 1] * s
}

/// Mass rate leaving the truncated system: reactions with a + b > m_max
/// would create mass a + b and are dropped.
pub fn truncation_flux_rate(f: &[f64], beta: &BetaMatrix) -> f64 {
    let mm = beta.m_max();
    let mut s = 0.0;
    for a in 1..=mm {
        for b in (mm + 1 - a).max(1)..=mm {
            if a + b > mm {
                s += (a + b) as f64 * beta.get(a, b) * f[a as usize - 1] * f[b as usize - 1];
            }
        }
    }
    s
}

/// Reaction right-hand side at one point, plus the flux rate as the last
/// component so mass accounting shares the integrator's accuracy.
fn reaction_rhs(f: &[f64], beta: &BetaMatrix, out: &mut [f64]) {
    let mm = beta.m_max();
    for n in 1..=mm {
        out[n as usize - 1] = gain(f, beta, n) - loss(f, beta, n);
    }
    out[mm as usize] = truncation_flux_rate(f, beta);
}

const STAGE_NEGATIVITY_FACTOR: f64 = 1e-12;
const MAX_STEP_HALVINGS: u32 = 40;
pub const CLIP_BUDGET: f64 = 1e-9;

/// One classical RK4 step of the reaction system at a single point.
/// Returns the new densities and the flux increment, or None if an
/// intermediate stage went negative beyond the tolerance band.
fn rk4_reaction_point(f: &[f64], beta: &BetaMatrix, dt: f64) -> Option<(Vec<f64>, f64)> {
    let nm = f.len();
    let norm = f.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let floor = -STAGE_NEGATIVITY_FACTOR * norm;
    let mut k1 = vec![0.0; nm + 1];
    let mut k2 = vec![0.0; nm + 1];
    let mut k3 = vec![0.0; nm + 1];
    let mut k4 = vec![0.0; nm + 1];
    let stage = |k: &[f64], c: f64| -> Option<Vec<f64>> {
        let s: Vec<f64> = (0..nm).map(|i| f[i] + c * dt * k[i]).collect();
        if s.iter().any(|&v| v < floor) {
            None
        } else {
            Some(s)
        }
    };
    reaction_rhs(f, beta, &mut k1);
    let s = stage(&k1, 0.5)?;
    reaction_rhs(&s, beta, &mut k2);
    let s = stage(&k2, 0.5)?;
    reaction_rhs(&s, beta, &mut k3);
    let s = stage(&k3, 1.0)?;
    reaction_rhs(&s, beta, &mut k4);
    let mut out = Vec::with_capacity(nm);
    for i in 0..nm {
        let v = f[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        if v < floor {
            return None;
        }
        out.push(v);
    }
    let flux = dt / 6.0 * (k1[nm] + 2.0 * k2[nm] + 2.0 * k3[nm] + k4[nm]);
    Some((out, flux))
}

/// Reaction step over the whole field with step halving on negative
/// stages; clips residual negative round-off and logs it.
fn reaction_step(state: &mut MacroField, beta: &BetaMatrix, dt: f64, depth: u32) -> Result<()> {
    let w = state.grid.as_ref().map_or(1.0, |g| g.cell_volume());
    let cells = state.n_cells();
    let mut results: Vec<(Vec<f64>, f64)> = Vec::with_capacity(cells);
    let mut ok = true;
    for c in 0..cells {
        match rk4_reaction_point(&state.point(c), beta, dt) {
            Some(r) => results.push(r),
            None => {
                ok = false;
                break;
            }
        }
    }
    if !ok {
        if depth >= MAX_STEP_HALVINGS {
            return Err(CoagError::Simulation(
                "reaction step underflow: stages stay negative after halving".into(),
            ));
        }
        reaction_step(state, beta, 0.5 * dt, depth + 1)?;
        reaction_step(state, beta, 0.5 * dt, depth + 1)?;
        return Ok(());
    }
    for (c, (vals, flux)) in results.into_iter().enumerate() {
        for (n, v) in vals.into_iter().enumerate() {
            if v < 0.0 {
                state.ledger.clipped_mass += (n + 1) as f64 * (-v) * w;
                state.f[n][c] = 0.0;
            } else {
                state.f[n][c] = v;
            }
        }
        state.ledger.truncation_flux += flux * w;
    }
    Ok(())
}

/// Discrete Laplacian times dt added in place: second-order central
/// differences on the lattice, torus wrap or zero-flux mirror.
fn diffusion_step(field: &mut [f64], grid: &SpatialGrid, coeff_dt: f64) {
    let shape = &grid.shape;
    let dim = shape.len();
    let n = field.len();
    let mut strides = vec![1usize; dim];
    for k in (0..dim.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let h2 = grid.spacing * grid.spacing;
    let scale = coeff_dt / h2;
    let prev = field.to_vec();
    let mut idx = vec![0usize; dim];
    for (lin, cell) in field.iter_mut().enumerate().take(n) {
        let mut lap = 0.0;
        for k in 0..dim {
            let s = shape[k];
            let i = idx[k];
            let (lo, hi) = match grid.boundary {
                Boundary::Torus => (
                    lin + strides[k] * ((i + s - 1) % s) - strides[k] * i,
                    lin + strides[k] * ((i + 1) % s) - strides[k] * i,
                ),
                Boundary::ZeroFlux => (
                    lin - strides[k] * (i - i.saturating_sub(1)),
                    lin + strides[k] * (if i + 1 < s { 1 } else { 0 }),
                ),
            };
            lap += prev[lo] + prev[hi] - 2.0 * prev[lin];
        }
        *cell += scale * lap;
        // odometer for the multi-index
        for k in (0..dim).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// One RK4 reaction step of the homogeneous system.
pub fn step_homogeneous(state: &mut MacroField, beta: &BetaMatrix, dt: f64) -> Result<()> {
    if state.grid.is_some() {
        return Err(CoagError::InvalidParameter(
            "step_homogeneous on a spatial field".into(),
        ));
    }
    if !(dt > 0.0) {
        return Err(CoagError::InvalidParameter("dt must be positive".into()));
    }
    reaction_step(state, beta, dt, 0)?;
    state.t += dt;
    Ok(())
}

/// One Strang-split step: half reaction, full diffusion, half reaction.
pub fn step_spatial(
    state: &mut MacroField,
    beta: &BetaMatrix,
    dd: &DiffusionPolicy,
    dt: f64,
) -> Result<()> {
    let grid = state
        .grid
        .clone()
        .ok_or_else(|| CoagError::InvalidParameter("step_spatial needs a lattice".into()))?;
    if !(dt > 0.0) {
        return Err(CoagError::InvalidParameter("dt must be positive".into()));
    }
    let max_d = (1..=state.m_max).map(|n| dd.value(n)).fold(0.0, f64::max);
    if dt > grid.max_stable_dt(max_d) * (1.0 + 1e-12) {
        return Err(CoagError::InvalidParameter(format!(
            "dt {dt} violates the diffusion stability bound {}",
            grid.max_stable_dt(max_d)
        )));
    }
    reaction_step(state, beta, 0.5 * dt, 0)?;
    for n in 1..=state.m_max {
        diffusion_step(&mut state.f[n as usize - 1], &grid, dd.value(n) * dt);
    }
    reaction_step(state, beta, 0.5 * dt, 0)?;
    state.t += dt;
    Ok(())
}

/// March to `horizon` with nominal step `dt`, recording a snapshot at
/// each requested time (hit exactly by shortening steps).
pub fn solve(
    state: &mut MacroField,
    beta: &BetaMatrix,
    dd: Option<&DiffusionPolicy>,
    horizon: f64,
    dt: f64,
    snapshot_times: &[f64],
) -> Result<Vec<MacroField>> {
    if horizon < 0.0 || !(dt > 0.0) {
        return Err(CoagError::InvalidParameter(
            "horizon must be nonnegative and dt positive".into(),
        ));
    }
    if state.grid.is_some() && dd.is_none() {
        return Err(CoagError::InvalidParameter(
            "spatial mode needs diffusion rates".into(),
        ));
    }
    let mut marks: Vec<f64> = snapshot_times
        .iter()
        .copied()
        .filter(|&s| s >= state.t && s <= horizon)
        .collect();
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut snapshots = Vec::new();
    let mut next_mark = 0usize;
    let t_end = horizon;
    loop {
        while next_mark < marks.len() && state.t >= marks[next_mark] - 1e-12 * t_end.max(1.0) {
            snapshots.push(state.clone());
            next_mark += 1;
        }
        if state.t >= t_end - 1e-12 * t_end.max(1.0) {
            break;
        }
        let mut step = dt.min(t_end - state.t);
        if next_mark < marks.len() {
            step = step.min(marks[next_mark] - state.t);
        }
        match (&state.grid, dd) {
            (None, _) => step_homogeneous(state, beta, step)?,
            (Some(_), Some(dd)) => step_spatial(state, beta, dd, step)?,
            (Some(_), None) => unreachable!(),
        }
    }
    while next_mark < marks.len() {
        snapshots.push(state.clone());
        next_mark += 1;
    }
    Ok(snapshots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_beta(m_max: u32, seed: u64) -> BetaMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = vec![vec![0.0; m_max as usize]; m_max as usize];
        for n in 0..m_max as usize {
            for m in n..m_max as usize {
                let v = rng.gen_range(0.0..2.0);
                raw[n][m] = v;
                raw[m][n] = v;
            }
        }
        BetaMatrix::from_fn(m_max, |n, m| Ok(raw[n as usize - 1][m as usize - 1])).unwrap()
    }

    #[test]
    fn beta_matrix_symmetry_and_rejects() {
        let b = random_beta(8, 7);
        for n in 1..=8 {
            for m in 1..=8 {
                assert_eq!(b.get(n, m), b.get(m, n));
            }
        }
        assert!(BetaMatrix::from_fn(3, |_, _| Ok(-1.0)).is_err());
    }

    #[test]
    fn gain_loss_match_brute_force() {
        let beta = random_beta(12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.5)).collect();
        // brute force with explicit index arithmetic
        let n = 6u32;
        let mut g = 0.0;
        for m in 1..=n {
            let rest = n - m;
            if rest >= 1 {
                g += beta.get(m, rest) * f[m as usize - 1] * f[rest as usize - 1];
            }
        }
        assert_relative_eq!(gain(&f, &beta, n), g, max_relative = 1e-14);
        let mut l = 0.0;
        for m in 1..=12u32 {
            l += beta.get(m, n) * f[m as usize - 1];
        }
        l *= 2.0 * f[n as usize - 1];
        assert_relative_eq!(loss(&f, &beta, n), l, max_relative = 1e-14);
    }

    #[test]
    fn monodisperse_single_terms() {
        let beta = BetaMatrix::constant(5, 0.7);
        let f = [3.0, 0.0, 0.0, 0.0, 0.0];
        assert_relative_eq!(gain(&f, &beta, 2), 0.7 * 9.0, max_relative = 1e-14);
        assert_relative_eq!(loss(&f, &beta, 1), 2.0 * 0.7 * 9.0, max_relative = 1e-14);
        assert_eq!(gain(&f, &beta, 3), 0.0);
    }

    #[test]
    fn mass_rate_identity_with_symmetric_beta() {
        // sum_n n (gain - loss) + flux rate = 0 pointwise
        let beta = random_beta(10, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut drift = 0.0;
        for n in 1..=10u32 {
            drift += n as f64 * (gain(&f, &beta, n) - loss(&f, &beta, n));
        }
        let flux = truncation_flux_rate(&f, &beta);
        assert!(
            (drift + flux).abs() <= 1e-10 * f.iter().sum::<f64>().max(1.0),
            "drift {drift} flux {flux}"
        );
    }

    #[test]
    fn zero_beta_is_identity() {
        let beta = BetaMatrix::constant(4, 0.0);
        let mut state = MacroField::homogeneous(4, &[1.0, 0.5, 0.2, 0.1]).unwrap();
        let before = state.f.clone();
        step_homogeneous(&mut state, &beta, 0.25).unwrap();
        assert_eq!(state.f, before);
        assert_eq!(state.ledger.truncation_flux, 0.0);
    }

    /// Independent adaptive Runge-Kutta-Fehlberg 4(5) oracle, used only
    /// by tests.
    fn rkf45_oracle(
        f0: &[f64],
        beta: &BetaMatrix,
        t_end: f64,
        tol: f64,
    ) -> Vec<f64> {
        let nm = f0.len();
        let rhs = |f: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; nm + 1];
            reaction_rhs(f, beta, &mut out);
            out.truncate(nm);
            out
        };
        let a = [
            vec![],
            vec![0.25],
            vec![3.0 / 32.0, 9.0 / 32.0],
            vec![1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0],
            vec![439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0],
            vec![
                -8.0 / 27.0,
                2.0,
                -3544.0 / 2565.0,
                1859.0 / 4104.0,
                -11.0 / 40.0,
            ],
        ];
        let b5 = [
            16.0 / 135.0,
            0.0,
            6656.0 / 12825.0,
            28561.0 / 56430.0,
            -9.0 / 50.0,
            2.0 / 55.0,
        ];
        let b4 = [
            25.0 / 216.0,
            0.0,
            1408.0 / 2565.0,
            2197.0 / 4104.0,
            -1.0 / 5.0,
            0.0,
        ];
        let mut y = f0.to_vec();
        let mut t = 0.0;
        let mut h = t_end / 100.0;
        while t < t_end {
            h = h.min(t_end - t);
            let mut k: Vec<Vec<f64>> = Vec::with_capacity(6);
            for s in 0..6 {
                let mut ys = y.clone();
                for (j, &c) in a[s].iter().enumerate() {
                    for i in 0..nm {
                        ys[i] += h * c * k[j][i];
                    }
                }
                k.push(rhs(&ys).iter().map(|v| *v).collect());
            }
            let mut err: f64 = 0.0;
            let mut y5 = y.clone();
            for i in 0..nm {
                let mut d5 = 0.0;
                let mut d4 = 0.0;
                for s in 0..6 {
                    d5 += b5[s] * k[s][i];
                    d4 += b4[s] * k[s][i];
                }
                y5[i] += h * d5;
                err = err.max((h * (d5 - d4)).abs());
            }
            if err <= tol || h < 1e-12 {
                y = y5;
                t += h;
            }
            let scale = if err > 0.0 {
                0.9 * (tol / err).powf(0.2)
            } else {
                2.0
            };
            h *= scale.clamp(0.2, 2.0);
        }
        y
    }

    #[test]
    fn rk4_matches_adaptive_oracle() {
        let m_max = 20u32;
        let beta = BetaMatrix::constant(m_max, 1.0);
        let mut f0 = vec![0.0; m_max as usize];
        f0[0] = 1.0;
        let mut state = MacroField::homogeneous(m_max, &f0).unwrap();
        solve(&mut state, &beta, None, 1.0, 1e-3, &[]).unwrap();
        let oracle = rkf45_oracle(&f0, &beta, 1.0, 1e-10);
        let sup = state
            .f
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a[0] - b).abs())
            .fold(0.0f64, f64::max);
        assert!(sup <= 1e-6, "sup deviation {sup:.3e}");
    }

    #[test]
    fn richardson_ratio_is_fourth_order() {
        let m_max = 10u32;
        let beta = BetaMatrix::constant(m_max, 1.0);
        let mut f0 = vec![0.0; m_max as usize];
        f0[0] = 1.0;
        let run = |dt: f64| {
            let mut s = MacroField::homogeneous(m_max, &f0).unwrap();
            solve(&mut s, &beta, None, 0.5, dt, &[]).unwrap();
            s.f.iter().map(|g| g[0]).collect::<Vec<f64>>()
        };
        let reference = rkf45_oracle(&f0, &beta, 0.5, 1e-13);
        let err = |dt: f64| {
            run(dt)
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        };
        let e1 = err(0.02);
        let e2 = err(0.01);
        let ratio = e1 / e2;
        // observed order >= 3.8 means ratio >= 2^3.8 ~ 13.9
        assert!(ratio >= 13.9, "Richardson ratio {ratio}");
    }

    #[test]
    fn homogeneous_mass_conserved_with_flux() {
        let m_max = 15u32;
        let beta = random_beta(m_max, 9);
        let mut f0 = vec![0.0; m_max as usize];
        f0[0] = 1.5;
        f0[2] = 0.4;
        let mut state = MacroField::homogeneous(m_max, &f0).unwrap();
        solve(&mut state, &beta, None, 1.0, 1e-3, &[]).unwrap();
        assert!(state.ledger.truncation_flux > 0.0);
        assert!(
            state.conservation_defect() <= 1e-6,
            "defect {:.3e}",
            state.conservation_defect()
        );
        assert!(state.ledger.clipped_mass <= 1e-9 * state.ledger.initial_mass);
    }

    #[test]
    fn spatial_constant_data_matches_homogeneous() {
        let m_max = 6u32;
        let beta = random_beta(m_max, 13);
        let dd = DiffusionPolicy::Constant(0.3);
        let grid = SpatialGrid {
            shape: vec![8, 8],
            spacing: 0.5,
            boundary: Boundary::Torus,
        };
        let f0: Vec<f64> = (1..=m_max).map(|n| 1.0 / n as f64).collect();
        let fields: Vec<Vec<f64>> = f0.iter().map(|&v| vec![v; grid.n_cells()]).collect();
        let mut spatial = MacroField::spatial(m_max, grid.clone(), fields).unwrap();
        let mut homo = MacroField::homogeneous(m_max, &f0).unwrap();
        let dt = grid.max_stable_dt(0.3) * 0.9;
        for _ in 0..20 {
            step_spatial(&mut spatial, &beta, &dd, dt).unwrap();
            // match the Strang halves exactly
            step_homogeneous(&mut homo, &beta, 0.5 * dt).unwrap();
            step_homogeneous(&mut homo, &beta, 0.5 * dt).unwrap();
        }
        let mut max_dev: f64 = 0.0;
        for n in 0..m_max as usize {
            for c in 0..spatial.n_cells() {
                max_dev = max_dev.max((spatial.f[n][c] - homo.f[n][0]).abs());
            }
        }
        assert!(max_dev <= 1e-9, "deviation {max_dev:.3e}");
    }

    #[test]
    fn diffusion_step_matches_heat_kernel() {
        // single species, beta = 0, periodic Gaussian on a 3d torus
        let side = 8.0;
        let cells = 64usize;
        let grid = SpatialGrid {
            shape: vec![cells, cells, cells],
            spacing: side / cells as f64,
            boundary: Boundary::Torus,
        };
        let d0 = 1.0;
        let sigma0: f64 = 0.5;
        let t_end = 0.1;
        let gauss = |x: f64, y: f64, z: f64, sig2: f64| {
            // wrapped Gaussian; images beyond +-1 are negligible here
            let mut v = 0.0;
            for ix in -1..=1 {
                for iy in -1..=1 {
                    for iz in -1..=1 {
                        let dx = x + ix as f64 * side;
                        let dy = y + iy as f64 * side;
                        let dz = z + iz as f64 * side;
                        v += (-(dx * dx + dy * dy + dz * dz) / (2.0 * sig2)).exp();
                    }
                }
            }
            v / (2.0 * std::f64::consts::PI * sig2).powf(1.5)
        };
        let coord = |i: usize| (i as f64 + 0.5) * grid.spacing - side / 2.0;
        let mut field = vec![0.0; grid.n_cells()];
        let mut idx = 0;
        for i in 0..cells {
            for j in 0..cells {
                for k in 0..cells {
                    field[idx] = gauss(coord(i), coord(j), coord(k), sigma0 * sigma0);
                    idx += 1;
                }
            }
        }
        let dt = grid.max_stable_dt(d0) * 0.9;
        let mut t = 0.0;
        while t < t_end - 1e-12 {
            let step = dt.min(t_end - t);
            diffusion_step(&mut field, &grid, d0 * step);
            t += step;
        }
        // exact solution: variance grows by 2 d t per coordinate
        let sig2 = sigma0 * sigma0 + 2.0 * d0 * t_end;
        let mut l2 = 0.0;
        let mut norm = 0.0;
        idx = 0;
        for i in 0..cells {
            for j in 0..cells {
                for k in 0..cells {
                    let exact = gauss(coord(i), coord(j), coord(k), sig2);
                    l2 += (field[idx] - exact).powi(2);
                    norm += exact * exact;
                    idx += 1;
                }
            }
        }
        let rel = (l2 / norm).sqrt();
        // dominated by the O(h^2) spatial truncation at this resolution
        assert!(rel <= 3e-3, "heat kernel L2 error {rel:.3e}");
    }

    #[test]
    fn spatial_order_in_grid_spacing() {
        // refine h at fixed small dt; error against a fine-grid reference
        // should drop by about 4 per halving (second order)
        let side = 4.0;
        let d0 = 1.0;
        let t_end = 0.05;
        let sigma0: f64 = 0.4;
        let run = |cells: usize| {
            let grid = SpatialGrid {
                shape: vec![cells, cells],
                spacing: side / cells as f64,
                boundary: Boundary::Torus,
            };
            let coord = |i: usize| (i as f64 + 0.5) * grid.spacing - side / 2.0;
            let mut field = vec![0.0; grid.n_cells()];
            let mut idx = 0;
            for i in 0..cells {
                for j in 0..cells {
                    let (x, y) = (coord(i), coord(j));
                    field[idx] = (-(x * x + y * y) / (2.0 * sigma0 * sigma0)).exp();
                    idx += 1;
                }
            }
            let dt: f64 = 2.5e-5;
            let mut t = 0.0;
            while t < t_end - 1e-12 {
                let s = dt.min(t_end - t);
                diffusion_step(&mut field, &grid, d0 * s);
                t += s;
            }
            (grid, field)
        };
        let errs: Vec<f64> = [16usize, 32, 64]
            .iter()
            .map(|&cells| {
                let (grid, field) = run(cells);
                let coord = |i: usize| (i as f64 + 0.5) * grid.spacing - side / 2.0;
                let sig2 = sigma0 * sigma0 + 2.0 * d0 * t_end;
                let mut sup: f64 = 0.0;
                let mut idx = 0;
                let amp = sigma0 * sigma0 / sig2;
                for i in 0..cells {
                    for j in 0..cells {
                        let (x, y) = (coord(i), coord(j));
                        let exact = amp * (-(x * x + y * y) / (2.0 * sig2)).exp();
                        sup = sup.max((field[idx] - exact).abs());
                        idx += 1;
                    }
                }
                sup
            })
            .collect();
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        // the coarse pair is pre-asymptotic; the fine pair must show
        // clean second order
        assert!(
            order1 >= 1.7 && order2 >= 1.9,
            "observed orders {order1:.2} {order2:.2} (errors {errs:?})"
        );
    }

    #[test]
    fn spatial_mass_conserved() {
        let m_max = 5u32;
        let beta = random_beta(m_max, 31);
        let dd = DiffusionPolicy::Power {
            coeff: 0.2,
            exponent: -0.5,
        };
        let grid = SpatialGrid {
            shape: vec![12, 12],
            spacing: 0.4,
            boundary: Boundary::Torus,
        };
        let nc = grid.n_cells();
        let mut fields = vec![vec![0.0; nc]; m_max as usize];
        for (c, v) in fields[0].iter_mut().enumerate() {
            *v = 1.0 + 0.5 * ((c % 12) as f64 * 0.5).sin();
        }
        let mut state = MacroField::spatial(m_max, grid.clone(), fields).unwrap();
        let dt = grid.max_stable_dt(0.2) * 0.8;
        let mut t = 0.0;
        while t < 1.0 {
            let s = dt.min(1.0 - t);
            step_spatial(&mut state, &beta, &dd, s).unwrap();
            t += s;
        }
        assert!(
            state.conservation_defect() <= 1e-6,
            "defect {:.3e}",
            state.conservation_defect()
        );
    }

    #[test]
    fn solve_snapshots_and_t_zero() {
        let beta = BetaMatrix::constant(3, 1.0);
        let mut state = MacroField::homogeneous(3, &[1.0, 0.0, 0.0]).unwrap();
        let snaps = solve(&mut state, &beta, None, 0.0, 0.1, &[0.0]).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].f, state.f);
        let mut state = MacroField::homogeneous(3, &[1.0, 0.0, 0.0]).unwrap();
        let snaps = solve(&mut state, &beta, None, 1.0, 0.013, &[0.3, 0.7, 1.0]).unwrap();
        assert_eq!(snaps.len(), 3);
        assert_relative_eq!(snaps[0].t, 0.3, epsilon = 1e-9);
        assert_relative_eq!(snaps[1].t, 0.7, epsilon = 1e-9);
        assert_relative_eq!(snaps[2].t, 1.0, epsilon = 1e-9);
        // snapshot times are hit exactly, so interpolation bias is absent
        let oracle = rkf45_oracle(&[1.0, 0.0, 0.0], &beta, 0.3, 1e-12);
        assert!((snaps[0].f[0][0] - oracle[0]).abs() <= 1e-8);
    }

    #[test]
    fn capacity_bound_check() {
        let dd = DiffusionPolicy::Constant(0.5);
        let cap = 4.0 * std::f64::consts::PI;
        let ok = BetaMatrix::constant(4, 1.0);
        assert!(ok.check_capacity_bound(&dd, cap, 1e-6).is_ok());
        let bad = BetaMatrix::constant(4, 13.0);
        assert!(bad.check_capacity_bound(&dd, cap, 1e-6).is_err());
    }
}
