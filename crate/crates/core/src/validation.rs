//! Quantitative links between the three solvers: functional comparison of
//! particle snapshots against the truncated system, the pair-propensity
//! consistency check, the effective-rate discrimination experiment, and
//! the collision-propensity audit.

use crate::error::{CoagError, Result};
use crate::micro::{empirical_density, Configuration, DensityGrid, TrajectoryStats};
use crate::model::Domain;
use crate::numeric::{linear_fit, mean_sem};
use crate::pde::MacroField;
use rand::Rng;

/// Bounded continuous spatial test function in closed form.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunctional {
    Constant(f64),
    /// Product over axes of a C^1 ramp: 1 inside the box shrunk by the
    /// smoothing width, 0 outside the box, cubic blend in between.
    SmoothedBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
        smoothing: f64,
    },
    /// `exp(-|x - center|^2 / (2 sigma^2))`, torus-aware.
    GaussianBump { center: Vec<f64>, sigma: f64 },
}

impl TestFunctional {
    pub fn eval(&self, x: &[f64], domain: &Domain) -> f64 {
        match self {
            TestFunctional::Constant(c) => *c,
            TestFunctional::SmoothedBox { lo, hi, smoothing } => {
                let mut v = 1.0;
                for k in 0..x.len() {
                    // distance inward from the nearer face
                    let depth = (x[k] - lo[k]).min(hi[k] - x[k]);
                    if depth <= 0.0 {
                        return 0.0;
                    }
                    if depth < *smoothing {
                        let s = depth / smoothing;
                        v *= s * s * (3.0 - 2.0 * s);
                    }
                }
                v
            }
            TestFunctional::GaussianBump { center, sigma } => {
                let d2 = domain.dist2(x, center);
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            TestFunctional::Constant(c) => c.abs(),
            _ => 1.0,
        }
    }
}

/// One (mass, time) row of the micro/macro functional comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub mass: u32,
    pub t: f64,
    pub micro_value: f64,
    pub macro_value: f64,
    pub abs_error: f64,
    /// Standard error of the replica mean of the micro value.
    pub replica_spread: f64,
    pub n_replicas: usize,
}

/// `eps^{d-2} sum J(x_i)` over mass-n particles.
pub fn micro_functional(cfg: &Configuration, j: &TestFunctional, n: u32) -> f64 {
    let scale = cfg.epsilon.powi(cfg.dim as i32 - 2);
    let mut s = 0.0;
    for i in 0..cfg.n() {
        if cfg.masses[i] == n {
            s += j.eval(cfg.pos(i), &cfg.domain);
        }
    }
    scale * s
}

/// `int J f_n dx` by midpoint quadrature over the field's own lattice.
/// Homogeneous fields do not record a dimension, so they go through
/// `macro_functional_dim` instead.
pub fn macro_functional(
    field: &MacroField,
    j: &TestFunctional,
    n: u32,
    domain: &Domain,
) -> Result<f64> {
    if n == 0 || n > field.m_max {
        return Err(CoagError::InvalidParameter(format!(
            "mass {n} outside 1..={}",
            field.m_max
        )));
    }
    let g = &field.f[n as usize - 1];
    let grid = field.grid.as_ref().ok_or_else(|| {
        CoagError::Validation("homogeneous field: use macro_functional_dim".into())
    })?;
    let dim = grid.shape.len();
    let w = grid.cell_volume();
    let mut s = 0.0;
    let mut idx = vec![0usize; dim];
    for (cell, &f_val) in g.iter().enumerate() {
        let mut rest = cell;
        for k in (0..dim).rev() {
            idx[k] = rest % grid.shape[k];
            rest /= grid.shape[k];
        }
        let x: Vec<f64> = idx
            .iter()
            .map(|&i| (i as f64 + 0.5) * grid.spacing)
            .collect();
        s += f_val * j.eval(&x, domain);
    }
    Ok(s * w)
}

/// Compare replica micro snapshots at one time against the macroscopic
/// field for one mass.
pub fn micro_macro_functional_gap(
    snapshots: &[&Configuration],
    field: &MacroField,
    j: &TestFunctional,
    n: u32,
    time_tol: f64,
) -> Result<ComparisonRow> {
    if snapshots.is_empty() {
        return Err(CoagError::Validation("no replica snapshots".into()));
    }
    let t0 = snapshots[0].time;
    let dim = snapshots[0].dim;
    let eps = snapshots[0].epsilon;
    for cfg in snapshots {
        if (cfg.time - t0).abs() > time_tol || cfg.dim != dim || cfg.epsilon != eps {
            return Err(CoagError::Validation(
                "replica snapshots disagree on (t, d, epsilon)".into(),
            ));
        }
    }
    if (field.t - t0).abs() > time_tol {
        return Err(CoagError::Validation(format!(
            "macro field at t = {} but snapshots at t = {t0}",
            field.t
        )));
    }
    let micro: Vec<f64> = snapshots.iter().map(|c| micro_functional(c, j, n)).collect();
    let (micro_mean, sem) = mean_sem(&micro);
    let macro_value = macro_functional_dim(field, j, n, &snapshots[0].domain, dim)?;
    Ok(ComparisonRow {
        mass: n,
        t: t0,
        micro_value: micro_mean,
        macro_value,
        abs_error: (micro_mean - macro_value).abs(),
        replica_spread: sem,
        n_replicas: snapshots.len(),
    })
}

/// `macro_functional` with the dimension supplied explicitly (needed in
/// homogeneous mode, where no lattice records it).
pub fn macro_functional_dim(
    field: &MacroField,
    j: &TestFunctional,
    n: u32,
    domain: &Domain,
    dim: usize,
) -> Result<f64> {
    if field.grid.is_some() {
        return macro_functional(field, j, n, domain);
    }
    if n == 0 || n > field.m_max {
        return Err(CoagError::InvalidParameter(format!(
            "mass {n} outside 1..={}",
            field.m_max
        )));
    }
    let g = &field.f[n as usize - 1];
    let side = match domain {
        Domain::Torus { side } => *side,
        Domain::FreeSpace => {
            return Err(CoagError::Validation(
                "homogeneous comparison needs a finite-volume domain".into(),
            ))
        }
    };
    match j {
        TestFunctional::Constant(c) => Ok(c * g[0] * side.powi(dim as i32)),
        _ => {
            let grid = DensityGrid::torus(side, dim, 32);
            let w = grid.spacing.powi(dim as i32);
            let mut s = 0.0;
            for lin in 0..grid.n_points() {
                s += j.eval(&grid.point(lin), domain);
            }
            Ok(g[0] * s * w)
        }
    }
}

/// Result of the pair-propensity consistency check.
#[derive(Debug, Clone, PartialEq)]
pub struct StossReport {
    /// Time integral of the sampled pair statistic.
    pub lhs: f64,
    /// `beta int int f^delta_{M1} J f^delta_{M2} Jbar dx dt`.
    pub rhs: f64,
    pub rel_gap: f64,
    pub delta: f64,
}

/// Trapezoid rule over an ordered (t, value) series.
fn trapezoid(series: &[(f64, f64)]) -> f64 {
    series
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum()
}

/// Compare the integrated pair statistic against its mean-field value
/// built from mollified one-particle densities.
#[allow(clippy::too_many_arguments)]
pub fn stosszahlansatz_check(
    snapshots: &[Configuration],
    q_series: &[(f64, f64)],
    beta: f64,
    m1: u32,
    m2: u32,
    j: &TestFunctional,
    jbar: &TestFunctional,
    delta: f64,
    grid: &DensityGrid,
) -> Result<StossReport> {
    if snapshots.len() < 2 || q_series.len() < 2 {
        return Err(CoagError::Validation(
            "need at least two snapshots and two pair-statistic samples".into(),
        ));
    }
    let lhs = trapezoid(q_series);
    let dim = snapshots[0].dim;
    let w = grid.spacing.powi(dim as i32);
    let domain = &snapshots[0].domain;
    let mut spatial: Vec<(f64, f64)> = Vec::with_capacity(snapshots.len());
    for cfg in snapshots {
        let f1 = empirical_density(cfg, m1, delta, grid);
        let f2 = if m2 == m1 {
            f1.clone()
        } else {
            empirical_density(cfg, m2, delta, grid)
        };
        let mut s = 0.0;
        for lin in 0..grid.n_points() {
            let x = grid.point(lin);
            s += f1[lin] * j.eval(&x, domain) * f2[lin] * jbar.eval(&x, domain);
        }
        spatial.push((cfg.time, s * w));
    }
    let rhs = beta * trapezoid(&spatial);
    let denom = lhs.abs().max(rhs.abs());
    let rel_gap = if denom == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / denom
    };
    Ok(StossReport {
        lhs,
        rhs,
        rel_gap,
        delta,
    })
}

/// Default mollification width, the geometric mean of the microscopic
/// range and the domain size.
pub fn default_delta(epsilon: f64, side: f64) -> f64 {
    (epsilon * side).sqrt()
}

/// Outcome of the effective-rate discrimination experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFitReport {
    pub c_fit: f64,
    /// Bootstrap 2.5% and 97.5% quantiles of the fitted rate.
    pub ci: (f64, f64),
    pub alpha: f64,
    pub beta: f64,
    pub rel_err_vs_beta: f64,
    /// `|c - alpha| / |c - beta|`; large means the capacity-corrected
    /// rate explains the data, not the bare rate.
    pub separation: f64,
    pub closer_to_beta: bool,
    pub collisions: usize,
}

/// Fit `df1/dt = -c f1^2` to the early-time mass-1 decay.
///
/// In the saturated regime the fitted c approaches the capacity-limited
/// rate, which is what separates it from a large bare rate. Under that
/// law `1/f1(t)` is affine in t with slope c, so the fit is a
/// least-squares line through the reciprocal densities over the first
/// `window_frac` of the horizon. Densities are per-replica counts scaled
/// by `eps^{d-2} / volume`.
#[allow(clippy::too_many_arguments)]
pub fn effective_rate_experiment<R: Rng>(
    replica_counts: &[Vec<(f64, usize)>],
    collisions: usize,
    epsilon: f64,
    dim: usize,
    volume: f64,
    horizon: f64,
    window_frac: f64,
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> Result<RateFitReport> {
    if collisions < 100 {
        return Err(CoagError::Validation(format!(
            "rate fit needs at least 100 collisions, got {collisions}"
        )));
    }
    let t_max = window_frac * horizon;
    let scale = epsilon.powi(dim as i32 - 2) / volume;
    let fit_once = |replicas: &[&Vec<(f64, usize)>]| -> Option<f64> {
        // average counts across replicas at each shared sample time
        let base = replicas[0];
        let mut ts = Vec::new();
        let mut ys = Vec::new();
        for (k, &(t, _)) in base.iter().enumerate() {
            if t > t_max {
                break;
            }
            let mut mean = 0.0;
            for r in replicas {
                mean += r.get(k).map(|&(_, c)| c as f64)?;
            }
            mean /= replicas.len() as f64;
            if mean <= 0.0 {
                return None;
            }
            ts.push(t);
            ys.push(1.0 / (mean * scale));
        }
        if ts.len() < 3 {
            return None;
        }
        let (slope, _) = linear_fit(&ts, &ys);
        Some(slope)
    };
    let all: Vec<&Vec<(f64, usize)>> = replica_counts.iter().collect();
    let c_fit = fit_once(&all).ok_or_else(|| {
        CoagError::Validation("rate fit needs 3+ samples inside the fit window".into())
    })?;
    // bootstrap over replicas
    let mut boots = Vec::new();
    if replica_counts.len() >= 2 {
        for _ in 0..200 {
            let pick: Vec<&Vec<(f64, usize)>> = (0..replica_counts.len())
                .map(|_| &replica_counts[rng.gen_range(0..replica_counts.len())])
                .collect();
            if let Some(c) = fit_once(&pick) {
                boots.push(c);
            }
        }
    }
    let ci = if boots.len() >= 20 {
        boots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (
            boots[(boots.len() as f64 * 0.025) as usize],
            boots[((boots.len() as f64 * 0.975) as usize).min(boots.len() - 1)],
        )
    } else {
        (c_fit, c_fit)
    };
    let err_beta = (c_fit - beta).abs();
    let err_alpha = (c_fit - alpha).abs();
    Ok(RateFitReport {
        c_fit,
        ci,
        alpha,
        beta,
        rel_err_vs_beta: err_beta / beta.abs().max(f64::MIN_POSITIVE),
        separation: err_alpha / err_beta.max(f64::MIN_POSITIVE),
        closer_to_beta: err_beta < err_alpha,
        collisions,
    })
}

/// Replica-averaged collision propensity audit.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityReport {
    pub mean_rate_integral: f64,
    pub sem: f64,
    pub big_z: f64,
    pub rate_bound_pass: bool,
    pub count_bound_pass: bool,
    pub n_replicas: usize,
}

/// Check `mean rate_integral <= Z + 3 SEM` and that no replica collided
/// more times than it had particles.
pub fn propensity_audit(
    stats: &[(TrajectoryStats, usize)],
    big_z: f64,
) -> Result<PropensityReport> {
    if stats.len() < 5 {
        return Err(CoagError::Validation(format!(
            "propensity audit needs at least 5 replicas, got {}",
            stats.len()
        )));
    }
    let rates: Vec<f64> = stats.iter().map(|(s, _)| s.rate_integral).collect();
    let (mean, sem) = mean_sem(&rates);
    let count_ok = stats
        .iter()
        .all(|(s, n0)| s.collision_count <= *n0);
    Ok(PropensityReport {
        mean_rate_integral: mean,
        sem,
        big_z,
        rate_bound_pass: mean <= big_z + 3.0 * sem,
        count_bound_pass: count_ok,
        n_replicas: stats.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro::{q_statistic, sample_initial, Weight};
    use crate::model::{
        build_params, DensityShape, InitialComponent, InitialDensities, KernelV, RadialProfile,
        RatePolicy,
    };
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smoothed_box_profile() {
        let j = TestFunctional::SmoothedBox {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
            smoothing: 0.25,
        };
        let d = Domain::FreeSpace;
        assert_eq!(j.eval(&[-0.1, 0.5], &d), 0.0);
        assert_eq!(j.eval(&[0.5, 0.5], &d), 1.0);
        let mid = j.eval(&[0.125, 0.5], &d);
        assert!(mid > 0.0 && mid < 1.0);
        // C^1 blend is 1/2 at half the smoothing depth
        assert_relative_eq!(mid, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn gaussian_bump_torus_aware() {
        let j = TestFunctional::GaussianBump {
            center: vec![0.1, 0.1, 0.1],
            sigma: 0.3,
        };
        let torus = Domain::Torus { side: 2.0 };
        // the point 1.9 is distance 0.2 from 0.1 across the seam
        let near = j.eval(&[1.9, 0.1, 0.1], &torus);
        let direct = j.eval(&[0.3, 0.1, 0.1], &torus);
        assert_relative_eq!(near, direct, max_relative = 1e-12);
    }

    fn mono_snapshot(n: usize, side: f64, eps: f64, seed: u64) -> Configuration {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = Configuration::new(3, eps, Domain::Torus { side });
        for _ in 0..n {
            let p: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * side).collect();
            cfg.push(&p, 1);
        }
        cfg
    }

    #[test]
    fn zero_functional_and_mismatch() {
        let cfg = mono_snapshot(100, 2.0, 0.1, 1);
        let field = MacroField::homogeneous(2, &[1.0, 0.0]).unwrap();
        let j = TestFunctional::Constant(0.0);
        let row = micro_macro_functional_gap(&[&cfg], &field, &j, 1, 1e-9).unwrap();
        assert_eq!(row.abs_error, 0.0);

        let mut late = cfg.clone();
        late.time = 1.0;
        assert!(micro_macro_functional_gap(&[&late], &field, &j, 1, 1e-9).is_err());
        assert!(micro_macro_functional_gap(&[&cfg, &late], &field, &j, 1, 1e-9).is_err());
    }

    #[test]
    fn initial_functional_is_unbiased() {
        // i.i.d. sampling from known intensities; the micro functional at
        // t = 0 must estimate int J h_1 without bias
        let side = 2.0;
        let big_z = 100.0;
        let n = 2000usize;
        let params = build_params(3, big_z, n, 0.05, 1.0, 7).unwrap();
        let domain = Domain::Torus { side };
        let h = InitialDensities {
            components: vec![InitialComponent {
                mass: 1,
                shape: DensityShape::Uniform,
                intensity: big_z,
            }],
        };
        let j = TestFunctional::GaussianBump {
            center: vec![1.0; 3],
            sigma: 0.4,
        };
        let mut values = Vec::new();
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = sample_initial(&h, &params, &domain, &mut rng).unwrap();
            values.push(micro_functional(&cfg, &j, 1));
        }
        let (mean, sem) = mean_sem(&values);
        // exact target: (Z / L^3) int J, J integrable in closed form is
        // awkward on a torus, so use a fine lattice sum
        let grid = DensityGrid::torus(side, 3, 64);
        let jint: f64 = (0..grid.n_points())
            .map(|lin| j.eval(&grid.point(lin), &domain))
            .sum::<f64>()
            * grid.spacing.powi(3);
        let target = big_z / side.powi(3) * jint;
        assert!(
            (mean - target).abs() <= 3.0 * sem,
            "bias {} vs 3 SEM {}",
            (mean - target).abs(),
            3.0 * sem
        );
    }

    #[test]
    fn macro_functional_spatial_quadrature() {
        use crate::pde::{Boundary, SpatialGrid};
        let grid = SpatialGrid {
            shape: vec![8, 8, 8],
            spacing: 0.25,
            boundary: Boundary::Torus,
        };
        let nc = grid.n_cells();
        let field = MacroField::spatial(1, grid, vec![vec![2.0; nc]]).unwrap();
        let j = TestFunctional::Constant(3.0);
        let v = macro_functional(&field, &j, 1, &Domain::Torus { side: 2.0 }).unwrap();
        assert_relative_eq!(v, 2.0 * 3.0 * 8.0, max_relative = 1e-12);
        assert!(macro_functional(&field, &j, 2, &Domain::Torus { side: 2.0 }).is_err());
    }

    #[test]
    fn stoss_zero_rate_is_exact() {
        let cfg_a = mono_snapshot(200, 2.0, 0.1, 3);
        let mut cfg_b = cfg_a.clone();
        cfg_b.time = 0.1;
        let grid = DensityGrid::torus(2.0, 3, 8);
        let one = TestFunctional::Constant(1.0);
        let report = stosszahlansatz_check(
            &[cfg_a, cfg_b],
            &[(0.0, 0.0), (0.1, 0.0)],
            0.0,
            1,
            1,
            &one,
            &one,
            0.4,
            &grid,
        )
        .unwrap();
        assert_eq!(report.lhs, 0.0);
        assert_eq!(report.rhs, 0.0);
        assert_eq!(report.rel_gap, 0.0);
    }

    #[test]
    fn stoss_frozen_cloud_matches_brute_force() {
        // frozen configuration: both sides of the check must equal direct
        // double sums evaluated from scratch here
        let side = 1.5;
        let eps = 0.08;
        let cfg0 = mono_snapshot(300, side, eps, 9);
        let mut cfg1 = cfg0.clone();
        cfg1.time = 0.05;
        let kernel = KernelV::new(3, 1.0, RadialProfile::Bump).unwrap();
        let alpha = RatePolicy::Constant(0.7);
        let one: Weight<'_> = &|_: &[f64]| 1.0;
        let q0 = q_statistic(&cfg0, &kernel, &alpha, 1, 1, one, one);
        // brute-force ordered double sum
        let mut brute = 0.0;
        for i in 0..cfg0.n() {
            for j in 0..cfg0.n() {
                if i != j {
                    let r = cfg0.domain.dist2(cfg0.pos(i), cfg0.pos(j)).sqrt();
                    brute += 0.7 * kernel.eval_radial(r / eps) / (eps * eps);
                }
            }
        }
        brute *= eps;
        assert_relative_eq!(q0, brute, max_relative = 1e-10);

        let delta = 0.35;
        let grid = DensityGrid::torus(side, 3, 12);
        let jf = TestFunctional::Constant(1.0);
        let beta = 0.42;
        let report = stosszahlansatz_check(
            &[cfg0.clone(), cfg1.clone()],
            &[(0.0, q0), (0.05, q0)],
            beta,
            1,
            1,
            &jf,
            &jf,
            delta,
            &grid,
        )
        .unwrap();
        assert_relative_eq!(report.lhs, 0.05 * q0, max_relative = 1e-12);
        // brute-force RHS from an independent density evaluation
        let f = empirical_density(&cfg0, 1, delta, &grid);
        let direct: f64 = f.iter().map(|v| v * v).sum::<f64>() * grid.spacing.powi(3);
        assert_relative_eq!(report.rhs, beta * 0.05 * direct, max_relative = 1e-10);
    }

    #[test]
    fn rate_fit_recovers_known_law() {
        // exact reciprocal-linear decay f(t) = f0 / (1 + c f0 t)
        let c_true = 3.2;
        let f0 = 5.0;
        let eps: f64 = 0.1;
        let vol = 8.0;
        let scale = eps.powi(1) / vol;
        let series: Vec<(f64, usize)> = (0..200)
            .map(|k| {
                let t = k as f64 * 1e-3;
                let f = f0 / (1.0 + c_true * f0 * t);
                (t, (f / scale).round() as usize)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let report = effective_rate_experiment(
            &[series.clone(), series],
            500,
            eps,
            3,
            vol,
            2.0,
            0.1,
            100.0,
            c_true * 1.01,
            &mut rng,
        )
        .unwrap();
        // counts are rounded, so allow a small fitting error
        assert_relative_eq!(report.c_fit, c_true, max_relative = 2e-3);
        assert!(report.closer_to_beta);
        assert!(report.separation > 10.0);

        let err = effective_rate_experiment(
            &[vec![(0.0, 100)]],
            99,
            eps,
            3,
            vol,
            2.0,
            0.1,
            1.0,
            1.0,
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn propensity_audit_bounds() {
        let mk = |rate: f64, coll: usize| {
            let mut s = TrajectoryStats::default();
            s.rate_integral = rate;
            s.collision_count = coll;
            (s, 100usize)
        };
        let stats: Vec<_> = (0..6).map(|k| mk(0.9 + 0.01 * k as f64, 10)).collect();
        let report = propensity_audit(&stats, 1.0).unwrap();
        assert!(report.rate_bound_pass);
        assert!(report.count_bound_pass);

        let stats: Vec<_> = (0..6).map(|_| mk(0.0, 0)).collect();
        let report = propensity_audit(&stats, 1.0).unwrap();
        assert_eq!(report.mean_rate_integral, 0.0);
        assert!(report.rate_bound_pass);

        let bad: Vec<_> = (0..6).map(|_| mk(5.0, 101)).collect();
        let report = propensity_audit(&bad, 1.0).unwrap();
        assert!(!report.rate_bound_pass);
        assert!(!report.count_bound_pass);

        assert!(propensity_audit(&stats[..4], 1.0).is_err());
    }
}
