//! Model parameters, kernels, rate/diffusion policies, initial densities
//! and the parameter-hypothesis checker.
//!
//! Everything here is immutable after construction and shareable across
//! threads; the solvers only read these types.

use crate::error::{CoagError, Result};
use crate::numeric::{adaptive_simpson, sphere_surface_area};

pub const EPSILON_SCALING_RTOL: f64 = 1e-12;
pub const KERNEL_NORMALIZATION_TOL: f64 = 1e-8;
pub const DEFAULT_TAU_FACTOR: f64 = 0.05;
pub const DEFAULT_M_MAX: u32 = 50;

/// Scaling contract of the whole system: `N * eps^{d-2} = Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// Spatial dimension, at least 3.
    pub dim: usize,
    /// Total initial intensity Z.
    pub big_z: f64,
    /// Initial particle count N.
    pub n_particles: usize,
    /// Interaction range, `(Z/N)^{1/(d-2)}`.
    pub epsilon: f64,
    /// Micro time step, `tau_factor * eps^2`.
    pub tau: f64,
    /// Time horizon T.
    pub horizon: f64,
    /// Base RNG seed.
    pub seed: u64,
}

/// Build simulation parameters from the scaling relation.
pub fn build_params(
    dim: usize,
    big_z: f64,
    n_particles: usize,
    tau_factor: f64,
    horizon: f64,
    seed: u64,
) -> Result<SimParams> {
    if dim < 3 {
        return Err(CoagError::InvalidParameter(format!(
            "dim must be >= 3 (pair differences must be transient), got {dim}"
        )));
    }
    if !(big_z > 0.0) {
        return Err(CoagError::InvalidParameter(format!(
            "big_z must be positive, got {big_z}"
        )));
    }
    if n_particles < 1 {
        return Err(CoagError::InvalidParameter(
            "n_particles must be at least 1".into(),
        ));
    }
    if !(tau_factor > 0.0) {
        return Err(CoagError::InvalidParameter(format!(
            "tau_factor must be positive, got {tau_factor}"
        )));
    }
    if !(horizon >= 0.0) {
        return Err(CoagError::InvalidParameter(format!(
            "horizon must be nonnegative, got {horizon}"
        )));
    }
    let epsilon = (big_z / n_particles as f64).powf(1.0 / (dim as f64 - 2.0));
    let params = SimParams {
        dim,
        big_z,
        n_particles,
        epsilon,
        tau: tau_factor * epsilon * epsilon,
        horizon,
        seed,
    };
    debug_assert!(params.scaling_defect() <= EPSILON_SCALING_RTOL);
    Ok(params)
}

impl SimParams {
    /// Relative defect of `N eps^{d-2} = Z`.
    pub fn scaling_defect(&self) -> f64 {
        let lhs = self.n_particles as f64 * self.epsilon.powi(self.dim as i32 - 2);
        (lhs - self.big_z).abs() / self.big_z
    }
}

/// Spatial domain for the particle system and the spatial PDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    FreeSpace,
    /// Periodic cube of the given side length.
    Torus { side: f64 },
}

impl Domain {
    /// Minimum-image displacement component.
    #[inline]
    pub fn delta(&self, a: f64, b: f64) -> f64 {
        match self {
            Domain::FreeSpace => a - b,
            Domain::Torus { side } => {
                let mut d = a - b;
                d -= side * (d / side).round();
                d
            }
        }
    }

    /// Squared minimum-image distance between two points.
    #[inline]
    pub fn dist2(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = self.delta(x, y);
                d * d
            })
            .sum()
    }

    #[inline]
    pub fn wrap(&self, x: f64) -> f64 {
        match self {
            Domain::FreeSpace => x,
            Domain::Torus { side } => x.rem_euclid(*side),
        }
    }

    pub fn volume(&self, dim: usize) -> Option<f64> {
        match self {
            Domain::FreeSpace => None,
            Domain::Torus { side } => Some(side.powi(dim as i32)),
        }
    }
}

/// Radial profile shapes for the interaction kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum RadialProfile {
    /// `exp(-1/(1-t^2))` for t < 1, zero beyond; smooth with compact support.
    Bump,
    /// `(1-t^2)` for t < 1, zero beyond.
    Parabolic,
    /// 1 inside the support, 0 outside.
    Indicator,
    /// Piecewise-linear samples at equally spaced radii `t in [0, 1]`.
    Table(Vec<f64>),
}

impl RadialProfile {
    /// Unnormalised profile at relative radius `t = r / support_radius`.
    fn raw(&self, t: f64) -> f64 {
        if t >= 1.0 {
            return 0.0;
        }
        match self {
            RadialProfile::Bump => (-1.0 / (1.0 - t * t)).exp(),
            RadialProfile::Parabolic => 1.0 - t * t,
            RadialProfile::Indicator => 1.0,
            RadialProfile::Table(values) => {
                let n = values.len();
                if n == 1 {
                    return values[0];
                }
                let s = t * (n - 1) as f64;
                let i = (s.floor() as usize).min(n - 2);
                let frac = s - i as f64;
                values[i] * (1.0 - frac) + values[i + 1] * frac
            }
        }
    }
}

/// Interaction kernel V: nonnegative, compact support, unit integral.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelV {
    dim: usize,
    support_radius: f64,
    profile: RadialProfile,
    /// Multiplier making the quadrature of the integral equal 1.
    scale: f64,
    /// Quadrature value of the integral of the *unnormalised* profile.
    raw_integral: f64,
}

impl KernelV {
    /// Build and normalise a kernel; rejects profiles with negative samples.
    pub fn new(dim: usize, support_radius: f64, profile: RadialProfile) -> Result<Self> {
        if dim < 3 {
            return Err(CoagError::InvalidKernel("dim must be >= 3".into()));
        }
        if !(support_radius > 0.0) {
            return Err(CoagError::InvalidKernel(
                "support_radius must be positive".into(),
            ));
        }
        if let RadialProfile::Table(values) = &profile {
            if values.is_empty() {
                return Err(CoagError::InvalidKernel("empty profile table".into()));
            }
            if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(CoagError::InvalidKernel(
                    "profile samples must be finite and nonnegative".into(),
                ));
            }
        }
        let omega = sphere_surface_area(dim);
        let c0 = support_radius;
        let raw_integral = omega
            * adaptive_simpson(
                |r| profile.raw(r / c0) * r.powi(dim as i32 - 1),
                0.0,
                c0,
                1e-13,
            );
        if !(raw_integral > 0.0) {
            return Err(CoagError::InvalidKernel(
                "profile integrates to zero".into(),
            ));
        }
        Ok(KernelV {
            dim,
            support_radius,
            profile,
            scale: 1.0 / raw_integral,
            raw_integral,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Support radius C0 (in units of epsilon after rescaling).
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// Quadrature value of the integral of V; 1 by construction.
    pub fn normalization(&self) -> f64 {
        self.scale * self.raw_integral
    }

    /// V at a point of R^d; zero outside the support.
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.eval_radial(r)
    }

    /// V at radius r.
    #[inline]
    pub fn eval_radial(&self, r: f64) -> f64 {
        if r >= self.support_radius {
            0.0
        } else {
            self.scale * self.profile.raw(r / self.support_radius)
        }
    }
}

/// Microscopic coagulation propensities `alpha(n, m)`.
///
/// Symmetry is required: asymmetric tables are rejected at load.
#[derive(Debug, Clone, PartialEq)]
pub enum RatePolicy {
    /// alpha(n, m) = c.
    Constant(f64),
    /// alpha(n, m) = c * n * m.
    Product(f64),
    /// Explicit symmetric table for 1 <= n, m <= m_max; entries beyond
    /// m_max are clamped (overflow-bucket extension).
    Table { m_max: u32, values: Vec<f64> },
}

impl RatePolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            RatePolicy::Constant(c) | RatePolicy::Product(c) => {
                if *c < 0.0 || !c.is_finite() {
                    return Err(CoagError::InvalidRatePolicy(format!(
                        "rate coefficient must be finite and nonnegative, got {c}"
                    )));
                }
            }
            RatePolicy::Table { m_max, values } => {
                let m = *m_max as usize;
                if m < 1 || values.len() != m * m {
                    return Err(CoagError::InvalidRatePolicy(format!(
                        "table must hold m_max^2 = {} entries, got {}",
                        m * m,
                        values.len()
                    )));
                }
                for (i, v) in values.iter().enumerate() {
                    if *v < 0.0 || !v.is_finite() {
                        return Err(CoagError::InvalidRatePolicy(format!(
                            "table entry {i} must be finite and nonnegative, got {v}"
                        )));
                    }
                }
                for n in 0..m {
                    for k in 0..n {
                        if values[n * m + k] != values[k * m + n] {
                            return Err(CoagError::InvalidRatePolicy(format!(
                                "asymmetric table: alpha({}, {}) = {} != alpha({}, {}) = {}",
                                n + 1,
                                k + 1,
                                values[n * m + k],
                                k + 1,
                                n + 1,
                                values[k * m + n]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// alpha(n, m) for masses n, m >= 1.
    #[inline]
    pub fn rate(&self, n: u32, m: u32) -> f64 {
        debug_assert!(n >= 1 && m >= 1);
        match self {
            RatePolicy::Constant(c) => *c,
            RatePolicy::Product(c) => c * n as f64 * m as f64,
            RatePolicy::Table { m_max, values } => {
                let i = n.min(*m_max) as usize - 1;
                let j = m.min(*m_max) as usize - 1;
                values[i * *m_max as usize + j]
            }
        }
    }
}

/// Half diffusion rates `d(n)`: per-coordinate displacement variance over
/// time t is `2 d(n) t`.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionPolicy {
    /// d(n) = c.
    Constant(f64),
    /// d(n) = c * n^p.
    Power { coeff: f64, exponent: f64 },
    /// Explicit values for 1..=len, clamped beyond.
    Table(Vec<f64>),
}

impl DiffusionPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            DiffusionPolicy::Constant(c) => *c > 0.0 && c.is_finite(),
            DiffusionPolicy::Power { coeff, exponent } => {
                *coeff > 0.0 && coeff.is_finite() && exponent.is_finite()
            }
            DiffusionPolicy::Table(v) => {
                !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CoagError::InvalidParameter(
                "diffusion rates d(n) must be finite and positive".into(),
            ))
        }
    }

    /// d(n) for mass n >= 1.
    #[inline]
    pub fn value(&self, n: u32) -> f64 {
        debug_assert!(n >= 1);
        match self {
            DiffusionPolicy::Constant(c) => *c,
            DiffusionPolicy::Power { coeff, exponent } => coeff * (n as f64).powf(*exponent),
            DiffusionPolicy::Table(v) => v[(n as usize - 1).min(v.len() - 1)],
        }
    }
}

/// Diffusion-normalised microscopic rate `alpha'(n,m) = alpha / (d(n)+d(m))`.
pub fn alpha_prime(alpha: &RatePolicy, dd: &DiffusionPolicy, n: u32, m: u32) -> f64 {
    alpha.rate(n, m) / (dd.value(n) + dd.value(m))
}

/// Spatial shape of one initial-density component `h_n`.
#[derive(Debug, Clone, PartialEq)]
pub enum DensityShape {
    /// Uniform over the whole (torus) domain.
    Uniform,
    /// Uniform over an axis-aligned box.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Isotropic Gaussian.
    Gaussian { center: Vec<f64>, sigma: f64 },
    /// Piecewise-constant table over a box: `shape` cells per dimension,
    /// row-major values; normalised by the trapezoidal rule at load.
    Table {
        lo: Vec<f64>,
        hi: Vec<f64>,
        shape: Vec<usize>,
        values: Vec<f64>,
    },
}

/// One mass component of the initial data.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialComponent {
    pub mass: u32,
    pub shape: DensityShape,
    /// Total intensity of this component, `\int h_n`.
    pub intensity: f64,
}

/// Per-mass initial densities `h_n`; `Z = sum_n \int h_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDensities {
    pub components: Vec<InitialComponent>,
}

impl InitialDensities {
    pub fn validate(&self, dim: usize, domain: &Domain, big_z: f64) -> Result<()> {
        if self.components.is_empty() {
            return Err(CoagError::InvalidInitialDensities(
                "at least one component required".into(),
            ));
        }
        for c in &self.components {
            if c.mass < 1 {
                return Err(CoagError::InvalidInitialDensities(
                    "component masses must be >= 1".into(),
                ));
            }
            if !(c.intensity > 0.0) || !c.intensity.is_finite() {
                return Err(CoagError::InvalidInitialDensities(format!(
                    "component intensity must be finite and positive, got {}",
                    c.intensity
                )));
            }
            match &c.shape {
                DensityShape::Uniform => {
                    if matches!(domain, Domain::FreeSpace) {
                        return Err(CoagError::InvalidInitialDensities(
                            "uniform shape requires a torus domain".into(),
                        ));
                    }
                }
                DensityShape::UniformBox { lo, hi } => {
                    if lo.len() != dim || hi.len() != dim {
                        return Err(CoagError::InvalidInitialDensities(
                            "box bounds must match the dimension".into(),
                        ));
                    }
                    if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                        return Err(CoagError::InvalidInitialDensities(
                            "box must have positive extent".into(),
                        ));
                    }
                }
                DensityShape::Gaussian { center, sigma } => {
                    if center.len() != dim {
                        return Err(CoagError::InvalidInitialDensities(
                            "gaussian center must match the dimension".into(),
                        ));
                    }
                    if !(*sigma > 0.0) {
                        return Err(CoagError::InvalidInitialDensities(
                            "gaussian sigma must be positive".into(),
                        ));
                    }
                }
                DensityShape::Table {
                    lo,
                    hi,
                    shape,
                    values,
                } => {
                    if lo.len() != dim || hi.len() != dim || shape.len() != dim {
                        return Err(CoagError::InvalidInitialDensities(
                            "table bounds/shape must match the dimension".into(),
                        ));
                    }
                    let cells: usize = shape.iter().product();
                    if cells == 0 || values.len() != cells {
                        return Err(CoagError::InvalidInitialDensities(format!(
                            "table must hold {} values, got {}",
                            cells,
                            values.len()
                        )));
                    }
                    if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                        return Err(CoagError::InvalidInitialDensities(
                            "table values must be finite and nonnegative".into(),
                        ));
                    }
                    if values.iter().all(|v| *v == 0.0) {
                        return Err(CoagError::InvalidInitialDensities(
                            "table integrates to zero".into(),
                        ));
                    }
                }
            }
        }
        let total = self.total_intensity();
        if (total - big_z).abs() > 1e-9 * big_z.max(1.0) {
            return Err(CoagError::InvalidInitialDensities(format!(
                "sum of component intensities {total} does not match Z = {big_z}"
            )));
        }
        Ok(())
    }

    /// `Z = sum_n \int h_n`.
    pub fn total_intensity(&self) -> f64 {
        self.components.iter().map(|c| c.intensity).sum()
    }

    /// First moment `\int sum_n n h_n` (total mass intensity).
    pub fn mass_intensity(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.mass as f64 * c.intensity)
            .sum()
    }

    /// Density value h_n(x); sums components of the given mass.
    pub fn density(&self, mass: u32, x: &[f64], dim: usize, domain: &Domain) -> f64 {
        self.components
            .iter()
            .filter(|c| c.mass == mass)
            .map(|c| c.intensity * shape_density(&c.shape, x, dim, domain))
            .sum()
    }
}

/// Normalised (unit-integral) density of a shape at x.
fn shape_density(shape: &DensityShape, x: &[f64], dim: usize, domain: &Domain) -> f64 {
    match shape {
        DensityShape::Uniform => {
            let vol = domain.volume(dim).expect("uniform requires torus");
            1.0 / vol
        }
        DensityShape::UniformBox { lo, hi } => {
            let inside = x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| v >= a && v < b);
            if inside {
                1.0 / lo
                    .iter()
                    .zip(hi)
                    .map(|(a, b)| b - a)
                    .product::<f64>()
            } else {
                0.0
            }
        }
        DensityShape::Gaussian { center, sigma } => {
            let r2: f64 = x
                .iter()
                .zip(center)
                .map(|(v, c)| {
                    let d = domain.delta(*v, *c);
                    d * d
                })
                .sum();
            let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(dim as f64 / 2.0);
            (-r2 / (2.0 * sigma * sigma)).exp() / norm
        }
        DensityShape::Table {
            lo,
            hi,
            shape,
            values,
        } => {
            let mut idx = 0usize;
            let mut cell_vol = 1.0;
            for k in 0..dim {
                let w = (hi[k] - lo[k]) / shape[k] as f64;
                cell_vol *= w;
                if x[k] < lo[k] || x[k] >= hi[k] {
                    return 0.0;
                }
                let i = (((x[k] - lo[k]) / w) as usize).min(shape[k] - 1);
                idx = idx * shape[k] + i;
            }
            let total: f64 = values.iter().sum::<f64>() * cell_vol;
            values[idx] / total
        }
    }
}

/// Result of checking hypothesis inequality over all triples up to m_max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisReport {
    pub holds: bool,
    /// Triple (n1, n2, n3) attaining the worst LHS/RHS ratio; ties broken
    /// lexicographically.
    pub worst_triple: (u32, u32, u32),
    pub worst_ratio: f64,
}

/// Evaluate the diffusion/rate compatibility inequality for all triples
/// with `n2 + n3 <= m_max`:
///
/// `n2 g(n1, n2+n3) max{1, R^{(3d-2)/2}, R^{2d-1}} <= (n2+n3) g(n1, n2)`
///
/// with `R = d(n2+n3) / d(n2)`.
pub fn check_hypothesis(
    dim: usize,
    gamma: &RatePolicy,
    dd: &DiffusionPolicy,
    m_max: u32,
) -> Result<HypothesisReport> {
    if m_max < 2 {
        return Err(CoagError::InvalidParameter("m_max must be >= 2".into()));
    }
    let d = dim as f64;
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut worst_triple = (0, 0, 0);
    for n1 in 1..=m_max {
        for n2 in 1..=m_max - 1 {
            for n3 in 1..=m_max - n2 {
                let r = dd.value(n2 + n3) / dd.value(n2);
                let amp = 1.0_f64
                    .max(r.powf((3.0 * d - 2.0) / 2.0))
                    .max(r.powf(2.0 * d - 1.0));
                let lhs = n2 as f64 * gamma.rate(n1, n2 + n3) * amp;
                let rhs = (n2 + n3) as f64 * gamma.rate(n1, n2);
                let ratio = if rhs > 0.0 {
                    lhs / rhs
                } else if lhs > 0.0 {
                    f64::INFINITY
                } else {
                    1.0
                };
                if ratio > worst_ratio {
                    worst_ratio = ratio;
                    worst_triple = (n1, n2, n3);
                }
            }
        }
    }
    Ok(HypothesisReport {
        holds: worst_ratio <= 1.0,
        worst_triple,
        worst_ratio,
    })
}
