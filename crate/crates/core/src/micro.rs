//! The N-particle simulator: independent Brownian motions with
//! mass-dependent rates, plus stochastic pairwise coagulation with
//! mass-weighted merge placement.
//!
//! Time is advanced by operator splitting with step tau: diffuse every
//! particle, then visit the candidate pairs (within the interaction range
//! C0 epsilon) in uniformly random order and coagulate each surviving
//! pair with probability `1 - exp(-tau * hazard)`.
//!
//! The hazard of an unordered pair is `2 alpha(n, m) eps^{-2} V(dx/eps)`:
//! the generator's pair sum runs over ordered index pairs, so each
//! unordered pair carries both orientations. This factor of two is what
//! makes the observed mass-1 decay match the loss term `2 beta f_1^2` of
//! the macroscopic system.

use crate::error::{CoagError, Result};
use crate::model::{DiffusionPolicy, Domain, InitialDensities, KernelV, RatePolicy, SimParams};
use crate::numeric::{adaptive_simpson, sphere_surface_area};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Particle system state, struct-of-arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub dim: usize,
    pub epsilon: f64,
    pub time: f64,
    pub domain: Domain,
    /// Flat coordinates, `len = n() * dim`.
    pub positions: Vec<f64>,
    pub masses: Vec<u32>,
    pub ids: Vec<u64>,
    next_id: u64,
}

impl Configuration {
    pub fn new(dim: usize, epsilon: f64, domain: Domain) -> Self {
        Configuration {
            dim,
            epsilon,
            time: 0.0,
            domain,
            positions: Vec::new(),
            masses: Vec::new(),
            ids: Vec::new(),
            next_id: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.masses.len()
    }

    pub fn pos(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, pos: &[f64], mass: u32) -> u64 {
        debug_assert_eq!(pos.len(), self.dim);
        let id = self.next_id;
        self.next_id += 1;
        self.positions.extend_from_slice(pos);
        self.masses.push(mass);
        self.ids.push(id);
        id
    }

    /// Total mass as an exact integer.
    pub fn total_mass(&self) -> u64 {
        self.masses.iter().map(|&m| m as u64).sum()
    }

    pub fn mass_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for &m in &self.masses {
            *counts.entry(m).or_insert(0) += 1;
        }
        counts
    }

    fn index_of_id(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Remove the particles at the given indices (swap-remove, order not
    /// preserved) keeping the three arrays in lockstep.
    fn remove_two(&mut self, a: usize, b: usize) {
        let (hi, lo) = (a.max(b), a.min(b));
        for &i in &[hi, lo] {
            let last = self.n() - 1;
            self.masses.swap_remove(i);
            self.ids.swap_remove(i);
            if i != last {
                for k in 0..self.dim {
                    self.positions[i * self.dim + k] = self.positions[last * self.dim + k];
                }
            }
            self.positions.truncate(last * self.dim);
        }
    }
}

/// Draw N particles i.i.d. from the normalised initial densities.
pub fn sample_initial<R: Rng>(
    h: &InitialDensities,
    params: &SimParams,
    domain: &Domain,
    rng: &mut R,
) -> Result<Configuration> {
    h.validate(params.dim, domain, params.big_z)?;
    let dim = params.dim;
    let mut cfg = Configuration::new(dim, params.epsilon, domain.clone());
    let total = h.total_intensity();
    let mut x = vec![0.0; dim];
    for _ in 0..params.n_particles {
        // component choice with marginal intensity / Z
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = h.components.len() - 1;
        for (k, c) in h.components.iter().enumerate() {
            if pick < c.intensity {
                chosen = k;
                break;
            }
            pick -= c.intensity;
        }
        let comp = &h.components[chosen];
        sample_shape_position(&comp.shape, dim, domain, rng, &mut x)?;
        if let Domain::Torus { .. } = domain {
            for v in x.iter_mut() {
                *v = domain.wrap(*v);
            }
        }
        cfg.push(&x, comp.mass);
    }
    Ok(cfg)
}

fn sample_shape_position<R: Rng>(
    shape: &crate::model::DensityShape,
    dim: usize,
    domain: &Domain,
    rng: &mut R,
    out: &mut [f64],
) -> Result<()> {
    use crate::model::DensityShape;
    match shape {
        DensityShape::Uniform => {
            let side = match domain {
                Domain::Torus { side } => *side,
                Domain::FreeSpace => {
                    return Err(CoagError::InvalidInitialDensities(
                        "uniform shape requires a torus domain".into(),
                    ))
                }
            };
            for v in out.iter_mut() {
                *v = rng.gen::<f64>() * side;
            }
        }
        DensityShape::UniformBox { lo, hi } => {
            for k in 0..dim {
                out[k] = lo[k] + rng.gen::<f64>() * (hi[k] - lo[k]);
            }
        }
        DensityShape::Gaussian { center, sigma } => {
            let normal = Normal::new(0.0, *sigma).unwrap();
            for k in 0..dim {
                out[k] = center[k] + normal.sample(rng);
            }
        }
        DensityShape::Table {
            lo,
            hi,
            shape,
            values,
        } => {
            // pick a cell by weight, then a uniform point inside it
            let total: f64 = values.iter().sum();
            let mut pick = rng.gen::<f64>() * total;
            let mut cell = values.len() - 1;
            for (i, v) in values.iter().enumerate() {
                if pick < *v {
                    cell = i;
                    break;
                }
                pick -= v;
            }
            let mut rest = cell;
            for k in (0..dim).rev() {
                let i = rest % shape[k];
                rest /= shape[k];
                let w = (hi[k] - lo[k]) / shape[k] as f64;
                out[k] = lo[k] + (i as f64 + rng.gen::<f64>()) * w;
            }
        }
    }
    Ok(())
}

/// Brownian sub-step: every coordinate gains an independent centered
/// Gaussian increment of variance `2 d(m) tau`.
pub fn diffuse<R: Rng>(cfg: &mut Configuration, dd: &DiffusionPolicy, tau: f64, rng: &mut R) {
    if tau == 0.0 {
        return;
    }
    let dim = cfg.dim;
    let torus = matches!(cfg.domain, Domain::Torus { .. });
    for i in 0..cfg.n() {
        let sigma = (2.0 * dd.value(cfg.masses[i]) * tau).sqrt();
        let normal = Normal::new(0.0, sigma).unwrap();
        for k in 0..dim {
            let v = &mut cfg.positions[i * dim + k];
            *v += normal.sample(rng);
            if torus {
                *v = cfg.domain.wrap(*v);
            }
        }
    }
}

/// Uniform-grid spatial hash with cell size >= the interaction range.
///
/// Particles are kept as a (cell key, index) list sorted by key; a cell's
/// residents are found by binary search, so the cost per rebuild is
/// O(N log N) with no storage for empty cells.
#[derive(Debug, Clone)]
pub struct SpatialHash {
    pub cell_size: f64,
    /// Torus mode: cells per dimension; empty in free space.
    cells_per_dim: Vec<usize>,
    /// Sorted (flattened cell key, particle index).
    entries: Vec<(Vec<i64>, usize)>,
    /// Set when the torus is too small for the 3^d neighborhood walk.
    brute_force: bool,
}

impl SpatialHash {
    pub fn build(cfg: &Configuration, range: f64) -> Self {
        let dim = cfg.dim;
        match cfg.domain {
            Domain::Torus { side } => {
                let nc = (side / range).floor().max(1.0) as usize;
                if nc < 4 {
                    return SpatialHash {
                        cell_size: side,
                        cells_per_dim: vec![1; dim],
                        entries: Vec::new(),
                        brute_force: true,
                    };
                }
                let cell = side / nc as f64;
                let mut entries: Vec<(Vec<i64>, usize)> = (0..cfg.n())
                    .map(|i| {
                        let key: Vec<i64> = cfg.pos(i)
                            .iter()
                            .map(|&x| ((x / cell).floor() as i64).rem_euclid(nc as i64))
                            .collect();
                        (key, i)
                    })
                    .collect();
                entries.sort();
                SpatialHash {
                    cell_size: cell,
                    cells_per_dim: vec![nc; dim],
                    entries,
                    brute_force: false,
                }
            }
            Domain::FreeSpace => {
                let mut entries: Vec<(Vec<i64>, usize)> = (0..cfg.n())
                    .map(|i| {
                        let key: Vec<i64> = cfg.pos(i)
                            .iter()
                            .map(|&x| (x / range).floor() as i64)
                            .collect();
                        (key, i)
                    })
                    .collect();
                entries.sort();
                SpatialHash {
                    cell_size: range,
                    cells_per_dim: Vec::new(),
                    entries,
                    brute_force: false,
                }
            }
        }
    }

    /// Indices resident in the given cell.
    fn cell_slice(&self, key: &[i64]) -> &[(Vec<i64>, usize)] {
        let lo = self.entries.partition_point(|(k, _)| k.as_slice() < key);
        let hi = self.entries.partition_point(|(k, _)| k.as_slice() <= key);
        &self.entries[lo..hi]
    }
}

/// All unordered pairs with separation strictly below `range`.
pub fn detect_pairs(cfg: &Configuration, hash: &SpatialHash, range: f64) -> Vec<(usize, usize)> {
    let n = cfg.n();
    let r2 = range * range;
    let mut pairs = Vec::new();
    if hash.brute_force {
        for i in 0..n {
            for j in (i + 1)..n {
                if cfg.domain.dist2(cfg.pos(i), cfg.pos(j)) < r2 {
                    pairs.push((i, j));
                }
            }
        }
        return pairs;
    }
    let dim = cfg.dim;
    let torus = !hash.cells_per_dim.is_empty();
    let mut neighbor = vec![0i64; dim];
    for (key, i) in &hash.entries {
        // walk the 3^d neighborhood by an odometer over offsets
        let mut offs = vec![-1i64; dim];
        loop {
            for k in 0..dim {
                neighbor[k] = key[k] + offs[k];
                if torus {
                    neighbor[k] = neighbor[k].rem_euclid(hash.cells_per_dim[k] as i64);
                }
            }
            for (_, j) in hash.cell_slice(&neighbor) {
                if *j > *i && cfg.domain.dist2(cfg.pos(*i), cfg.pos(*j)) < r2 {
                    pairs.push((*i, *j));
                }
            }
            let mut k = 0;
            loop {
                offs[k] += 1;
                if offs[k] <= 1 {
                    break;
                }
                offs[k] = -1;
                k += 1;
                if k == dim {
                    break;
                }
            }
            if k == dim {
                break;
            }
        }
    }
    pairs.sort();
    pairs.dedup();
    pairs
}

/// Coagulation hazard of an unordered pair: both orientations of the
/// generator's ordered pair sum, `2 alpha eps^{-2} V(dx / eps)`.
pub fn pair_hazard(cfg: &Configuration, kernel: &KernelV, alpha: &RatePolicy, i: usize, j: usize) -> f64 {
    let r = cfg.domain.dist2(cfg.pos(i), cfg.pos(j)).sqrt();
    let eps = cfg.epsilon;
    2.0 * alpha.rate(cfg.masses[i], cfg.masses[j]) * kernel.eval_radial(r / eps) / (eps * eps)
}

/// A completed merge.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionEvent {
    pub t: f64,
    pub id_a: u64,
    pub id_b: u64,
    pub mass_a: u32,
    pub mass_b: u32,
    pub new_id: u64,
    pub new_pos: Vec<f64>,
    pub chose_first: bool,
}

/// Merge two live particles; the survivor location is the first parent's
/// with probability proportional to its mass.
pub fn merge<R: Rng>(
    cfg: &mut Configuration,
    id_a: u64,
    id_b: u64,
    rng: &mut R,
) -> Result<CollisionEvent> {
    let a = cfg
        .index_of_id(id_a)
        .ok_or_else(|| CoagError::Simulation(format!("merge of dead id {id_a}")))?;
    let b = cfg
        .index_of_id(id_b)
        .ok_or_else(|| CoagError::Simulation(format!("merge of dead id {id_b}")))?;
    if a == b {
        return Err(CoagError::Simulation("merge of a particle with itself".into()));
    }
    let (mass_a, mass_b) = (cfg.masses[a], cfg.masses[b]);
    let total = (mass_a + mass_b) as f64;
    let chose_first = rng.gen::<f64>() * total < mass_a as f64;
    let new_pos: Vec<f64> = if chose_first {
        cfg.pos(a).to_vec()
    } else {
        cfg.pos(b).to_vec()
    };
    cfg.remove_two(a, b);
    let new_id = cfg.push(&new_pos, mass_a + mass_b);
    Ok(CollisionEvent {
        t: cfg.time,
        id_a,
        id_b,
        mass_a,
        mass_b,
        new_id,
        new_pos,
        chose_first,
    })
}

/// One coagulation sub-step over the current candidate pairs, visited in
/// uniformly random order; pairs with a consumed member are skipped.
/// Returns the events and the step's propensity increment
/// `tau * eps^{d-2} * sum_pairs hazard`.
pub fn coagulate_step<R: Rng>(
    cfg: &mut Configuration,
    kernel: &KernelV,
    alpha: &RatePolicy,
    tau: f64,
    rng: &mut R,
) -> (Vec<CollisionEvent>, f64) {
    let range = kernel.support_radius() * cfg.epsilon;
    let hash = SpatialHash::build(cfg, range);
    let mut pairs = detect_pairs(cfg, &hash, range);
    pairs.shuffle(rng);
    let mut propensity = 0.0;
    let mut events = Vec::new();
    let mut consumed: Vec<bool> = vec![false; cfg.n()];
    let scale = tau * cfg.epsilon.powi(cfg.dim as i32 - 2);
    // merges mutate index order, so resolve decisions on indices first
    let mut to_merge: Vec<(u64, u64)> = Vec::new();
    for (i, j) in pairs {
        let hazard = pair_hazard(cfg, kernel, alpha, i, j);
        propensity += scale * hazard;
        if consumed[i] || consumed[j] {
            continue;
        }
        let p = 1.0 - (-tau * hazard).exp();
        if rng.gen::<f64>() < p {
            consumed[i] = true;
            consumed[j] = true;
            to_merge.push((cfg.ids[i], cfg.ids[j]));
        }
    }
    for (id_a, id_b) in to_merge {
        events.push(merge(cfg, id_a, id_b, rng).expect("ids marked alive"));
    }
    (events, propensity)
}

/// Spatial weighting for the propensity statistic.
pub type Weight<'a> = &'a dyn Fn(&[f64]) -> f64;

/// The z = 0 pair-propensity statistic:
/// `eps^{d-2} sum_{i != j} V_eps(x_i - x_j) alpha(m_i, m_j) J(x_i)
/// Jbar(x_j) 1{m_i = M1, m_j = M2}` over ordered pairs.
pub fn q_statistic(
    cfg: &Configuration,
    kernel: &KernelV,
    alpha: &RatePolicy,
    m1: u32,
    m2: u32,
    j_fn: Weight<'_>,
    jbar_fn: Weight<'_>,
) -> f64 {
    let eps = cfg.epsilon;
    let range = kernel.support_radius() * eps;
    let hash = SpatialHash::build(cfg, range);
    let pairs = detect_pairs(cfg, &hash, range);
    let a_rate = alpha.rate(m1, m2);
    let mut total = 0.0;
    for (i, j) in pairs {
        let r = cfg.domain.dist2(cfg.pos(i), cfg.pos(j)).sqrt();
        let v_eps = kernel.eval_radial(r / eps) / (eps * eps);
        if v_eps == 0.0 {
            continue;
        }
        // both orientations of the unordered pair
        if cfg.masses[i] == m1 && cfg.masses[j] == m2 {
            total += v_eps * a_rate * j_fn(cfg.pos(i)) * jbar_fn(cfg.pos(j));
        }
        if cfg.masses[j] == m1 && cfg.masses[i] == m2 {
            total += v_eps * a_rate * j_fn(cfg.pos(j)) * jbar_fn(cfg.pos(i));
        }
    }
    eps.powi(cfg.dim as i32 - 2) * total
}

/// Regular sampling lattice for mollified densities.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub lo: Vec<f64>,
    pub spacing: f64,
    pub shape: Vec<usize>,
}

impl DensityGrid {
    /// Full-torus lattice with `cells` points per dimension.
    pub fn torus(side: f64, dim: usize, cells: usize) -> Self {
        DensityGrid {
            lo: vec![0.0; dim],
            spacing: side / cells as f64,
            shape: vec![cells; dim],
        }
    }

    pub fn n_points(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn point(&self, lin: usize) -> Vec<f64> {
        let dim = self.shape.len();
        let mut rest = lin;
        let mut out = vec![0.0; dim];
        for k in (0..dim).rev() {
            let i = rest % self.shape[k];
            rest /= self.shape[k];
            out[k] = self.lo[k] + (i as f64 + 0.5) * self.spacing;
        }
        out
    }
}

/// Normalisation constant of the standard smooth bump on the unit ball.
fn bump_norm(dim: usize) -> f64 {
    let omega = sphere_surface_area(dim);
    let radial = adaptive_simpson(
        |r| {
            if r < 1.0 {
                (-1.0 / (1.0 - r * r)).exp() * r.powi(dim as i32 - 1)
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        1e-13,
    );
    1.0 / (omega * radial)
}

/// Mollified empirical density of mass-n particles
/// (`eps^{d-2} sum_i eta_delta(x - x_i)`, eta the smooth unit bump),
/// sampled on the lattice.
pub fn empirical_density(
    cfg: &Configuration,
    n: u32,
    delta: f64,
    grid: &DensityGrid,
) -> Vec<f64> {
    let dim = cfg.dim;
    let norm = bump_norm(dim) / delta.powi(dim as i32);
    let scale = cfg.epsilon.powi(dim as i32 - 2);
    let mut field = vec![0.0; grid.n_points()];
    let members: Vec<usize> = (0..cfg.n()).filter(|&i| cfg.masses[i] == n).collect();
    for (lin, value) in field.iter_mut().enumerate() {
        let x = grid.point(lin);
        let mut s = 0.0;
        for &i in &members {
            let d2 = cfg.domain.dist2(&x, cfg.pos(i));
            let t2 = d2 / (delta * delta);
            if t2 < 1.0 {
                s += (-1.0 / (1.0 - t2)).exp();
            }
        }
        *value = scale * norm * s;
    }
    field
}

/// What to record along a run.
pub struct Observers<'a> {
    /// Times at which to store full configuration snapshots.
    pub snapshot_times: &'a [f64],
    /// Record per-mass counts every k steps (0 disables).
    pub counts_every: usize,
    /// Sample the propensity statistic every k steps.
    pub q_probe: Option<QProbe<'a>>,
}

pub struct QProbe<'a> {
    pub m1: u32,
    pub m2: u32,
    pub j_fn: Weight<'a>,
    pub jbar_fn: Weight<'a>,
    pub every: usize,
}

impl Default for Observers<'_> {
    fn default() -> Self {
        Observers {
            snapshot_times: &[],
            counts_every: 0,
            q_probe: None,
        }
    }
}

/// Everything recorded over one run.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryStats {
    pub collision_count: usize,
    /// Accumulated `tau eps^{d-2} sum_pairs hazard`; its replica mean is
    /// bounded by Z.
    pub rate_integral: f64,
    pub events: Vec<CollisionEvent>,
    /// (t, per-mass counts).
    pub counts: Vec<(f64, BTreeMap<u32, usize>)>,
    /// (t, Q(0) sample).
    pub q_series: Vec<(f64, f64)>,
    pub snapshots: Vec<Configuration>,
}

/// Advance to the horizon by diffuse/coagulate splitting.
pub fn run<R: Rng>(
    cfg: &mut Configuration,
    kernel: &KernelV,
    alpha: &RatePolicy,
    dd: &DiffusionPolicy,
    tau: f64,
    horizon: f64,
    observers: &Observers<'_>,
    rng: &mut R,
) -> Result<TrajectoryStats> {
    if !(tau > 0.0) || horizon < 0.0 {
        return Err(CoagError::InvalidParameter(
            "tau must be positive and horizon nonnegative".into(),
        ));
    }
    let mut stats = TrajectoryStats::default();
    let initial_count = cfg.n();
    let mut marks: Vec<f64> = observers
        .snapshot_times
        .iter()
        .copied()
        .filter(|&s| s >= cfg.time && s <= horizon)
        .collect();
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut next_mark = 0usize;
    let record = |stats: &mut TrajectoryStats, cfg: &Configuration| {
        stats.counts.push((cfg.time, cfg.mass_counts()));
    };
    if observers.counts_every > 0 {
        record(&mut stats, cfg);
    }
    let n_steps = (horizon / tau).ceil() as usize;
    for step in 0..n_steps {
        while next_mark < marks.len() && cfg.time >= marks[next_mark] - 0.5 * tau {
            stats.snapshots.push(cfg.clone());
            next_mark += 1;
        }
        let dt = tau.min(horizon - cfg.time);
        if dt <= 0.0 {
            break;
        }
        diffuse(cfg, dd, dt, rng);
        if let Some(probe) = &observers.q_probe {
            if probe.every > 0 && step % probe.every == 0 {
                let q = q_statistic(
                    cfg, kernel, alpha, probe.m1, probe.m2, probe.j_fn, probe.jbar_fn,
                );
                stats.q_series.push((cfg.time, q));
            }
        }
        let (events, propensity) = coagulate_step(cfg, kernel, alpha, dt, rng);
        stats.rate_integral += propensity;
        stats.collision_count += events.len();
        stats.events.extend(events);
        cfg.time += dt;
        if observers.counts_every > 0 && (step + 1) % observers.counts_every == 0 {
            record(&mut stats, cfg);
        }
    }
    while next_mark < marks.len() {
        stats.snapshots.push(cfg.clone());
        next_mark += 1;
    }
    debug_assert_eq!(stats.collision_count, initial_count - cfg.n());
    Ok(stats)
}
