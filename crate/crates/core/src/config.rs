//! Experiment configuration: TOML schema, defaults, environment
//! overrides, canonical byte-stable serialization and hashing.

use crate::error::{CoagError, Result};
use crate::model::{
    build_params, DensityShape, DiffusionPolicy, Domain, InitialComponent, InitialDensities,
    KernelV, RadialProfile, RatePolicy, SimParams, DEFAULT_M_MAX, DEFAULT_TAU_FACTOR,
};
use crate::numeric::format_f64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Relative tolerance for an explicitly given epsilon against the value
/// implied by (Z, N, d).
pub const EPSILON_CONSISTENCY_RTOL: f64 = 1e-9;

pub const ENV_PREFIX: &str = "COAG_";

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: ParamsConfig,
    pub domain: DomainConfig,
    pub kernel: KernelConfig,
    pub alpha: AlphaConfig,
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub initial: Vec<InitialComponentConfig>,
    #[serde(default)]
    pub pde: PdeConfig,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub dim: usize,
    pub big_z: f64,
    pub n_particles: usize,
    /// Optional; must agree with (Z/N)^{1/(d-2)} when given.
    pub epsilon: Option<f64>,
    pub tau_factor: Option<f64>,
    pub horizon: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    /// "torus" or "free_space".
    pub kind: String,
    pub side: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// "bump", "parabolic", "indicator" or "table".
    pub profile: String,
    pub support_radius: Option<f64>,
    /// Radial samples for "table", uniform on [0, support_radius].
    pub values: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AlphaConfig {
    /// "constant", "product" or "table".
    pub policy: String,
    pub coeff: Option<f64>,
    pub m_max: Option<u32>,
    pub values: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// "constant", "power" or "table".
    pub policy: String,
    pub coeff: Option<f64>,
    pub exponent: Option<f64>,
    pub values: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitialComponentConfig {
    pub mass: u32,
    pub intensity: f64,
    /// "uniform", "box", "gaussian" or "table".
    pub shape: String,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub center: Option<Vec<f64>>,
    pub sigma: Option<f64>,
    pub cells: Option<Vec<usize>>,
    pub values: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct PdeConfig {
    pub m_max: Option<u32>,
    pub dt: Option<f64>,
    /// None means spatially homogeneous.
    pub spatial_cells: Option<usize>,
    pub snapshot_times: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub replicas: Option<usize>,
    pub out_dir: Option<String>,
    /// Default pipeline when no subcommand picks one.
    pub mode: Option<String>,
    /// Cell-problem radial resolution.
    pub shells: Option<usize>,
    pub residual_tol: Option<f64>,
    /// Record counts / pair statistic every k steps.
    pub counts_every: Option<usize>,
    pub q_every: Option<usize>,
}

impl RunConfig {
    /// Parse a TOML document; unknown keys and type errors carry the
    /// toml parser's span diagnostics.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CoagError::Config(e.to_string()))
    }

    /// Fill every defaultable field explicitly and check cross-field
    /// invariants; idempotent.
    pub fn materialize(mut self) -> Result<Self> {
        // TOML integers are signed 64-bit; seeds beyond that cannot
        // round-trip through the canonical form
        if self.params.seed > i64::MAX as u64 {
            return Err(CoagError::Config(format!(
                "params.seed {} exceeds the TOML integer range ({})",
                self.params.seed,
                i64::MAX
            )));
        }
        self.params.tau_factor.get_or_insert(DEFAULT_TAU_FACTOR);
        let implied = self.sim_params()?;
        match self.params.epsilon {
            None => self.params.epsilon = Some(implied.epsilon),
            Some(eps) => {
                if ((eps - implied.epsilon) / implied.epsilon).abs() > EPSILON_CONSISTENCY_RTOL {
                    return Err(CoagError::Config(format!(
                        "params.epsilon = {eps} inconsistent with (Z/N)^(1/(d-2)) = {}",
                        implied.epsilon
                    )));
                }
            }
        }
        self.kernel.support_radius.get_or_insert(1.0);
        self.pde.m_max.get_or_insert(DEFAULT_M_MAX);
        self.pde.snapshot_times.get_or_insert_with(Vec::new);
        self.run.replicas.get_or_insert(1);
        self.run.out_dir.get_or_insert_with(|| "out".to_string());
        self.run.mode.get_or_insert_with(|| "full".to_string());
        self.run.shells.get_or_insert(crate::cell::DEFAULT_RADIAL_SHELLS);
        self.run
            .residual_tol
            .get_or_insert(crate::cell::DEFAULT_RESIDUAL_TOL);
        self.run.counts_every.get_or_insert(10);
        self.run.q_every.get_or_insert(10);
        // build every model object once so all diagnostics fire at load
        let domain = self.domain_model()?;
        self.kernel_model()?;
        self.alpha_model()?.validate()?;
        self.diffusion_model()?.validate()?;
        if !self.initial.is_empty() {
            self.initial_model()?
                .validate(self.params.dim, &domain, self.params.big_z)?;
        }
        match self.run.mode.as_deref().unwrap() {
            "cell-problem" | "simulate" | "pde" | "validate" | "capacity-curve" | "full" => {}
            other => {
                return Err(CoagError::Config(format!("unknown run.mode \"{other}\"")));
            }
        }
        Ok(self)
    }

    pub fn sim_params(&self) -> Result<SimParams> {
        build_params(
            self.params.dim,
            self.params.big_z,
            self.params.n_particles,
            self.params.tau_factor.unwrap_or(DEFAULT_TAU_FACTOR),
            self.params.horizon,
            self.params.seed,
        )
    }

    pub fn domain_model(&self) -> Result<Domain> {
        match self.domain.kind.as_str() {
            "free_space" => Ok(Domain::FreeSpace),
            "torus" => {
                let side = self.domain.side.ok_or_else(|| {
                    CoagError::Config("domain.side required for a torus".into())
                })?;
                if !(side > 0.0) {
                    return Err(CoagError::Config(format!(
                        "domain.side must be positive, got {side}"
                    )));
                }
                Ok(Domain::Torus { side })
            }
            other => Err(CoagError::Config(format!(
                "domain.kind must be \"torus\" or \"free_space\", got \"{other}\""
            ))),
        }
    }

    pub fn kernel_model(&self) -> Result<KernelV> {
        let radius = self.kernel.support_radius.unwrap_or(1.0);
        let profile = match self.kernel.profile.as_str() {
            "bump" => RadialProfile::Bump,
            "parabolic" => RadialProfile::Parabolic,
            "indicator" => RadialProfile::Indicator,
            "table" => RadialProfile::Table(self.kernel.values.clone().ok_or_else(|| {
                CoagError::Config("kernel.values required for profile \"table\"".into())
            })?),
            other => {
                return Err(CoagError::Config(format!(
                    "unknown kernel.profile \"{other}\""
                )))
            }
        };
        KernelV::new(self.params.dim, radius, profile)
    }

    pub fn alpha_model(&self) -> Result<RatePolicy> {
        let need_coeff = |c: Option<f64>| {
            c.ok_or_else(|| CoagError::Config("alpha.coeff required".into()))
        };
        let policy = match self.alpha.policy.as_str() {
            "constant" => RatePolicy::Constant(need_coeff(self.alpha.coeff)?),
            "product" => RatePolicy::Product(need_coeff(self.alpha.coeff)?),
            "table" => RatePolicy::Table {
                m_max: self.alpha.m_max.ok_or_else(|| {
                    CoagError::Config("alpha.m_max required for a table".into())
                })?,
                values: self.alpha.values.clone().ok_or_else(|| {
                    CoagError::Config("alpha.values required for a table".into())
                })?,
            },
            other => {
                return Err(CoagError::Config(format!(
                    "unknown alpha.policy \"{other}\""
                )))
            }
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn diffusion_model(&self) -> Result<DiffusionPolicy> {
        let policy = match self.diffusion.policy.as_str() {
            "constant" => DiffusionPolicy::Constant(self.diffusion.coeff.ok_or_else(|| {
                CoagError::Config("diffusion.coeff required".into())
            })?),
            "power" => DiffusionPolicy::Power {
                coeff: self.diffusion.coeff.ok_or_else(|| {
                    CoagError::Config("diffusion.coeff required".into())
                })?,
                exponent: self.diffusion.exponent.ok_or_else(|| {
                    CoagError::Config("diffusion.exponent required for \"power\"".into())
                })?,
            },
            "table" => DiffusionPolicy::Table(self.diffusion.values.clone().ok_or_else(|| {
                CoagError::Config("diffusion.values required for a table".into())
            })?),
            other => {
                return Err(CoagError::Config(format!(
                    "unknown diffusion.policy \"{other}\""
                )))
            }
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn initial_model(&self) -> Result<InitialDensities> {
        let mut components = Vec::with_capacity(self.initial.len());
        for (i, c) in self.initial.iter().enumerate() {
            let need = |name: &str| {
                CoagError::Config(format!("initial[{i}].{name} required for shape \"{}\"", c.shape))
            };
            let shape = match c.shape.as_str() {
                "uniform" => DensityShape::Uniform,
                "box" => DensityShape::UniformBox {
                    lo: c.lo.clone().ok_or_else(|| need("lo"))?,
                    hi: c.hi.clone().ok_or_else(|| need("hi"))?,
                },
                "gaussian" => DensityShape::Gaussian {
                    center: c.center.clone().ok_or_else(|| need("center"))?,
                    sigma: c.sigma.ok_or_else(|| need("sigma"))?,
                },
                "table" => DensityShape::Table {
                    lo: c.lo.clone().ok_or_else(|| need("lo"))?,
                    hi: c.hi.clone().ok_or_else(|| need("hi"))?,
                    shape: c.cells.clone().ok_or_else(|| need("cells"))?,
                    values: c.values.clone().ok_or_else(|| need("values"))?,
                },
                other => {
                    return Err(CoagError::Config(format!(
                        "unknown initial[{i}].shape \"{other}\""
                    )))
                }
            };
            components.push(InitialComponent {
                mass: c.mass,
                shape,
                intensity: c.intensity,
            });
        }
        Ok(InitialDensities { components })
    }

    /// Byte-stable canonical TOML: keys sorted, floats in fixed decimal
    /// scientific form, defaults materialized by the caller.
    pub fn canonical_toml(&self) -> Result<String> {
        let value = toml::Value::try_from(self)
            .map_err(|e| CoagError::Config(format!("serialization failed: {e}")))?;
        let table = value
            .as_table()
            .ok_or_else(|| CoagError::Config("config did not serialize to a table".into()))?;
        let mut out = String::new();
        emit_table(table, "", &mut out);
        Ok(out)
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> Result<String> {
        let canon = self.canonical_toml()?;
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}

fn emit_scalar(v: &toml::Value) -> String {
    match v {
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => format_f64(*f),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::String(s) => {
            let mut out = String::from("\"");
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    '\r' => out.push_str("\\r"),
                    c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04X}", c as u32)),
                    c => out.push(c),
                }
            }
            out.push('"');
            out
        }
        toml::Value::Array(a) => {
            let items: Vec<String> = a.iter().map(emit_scalar).collect();
            format!("[{}]", items.join(", "))
        }
        toml::Value::Datetime(d) => d.to_string(),
        toml::Value::Table(_) => unreachable!("tables are emitted structurally"),
    }
}

fn emit_table(t: &toml::value::Table, path: &str, out: &mut String) {
    let is_table_array =
        |v: &toml::Value| matches!(v, toml::Value::Array(a) if !a.is_empty() && a.iter().all(|e| e.is_table()));
    let mut scalars: Vec<&String> = Vec::new();
    let mut tables: Vec<&String> = Vec::new();
    let mut arrays: Vec<&String> = Vec::new();
    for (k, v) in t {
        if v.is_table() {
            tables.push(k);
        } else if is_table_array(v) {
            arrays.push(k);
        } else {
            scalars.push(k);
        }
    }
    scalars.sort();
    tables.sort();
    arrays.sort();
    for k in scalars {
        out.push_str(&format!("{k} = {}\n", emit_scalar(&t[k])));
    }
    let join = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    for k in tables {
        let sub = join(k);
        out.push_str(&format!("\n[{sub}]\n"));
        emit_table(t[k].as_table().unwrap(), &sub, out);
    }
    for k in arrays {
        let sub = join(k);
        if let toml::Value::Array(a) = &t[k] {
            for e in a {
                out.push_str(&format!("\n[[{sub}]]\n"));
                emit_table(e.as_table().unwrap(), &sub, out);
            }
        }
    }
}

/// Apply `COAG_SECTION__KEY=value` overrides to a raw TOML tree before
/// deserialization. Values parse as TOML scalars, falling back to plain
/// strings. Array-of-table paths use a numeric segment
/// (`COAG_INITIAL__0__MASS`).
pub fn apply_env_overrides<I>(table: &mut toml::value::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (key, raw) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
        if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
            return Err(CoagError::Config(format!("malformed override key {key}")));
        }
        let value = parse_scalar(&raw);
        insert_path(table, &segments, value)
            .map_err(|msg| CoagError::Config(format!("override {key}: {msg}")))?;
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(t) = format!("v = {raw}").parse::<toml::value::Table>() {
        if let Some(v) = t.get("v") {
            if !v.is_table() {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

fn insert_path(
    table: &mut toml::value::Table,
    segments: &[String],
    value: toml::Value,
) -> std::result::Result<(), String> {
    let (head, rest) = segments.split_first().unwrap();
    if rest.is_empty() {
        table.insert(head.clone(), value);
        return Ok(());
    }
    let entry = table
        .entry(head.clone())
        .or_insert_with(|| toml::Value::Table(toml::value::Table::new()));
    // descend through a numeric segment into an array of tables
    if let Ok(idx) = rest[0].parse::<usize>() {
        let arr = entry
            .as_array_mut()
            .ok_or_else(|| format!("{head} is not an array"))?;
        let slot = arr.get_mut(idx).ok_or_else(|| {
            format!("index {idx} out of range for {head} (len {})", idx.min(usize::MAX))
        })?;
        let sub = slot
            .as_table_mut()
            .ok_or_else(|| format!("{head}[{idx}] is not a table"))?;
        if rest.len() == 1 {
            return Err(format!("override path ends at array element {head}[{idx}]"));
        }
        return insert_path(sub, &rest[1..], value);
    }
    let sub = entry
        .as_table_mut()
        .ok_or_else(|| format!("{head} is not a table"))?;
    insert_path(sub, rest, value)
}

/// Load, override from the process environment, and materialize.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with_env(text, std::env::vars())
}

pub fn parse_config_with_env<I>(text: &str, vars: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::value::Table =
        text.parse().map_err(|e: toml::de::Error| CoagError::Config(e.to_string()))?;
    apply_env_overrides(&mut table, vars)?;
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CoagError::Config(e.to_string()))?;
    cfg.materialize()
}
