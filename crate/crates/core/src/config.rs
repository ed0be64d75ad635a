//! Experiment configuration: TOML parsing, `key=value` overrides,
//! validation and the content digest that names a run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corrector::{InjectionCov, DEFAULT_T_STAR};
use crate::diffusion::{build_schedule, NoiseSchedule, ScheduleKind, SigmaRule};
use crate::error::{Error, Result};
use crate::gmm::{CovarianceType, EmOptions, InitStrategy, DEFAULT_REG_FLOOR};
use crate::population::{Preset, PresetParams, Separations};
use crate::population::{build_population, Attribute, ComponentEntry, Population, PopulationFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Root under which `<digest>/` run directories are created.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub population: PopulationConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub correct: CorrectConfig,
    #[serde(default)]
    pub gmm: GmmConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory relative paths in the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Exactly one of `preset`, `file` or inline `components`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
    pub dimension: Option<usize>,
    pub components: Option<Vec<ComponentEntry>>,
    pub age_weights: Option<Vec<f64>>,
    pub gender_weights: Option<Vec<f64>>,
    pub race_weights: Option<Vec<f64>>,
    pub separation: Option<Separations>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_rule: SigmaRule,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_rule: SigmaRule::SqrtBeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Mode-seeking exponent applied to the population weights.
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { gamma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentCounts {
    pub age: usize,
    pub gender: usize,
    pub race: usize,
}

impl ComponentCounts {
    pub fn get(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Age => self.age,
            Attribute::Gender => self.gender,
            Attribute::Race => self.race,
        }
    }
}

impl Default for ComponentCounts {
    fn default() -> Self {
        ComponentCounts {
            age: 2,
            gender: 2,
            race: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectConfig {
    pub t_star: usize,
    #[serde(rename = "K")]
    pub k: ComponentCounts,
    pub n_calib: usize,
    pub injection_cov: InjectionCov,
    /// Latents per component used to name components by class.
    pub n_probe: usize,
}

impl Default for CorrectConfig {
    fn default() -> Self {
        CorrectConfig {
            t_star: DEFAULT_T_STAR,
            k: ComponentCounts::default(),
            n_calib: 2000,
            injection_cov: InjectionCov::Fitted,
            n_probe: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub cov_type: CovarianceType,
    pub reg_floor: f64,
    pub init: InitStrategy,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            tol: 1e-6,
            max_iter: 500,
            restarts: 4,
            cov_type: CovarianceType::Diagonal,
            reg_floor: DEFAULT_REG_FLOOR,
            init: InitStrategy::FarthestFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub attribute: Attribute,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 5000,
            attribute: Attribute::Gender,
        }
    }
}

/// Applies `key=value` overrides to a parsed TOML table. Values are read as
/// TOML (`3`, `0.5`, `[0.7, 0.3]`, `"x"`); anything that does not parse is
/// taken as a bare string.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            return Err(Error::config(item.as_str(), "override must look like key=value"));
        };
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::config(item.as_str(), "empty key segment"));
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut *table;
        for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = match entry {
                toml::Value::Table(t) => t,
                _ => {
                    return Err(Error::config(
                        parts[..=i].join("."),
                        "is not a table and cannot hold sub-keys",
                    ))
                }
            };
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse(text: &str, overrides: &[String], origin: &str) -> Result<ExperimentConfig> {
    let err = |e: toml::de::Error| Error::config(origin, e.to_string().trim_end());
    if overrides.is_empty() {
        // direct parse keeps line/column spans in the diagnostics
        return toml::from_str(text).map_err(err);
    }
    let mut table: toml::Table = text.parse().map_err(err)?;
    apply_overrides(&mut table, overrides)?;
    toml::Value::Table(table).try_into().map_err(err)
}

impl ExperimentConfig {
    /// Parses and validates config text with overrides applied.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
        let cfg = parse(text, overrides, "<config>")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = parse(&text, overrides, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every key that does not need the population.
    pub fn validate(&self) -> Result<()> {
        let p = &self.population;
        let sources = [p.preset.is_some(), p.file.is_some(), p.components.is_some()];
        match sources.iter().filter(|s| **s).count() {
            1 => {}
            0 => {
                return Err(Error::config(
                    "population",
                    "set one of `preset`, `file` or inline `components`",
                ))
            }
            _ => {
                return Err(Error::config(
                    "population",
                    "`preset`, `file` and `components` are mutually exclusive",
                ))
            }
        }
        if let Some(name) = &p.preset {
            name.parse::<Preset>()?;
        } else {
            for (key, set) in [
                ("population.age_weights", p.age_weights.is_some()),
                ("population.gender_weights", p.gender_weights.is_some()),
                ("population.race_weights", p.race_weights.is_some()),
                ("population.separation", p.separation.is_some()),
            ] {
                if set {
                    return Err(Error::config(key, "only applies to a preset population"));
                }
            }
        }
        if p.file.is_some() && p.dimension.is_some() {
            return Err(Error::config("population.dimension", "comes from the population file"));
        }
        if p.components.is_some() && p.dimension.is_none() {
            return Err(Error::config("population.dimension", "required with inline components"));
        }

        let d = &self.diffusion;
        if d.steps == 0 {
            return Err(Error::config("diffusion.T", "must be at least 1"));
        }
        if !(d.beta_start > 0.0 && d.beta_start < 1.0) {
            return Err(Error::config("diffusion.beta_start", "must lie in (0, 1)"));
        }
        if !(d.beta_end >= d.beta_start && d.beta_end < 1.0) {
            return Err(Error::config("diffusion.beta_end", "must lie in [beta_start, 1)"));
        }
        if !(self.model.gamma.is_finite() && self.model.gamma >= 1.0) {
            return Err(Error::config("model.gamma", "must be a finite number >= 1"));
        }

        let c = &self.correct;
        if c.t_star == 0 || c.t_star > d.steps {
            return Err(Error::config(
                "correct.t_star",
                format!("must lie in [1, {}], got {}", d.steps, c.t_star),
            ));
        }
        for attr in Attribute::ALL {
            if c.k.get(attr) != attr.class_count() {
                return Err(Error::config(
                    format!("correct.K.{attr}"),
                    format!(
                        "must equal the number of {attr} classes ({}), got {}",
                        attr.class_count(),
                        c.k.get(attr)
                    ),
                ));
            }
        }
        let kmax = Attribute::ALL.iter().map(|a| c.k.get(*a)).max().unwrap_or(0);
        if c.n_calib < 10 * kmax {
            return Err(Error::config(
                "correct.n_calib",
                format!("must be at least 10 x K = {}", 10 * kmax),
            ));
        }
        if c.n_probe == 0 {
            return Err(Error::config("correct.n_probe", "must be at least 1"));
        }

        let g = &self.gmm;
        if !(g.tol.is_finite() && g.tol > 0.0) {
            return Err(Error::config("gmm.tol", "must be positive"));
        }
        if g.max_iter == 0 {
            return Err(Error::config("gmm.max_iter", "must be at least 1"));
        }
        if g.restarts == 0 {
            return Err(Error::config("gmm.restarts", "must be at least 1"));
        }
        if !(g.reg_floor.is_finite() && g.reg_floor > 0.0) {
            return Err(Error::config("gmm.reg_floor", "must be positive"));
        }
        if self.eval.n_samples == 0 {
            return Err(Error::config("eval.n_samples", "must be at least 1"));
        }
        Ok(())
    }

    /// The population description this config selects.
    pub fn population_file(&self) -> Result<PopulationFile> {
        let p = &self.population;
        if let Some(name) = &p.preset {
            let preset: Preset = name.parse()?;
            return preset.describe(&PresetParams {
                dimension: p.dimension,
                age_weights: p.age_weights.clone(),
                gender_weights: p.gender_weights.clone(),
                race_weights: p.race_weights.clone(),
                separation: p.separation,
            });
        }
        if let Some(file) = &p.file {
            let path = self.base_dir.join(file);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return toml::from_str(&text)
                .map_err(|e| Error::config("population.file", format!("{}: {}", path.display(), e.to_string().trim_end())));
        }
        Ok(PopulationFile {
            dimension: p.dimension.unwrap_or_default(),
            components: p.components.clone().unwrap_or_default(),
        })
    }

    /// Builds the population and checks that `eval.attribute` varies in it.
    pub fn population(&self) -> Result<Population> {
        let key = if self.population.file.is_some() {
            "population.file"
        } else {
            "population.components"
        };
        let pop = build_population(&self.population_file()?).map_err(|e| match e {
            Error::Population(m) | Error::NotPositiveDefinite(m) => Error::config(key, m),
            Error::DimensionMismatch { expected, actual } => {
                Error::config(key, format!("dimension mismatch: expected {expected}, got {actual}"))
            }
            other => other,
        })?;
        if !pop.active_attributes().contains(&self.eval.attribute) {
            return Err(Error::config(
                "eval.attribute",
                format!("{} does not vary in this population", self.eval.attribute),
            ));
        }
        Ok(pop)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        build_schedule(d.steps, d.beta_start, d.beta_end, ScheduleKind::Linear, d.sigma_rule)
    }

    pub fn em_options(&self, seed: u64) -> EmOptions {
        let g = &self.gmm;
        EmOptions {
            tol: g.tol,
            max_iter: g.max_iter,
            n_restarts: g.restarts,
            seed,
            reg_floor: g.reg_floor,
            init: g.init,
        }
    }

    /// SHA-256 (hex) over the canonical JSON of the config, minus the output
    /// root, together with the resolved population.
    pub fn digest(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Canonical<'a> {
            config: &'a ExperimentConfig,
            population: PopulationFile,
        }
        let mut config = self.clone();
        config.out = PathBuf::new();
        let canonical = Canonical {
            population: self.population_file()?,
            config: &config,
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Ok(sha256_hex(&json))
    }

    /// `<out>/<first 16 hex digits of the digest>`.
    pub fn run_dir(&self) -> Result<PathBuf> {
        let digest = self.digest()?;
        Ok(self.base_dir.join(&self.out).join(&digest[..16]))
    }
}
