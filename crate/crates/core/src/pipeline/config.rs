//! Run configuration (TOML) and the driver that turns it into a grid run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{search_band, ConceptSpec, ConceptVectorSet};
use crate::stats::{derive_seed, DEFAULT_REPLICATES};
use crate::steering::DEFAULT_ALPHAS;
use crate::tensorio::{random_unit_vector, read_conversations};
use crate::toybackend::{build_introspective_toy, DecodeParams, ReadoutOptions, ToyModel, ToyModelConfig};

use super::grid::{run_grid, GridConcept, GridOutcome, GridSpec};
use super::measure::{DumpSource, MeasurementSource, ToySource};
use super::query::{rating_phrase, rating_query_from_phrase, DEFAULT_ASSISTANT_SYSTEM_PROMPT};
use super::stable_hash;
use super::train::train_probe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Toy {
        #[serde(default)]
        model: ToyModelConfig,
        /// Adds a linear digit readout from the middle layer.
        #[serde(default)]
        readout: Option<ReadoutOptions>,
    },
    /// Measurements exported to a dump tree by an external bridge.
    Dump { dir: PathBuf },
    /// Live checkpoints are only reachable through the exporter.
    External {
        #[serde(default)]
        endpoint_env: Option<String>,
    },
}

/// Where a concept's vectors come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSource {
    /// Train on the backend (or read `vectors` when given).
    #[default]
    Train,
    /// Toy backend only: the readout direction at every layer.
    ToyReadout,
    /// A seeded random direction at every layer.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub spec: PathBuf,
    #[serde(default)]
    pub vectors: Option<PathBuf>,
    #[serde(default)]
    pub direction: DirectionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub assistant: DecodeParams,
    pub user: DecodeParams,
    pub rating: DecodeParams,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            assistant: DecodeParams::sampled(0.8, 0.9, 256),
            user: DecodeParams::sampled(0.7, 0.95, 256),
            rating: DecodeParams::sampled(0.8, 1.0, 8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub concepts: Vec<ConceptEntry>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    pub conversations: PathBuf,
    #[serde(default = "default_replicates")]
    pub bootstrap_replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub decode: DecodeConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_system_prompt")]
    pub system_prompt: String,
    #[serde(default)]
    pub random_controls: bool,
}

fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}

fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}

fn default_system_prompt() -> String {
    DEFAULT_ASSISTANT_SYSTEM_PROMPT.to_string()
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string())
}

impl RunConfig {
    /// Parses a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(config_error)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.conversations);
        fix(&mut self.output_dir);
        if let BackendConfig::Dump { dir } = &mut self.backend {
            fix(dir);
        }
        for c in &mut self.concepts {
            fix(&mut c.spec);
            if let Some(v) = &mut c.vectors {
                fix(v);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(config_error("at least one concept is required"));
        }
        if !self.alphas.contains(&0.0) {
            return Err(config_error("alphas must include 0"));
        }
        if self.bootstrap_replicates == 1 {
            return Err(config_error("bootstrap_replicates must be 0 (off) or at least 2"));
        }
        for d in [&self.decode.assistant, &self.decode.user, &self.decode.rating] {
            d.validate().map_err(config_error)?;
        }
        for c in &self.concepts {
            let toy = matches!(self.backend, BackendConfig::Toy { .. });
            if c.direction == DirectionSource::ToyReadout && !toy {
                return Err(config_error("direction = \"toy_readout\" needs the toy backend"));
            }
            if c.direction == DirectionSource::Train && c.vectors.is_none() && !toy {
                return Err(config_error(format!(
                    "{}: provide trained vectors for non-toy backends",
                    c.spec.display()
                )));
            }
        }
        Ok(())
    }

    pub fn load_specs(&self) -> Result<Vec<ConceptSpec>> {
        let specs = self.concepts.iter().map(|c| ConceptSpec::load(&c.spec)).collect::<Result<Vec<_>>>()?;
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_error("concept names must be unique"));
        }
        Ok(specs)
    }
}

/// Rating query of a concept: its own phrase, else the registered one.
pub fn query_for(spec: &ConceptSpec) -> Result<String> {
    spec.rating_phrase
        .as_deref()
        .or_else(|| rating_phrase(&spec.name))
        .map(rating_query_from_phrase)
        .ok_or_else(|| Error::UnknownConcept(spec.name.clone()))
}

fn toy_model(model: &ToyModelConfig, readout: Option<ReadoutOptions>) -> Result<(ToyModel<f64>, Option<Vec<f64>>)> {
    Ok(match readout {
        Some(r) => {
            let (m, u) = build_introspective_toy(model.clone(), r)?;
            (m, Some(u))
        }
        None => (ToyModel::new(model.clone())?, None),
    })
}

/// Vector sets for every configured concept.
fn vector_sets(
    cfg: &RunConfig,
    specs: &[ConceptSpec],
    toy: Option<(&ToyModel<f64>, Option<&[f64]>)>,
    shape: (usize, usize),
) -> Result<Vec<ConceptVectorSet<f64>>> {
    let (layers, dim) = shape;
    let band = search_band(layers)?;
    let mid = (band.0 + band.1).div_ceil(2);
    cfg.concepts
        .iter()
        .zip(specs)
        .map(|(entry, spec)| {
            if let Some(path) = &entry.vectors {
                let set = ConceptVectorSet::load(path)?;
                if set.concept_name != spec.name {
                    return Err(config_error(format!(
                        "{} holds vectors for `{}`, expected `{}`",
                        path.display(),
                        set.concept_name,
                        spec.name
                    )));
                }
                return Ok(set);
            }
            match entry.direction {
                DirectionSource::Train => {
                    let (model, _) = toy.ok_or_else(|| config_error("training needs the toy backend"))?;
                    log::info!("training `{}` on the toy backend", spec.name);
                    Ok(train_probe(model, spec)?.vectors)
                }
                DirectionSource::ToyReadout => {
                    let u = toy
                        .and_then(|t| t.1)
                        .ok_or_else(|| config_error("toy_readout needs `readout` in the toy backend"))?;
                    let best = toy.map_or(mid, |t| t.0.readout().map_or(mid, |r| r.layer)).clamp(band.0, band.1);
                    ConceptVectorSet::uniform(&spec.name, u, layers, best, spec.sign_correction)
                }
                DirectionSource::Random => {
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(
                        cfg.seed,
                        stable_hash(&["direction", &spec.name]),
                    ));
                    let v = random_unit_vector(&mut rng, dim);
                    ConceptVectorSet::uniform(&spec.name, &v, layers, mid, spec.sign_correction)
                }
            }
        })
        .collect()
}

/// Loads everything a config names and runs the grid into its output directory.
pub fn run_config(cfg: &RunConfig) -> Result<GridOutcome> {
    cfg.validate()?;
    let specs = cfg.load_specs()?;
    let conversations = read_conversations(&cfg.conversations)?;
    let grid = |sets: Vec<ConceptVectorSet<f64>>, source: &dyn MeasurementSource| {
        let concepts = sets
            .into_iter()
            .zip(&specs)
            .map(|(set, spec)| Ok(GridConcept { set, query: query_for(spec)? }))
            .collect::<Result<Vec<_>>>()?;
        let spec = GridSpec {
            concepts,
            alphas: cfg.alphas.clone(),
            master_seed: cfg.seed,
            random_controls: cfg.random_controls,
            bootstrap_replicates: cfg.bootstrap_replicates,
            rating_temperature: cfg.decode.rating.temperature,
        };
        run_grid(&spec, &conversations, source, Some(&cfg.output_dir))
    };
    match &cfg.backend {
        BackendConfig::Toy { model, readout } => {
            let (m, u) = toy_model(model, *readout)?;
            let shape = (m.config().layer_count, m.config().hidden_dim);
            let sets = vector_sets(cfg, &specs, Some((&m, u.as_deref())), shape)?;
            let source = ToySource { model: &m, system_prompt: cfg.system_prompt.clone() };
            grid(sets, &source)
        }
        BackendConfig::Dump { dir } => {
            let source = DumpSource::open(dir)?;
            let sets = vector_sets(cfg, &specs, None, (source.layer_count(), source.hidden_dim()))?;
            grid(sets, &source)
        }
        BackendConfig::External { .. } => Err(Error::Unsupported(
            "external backends are driven by the exporter; point a dump backend at its output".into(),
        )),
    }
}
