//! Steering-concept x measured-concept x alpha grid.
//!
//! Work is grouped by (steering concept, alpha): every conversation is run
//! once per group and all measured concepts branch off the same pass-1
//! state. Each cell's observations go to their own JSONL file and a
//! manifest records which cells are complete, so an interrupted run can be
//! resumed without recomputing finished cells.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{random_direction_set, ConceptVectorSet};
use crate::stats::derive_seed;
use crate::steering::build_plan;
use crate::tensorio::{read_observations, write_observations, Conversation, Observation};

use super::analysis::{control_name, introspection_summary, IntrospectionSummary};
use super::measure::{alpha_tag, build_observation, MeasurementSource, RatingQuery};
use super::stable_hash;

pub const MANIFEST: &str = "manifest.json";
pub const OBSERVATIONS: &str = "observations.jsonl";
pub const SUMMARIES: &str = "summaries.json";
pub const CELL_DIR: &str = "cells";
const MANIFEST_VERSION: u32 = 1;

/// A concept taking part in the grid.
#[derive(Debug, Clone)]
pub struct GridConcept {
    pub set: ConceptVectorSet<f64>,
    pub query: String,
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub concepts: Vec<GridConcept>,
    pub alphas: Vec<f64>,
    pub master_seed: u64,
    /// Also measure a random-direction control for every concept.
    pub random_controls: bool,
    /// Bootstrap replicates of the per-cell summaries; 0 skips them.
    pub bootstrap_replicates: usize,
    /// Temperature of the sampled digit rating.
    pub rating_temperature: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::InvalidConfig("no concepts".into()));
        }
        let mut names: Vec<&str> = self.concepts.iter().map(|c| c.set.concept_name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("concept names must be unique".into()));
        }
        if !(self.rating_temperature > 0.0) {
            return Err(Error::InvalidConfig("rating temperature must be positive".into()));
        }
        if !self.alphas.contains(&0.0) {
            return Err(Error::InvalidConfig("alphas must include 0".into()));
        }
        let mut a = self.alphas.clone();
        a.sort_by(f64::total_cmp);
        if a.iter().any(|x| !x.is_finite()) || a.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("alphas must be finite and distinct".into()));
        }
        Ok(())
    }

    /// Measured concepts: every concept, then its control if enabled.
    fn measured(&self) -> Vec<(ConceptVectorSet<f64>, RatingQuery)> {
        let mut out = Vec::new();
        for c in &self.concepts {
            let name = &c.set.concept_name;
            let query = RatingQuery { concept: name.clone(), text: c.query.clone() };
            out.push((c.set.clone(), query.clone()));
            if self.random_controls {
                let seed = derive_seed(self.master_seed, stable_hash(&[&control_name(name)]));
                out.push((random_direction_set(&c.set, seed), query));
            }
        }
        out
    }
}

/// Identifies one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub steer_concept: String,
    pub measured_concept: String,
    pub alpha: f64,
}

impl CellKey {
    pub fn file_name(&self) -> String {
        format!("{}__{}__{}.jsonl", self.steer_concept, self.measured_concept, alpha_tag(self.alpha))
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub key: CellKey,
    pub observations: Vec<Observation>,
    pub summary: Option<IntrospectionSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Failed,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    #[serde(flatten)]
    pub key: CellKey,
    pub file: String,
    pub status: CellStatus,
    pub observations: usize,
    pub error: Option<String>,
}

/// Identity of a run; resuming requires an identical fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFingerprint {
    pub master_seed: u64,
    pub alphas: Vec<f64>,
    pub steer_concepts: Vec<String>,
    pub measured_concepts: Vec<String>,
    pub conversations: Vec<String>,
    pub vectors_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub format_version: u32,
    pub fingerprint: RunFingerprint,
    pub cells: Vec<ManifestCell>,
}

impl GridManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?)
    }

    pub fn is_partial(&self) -> bool {
        self.cells.iter().any(|c| c.status != CellStatus::Complete)
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Complete cells in grid order.
    pub cells: Vec<GridCell>,
    pub manifest: GridManifest,
    /// Cells computed in this invocation (the rest were reused).
    pub computed: usize,
}

impl GridOutcome {
    pub fn is_partial(&self) -> bool {
        self.manifest.is_partial()
    }

    /// All observations in grid order.
    pub fn observations(&self) -> Vec<Observation> {
        self.cells.iter().flat_map(|c| c.observations.iter().cloned()).collect()
    }
}

/// Seed of one observation: shared by every steering condition so the
/// alpha-zero column reproduces the unsteered baseline exactly.
pub fn observation_seed(master: u64, measured: &str, conversation_id: &str, turn: usize) -> u64 {
    derive_seed(master, stable_hash(&[measured, conversation_id, &turn.to_string()]))
}

fn fingerprint(
    spec: &GridSpec,
    measured: &[(ConceptVectorSet<f64>, RatingQuery)],
    conversations: &[Conversation],
) -> Result<RunFingerprint> {
    let vectors = measured
        .iter()
        .map(|(s, q)| Ok(format!("{}{}", serde_json::to_string(s)?, q.text)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = vectors.iter().map(String::as_str).collect();
    let convs = conversations.iter().map(|c| Ok(serde_json::to_string(c)?)).collect::<Result<Vec<String>>>()?;
    let conv_refs: Vec<&str> = convs.iter().map(String::as_str).collect();
    Ok(RunFingerprint {
        master_seed: spec.master_seed,
        alphas: spec.alphas.clone(),
        steer_concepts: spec.concepts.iter().map(|c| c.set.concept_name.clone()).collect(),
        measured_concepts: measured.iter().map(|m| m.0.concept_name.clone()).collect(),
        conversations: conversations.iter().map(|c| c.id.clone()).collect(),
        vectors_hash: stable_hash(&refs) ^ stable_hash(&conv_refs).rotate_left(17),
    })
}

/// Runs (or resumes) the grid. With `out_dir`, cell files, the manifest,
/// the concatenated observations and per-cell summaries are written there.
pub fn run_grid(
    spec: &GridSpec,
    conversations: &[Conversation],
    source: &dyn MeasurementSource,
    out_dir: Option<&Path>,
) -> Result<GridOutcome> {
    spec.validate()?;
    if conversations.is_empty() {
        return Err(Error::InvalidConfig("no conversations".into()));
    }
    for c in &spec.concepts {
        if c.set.layer_count() != source.layer_count() || c.set.hidden_dim() != source.hidden_dim() {
            return Err(Error::DimensionMismatch(format!(
                "vectors of `{}` are {}x{}, backend is {}x{}",
                c.set.concept_name,
                c.set.layer_count(),
                c.set.hidden_dim(),
                source.layer_count(),
                source.hidden_dim()
            )));
        }
    }
    let measured = spec.measured();
    let fp = fingerprint(spec, &measured, conversations)?;
    let keys: Vec<CellKey> = spec
        .concepts
        .iter()
        .flat_map(|s| {
            measured.iter().flat_map(move |(m, _)| {
                spec.alphas.iter().map(move |&alpha| CellKey {
                    steer_concept: s.set.concept_name.clone(),
                    measured_concept: m.concept_name.clone(),
                    alpha,
                })
            })
        })
        .collect();

    let mut manifest = GridManifest {
        format_version: MANIFEST_VERSION,
        fingerprint: fp.clone(),
        cells: keys
            .iter()
            .map(|k| ManifestCell {
                key: k.clone(),
                file: format!("{CELL_DIR}/{}", k.file_name()),
                status: CellStatus::Pending,
                observations: 0,
                error: None,
            })
            .collect(),
    };
    let mut results: Vec<Option<Vec<Observation>>> = vec![None; keys.len()];
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join(CELL_DIR))?;
        if dir.join(MANIFEST).is_file() {
            let old = GridManifest::load(dir)?;
            if old.fingerprint != fp {
                return Err(Error::InvalidConfig(format!(
                    "{} holds a different run; use a fresh output directory",
                    dir.display()
                )));
            }
            for (i, cell) in old.cells.iter().enumerate() {
                let path = dir.join(&cell.file);
                if cell.status == CellStatus::Complete && path.is_file() {
                    results[i] = Some(read_observations(&path)?);
                    manifest.cells[i].status = CellStatus::Complete;
                    manifest.cells[i].observations = cell.observations;
                }
            }
        }
    }

    let n_measured = measured.len();
    let n_alpha = spec.alphas.len();
    let cell_index = |s: usize, m: usize, a: usize| (s * n_measured + m) * n_alpha + a;
    let mut computed = 0;
    for (si, steer) in spec.concepts.iter().enumerate() {
        for (ai, &alpha) in spec.alphas.iter().enumerate() {
            let todo: Vec<usize> = (0..n_measured).filter(|&m| results[cell_index(si, m, ai)].is_none()).collect();
            if todo.is_empty() {
                continue;
            }
            let plan = build_plan(&steer.set, alpha);
            let queries: Vec<RatingQuery> = todo.iter().map(|&m| measured[m].1.clone()).collect();
            let run = conversations
                .par_iter()
                .map(|conv| -> Result<Vec<Vec<Observation>>> {
                    let turns: Vec<usize> = (1..=conv.turns.len()).collect();
                    let ms = source.measure(conv, &turns, Some(&plan), &queries)?;
                    let mut per: Vec<Vec<Observation>> = vec![Vec::with_capacity(turns.len()); todo.len()];
                    for m in &ms {
                        for (j, &mi) in todo.iter().enumerate() {
                            let set = &measured[mi].0;
                            let seed = observation_seed(spec.master_seed, &set.concept_name, &conv.id, m.turn);
                            per[j].push(build_observation(
                                &conv.id,
                                m.turn,
                                set,
                                Some(&steer.set.concept_name),
                                alpha,
                                &m.capture,
                                &m.digits[j],
                                spec.rating_temperature,
                                seed,
                            )?);
                        }
                    }
                    Ok(per)
                })
                .collect::<Result<Vec<_>>>();
            match run {
                Ok(per_conv) => {
                    for (j, &mi) in todo.iter().enumerate() {
                        let obs: Vec<Observation> = per_conv.iter().flat_map(|p| p[j].iter().cloned()).collect();
                        let idx = cell_index(si, mi, ai);
                        if let Some(dir) = out_dir {
                            write_observations(&obs, &dir.join(&manifest.cells[idx].file))?;
                        }
                        manifest.cells[idx].status = CellStatus::Complete;
                        manifest.cells[idx].observations = obs.len();
                        manifest.cells[idx].error = None;
                        results[idx] = Some(obs);
                        computed += 1;
                    }
                }
                Err(e) => {
                    log::error!("steering `{}` at alpha {alpha} failed: {e}", steer.set.concept_name);
                    for &mi in &todo {
                        let idx = cell_index(si, mi, ai);
                        manifest.cells[idx].status = CellStatus::Failed;
                        manifest.cells[idx].error = Some(e.to_string());
                    }
                }
            }
            if let Some(dir) = out_dir {
                write_manifest(dir, &manifest)?;
            }
        }
    }

    let mut cells = Vec::new();
    for (key, obs) in keys.into_iter().zip(results) {
        let Some(observations) = obs else { continue };
        let summary = if spec.bootstrap_replicates >= 2 {
            let refs: Vec<&Observation> = observations.iter().collect();
            let seed = derive_seed(
                spec.master_seed,
                stable_hash(&[&key.steer_concept, &key.measured_concept, &alpha_tag(key.alpha)]),
            );
            introspection_summary(&refs, spec.bootstrap_replicates, seed)
                .map_err(|e| log::warn!("no summary for {}: {e}", key.file_name()))
                .ok()
        } else {
            None
        };
        cells.push(GridCell { key, observations, summary });
    }
    let outcome = GridOutcome { cells, manifest, computed };
    if let Some(dir) = out_dir {
        write_manifest(dir, &outcome.manifest)?;
        write_observations(&outcome.observations(), &dir.join(OBSERVATIONS))?;
        let summaries: Vec<serde_json::Value> =
            outcome.cells.iter().map(|c| serde_json::json!({ "cell": c.key, "summary": c.summary })).collect();
        fs::write(dir.join(SUMMARIES), serde_json::to_vec_pretty(&summaries)?)?;
    }
    Ok(outcome)
}

fn write_manifest(dir: &Path, manifest: &GridManifest) -> Result<()> {
    // write-then-rename so a crash never leaves a truncated manifest
    let tmp: PathBuf = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?)?;
    fs::rename(tmp, dir.join(MANIFEST))?;
    Ok(())
}
