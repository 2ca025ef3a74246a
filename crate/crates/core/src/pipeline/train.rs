//! Probe training runs: contrastive completions under the two pole system
//! prompts, then a layer sweep on held-out evaluation texts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{
    pooled_representation, sweep_and_select, train_concept_vectors, ConceptSpec, ConceptVectorSet, LayerSweepResult,
    TrainedDirections,
};
use crate::tensorio::{load_dump, ActivationTensor, RoleFilter, TokenRole};
use crate::toybackend::{Backend, ChatMessage, DecodeParams};

/// Greedy completion budget of probe-training generations.
pub const TRAINING_MAX_NEW_TOKENS: usize = 64;

const POOL: RoleFilter = RoleFilter::Only(TokenRole::Assistant);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutput {
    pub directions: TrainedDirections<f64>,
    pub sweep: LayerSweepResult,
    pub vectors: ConceptVectorSet<f64>,
}

/// Capture of `prompt` followed by its greedy completion.
fn completion_capture(backend: &dyn Backend, system: &str, question: &str) -> Result<ActivationTensor<f64>> {
    let prompt = backend.render(&[ChatMessage::system(system), ChatMessage::user(question)], true);
    let completion = backend.generate(&prompt, &DecodeParams::greedy(TRAINING_MAX_NEW_TOKENS), None, 0)?;
    Ok(backend.forward_capture(&prompt.with_completion(&completion), None)?.0)
}

/// Evaluation texts are scored as a lone assistant message.
fn eval_capture(backend: &dyn Backend, text: &str) -> Result<ActivationTensor<f64>> {
    Ok(backend.forward_capture(&backend.render(&[ChatMessage::assistant(text)], false), None)?.0)
}

/// Trains one concept against a live backend.
pub fn train_probe(backend: &dyn Backend, spec: &ConceptSpec) -> Result<TrainingOutput> {
    spec.validate()?;
    if !backend.contract().capabilities.hidden_state_capture || !backend.contract().capabilities.generation {
        return Err(Error::Unsupported("probe training needs generation and hidden-state capture".into()));
    }
    let mut pos = Vec::with_capacity(spec.training_questions.len());
    let mut neg = Vec::with_capacity(spec.training_questions.len());
    for q in &spec.training_questions {
        pos.push(completion_capture(backend, &spec.positive_system_prompt, q)?);
        neg.push(completion_capture(backend, &spec.negative_system_prompt, q)?);
    }
    let eval_pos = spec.eval_texts_pos.iter().map(|t| eval_capture(backend, t)).collect::<Result<Vec<_>>>()?;
    let eval_neg = spec.eval_texts_neg.iter().map(|t| eval_capture(backend, t)).collect::<Result<Vec<_>>>()?;
    fit(spec, &pos, &neg, &eval_pos, &eval_neg)
}

fn fit(
    spec: &ConceptSpec,
    pos: &[ActivationTensor<f64>],
    neg: &[ActivationTensor<f64>],
    eval_pos: &[ActivationTensor<f64>],
    eval_neg: &[ActivationTensor<f64>],
) -> Result<TrainingOutput> {
    let pool =
        |ts: &[ActivationTensor<f64>]| ts.iter().map(|t| pooled_representation(t, POOL)).collect::<Result<Vec<_>>>();
    let directions = train_concept_vectors(&pool(pos)?, &pool(neg)?)?;
    let (sweep, vectors) = sweep_and_select(&spec.name, &directions, eval_pos, eval_neg, POOL, spec.sign_correction)?;
    Ok(TrainingOutput { directions, sweep, vectors })
}

/// Reruns only the layer sweep with existing directions.
pub fn sweep_probe(
    backend: &dyn Backend,
    spec: &ConceptSpec,
    directions: &TrainedDirections<f64>,
) -> Result<(LayerSweepResult, ConceptVectorSet<f64>)> {
    let eval_pos = spec.eval_texts_pos.iter().map(|t| eval_capture(backend, t)).collect::<Result<Vec<_>>>()?;
    let eval_neg = spec.eval_texts_neg.iter().map(|t| eval_capture(backend, t)).collect::<Result<Vec<_>>>()?;
    sweep_and_select(&spec.name, directions, &eval_pos, &eval_neg, POOL, spec.sign_correction)
}

/// Dumps below `dir/<sub>/`, in lexical order of their directory names.
pub fn load_dump_list(dir: &Path) -> Result<Vec<ActivationTensor<f64>>> {
    if !dir.is_dir() {
        return Err(Error::Missing(format!("dump directory {}", dir.display())));
    }
    let mut paths: Vec<_> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    paths.sort();
    paths.iter().map(|p| load_dump(p)).collect()
}

/// Trains from exported dumps laid out as `pos/`, `neg/`, `eval_pos/` and
/// `eval_neg/`, each holding one dump directory per sample.
pub fn train_probe_from_dumps(dir: &Path, spec: &ConceptSpec) -> Result<TrainingOutput> {
    spec.validate()?;
    let pos = load_dump_list(&dir.join("pos"))?;
    let neg = load_dump_list(&dir.join("neg"))?;
    let eval_pos = load_dump_list(&dir.join("eval_pos"))?;
    let eval_neg = load_dump_list(&dir.join("eval_neg"))?;
    fit(spec, &pos, &neg, &eval_pos, &eval_neg)
}

/// Layer sweep on exported `eval_pos/` and `eval_neg/` dumps.
pub fn sweep_probe_from_dumps(
    dir: &Path,
    spec: &ConceptSpec,
    directions: &TrainedDirections<f64>,
) -> Result<(LayerSweepResult, ConceptVectorSet<f64>)> {
    let eval_pos = load_dump_list(&dir.join("eval_pos"))?;
    let eval_neg = load_dump_list(&dir.join("eval_neg"))?;
    sweep_and_select(&spec.name, directions, &eval_pos, &eval_neg, POOL, spec.sign_correction)
}
