//! Two-pass turn measurement.
//!
//! Pass 1 runs the conversation through the assistant response of a turn
//! and scores the last assistant span with the measured probe. Pass 2
//! appends one rating query to that same prefix and reads the digit logits
//! at the first generated position. Rating queries never enter the history
//! seen by later turns.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{probe_score, ConceptVectorSet};
use crate::selfreport::{aggregate_digit_logits, expected_rating, sample_rating_seeded, DigitLogits, DigitTokenMap};
use crate::steering::{apply_to_tensor, ResidualHook, SteeringPlan};
use crate::tensorio::{load_dump, ActivationTensor, Conversation, Observation, RoleFilter, TokenRole};
use crate::toybackend::{Backend, ChatMessage, ToyModel};
use crate::Scalar;

/// Tokens pooled for the pre-question probe score.
pub const PROBE_FILTER: RoleFilter = RoleFilter::LastSpan(TokenRole::Assistant);

/// Default temperature of the sampled rating.
pub const RATING_TEMPERATURE: f64 = 0.8;

/// A rating question tied to the concept whose logits it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingQuery {
    pub concept: String,
    pub text: String,
}

/// Pass-1 capture of one turn and the pass-2 digit scores of each query.
#[derive(Debug, Clone)]
pub struct TurnMeasurement {
    pub turn: usize,
    pub capture: ActivationTensor<f64>,
    /// Aligned with the queries passed to [`MeasurementSource::measure`].
    pub digits: Vec<DigitLogits<f64>>,
}

/// Anything that can produce pass-1 captures and pass-2 digit scores.
pub trait MeasurementSource: Sync {
    fn layer_count(&self) -> usize;

    fn hidden_dim(&self) -> usize;

    /// Measures the given one-based turns of `conversation` under `plan`.
    fn measure(
        &self,
        conversation: &Conversation,
        turns: &[usize],
        plan: Option<&SteeringPlan<f64>>,
        queries: &[RatingQuery],
    ) -> Result<Vec<TurnMeasurement>>;
}

/// Chat messages of `conversation` through the assistant reply of `turn`.
pub fn conversation_messages(
    conversation: &Conversation,
    turn: usize,
    system_prompt: &str,
) -> Result<Vec<ChatMessage>> {
    check_turn(conversation, turn)?;
    let mut messages = vec![ChatMessage::system(system_prompt)];
    for t in &conversation.turns[..turn] {
        messages.push(ChatMessage::user(&t.user));
        messages.push(ChatMessage::assistant(&t.assistant));
    }
    Ok(messages)
}

fn check_turn(conversation: &Conversation, turn: usize) -> Result<()> {
    if turn == 0 || turn > conversation.turns.len() {
        return Err(Error::InvalidArgument(format!(
            "turn {turn} outside 1..={} of conversation `{}`",
            conversation.turns.len(),
            conversation.id
        )));
    }
    Ok(())
}

/// Builds the observation for one measured concept from a turn measurement.
#[allow(clippy::too_many_arguments)]
pub fn build_observation(
    conversation_id: &str,
    turn: usize,
    measured: &ConceptVectorSet<f64>,
    steer_concept: Option<&str>,
    alpha: f64,
    capture: &ActivationTensor<f64>,
    digits: &DigitLogits<f64>,
    rating_temperature: f64,
    seed: u64,
) -> Result<Observation> {
    let probe = probe_score(capture, measured, PROBE_FILTER)?;
    let mut report = expected_rating(digits);
    report.sampled = Some(sample_rating_seeded(digits, rating_temperature, seed)?);
    Ok(Observation {
        conversation_id: conversation_id.to_string(),
        turn,
        concept: measured.concept_name.clone(),
        steer_concept: steer_concept.map(String::from),
        alpha,
        probe_score_prev: probe,
        report,
        seed,
    })
}

/// One measurement on any [`Backend`], with two independent forward passes.
#[allow(clippy::too_many_arguments)]
pub fn measure_turn(
    conversation: &Conversation,
    turn: usize,
    measured: &ConceptVectorSet<f64>,
    query: &str,
    plan: Option<&SteeringPlan<f64>>,
    backend: &dyn Backend,
    system_prompt: &str,
    seed: u64,
) -> Result<Observation> {
    let source = BackendSource { backend, system_prompt: system_prompt.to_string() };
    let q = RatingQuery { concept: measured.concept_name.clone(), text: query.to_string() };
    let m = source.measure(conversation, &[turn], plan, std::slice::from_ref(&q))?;
    let m = &m[0];
    build_observation(
        &conversation.id,
        turn,
        measured,
        plan.map(|p| p.concept_name.as_str()),
        plan.map_or(0.0, |p| p.alpha),
        &m.capture,
        &m.digits[0],
        RATING_TEMPERATURE,
        seed,
    )
}

/// Pass 2 prompt: the pass-1 messages plus one rating query, ready for generation.
fn rating_messages(base: &[ChatMessage], query: &str) -> Vec<ChatMessage> {
    let mut messages = base.to_vec();
    messages.push(ChatMessage::rating_query(query));
    messages
}

/// Drives a [`Backend`] with a fresh forward pass per capture and per query.
pub struct BackendSource<'a> {
    pub backend: &'a dyn Backend,
    pub system_prompt: String,
}

impl MeasurementSource for BackendSource<'_> {
    fn layer_count(&self) -> usize {
        self.backend.contract().layer_count
    }

    fn hidden_dim(&self) -> usize {
        self.backend.contract().hidden_dim
    }

    fn measure(
        &self,
        conversation: &Conversation,
        turns: &[usize],
        plan: Option<&SteeringPlan<f64>>,
        queries: &[RatingQuery],
    ) -> Result<Vec<TurnMeasurement>> {
        let contract = self.backend.contract();
        if !contract.capabilities.hidden_state_capture {
            return Err(Error::Unsupported("backend cannot capture hidden states".into()));
        }
        let mut out = Vec::with_capacity(turns.len());
        for &turn in turns {
            let messages = conversation_messages(conversation, turn, &self.system_prompt)?;
            let (capture, _) = self.backend.forward_capture(&self.backend.render(&messages, false), plan)?;
            let mut digits = Vec::with_capacity(queries.len());
            for q in queries {
                let prompt = self.backend.render(&rating_messages(&messages, &q.text), true);
                let (_, logits) = self.backend.forward_capture(&prompt, plan)?;
                digits.push(aggregate_digit_logits(&logits, &contract.digit_token_map)?);
            }
            out.push(TurnMeasurement { turn, capture, digits });
        }
        Ok(out)
    }
}

/// Toy-model source that runs each conversation once and branches every
/// rating query off the cached prefix of its turn.
///
/// Results equal [`BackendSource`] on the same model up to floating-point
/// summation order inside attention.
pub struct ToySource<'a, T> {
    pub model: &'a ToyModel<T>,
    pub system_prompt: String,
}

impl<T: Scalar> MeasurementSource for ToySource<'_, T> {
    fn layer_count(&self) -> usize {
        self.model.config().layer_count
    }

    fn hidden_dim(&self) -> usize {
        self.model.config().hidden_dim
    }

    fn measure(
        &self,
        conversation: &Conversation,
        turns: &[usize],
        plan: Option<&SteeringPlan<f64>>,
        queries: &[RatingQuery],
    ) -> Result<Vec<TurnMeasurement>> {
        let Some(&last) = turns.iter().max() else {
            return Ok(Vec::new());
        };
        for &t in turns {
            check_turn(conversation, t)?;
        }
        let tok = self.model.tokenizer();
        let plan = plan.map(|p| p.cast::<T>());
        let hook = plan.as_ref().map(|p| p as &dyn ResidualHook<T>);
        let full_messages = conversation_messages(conversation, last, &self.system_prompt)?;
        let full = tok.render(&full_messages, false);
        let state = self.model.forward_state(&full.tokens, &full.roles, hook)?;
        let map = &self.model.contract().digit_token_map;
        let mut out = Vec::with_capacity(turns.len());
        for &turn in turns {
            let messages = &full_messages[..1 + 2 * turn];
            let cut = tok.render(messages, false).len();
            let capture = state.capture(cut)?.cast::<f64>();
            let mut digits = Vec::with_capacity(queries.len());
            for q in queries {
                let prompt = tok.render(&rating_messages(messages, &q.text), true);
                debug_assert_eq!(&prompt.tokens[..cut], &full.tokens[..cut]);
                let logits =
                    self.model.extend_logits(&state, cut, &prompt.tokens[cut..], &prompt.roles[cut..], hook)?;
                let logits: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
                digits.push(aggregate_digit_logits(&logits, map)?);
            }
            out.push(TurnMeasurement { turn, capture, digits });
        }
        Ok(out)
    }
}

/// Digit map file at the root of a dump tree.
pub const DIGIT_MAP_FILE: &str = "digit_map.json";

#[derive(Debug, Serialize, Deserialize)]
struct DigitMapFile {
    vocab_size: usize,
    map: serde_json::Value,
}

/// First-position logits restricted to the digit-map tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingLogitsFile {
    pub token_ids: Vec<u32>,
    pub logits: Vec<f64>,
}

/// Measurement results exported by an external bridge.
///
/// Layout under the root directory:
///
/// ```text
/// digit_map.json                         {"vocab_size": N, "map": {"0": [ids], ...}}
/// <conversation id>/turn_<tt>/pass1/     unsteered pass-1 dump
/// <conversation id>/turn_<tt>/pass1__<steer>_<alpha>/      optional live-steered dump
/// <conversation id>/turn_<tt>/rating_<concept>.json        unsteered pass-2 logits
/// <conversation id>/turn_<tt>/rating_<concept>__<steer>_<alpha>.json
/// ```
///
/// `<tt>` is the two-digit one-based turn and `<alpha>` is formatted with an
/// explicit sign and three decimals (`+2.000`). Steered pass-1 captures fall
/// back to post-hoc steering of the unsteered dump; steered pass-2 logits
/// must be present unless the plan is a no-op.
pub struct DumpSource {
    root: PathBuf,
    layer_count: usize,
    hidden_dim: usize,
    map: DigitTokenMap,
}

pub fn alpha_tag(alpha: f64) -> String {
    format!("{alpha:+.3}")
}

pub fn turn_dir(root: &Path, conversation_id: &str, turn: usize) -> PathBuf {
    root.join(conversation_id).join(format!("turn_{turn:02}"))
}

fn steer_suffix(plan: Option<&SteeringPlan<f64>>) -> Option<String> {
    plan.filter(|p| !p.is_noop()).map(|p| format!("__{}_{}", p.concept_name, alpha_tag(p.alpha)))
}

/// Writes the digit map of a dump tree.
pub fn write_digit_map(root: &Path, map: &DigitTokenMap, vocab_size: usize) -> Result<()> {
    fs::create_dir_all(root)?;
    let file = DigitMapFile { vocab_size, map: map.to_json() };
    fs::write(root.join(DIGIT_MAP_FILE), serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

/// Writes one rating logits file in the dump-tree layout.
pub fn write_rating_logits(
    root: &Path,
    conversation_id: &str,
    turn: usize,
    concept: &str,
    plan: Option<&SteeringPlan<f64>>,
    file: &RatingLogitsFile,
) -> Result<()> {
    let dir = turn_dir(root, conversation_id, turn);
    fs::create_dir_all(&dir)?;
    let name = format!("rating_{concept}{}.json", steer_suffix(plan).unwrap_or_default());
    fs::write(dir.join(name), serde_json::to_vec(file)?)?;
    Ok(())
}

impl DumpSource {
    pub fn open(root: &Path) -> Result<Self> {
        let file: DigitMapFile = serde_json::from_slice(&fs::read(root.join(DIGIT_MAP_FILE))?)?;
        let map = DigitTokenMap::from_json(&file.map, file.vocab_size)?;
        // shape from the first dump found
        let mut shape = None;
        for conv in sorted_dirs(root)? {
            for turn in sorted_dirs(&conv)? {
                let pass1 = turn.join("pass1");
                if pass1.is_dir() {
                    let t = load_dump::<f64>(&pass1)?;
                    shape = Some((t.layer_count(), t.hidden_dim()));
                    break;
                }
            }
            if shape.is_some() {
                break;
            }
        }
        let (layer_count, hidden_dim) =
            shape.ok_or_else(|| Error::Missing(format!("no pass-1 dumps under {}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), layer_count, hidden_dim, map })
    }

    fn digits(&self, dir: &Path, concept: &str, plan: Option<&SteeringPlan<f64>>) -> Result<DigitLogits<f64>> {
        let name = format!("rating_{concept}{}.json", steer_suffix(plan).unwrap_or_default());
        let path = dir.join(&name);
        if !path.is_file() {
            return Err(Error::Missing(format!("rating logits {}", path.display())));
        }
        let file: RatingLogitsFile = serde_json::from_slice(&fs::read(&path)?)?;
        if file.token_ids.len() != file.logits.len() {
            return Err(Error::DimensionMismatch(format!("{name}: token ids and logits differ in length")));
        }
        let by_id: HashMap<u32, f64> = file.token_ids.iter().copied().zip(file.logits.iter().copied()).collect();
        let mut dense = vec![0.0; self.map.max_token() as usize + 1];
        for digit in 0..crate::selfreport::DIGITS {
            for &id in self.map.tokens(digit) {
                dense[id as usize] =
                    *by_id.get(&id).ok_or_else(|| Error::Missing(format!("{name}: no logit for digit token {id}")))?;
            }
        }
        aggregate_digit_logits(&dense, &self.map)
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> =
        fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

impl MeasurementSource for DumpSource {
    fn layer_count(&self) -> usize {
        self.layer_count
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn measure(
        &self,
        conversation: &Conversation,
        turns: &[usize],
        plan: Option<&SteeringPlan<f64>>,
        queries: &[RatingQuery],
    ) -> Result<Vec<TurnMeasurement>> {
        let mut out = Vec::with_capacity(turns.len());
        for &turn in turns {
            check_turn(conversation, turn)?;
            let dir = turn_dir(&self.root, &conversation.id, turn);
            let live = steer_suffix(plan).map(|s| dir.join(format!("pass1{s}")));
            let capture = match (live, plan) {
                (Some(p), _) if p.is_dir() => load_dump::<f64>(&p)?,
                (_, Some(plan)) => apply_to_tensor(&load_dump::<f64>(&dir.join("pass1"))?, plan)?,
                (_, None) => load_dump::<f64>(&dir.join("pass1"))?,
            };
            if capture.layer_count() != self.layer_count || capture.hidden_dim() != self.hidden_dim {
                return Err(Error::DimensionMismatch(format!("dump shape differs at {}", dir.display())));
            }
            let digits = queries.iter().map(|q| self.digits(&dir, &q.concept, plan)).collect::<Result<Vec<_>>>()?;
            out.push(TurnMeasurement { turn, capture, digits });
        }
        Ok(out)
    }
}
