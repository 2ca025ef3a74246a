//! Backend abstraction and a seeded miniature transformer implementing it.
//!
//! A backend renders chat messages into tokens with per-token roles, runs
//! forward passes that expose post-block hidden states and accept residual
//! hooks, and generates continuations. The toy model makes every causal
//! property of the measurement pipeline checkable without real weights.

mod model;
mod tokenizer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selfreport::DigitTokenMap;
use crate::steering::SteeringPlan;
use crate::tensorio::{ActivationTensor, TokenRole};

pub use model::{
    build_introspective_toy, make_introspective_toy, DigitReadout, PrefixState, ReadoutOptions, ToyModel,
    ToyModelConfig,
};
pub use tokenizer::{ToyTokenizer, ASSISTANT, BOS, EOT, FIRST_WORD, SYSTEM, USER};

/// Minimum depth for which a middle-60% layer band exists.
pub const MIN_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub hooks: bool,
    pub hidden_state_capture: bool,
    pub generation: bool,
}

/// What the pipeline may assume about a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendContract {
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub digit_token_map: DigitTokenMap,
    pub capabilities: Capabilities,
}

impl BackendContract {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count < MIN_LAYERS {
            return Err(Error::BandTooSmall { layer_count: self.layer_count });
        }
        if self.digit_token_map.max_token() as usize >= self.vocab_size {
            return Err(Error::InvalidDigitMap("digit token outside the vocabulary".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
    /// User message that asks for a self-report.
    #[serde(default)]
    pub rating_query: bool,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into(), rating_query: false }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into(), rating_query: false }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into(), rating_query: false }
    }

    pub fn rating_query(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into(), rating_query: true }
    }
}

/// Token ids with the role of each position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub tokens: Vec<u32>,
    pub roles: Vec<TokenRole>,
}

impl RenderedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends generated tokens as assistant positions.
    pub fn with_completion(&self, completion: &[u32]) -> RenderedPrompt {
        let mut out = self.clone();
        out.tokens.extend_from_slice(completion);
        out.roles.extend(std::iter::repeat_n(TokenRole::Assistant, completion.len()));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl DecodeParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { mode: DecodeMode::Greedy, temperature: 1.0, top_p: 1.0, max_new_tokens }
    }

    pub fn sampled(temperature: f64, top_p: f64, max_new_tokens: usize) -> Self {
        Self { mode: DecodeMode::Sampled, temperature, top_p, max_new_tokens }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be positive".into()));
        }
        if self.mode == DecodeMode::Sampled && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`.
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Smallest set of tokens, taken in order of decreasing probability (lower
/// index first on ties), whose cumulative probability reaches `top_p`.
pub fn nucleus_support(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut keep = Vec::new();
    for i in order {
        keep.push(i);
        cum += probs[i];
        if cum >= top_p {
            break;
        }
    }
    keep
}

/// Chooses the next token under `params`.
pub fn choose_token<R: Rng + ?Sized>(logits: &[f64], params: &DecodeParams, rng: &mut R) -> usize {
    match params.mode {
        DecodeMode::Greedy => argmax(logits),
        DecodeMode::Sampled => {
            let probs = tempered_probs(logits, params.temperature);
            let support = nucleus_support(&probs, params.top_p);
            let mass: f64 = support.iter().map(|&i| probs[i]).sum();
            let mut u = rng.random::<f64>() * mass;
            for &i in &support {
                u -= probs[i];
                if u < 0.0 {
                    return i;
                }
            }
            *support.last().expect("non-empty support")
        }
    }
}

/// The only surface the pipeline uses to drive a model.
pub trait Backend: Sync {
    fn contract(&self) -> &BackendContract;

    fn render(&self, messages: &[ChatMessage], generation_prompt: bool) -> RenderedPrompt;

    /// Post-block hidden states for every layer and the logits at the last position.
    fn forward_capture(
        &self,
        prompt: &RenderedPrompt,
        plan: Option<&SteeringPlan<f64>>,
    ) -> Result<(ActivationTensor<f64>, Vec<f64>)>;

    /// New tokens, stopping early at an end-of-turn token (not included).
    fn generate(
        &self,
        prompt: &RenderedPrompt,
        decode: &DecodeParams,
        plan: Option<&SteeringPlan<f64>>,
        seed: u64,
    ) -> Result<Vec<u32>>;

    fn decode_text(&self, tokens: &[u32]) -> String;
}
