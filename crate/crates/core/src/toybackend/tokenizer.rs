//! Word-hashing tokenizer and fixed chat template for the toy model.

use crate::error::{Error, Result};
use crate::tensorio::TokenRole;

use super::{ChatMessage, ChatRole, RenderedPrompt};

pub const BOS: u32 = 10;
pub const SYSTEM: u32 = 11;
pub const USER: u32 = 12;
pub const ASSISTANT: u32 = 13;
pub const EOT: u32 = 14;
/// First id available to hashed words; ids below are digits and specials.
pub const FIRST_WORD: u32 = 15;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Digits map to ids 0..=9; every other word or punctuation mark is hashed
/// into the remaining ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyTokenizer {
    vocab_size: u32,
}

impl ToyTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size <= FIRST_WORD as usize || vocab_size > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "toy vocabulary needs more than {FIRST_WORD} ids, got {vocab_size}"
            )));
        }
        Ok(Self { vocab_size: vocab_size as u32 })
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let h = fnv1a(word.to_lowercase().as_bytes());
        FIRST_WORD + (h % (self.vocab_size - FIRST_WORD) as u64) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<u32>| {
            if !word.is_empty() {
                out.push(self.word_id(word));
                word.clear();
            }
        };
        for c in text.chars() {
            if let Some(d) = c.to_digit(10) {
                flush(&mut word, &mut out);
                out.push(d);
            } else if c.is_alphabetic() || c == '\'' {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                if !c.is_whitespace() {
                    out.push(self.word_id(c.encode_utf8(&mut [0; 4])));
                }
            }
        }
        flush(&mut word, &mut out);
        out
    }

    /// Readable rendering; hashed words cannot be inverted and print as `w<id>`.
    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| match t {
                0..=9 => t.to_string(),
                BOS => "<bos>".into(),
                SYSTEM => "<system>".into(),
                USER => "<user>".into(),
                ASSISTANT => "<assistant>".into(),
                EOT => "<eot>".into(),
                _ => format!("w{t}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `<bos>` then `<role> content <eot>` per message; with a generation
    /// prompt a trailing `<assistant>` marker. Markers take the role of
    /// their message; `<bos>` is a system token.
    pub fn render(&self, messages: &[ChatMessage], generation_prompt: bool) -> RenderedPrompt {
        let mut tokens = vec![BOS];
        let mut roles = vec![TokenRole::System];
        for m in messages {
            let (marker, role) = match m.role {
                ChatRole::System => (SYSTEM, TokenRole::System),
                ChatRole::User if m.rating_query => (USER, TokenRole::RatingQuery),
                ChatRole::User => (USER, TokenRole::User),
                ChatRole::Assistant => (ASSISTANT, TokenRole::Assistant),
            };
            let body = self.encode(&m.content);
            tokens.push(marker);
            tokens.extend(&body);
            tokens.push(EOT);
            roles.extend(std::iter::repeat_n(role, body.len() + 2));
        }
        if generation_prompt {
            tokens.push(ASSISTANT);
            roles.push(TokenRole::Assistant);
        }
        RenderedPrompt { tokens, roles }
    }
}
