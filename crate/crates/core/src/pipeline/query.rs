//! Rating-query text and the default assistant system prompt.

use crate::error::{Error, Result};

/// Assistant system prompt used when rendering conversations.
pub const DEFAULT_ASSISTANT_SYSTEM_PROMPT: &str = "You are a helpful assistant. Answer in a few short sentences.";

const REGISTERED: [(&str, &str); 4] = [
    ("wellbeing", "happy you are right now"),
    ("interest", "interested you are in this conversation right now"),
    ("focus", "focused you feel on this conversation right now"),
    ("impulsivity", "impulsive are you feeling right now"),
];

/// Phrase registered for a built-in concept name.
pub fn rating_phrase(concept: &str) -> Option<&'static str> {
    REGISTERED.iter().find(|(c, _)| *c == concept).map(|(_, p)| *p)
}

pub fn rating_query_from_phrase(phrase: &str) -> String {
    format!(
        "Hey, could you rate how {phrase}, from 0 to 9? Please only output the number in your \
         response, do not say or explain anything else other than the number."
    )
}

/// Rating query for a registered concept.
pub fn build_rating_query(concept: &str) -> Result<String> {
    rating_phrase(concept).map(rating_query_from_phrase).ok_or_else(|| Error::UnknownConcept(concept.to_string()))
}
