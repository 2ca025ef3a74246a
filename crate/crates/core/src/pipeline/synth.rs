//! Deterministic template conversations for desk runs.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stats::derive_seed;
use crate::tensorio::{Conversation, Turn};

const TOPICS: &str = include_str!("../../data/topics.txt");

/// The built-in topic list, one per line of the bundled data file.
pub fn default_topics() -> Vec<String> {
    TOPICS.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

const OPENERS: [&str; 4] = [
    "I would like some help with {t}. Where should I start?",
    "Can we talk about {t} for a bit?",
    "I have been thinking about {t} lately. Any advice?",
    "Could you give me a simple plan for {t}?",
];

const FOLLOW_UPS: [&str; 10] = [
    "That helps. What is a common mistake to avoid?",
    "How much time should I set aside for this each week?",
    "Can you give me a quick example?",
    "What would you do first if you were me?",
    "Is there a cheaper way to do it?",
    "I tried that and it was harder than expected. Any tips?",
    "How will I know that it is working?",
    "What should I do if I lose motivation?",
    "Could you summarise the main points so far?",
    "Thanks. Is there anything else I should keep in mind?",
];

const REPLIES: [&str; 8] = [
    "Start small and pick one step you can finish today.",
    "Write down what you want to achieve, then break it into short tasks.",
    "Keep it simple at first and adjust once you see what works.",
    "A common trap is doing too much at once, so pace yourself.",
    "Set a regular time for it and track your progress in a notebook.",
    "Ask someone with experience for feedback early on.",
    "Try a short experiment for a week and review the results.",
    "Focus on the basics before adding anything fancy.",
];

const CLOSERS: [&str; 4] = [
    "You are doing well, keep going.",
    "Good luck with it.",
    "Let me know how it goes.",
    "That should give you a solid start.",
];

/// `n` conversations of `turns` turns each; conversation `i` uses topic
/// `i mod |topics|` and its own seeded stream.
pub fn synthetic_conversations(n: usize, turns: usize, seed: u64, topics: &[String]) -> Result<Vec<Conversation>> {
    if turns == 0 || topics.is_empty() {
        return Err(Error::InvalidArgument("need at least one turn and one topic".into()));
    }
    let mut gen_params = BTreeMap::new();
    gen_params.insert("generator".to_string(), serde_json::json!("synthetic"));
    gen_params.insert("seed".to_string(), serde_json::json!(seed));
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let topic = &topics[i % topics.len()];
            let subject = topic.to_lowercase();
            let turns = (0..turns)
                .map(|t| {
                    let user = if t == 0 {
                        pick(&OPENERS, &mut rng).replace("{t}", &subject)
                    } else {
                        pick(&FOLLOW_UPS, &mut rng).to_string()
                    };
                    let assistant = format!("{} {}", pick(&REPLIES, &mut rng), pick(&CLOSERS, &mut rng));
                    Turn { user, assistant }
                })
                .collect();
            Conversation { id: format!("conv-{i:03}"), topic: topic.clone(), turns, gen_params: gen_params.clone() }
        })
        .collect())
}

fn pick<'a>(options: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    options.choose(rng).copied().expect("non-empty template list")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_topics_ship() {
        let t = default_topics();
        assert_eq!(t.len(), 40);
        assert_eq!(t[0], "Minimalist moving");
        assert_eq!(t[39], "Rainy weekend ideas");
    }

    #[test]
    fn shape_and_determinism() {
        let topics = default_topics();
        let a = synthetic_conversations(40, 10, 3, &topics).unwrap();
        assert_eq!(a.len(), 40);
        assert!(a.iter().all(|c| c.turns.len() == 10));
        assert_eq!(a, synthetic_conversations(40, 10, 3, &topics).unwrap());
        assert_ne!(a, synthetic_conversations(40, 10, 4, &topics).unwrap());
        assert_eq!(a[41 % 40].topic, topics[1]);
    }

    #[test]
    fn round_trips_through_jsonl() {
        let convs = synthetic_conversations(5, 3, 0, &default_topics()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        crate::tensorio::write_conversations(&convs, &path).unwrap();
        assert_eq!(crate::tensorio::read_conversations(&path).unwrap(), convs);
    }
}
