//! Deterministic extractive summarizer used when no LLM is available.
//!
//! Sentences are scored by the mean term frequency of their content words
//! across all of the subject's reviews. The top sentences fill the first
//! labeled field and the highest-frequency keywords are dealt round-robin
//! into the remaining fields. Nothing outside the reviews and the labels
//! can appear in the output.

use std::collections::{BTreeMap, HashMap};

use super::{RepSource, TextualRepresentation};
use crate::promptgen::{normalize_token, unit_tokens, PromptSpec};

pub const OFFLINE_MODEL: &str = "offline-extractive-v1";
const TOP_SENTENCES: usize = 3;
const TOP_KEYWORDS: usize = 8;

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can", "could", "did", "do",
    "does", "for", "from", "had", "has", "have", "he", "her", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "me",
    "more", "my", "no", "not", "of", "on", "one", "only", "or", "our", "out", "she", "so", "some", "than", "that", "the", "their", "them",
    "then", "there", "they", "this", "to", "too", "very", "was", "we", "were", "what", "when", "which", "who", "will", "with", "would",
    "you", "your", "的", "了", "是", "我", "也", "在", "就", "都", "很", "和", "有", "不", "这", "个",
];

fn is_content(token: &str) -> bool {
    !STOPWORDS.contains(&token) && (token.chars().count() >= 2 || !token.is_ascii())
}

fn split_sentences(review: &str) -> impl Iterator<Item = &str> {
    review.split_inclusive(['.', '!', '?', '。', '！', '？', '；', ';', '\n']).map(str::trim).filter(|s| !s.is_empty())
}

pub fn offline_summarize(prompt: &PromptSpec) -> TextualRepresentation {
    let mut tf: HashMap<String, usize> = HashMap::new();
    for review in &prompt.review_sequence {
        for tok in unit_tokens(review).filter_map(normalize_token).filter(|t| is_content(t)) {
            *tf.entry(tok).or_default() += 1;
        }
    }

    let mut sentences: Vec<(f64, usize, &str)> = Vec::new();
    for review in &prompt.review_sequence {
        for sentence in split_sentences(review) {
            let content: Vec<String> = unit_tokens(sentence).filter_map(normalize_token).filter(|t| is_content(t)).collect();
            let score = if content.is_empty() { 0.0 } else { content.iter().map(|t| tf[t] as f64).sum::<f64>() / content.len() as f64 };
            let position = sentences.len();
            sentences.push((score, position, sentence));
        }
    }
    let mut ranked: Vec<&(f64, usize, &str)> = sentences.iter().collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<(usize, &str)> = ranked.iter().take(TOP_SENTENCES).map(|s| (s.1, s.2)).collect();
    chosen.sort_by_key(|s| s.0);
    let summary = chosen.iter().map(|s| s.1).collect::<Vec<_>>().join(" ");

    let by_freq: BTreeMap<(std::cmp::Reverse<usize>, &str), ()> =
        tf.iter().map(|(t, &n)| ((std::cmp::Reverse(n), t.as_str()), ())).collect();
    let keywords: Vec<&str> = by_freq.keys().take(TOP_KEYWORDS).map(|k| k.1).collect();

    let mut lines = Vec::with_capacity(prompt.fields.len());
    if let Some((first, rest)) = prompt.fields.split_first() {
        lines.push(format!("{first}: {summary}"));
        for (slot, field) in rest.iter().enumerate() {
            let picked: Vec<&str> = keywords.iter().enumerate().filter(|(k, _)| k % rest.len() == slot).map(|(_, w)| *w).collect();
            lines.push(format!("{field}: {}", picked.join(", ")));
        }
    }
    let mut text = lines.join("\n");
    if text.trim().is_empty() {
        text = summary;
    }

    TextualRepresentation {
        subject_id: prompt.subject_id.clone(),
        subject_kind: prompt.subject_kind,
        text,
        source: RepSource::OfflineOracle,
        model_name: OFFLINE_MODEL.to_string(),
        created_at: 0,
        nonconforming: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Interaction;
    use crate::promptgen::{build_user_prompt, PromptConfig};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn prompt(reviews: &[&str]) -> PromptSpec {
        let rows: Vec<Interaction> = reviews
            .iter()
            .enumerate()
            .map(|(t, r)| Interaction {
                user_id: "u".into(),
                item_id: format!("m{t}"),
                rating: None,
                timestamp: t as u64,
                review: r.to_string(),
            })
            .collect();
        build_user_prompt("u", &rows, &PromptConfig::default()).unwrap()
    }

    #[test]
    fn single_review_keyword() {
        let rep = offline_summarize(&prompt(&["great bears documentary"]));
        assert!(rep.text.contains("bears"));
        assert!(super::super::is_conforming(&rep.text, &PromptConfig::default().user_fields));
    }

    #[test]
    fn deterministic() {
        let p = prompt(&["A slow burn. Wonderful acting!", "Acting was wonderful, plot thin."]);
        assert_eq!(offline_summarize(&p), offline_summarize(&p));
    }

    fn token_set(text: &str) -> HashSet<String> {
        unit_tokens(text).filter_map(normalize_token).collect()
    }

    proptest! {
        #[test]
        fn output_tokens_come_from_input(
            reviews in prop::collection::vec("[a-z]{1,7}( [a-z]{1,7}){0,12}[.!]?", 1..5)
        ) {
            let refs: Vec<&str> = reviews.iter().map(String::as_str).collect();
            let p = prompt(&refs);
            let rep = offline_summarize(&p);
            let mut allowed = token_set(&reviews.join(" "));
            for f in &p.fields {
                allowed.extend(token_set(f));
            }
            for tok in token_set(&rep.text) {
                prop_assert!(allowed.contains(&tok), "unexpected token {tok}");
            }
        }
    }
}
