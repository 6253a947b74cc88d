//! Prompt assembly: reviews first, then the task description and format
//! indicator, with the model's answer expected after that.
//!
//! Lengths are measured in "units": one per CJK codepoint, one per
//! whitespace-delimited run of non-CJK characters, plus [`FRAMING_UNITS`]
//! per injected review.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Interaction;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("subject {0} has no reviews")]
    NoReviews(String),
    #[error("budget of {budget} units cannot fit the {suffix}-unit suffix plus one review")]
    BudgetTooSmall { budget: usize, suffix: usize },
    #[error("invalid prompt config: {0}")]
    Config(String),
    #[error("cannot read prompt config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("prompt config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Units charged per review for its "Review #n:" header and separators.
pub const FRAMING_UNITS: usize = 4;

pub const DEFAULT_BUDGET_UNITS: usize = 3000;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x1100..=0x11FF
        | 0x2E80..=0x2FDF
        | 0x3000..=0x30FF
        | 0x3100..=0x31FF
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xA960..=0xA97F
        | 0xAC00..=0xD7AF
        | 0xF900..=0xFAFF
        | 0xFE30..=0xFE4F
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2FA1F)
}

/// Byte spans of every counting unit in `text`, in order.
pub fn unit_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (pos, c) in text.char_indices() {
        if c.is_whitespace() || is_cjk(c) {
            if let Some(start) = word_start.take() {
                spans.push((start, pos));
            }
            if is_cjk(c) {
                spans.push((pos, pos + c.len_utf8()));
            }
        } else if word_start.is_none() {
            word_start = Some(pos);
        }
    }
    if let Some(start) = word_start {
        spans.push((start, text.len()));
    }
    spans
}

/// The unit tokens of `text`, as string slices.
pub fn unit_tokens(text: &str) -> impl Iterator<Item = &str> {
    unit_spans(text).into_iter().map(move |(a, b)| &text[a..b])
}

/// Lowercased token with surrounding punctuation stripped, or `None` when
/// nothing alphanumeric is left.
pub fn normalize_token(raw: &str) -> Option<String> {
    let t: String = raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    (!t.is_empty()).then_some(t)
}

pub fn count_units(text: &str) -> usize {
    unit_spans(text).len()
}

/// Cuts `text` after its first `max_units` units.
pub fn truncate_units(text: &str, max_units: usize) -> &str {
    if max_units == 0 {
        return "";
    }
    match unit_spans(text).get(max_units - 1) {
        Some(&(_, end)) => &text[..end],
        None => text,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountingRule {
    /// One unit per CJK codepoint and per non-CJK word.
    #[default]
    CjkCharWord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub max_units: usize,
    #[serde(default)]
    pub counting_rule: CountingRule,
}

impl TokenBudget {
    pub fn new(max_units: usize) -> Result<Self, PromptError> {
        if max_units == 0 {
            return Err(PromptError::Config("budget must be positive".into()));
        }
        Ok(TokenBudget { max_units, counting_rule: CountingRule::CjkCharWord })
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        TokenBudget { max_units: DEFAULT_BUDGET_UNITS, counting_rule: CountingRule::CjkCharWord }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectKind {
    User,
    Item,
}

impl std::fmt::Display for SubjectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SubjectKind::User => "user",
            SubjectKind::Item => "item",
        })
    }
}

/// Drops reviews from the oldest end until the framed reviews fit in
/// `budget.max_units - suffix_units`. The newest review is always kept and
/// is hard-truncated when it cannot fit on its own.
pub fn apply_limiter(reviews: &[String], budget: &TokenBudget, suffix_units: usize) -> Vec<String> {
    let Some(newest) = reviews.last() else {
        return Vec::new();
    };
    let available = budget.max_units.saturating_sub(suffix_units);
    let mut used = 0;
    let mut keep_from = reviews.len();
    for (i, review) in reviews.iter().enumerate().rev() {
        let cost = count_units(review) + FRAMING_UNITS;
        if used + cost > available {
            break;
        }
        used += cost;
        keep_from = i;
    }
    if keep_from == reviews.len() {
        let room = available.saturating_sub(FRAMING_UNITS);
        return vec![truncate_units(newest, room).to_string()];
    }
    reviews[keep_from..].to_vec()
}

/// Prompt wording. Loaded from JSON so the texts can be swapped without a
/// rebuild; `{fields}` in the format indicator expands to the labeled
/// fields for the subject kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub user_suffix: String,
    pub item_suffix: String,
    pub format_indicator: String,
    pub budget_units: usize,
    #[serde(default = "default_user_fields")]
    pub user_fields: Vec<String>,
    #[serde(default = "default_item_fields")]
    pub item_fields: Vec<String>,
}

fn default_user_fields() -> Vec<String> {
    ["Preferences", "Favorite genres", "Favorite actors", "Favorite directors"].map(String::from).to_vec()
}

fn default_item_fields() -> Vec<String> {
    ["Tags", "Scenes", "Audience"].map(String::from).to_vec()
}

/// The shipped wording is an English reconstruction; the original prompts
/// were written in Chinese.
pub const DEFAULT_PROMPT_CONFIG: &str = include_str!("../config/prompts.json");

impl Default for PromptConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_PROMPT_CONFIG).expect("bundled prompt config is valid")
    }
}

impl PromptConfig {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io { path: path.display().to_string(), source })?;
        let cfg: PromptConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.budget_units == 0 {
            return Err(PromptError::Config("budget_units must be positive".into()));
        }
        if self.user_fields.is_empty() || self.item_fields.is_empty() {
            return Err(PromptError::Config("field lists must be non-empty".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> TokenBudget {
        TokenBudget { max_units: self.budget_units, counting_rule: CountingRule::CjkCharWord }
    }

    pub fn fields(&self, kind: SubjectKind) -> &[String] {
        match kind {
            SubjectKind::User => &self.user_fields,
            SubjectKind::Item => &self.item_fields,
        }
    }

    pub fn format_indicator_for(&self, kind: SubjectKind) -> String {
        let fields = self.fields(kind).iter().map(|f| format!("\"{f}:\"")).collect::<Vec<_>>().join(", ");
        self.format_indicator.replace("{fields}", &fields)
    }

    fn task_description(&self, kind: SubjectKind) -> &str {
        match kind {
            SubjectKind::User => &self.user_suffix,
            SubjectKind::Item => &self.item_suffix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub subject_id: String,
    pub subject_kind: SubjectKind,
    /// Injected reviews, oldest first, after the limiter.
    pub review_sequence: Vec<String>,
    /// Task description followed by the format indicator.
    pub suffix_text: String,
    pub format_indicator: String,
    /// Labels the response is expected to contain, one per line.
    pub fields: Vec<String>,
    pub budget: TokenBudget,
}

impl PromptSpec {
    /// Renders the chat message: numbered reviews, a blank line, the suffix.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, review) in self.review_sequence.iter().enumerate() {
            out.push_str(&format!("Review #{}: {}\n", i + 1, review.trim_end()));
        }
        out.push('\n');
        out.push_str(&self.suffix_text);
        out
    }

    /// Budget-accounting estimate: framed reviews plus suffix.
    pub fn estimated_units(&self) -> usize {
        self.review_sequence.iter().map(|r| count_units(r) + FRAMING_UNITS).sum::<usize>() + count_units(&self.suffix_text)
    }
}

fn build_prompt(subject_id: &str, kind: SubjectKind, reviews: &[Interaction], cfg: &PromptConfig) -> Result<PromptSpec, PromptError> {
    if reviews.is_empty() {
        return Err(PromptError::NoReviews(subject_id.to_string()));
    }
    let mut ordered: Vec<&Interaction> = reviews.iter().collect();
    ordered.sort_by(|a, b| a.chrono_key().cmp(&b.chrono_key()).then_with(|| a.user_id.cmp(&b.user_id)));
    let texts: Vec<String> = ordered.iter().map(|r| r.review.clone()).collect();

    let format_indicator = cfg.format_indicator_for(kind);
    let suffix_text = format!("{}\n{}", cfg.task_description(kind).trim_end(), format_indicator);
    let budget = cfg.budget();
    let suffix_units = count_units(&suffix_text);
    if budget.max_units <= suffix_units + FRAMING_UNITS {
        return Err(PromptError::BudgetTooSmall { budget: budget.max_units, suffix: suffix_units });
    }
    Ok(PromptSpec {
        subject_id: subject_id.to_string(),
        subject_kind: kind,
        review_sequence: apply_limiter(&texts, &budget, suffix_units),
        suffix_text,
        format_indicator,
        fields: cfg.fields(kind).to_vec(),
        budget,
    })
}

pub fn build_user_prompt(user_id: &str, reviews: &[Interaction], cfg: &PromptConfig) -> Result<PromptSpec, PromptError> {
    build_prompt(user_id, SubjectKind::User, reviews, cfg)
}

pub fn build_item_prompt(item_id: &str, reviews: &[Interaction], cfg: &PromptConfig) -> Result<PromptSpec, PromptError> {
    build_prompt(item_id, SubjectKind::Item, reviews, cfg)
}

/// One user prompt per cohort user and one item prompt per catalog item.
pub fn build_all_prompts(splits: &crate::corpus::SplitBundle, cfg: &PromptConfig) -> Result<Vec<PromptSpec>, PromptError> {
    let users = splits.user_train.iter().map(|(u, rows)| build_user_prompt(u, rows, cfg));
    let items = splits.item_train.iter().map(|(i, rows)| build_item_prompt(i, rows, cfg));
    users.chain(items).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn review(user: &str, t: u64, text: &str) -> Interaction {
        Interaction { user_id: user.into(), item_id: format!("m{t}"), rating: None, timestamp: t, review: text.into() }
    }

    fn words(n: usize, tag: &str) -> String {
        (0..n).map(|i| format!("{tag}{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn counting_rule() {
        assert_eq!(count_units(""), 0);
        assert_eq!(count_units("great bears documentary"), 3);
        assert_eq!(count_units("这部电影"), 4);
        assert_eq!(count_units("好movie!! 😀"), 3);
        assert_eq!(count_units("  spaced\tout \n"), 2);
        assert_eq!(truncate_units("one two three", 2), "one two");
        assert_eq!(truncate_units("一二三", 1), "一");
    }

    #[test]
    fn limiter_drops_oldest() {
        // 96 words + 4 framing = 100 units per review; 350 - 40 leaves room for 3.
        let reviews: Vec<String> = (0..5).map(|i| words(96, &format!("r{i}w"))).collect();
        let budget = TokenBudget::new(350).unwrap();
        let kept = apply_limiter(&reviews, &budget, 40);
        assert_eq!(kept, reviews[2..].to_vec());
    }

    #[test]
    fn limiter_truncates_single_huge_review() {
        let reviews = vec![words(10_000, "w")];
        let budget = TokenBudget::new(500).unwrap();
        let kept = apply_limiter(&reviews, &budget, 40);
        assert_eq!(kept.len(), 1);
        assert_eq!(count_units(&kept[0]), 500 - 40 - FRAMING_UNITS);
        assert!(reviews[0].starts_with(&kept[0]));
    }

    #[test]
    fn limiter_identity_when_fitting() {
        let reviews: Vec<String> = (0..4).map(|i| words(10, &format!("r{i}"))).collect();
        let kept = apply_limiter(&reviews, &TokenBudget::default(), 40);
        assert_eq!(kept, reviews);
    }

    #[test]
    fn user_prompt_layout() {
        let cfg = PromptConfig::default();
        let rows = vec![review("u", 3, "third"), review("u", 1, "first"), review("u", 2, "second")];
        let spec = build_user_prompt("u", &rows, &cfg).unwrap();
        assert_eq!(spec.review_sequence, ["first", "second", "third"]);
        let text = spec.render();
        assert!(text.ends_with(&spec.suffix_text));
        assert!(text.find("first").unwrap() < text.find("third").unwrap());
        assert!(spec.suffix_text.contains("exclusively"));
        assert_eq!(text, build_user_prompt("u", &rows, &cfg).unwrap().render());
    }

    #[test]
    fn item_prompt_uses_item_suffix() {
        let cfg = PromptConfig::default();
        let spec = build_item_prompt("m", &[review("x", 1, "a fine film")], &cfg).unwrap();
        assert!(spec.suffix_text.starts_with(cfg.item_suffix.trim_end()));
        assert_eq!(spec.fields, cfg.item_fields);

        let ten: Vec<_> = (0..10).map(|t| review(&format!("v{t}"), t, "nice scenes")).collect();
        let spec = build_item_prompt("m", &ten, &cfg).unwrap();
        assert_eq!(spec.review_sequence.len(), 10);
    }

    #[test]
    fn empty_reviews_rejected() {
        let err = build_user_prompt("u", &[], &PromptConfig::default()).unwrap_err();
        assert!(matches!(err, PromptError::NoReviews(_)));
    }

    #[test]
    fn tiny_budget_rejected() {
        let cfg = PromptConfig { budget_units: 10, ..PromptConfig::default() };
        let err = build_user_prompt("u", &[review("u", 1, "x")], &cfg).unwrap_err();
        assert!(matches!(err, PromptError::BudgetTooSmall { .. }));
    }

    proptest! {
        #[test]
        fn limiter_is_monotone_in_budget(
            lens in prop::collection::vec(0usize..60, 1..12),
            small in 20usize..400,
            extra in 0usize..400,
        ) {
            let reviews: Vec<String> = lens.iter().enumerate().map(|(i, &n)| words(n, &format!("r{i}_"))).collect();
            let lo = apply_limiter(&reviews, &TokenBudget::new(small).unwrap(), 10);
            let hi = apply_limiter(&reviews, &TokenBudget::new(small + extra).unwrap(), 10);
            prop_assert!(lo.len() <= hi.len());
            prop_assert!(!lo.is_empty());
        }

        #[test]
        fn rendered_prompt_within_budget(
            lens in prop::collection::vec(0usize..200, 1..15),
            budget in 200usize..2000,
        ) {
            let cfg = PromptConfig { budget_units: budget, ..PromptConfig::default() };
            let rows: Vec<Interaction> = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| review("u", i as u64, &words(n, "电影w")))
                .collect();
            let spec = build_user_prompt("u", &rows, &cfg).unwrap();
            prop_assert!(spec.estimated_units() <= budget);
            prop_assert!(count_units(&spec.render()) <= spec.estimated_units());
            prop_assert!(spec.render().ends_with(&spec.suffix_text));
        }
    }
}
