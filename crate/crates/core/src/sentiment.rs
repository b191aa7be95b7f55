//! Keyword lexicon used by the scripted agents: per-headline polarity and
//! failure-pattern tagging.

use serde::{Deserialize, Serialize};

use crate::market_data::NewsHeadline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Positive,
    Neutral,
    Negative,
}

const POSITIVE_WORDS: &[&str] = &[
    "beat", "beats", "raise", "raises", "upgrade", "upgrades", "record", "win", "wins", "rally", "rallies", "surge",
    "surges", "grow", "grows", "growth", "strong", "expands", "buyback", "profit", "gain", "gains", "rise", "rises",
    "outperform", "approval", "approved",
];

const NEGATIVE_WORDS: &[&str] = &[
    "fall", "falls", "miss", "misses", "downgrade", "downgrades", "lawsuit", "recall", "cut", "cuts", "slump",
    "slumps", "weak", "probe", "slowing", "slide", "slides", "decline", "warns", "warning", "bankruptcy", "delisting",
    "dilution", "layoffs", "impairment", "restructuring", "non-compliance", "closures", "delays", "doubt",
];

/// Failure-pattern codes and the phrases that evidence them.
pub const FAILURE_PATTERNS: &[(&str, &[&str])] = &[
    ("going_concern", &["going concern", "chapter 11", "bankruptcy"]),
    (
        "listing_noncompliance",
        &["delisting", "non-compliance", "minimum bid", "missed filing", "delayed filing"],
    ),
    ("dilution", &["dilution", "share offering", "reverse split"]),
    (
        "restructuring",
        &["restructuring", "layoffs", "impairment", "store closures", "debt payment"],
    ),
    ("distressed_merger", &["merger at a discount", "agrees to be acquired"]),
    ("guidance_cut", &["guidance cut", "cuts forecast", "trial miss"]),
];

pub fn mitigation_for(signal: &str) -> &'static str {
    match signal {
        "going_concern" => "exclude issuers whose recent news cites going-concern doubt or bankruptcy filings",
        "listing_noncompliance" => "drop names with open exchange compliance notices or late filings",
        "dilution" => "penalize recent equity offerings and reverse splits in screening scores",
        "restructuring" => "require positive momentum before admitting names announcing restructuring or layoffs",
        "distressed_merger" => "treat discounted all-stock takeovers as a distress marker, not a catalyst",
        "guidance_cut" => "down-weight names with recent guidance cuts or failed trials",
        _ => "review manually",
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Positive minus negative lexicon hits.
pub fn headline_score(text: &str) -> i32 {
    tokens(text)
        .map(|w| {
            if POSITIVE_WORDS.contains(&w.as_str()) {
                1
            } else if NEGATIVE_WORDS.contains(&w.as_str()) {
                -1
            } else {
                0
            }
        })
        .sum()
}

pub fn label_for(score: f64) -> SentimentLabel {
    if score > 0.25 {
        SentimentLabel::Positive
    } else if score < -0.25 {
        SentimentLabel::Negative
    } else {
        SentimentLabel::Neutral
    }
}

/// Failure-pattern codes present in `text`, in table order.
pub fn failure_patterns(text: &str) -> Vec<&'static str> {
    let lower = text.to_lowercase();
    FAILURE_PATTERNS
        .iter()
        .filter(|(_, phrases)| phrases.iter().any(|p| lower.contains(p)))
        .map(|(code, _)| *code)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentSummary {
    /// Mean headline score; 0 without headlines.
    pub score: f64,
    pub label: SentimentLabel,
    pub positive: usize,
    pub negative: usize,
    pub headline_count: usize,
    pub failure_flags: Vec<String>,
}

pub fn summarize(headlines: &[NewsHeadline]) -> SentimentSummary {
    let scores: Vec<i32> = headlines.iter().map(|h| headline_score(&h.headline)).collect();
    let score = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<i32>() as f64 / scores.len() as f64
    };
    let mut flags: Vec<String> = headlines
        .iter()
        .flat_map(|h| failure_patterns(&h.headline))
        .map(str::to_string)
        .collect();
    flags.sort();
    flags.dedup();
    SentimentSummary {
        score,
        label: label_for(score),
        positive: scores.iter().filter(|s| **s > 0).count(),
        negative: scores.iter().filter(|s| **s < 0).count(),
        headline_count: scores.len(),
        failure_flags: flags,
    }
}
