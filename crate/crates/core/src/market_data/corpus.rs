use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, NewsHeadline};

/// The bundled corpus of delisted or at-risk firms, one entry per ticker.
pub const BUNDLED_CORPUS_JSON: &str = include_str!("../../data/delisted_corpus.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelistedCorpusEntry {
    pub ticker: String,
    pub sector: String,
    pub reason: String,
    pub date_range: String,
    pub headlines: Vec<NewsHeadline>,
}

pub fn parse_corpus(text: &str) -> Result<Vec<DelistedCorpusEntry>, DataError> {
    if text.trim().is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let entries: Vec<DelistedCorpusEntry> =
        serde_json::from_str(text).map_err(|e| DataError::CorpusParse(e.to_string()))?;
    if entries.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.ticker.as_str()) {
            return Err(DataError::CorpusParse(format!("duplicate ticker {}", e.ticker)));
        }
    }
    Ok(entries)
}

pub fn load_delisted_corpus(path: &Path) -> Result<Vec<DelistedCorpusEntry>, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn bundled_corpus() -> Vec<DelistedCorpusEntry> {
    parse_corpus(BUNDLED_CORPUS_JSON).expect("bundled corpus is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_corpus_has_the_sixteen_tickers() {
        let tickers: Vec<String> = bundled_corpus().into_iter().map(|e| e.ticker).collect();
        let expected = [
            "NKLA", "RIDE", "ZEV", "ADMP", "SBBP", "CNSP", "BLUE", "BBBYQ", "REV", "GNLN", "AGFY", "HEXO", "FRSX", "GPRO", "SIEB", "HYMC",
        ];
        assert_eq!(tickers, expected);
    }

    #[test]
    fn duplicate_ticker_is_a_parse_error() {
        let mut entries = bundled_corpus();
        entries.push(entries[0].clone());
        let text = serde_json::to_string(&entries).unwrap();
        assert!(matches!(parse_corpus(&text), Err(DataError::CorpusParse(_))));
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(parse_corpus(""), Err(DataError::EmptyCorpus)));
        assert!(matches!(parse_corpus("[]"), Err(DataError::EmptyCorpus)));
        assert!(matches!(parse_corpus("{"), Err(DataError::CorpusParse(_))));
    }
}
