//! Extracting structured answers from free-form completions. Every parser
//! follows a recency rule: when a response contains several candidate
//! answers, the last one wins, since models state their final answer last.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::domain::ItemId;

use super::JudgeVerdict;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no bracketed integer list found in the response")]
    NoRankingList,
    #[error("bracketed list is not a permutation of the expected ids: {0}")]
    NotAPermutation(String),
    #[error("no integer score in 1..=100 found in the response")]
    NoScore,
    #[error("response names neither candidate ({0}, {1})")]
    NoChoice(ItemId, ItemId),
    #[error("no verdict word (affirmative/negative/undecided) found")]
    NoVerdict,
    #[error("judge did not choose a side although a verdict was demanded")]
    VerdictRequired,
}

/// Extracts the last bracketed comma-separated integer list in `text` and
/// checks it is a permutation of `expected`.
pub fn parse_ranking(text: &str, expected: &[ItemId]) -> Result<Vec<ItemId>, ParseError> {
    let mut last: Option<Vec<u32>> = None;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if let Some(rel_end) = bytes[i + 1..].iter().position(|&b| b == b']') {
                let inner = &text[i + 1..i + 1 + rel_end];
                if let Some(ids) = numeric_list(inner) {
                    last = Some(ids);
                    i += rel_end + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    let ids = last.ok_or(ParseError::NoRankingList)?;

    let expected_set: BTreeSet<u32> = expected.iter().map(|id| id.0).collect();
    let mut seen = BTreeSet::new();
    for id in &ids {
        if !expected_set.contains(id) {
            return Err(ParseError::NotAPermutation(format!("unknown id {id}")));
        }
        if !seen.insert(*id) {
            return Err(ParseError::NotAPermutation(format!("duplicate id {id}")));
        }
    }
    if seen.len() != expected_set.len() {
        return Err(ParseError::NotAPermutation(format!(
            "{} of {} ids present",
            seen.len(),
            expected_set.len()
        )));
    }
    Ok(ids.into_iter().map(ItemId).collect())
}

/// Parses bracket contents consisting only of integers, commas, and
/// whitespace; anything else (prose, nesting) disqualifies the block.
fn numeric_list(inner: &str) -> Option<Vec<u32>> {
    if inner.is_empty()
        || !inner
            .chars()
            .all(|c| c.is_ascii_digit() || c == ',' || c.is_whitespace())
        || !inner.chars().any(|c| c.is_ascii_digit())
    {
        return None;
    }
    let mut out = Vec::new();
    for part in inner.split(',') {
        let token = part.trim();
        if token.is_empty() || token.contains(char::is_whitespace) {
            return None;
        }
        out.push(token.parse().ok()?);
    }
    Some(out)
}

/// Integer runs in `text`, skipping runs preceded by a minus sign.
fn integer_runs(text: &str) -> Vec<u64> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let negated = start > 0 && bytes[start - 1] == b'-';
            if !negated {
                if let Ok(v) = text[start..i].parse() {
                    out.push(v);
                }
            }
        } else {
            i += 1;
        }
    }
    out
}

/// First integer in 1..=100 appearing in the response ("impact: 85/100"
/// yields 85).
pub fn parse_score(text: &str) -> Result<u32, ParseError> {
    integer_runs(text)
        .into_iter()
        .find(|v| (1..=100).contains(v))
        .map(|v| v as u32)
        .ok_or(ParseError::NoScore)
}

/// The last integer in the response matching one of the two candidate ids.
pub fn parse_choice(text: &str, a: ItemId, b: ItemId) -> Result<ItemId, ParseError> {
    integer_runs(text)
        .into_iter()
        .filter_map(|v| {
            let id = ItemId(u32::try_from(v).ok()?);
            (id == a || id == b).then_some(id)
        })
        .next_back()
        .ok_or(ParseError::NoChoice(a, b))
}

/// Last verdict word in the response. When `forced`, an undecided verdict
/// counts as a parse failure so the retry machinery re-asks.
pub fn parse_verdict(text: &str, forced: bool) -> Result<JudgeVerdict, ParseError> {
    let lower = text.to_lowercase();
    let candidates = [
        ("affirmative", JudgeVerdict::Affirmative),
        ("negative", JudgeVerdict::Negative),
        ("undecided", JudgeVerdict::Undecided),
    ];
    let mut best: Option<(usize, JudgeVerdict)> = None;
    for (word, verdict) in candidates {
        if let Some(pos) = lower.rfind(word) {
            if best.is_none_or(|(p, _)| pos > p) {
                best = Some((pos, verdict));
            }
        }
    }
    match best {
        Some((_, JudgeVerdict::Undecided)) if forced => Err(ParseError::VerdictRequired),
        Some((_, verdict)) => Ok(verdict),
        None => Err(ParseError::NoVerdict),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(raw: &[u32]) -> Vec<ItemId> {
        raw.iter().map(|i| ItemId(*i)).collect()
    }

    #[test]
    fn ranking_after_reasoning() {
        let parsed = parse_ranking("Reasoning... Final: [3, 1, 2]", &ids(&[1, 2, 3])).unwrap();
        assert_eq!(parsed, ids(&[3, 1, 2]));
    }

    #[test]
    fn last_list_wins() {
        let parsed =
            parse_ranking("[1,2,3] draft ... corrected [2,1,3]", &ids(&[1, 2, 3])).unwrap();
        assert_eq!(parsed, ids(&[2, 1, 3]));
    }

    #[test]
    fn duplicate_entry_rejected() {
        assert!(matches!(
            parse_ranking("[1, 1, 3]", &ids(&[1, 2, 3])),
            Err(ParseError::NotAPermutation(_))
        ));
    }

    #[test]
    fn missing_and_unknown_ids_rejected() {
        assert!(matches!(
            parse_ranking("[1, 2]", &ids(&[1, 2, 3])),
            Err(ParseError::NotAPermutation(_))
        ));
        assert!(matches!(
            parse_ranking("[1, 2, 9]", &ids(&[1, 2, 3])),
            Err(ParseError::NotAPermutation(_))
        ));
    }

    #[test]
    fn no_list_at_all() {
        assert!(matches!(
            parse_ranking("I cannot decide.", &ids(&[1, 2])),
            Err(ParseError::NoRankingList)
        ));
        // Prose brackets are not numeric lists.
        assert!(matches!(
            parse_ranking("[note] nothing here", &ids(&[1, 2])),
            Err(ParseError::NoRankingList)
        ));
    }

    #[test]
    fn prose_brackets_skipped_numeric_used() {
        let parsed = parse_ranking("[citation needed] use [2, 1]", &ids(&[1, 2])).unwrap();
        assert_eq!(parsed, ids(&[2, 1]));
    }

    #[test]
    fn score_extraction() {
        assert_eq!(parse_score("impact: 85/100").unwrap(), 85);
        assert_eq!(parse_score("73").unwrap(), 73);
        assert_eq!(parse_score("the year 2024 rating is 90").unwrap(), 90);
        assert!(matches!(parse_score("150"), Err(ParseError::NoScore)));
        assert!(matches!(parse_score("zero"), Err(ParseError::NoScore)));
        assert!(matches!(parse_score("0"), Err(ParseError::NoScore)));
    }

    #[test]
    fn choice_extraction_uses_last_candidate_mention() {
        assert_eq!(parse_choice("2", ItemId(2), ItemId(3)).unwrap(), ItemId(2));
        assert_eq!(
            parse_choice("comparing 2 and 3, the more impactful is 3", ItemId(2), ItemId(3))
                .unwrap(),
            ItemId(3)
        );
        assert!(parse_choice("neither", ItemId(2), ItemId(3)).is_err());
    }

    #[test]
    fn verdict_extraction() {
        assert_eq!(
            parse_verdict("Verdict: affirmative", false).unwrap(),
            JudgeVerdict::Affirmative
        );
        assert_eq!(
            parse_verdict("the negative side is stronger", false).unwrap(),
            JudgeVerdict::Negative
        );
        assert_eq!(
            parse_verdict("undecided", false).unwrap(),
            JudgeVerdict::Undecided
        );
        // The last verdict word wins.
        assert_eq!(
            parse_verdict("affirmative arguments noted, but negative", false).unwrap(),
            JudgeVerdict::Negative
        );
        assert!(matches!(
            parse_verdict("undecided", true),
            Err(ParseError::VerdictRequired)
        ));
        assert!(matches!(
            parse_verdict("no verdict here", false),
            Err(ParseError::NoVerdict)
        ));
    }
}
