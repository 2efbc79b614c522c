//! MCQ construction, CoT generation and simplification, and quality scoring
//! through a text judge.
//!
//! Each helper builds the prompt, calls the judge, and parses the answer
//! strictly. A response that fails to parse is retried once with the next
//! seed; a second failure rejects the item.

pub mod extract;
pub mod parse;
pub mod prompts;

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use thiserror::Error;

use crate::backends::{BackendError, GenParams, TextGenerator};
use crate::hash::{hash_parts, hash_to_u64};
use crate::model::{validate_item, CotBundle, McqItem, QualityScores, UnifiedRecord};

pub use parse::{
    assemble_options, parse_cot_response, parse_mcq_response, parse_qc_scores, parse_simple_cot,
    quality_filter, McqDraft, McqParseError, StructuredCot, TagParseError,
};
pub use prompts::McqMode;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageError {
    /// The judge answered but the answer was unusable.
    #[error("rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Per-item seed derived from a base seed and a stable key.
pub fn item_seed(base: u64, key: &str) -> u64 {
    hash_to_u64(&[&base.to_le_bytes(), key.as_bytes()])
}

/// Minimum temporal option separation, drawn uniformly from `[lo, hi]` and
/// rounded to one decimal so the prompt and the check agree.
pub fn sample_random_seconds(seed: u64, (lo, hi): (f64, f64)) -> f64 {
    let x: f64 = ChaCha8Rng::seed_from_u64(seed).random_range(lo..=hi);
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct McqOptions {
    #[serde(default)]
    pub style_reference: String,
    #[serde(default = "default_seconds_range")]
    pub random_seconds_range: (f64, f64),
    /// Upper bound on temporal questions per clip; the event count also caps it.
    #[serde(default = "default_max_temporal")]
    pub max_temporal_questions: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_seconds_range() -> (f64, f64) {
    (2.0, 5.0)
}
fn default_max_temporal() -> usize {
    4
}
fn default_max_tokens() -> u32 {
    1024
}

impl Default for McqOptions {
    fn default() -> Self {
        Self {
            style_reference: String::new(),
            random_seconds_range: default_seconds_range(),
            max_temporal_questions: default_max_temporal(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }
}

fn params(seed: u64, temperature: f64, max_tokens: u32) -> GenParams {
    GenParams { temperature, max_tokens, seed }
}

/// Calls the judge, parses, and retries once with `seed + 1` on a parse
/// failure. Returns the parsed value and the raw response it came from.
fn ask<T, E: std::fmt::Display>(
    judge: &dyn TextGenerator,
    prompt: &str,
    p: GenParams,
    parse: impl Fn(&str) -> Result<T, E>,
) -> Result<(T, String), StageError> {
    let mut last = String::new();
    for attempt in 0..2u64 {
        let gp = GenParams { seed: p.seed.wrapping_add(attempt), ..p };
        let raw = judge.generate_text(prompt, &gp)?;
        match parse(&raw) {
            Ok(v) => return Ok((v, raw)),
            Err(e) => last = e.to_string(),
        }
    }
    Err(StageError::Rejected(last))
}

/// Number of `From …s to …s:` event sentences in a rendered TACOS caption.
pub fn event_count(caption: &str) -> usize {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"From \d+(?:\.\d+)?s to \d+(?:\.\d+)?s:").expect("static regex"))
        .find_iter(caption)
        .count()
}

/// MCQs for one unified record: one flexible question, or up to
/// `min(max_temporal_questions, events)` temporal questions with distinct
/// texts. Item ids are `<audio id>#q<k>`.
pub fn mcq_items_for_record(
    rec: &UnifiedRecord,
    judge: &dyn TextGenerator,
    opts: &McqOptions,
    base_seed: u64,
) -> Result<Vec<McqItem>, StageError> {
    let (mode, n) = if rec.source.is_flexible() {
        (McqMode::Flexible, 1)
    } else {
        (McqMode::Temporal, opts.max_temporal_questions.min(event_count(&rec.caption)).max(1))
    };
    let mut items: Vec<McqItem> = Vec::with_capacity(n);
    let mut last_reject = String::from("no question produced");
    for k in 1..=n {
        let id = format!("{}#q{k}", rec.audio.id);
        let seed = item_seed(base_seed, &id);
        let rs = sample_random_seconds(seed, opts.random_seconds_range);
        let prompt = prompts::build_mcq_prompt(rec, mode, rs, &opts.style_reference);
        let p = params(seed, opts.temperature, opts.max_tokens);
        let (draft, raw) = match ask(judge, &prompt, p, |t| parse_mcq_response(t, mode, rs)) {
            Ok(v) => v,
            Err(StageError::Rejected(r)) => {
                last_reject = r;
                continue;
            }
            Err(e) => return Err(e),
        };
        if items.iter().any(|it| it.question == draft.question) {
            last_reject = "duplicate question".into();
            continue;
        }
        let (options, answer_index) = assemble_options(&draft, seed);
        let item = McqItem {
            id,
            audio: rec.audio.clone(),
            question: draft.question,
            options,
            answer_index,
            qtype: draft.qtype,
            source: rec.source,
            cot: None,
            quality: None,
            provenance: hash_parts(&[b"mcq", prompt.as_bytes(), raw.as_bytes()]),
        };
        let violations = validate_item(&item);
        if violations.is_empty() {
            items.push(item);
        } else {
            last_reject = violations.iter().map(|v| v.code()).collect::<Vec<_>>().join(",");
        }
    }
    if items.is_empty() {
        Err(StageError::Rejected(last_reject))
    } else {
        Ok(items)
    }
}

pub fn structured_cot(
    item: &McqItem,
    caption: &str,
    judge: &dyn TextGenerator,
    seed: u64,
) -> Result<StructuredCot, StageError> {
    let prompt = prompts::build_cot_prompt(item, caption);
    ask(judge, &prompt, params(seed, 0.0, 1024), |t| parse_cot_response(t, caption)).map(|(v, _)| v)
}

/// Simplifies the structured CoT and bundles both forms.
pub fn simplified_cot(
    item: &McqItem,
    caption: &str,
    cot: &StructuredCot,
    judge: &dyn TextGenerator,
    seed: u64,
) -> Result<CotBundle, StageError> {
    let structured = prompts::structured_thinking_text(item, caption, &cot.r1, &cot.r3);
    let prompt = prompts::build_simplify_prompt(item, caption, &structured);
    let words = cot.word_count();
    let (simple, _) = ask(judge, &prompt, params(seed, 0.0, 1024), |t| parse_simple_cot(t, words))?;
    Ok(CotBundle { r1: cot.r1.clone(), r2: cot.r2.clone(), r3: cot.r3.clone(), simple })
}

pub fn quality_scores(
    item: &McqItem,
    caption: &str,
    judge: &dyn TextGenerator,
    seed: u64,
) -> Result<QualityScores, StageError> {
    let prompt = prompts::build_qc_prompt(item, caption);
    ask(judge, &prompt, params(seed, 0.0, 512), parse_qc_scores).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockJudge;
    use crate::backends::{BackendKind, BackendProfile, Client, PromptStyle, RetryPolicy};
    use crate::ingest::{unify, SourceManifestEntry, TaggedEvent};
    use crate::model::{AudioRef, Corpus, QuestionType};
    use std::sync::Arc;

    fn judge(malformed: u64) -> Client {
        Client::new(
            BackendProfile {
                name: "judge".into(),
                kind: BackendKind::TextJudge,
                endpoint: "mock://judge".into(),
                model_id: "mock".into(),
                prompt_style: PromptStyle::OmniAnswerTags,
                max_concurrency: 4,
                timeout_s: 1.0,
                retry: RetryPolicy::default(),
                api_key: None,
            },
            Arc::new(MockJudge { malformed_per_mille: malformed, ..MockJudge::default() }),
        )
    }

    fn audio(id: &str) -> AudioRef {
        AudioRef { id: id.into(), path: format!("{id}.wav"), duration_s: Some(10.0) }
    }

    #[test]
    fn random_seconds_in_range_one_decimal() {
        for s in 0..500 {
            let x = sample_random_seconds(s, (2.0, 5.0));
            assert!((2.0..=5.0).contains(&x));
            assert!(((x * 10.0).round() - x * 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flexible_record_yields_one_item() {
        let entry = SourceManifestEntry {
            audio: audio("ac1"),
            captions: vec!["A dog barks twice while cars pass by".into()],
            qa: None,
            tagged_events: None,
        };
        let rec = unify(&entry, Corpus::AudioCaps).unwrap();
        let items = mcq_items_for_record(&rec, &judge(0), &McqOptions::default(), 1).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].id, "ac1#q1");
        assert_eq!(items[0].qtype, QuestionType::Sound);
        assert_eq!(items[0].correct_option(), Some("A dog barks twice while cars"));
        let again = mcq_items_for_record(&rec, &judge(0), &McqOptions::default(), 1).unwrap();
        assert_eq!(items, again);
    }

    #[test]
    fn temporal_record_respects_separation() {
        let ev = |l: &str, s: f64, e: f64| TaggedEvent { label: l.into(), start_s: s, end_s: e };
        let entry = SourceManifestEntry {
            audio: audio("t1"),
            captions: vec![],
            qa: None,
            tagged_events: Some(vec![ev("door slams", 1.0, 2.0), ev("dog barks", 6.5, 8.0), ev("man speaks", 12.0, 20.0)]),
        };
        let rec = unify(&entry, Corpus::Tacos).unwrap();
        assert_eq!(event_count(&rec.caption), 3);
        let items = mcq_items_for_record(&rec, &judge(0), &McqOptions::default(), 3).unwrap();
        assert!(!items.is_empty() && items.len() <= 3);
        for it in &items {
            assert_eq!(it.qtype, QuestionType::Temporal);
            let times: Vec<f64> = it.options.iter().flat_map(|o| parse::time_values(o)).collect();
            assert_eq!(times.len(), 4);
            for i in 0..4 {
                for j in i + 1..4 {
                    assert!((times[i] - times[j]).abs() >= 2.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn always_malformed_judge_rejects() {
        let entry = SourceManifestEntry {
            audio: audio("c1"),
            captions: vec!["Rain".into()],
            qa: None,
            tagged_events: None,
        };
        let rec = unify(&entry, Corpus::Clotho).unwrap();
        let err = mcq_items_for_record(&rec, &judge(1000), &McqOptions::default(), 1).unwrap_err();
        assert!(matches!(err, StageError::Rejected(_)));
    }

    #[test]
    fn cot_simplify_and_qc_chain() {
        let entry = SourceManifestEntry {
            audio: audio("m1"),
            captions: vec!["An upbeat jazz trio with walking bass and brushed drums".into()],
            qa: None,
            tagged_events: None,
        };
        let rec = unify(&entry, Corpus::MusicCaps).unwrap();
        let j = judge(0);
        let mut item = mcq_items_for_record(&rec, &j, &McqOptions::default(), 1).unwrap().remove(0);
        let cot = structured_cot(&item, &rec.caption, &j, 5).unwrap();
        assert_eq!(cot.r2, rec.caption);
        let bundle = simplified_cot(&item, &rec.caption, &cot, &j, 5).unwrap();
        assert!(crate::model::word_count(&bundle.simple) < bundle.structured_word_count());
        item.cot = Some(bundle);
        assert!(validate_item(&item).is_empty());
        let q = quality_scores(&item, &rec.caption, &j, 5).unwrap();
        assert!(q.as_array().iter().all(|s| (1..=5).contains(s)));
    }
}
