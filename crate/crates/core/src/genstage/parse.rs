//! Strict parsers for generation-stage responses. Every parser is total:
//! arbitrary text yields a value or a typed error.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::Value;
use thiserror::Error;

use super::extract::{json_objects, tagged, tagged_all};
use super::prompts::McqMode;
use crate::model::{word_count, QualityScores, QuestionType};

/// Longest temporal option time the temporal template allows.
pub const MAX_OPTION_SECONDS: f64 = 30.0;
/// Analysis slots of the structured CoT are asked to stay within this many words.
pub const ANALYSIS_WORD_LIMIT: usize = 30;
pub const SIMPLE_COT_WORD_LIMIT: usize = 150;
/// Temporal questions are asked to stay within this many words; longer ones
/// are flagged, not rejected.
pub const TEMPORAL_QUESTION_WORD_LIMIT: usize = 20;
/// Lowest score that survives quality filtering.
pub const QUALITY_THRESHOLD: u8 = 4;

const MCQ_KEYS: [&str; 4] = [
    "new_question_type",
    "new_question",
    "correct_answer",
    "incorrect_options",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McqParseError {
    #[error("no JSON object in response")]
    NoJson,
    #[error("ambiguous response: {0} candidate JSON objects")]
    Ambiguous(usize),
    #[error("missing key `{0}`")]
    MissingKey(&'static str),
    #[error("unexpected key `{0}`")]
    UnexpectedKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: &'static str, reason: String },
    #[error("question type `{got}` not allowed in {mode:?} mode")]
    Type { got: String, mode: McqMode },
    #[error("temporal constraint violated: {0}")]
    Constraint(String),
}

/// A parsed MCQ-construction response before option shuffling.
#[derive(Debug, Clone, PartialEq)]
pub struct McqDraft {
    pub qtype: QuestionType,
    pub question: String,
    pub correct: String,
    pub incorrect: [String; 3],
    /// Soft issues that do not reject the draft.
    pub warnings: Vec<String>,
}

fn seconds_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(\d+(?:\.\d+)?)\s*(?:seconds|second|secs|sec|s)\b").expect("static regex")
    })
}

/// Time values (in seconds) mentioned in `text`, in order.
pub fn time_values(text: &str) -> Vec<f64> {
    seconds_regex()
        .captures_iter(text)
        .filter_map(|c| c[1].parse::<f64>().ok())
        .collect()
}

pub fn parse_mcq_response(
    text: &str,
    mode: McqMode,
    random_seconds: f64,
) -> Result<McqDraft, McqParseError> {
    let objs = json_objects(text);
    let candidates: Vec<_> = match objs.len() {
        0 => return Err(McqParseError::NoJson),
        1 => objs,
        n => {
            let with_keys: Vec<_> = objs
                .into_iter()
                .filter(|o| MCQ_KEYS.iter().all(|k| o.contains_key(*k)))
                .collect();
            if with_keys.len() != 1 {
                return Err(McqParseError::Ambiguous(n));
            }
            with_keys
        }
    };
    let obj = &candidates[0];
    for k in MCQ_KEYS {
        if !obj.contains_key(k) {
            return Err(McqParseError::MissingKey(k));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !MCQ_KEYS.contains(&k.as_str())) {
        return Err(McqParseError::UnexpectedKey(extra.clone()));
    }

    let string_field = |key: &'static str| -> Result<String, McqParseError> {
        match &obj[key] {
            Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
            Value::String(_) => Err(McqParseError::BadValue { key, reason: "empty".into() }),
            other => Err(McqParseError::BadValue {
                key,
                reason: format!("expected string, got {}", json_kind(other)),
            }),
        }
    };

    let raw_type = string_field("new_question_type")?;
    let question = string_field("new_question")?;
    let correct = string_field("correct_answer")?;
    let incorrect = match &obj["incorrect_options"] {
        Value::Array(items) if items.len() == 3 => {
            let mut out: Vec<String> = Vec::with_capacity(3);
            for it in items {
                match it {
                    Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
                    _ => {
                        return Err(McqParseError::BadValue {
                            key: "incorrect_options",
                            reason: "options must be nonempty strings".into(),
                        })
                    }
                }
            }
            [out[0].clone(), out[1].clone(), out[2].clone()]
        }
        Value::Array(items) => {
            return Err(McqParseError::BadValue {
                key: "incorrect_options",
                reason: format!("expected 3 options, got {}", items.len()),
            })
        }
        other => {
            return Err(McqParseError::BadValue {
                key: "incorrect_options",
                reason: format!("expected array, got {}", json_kind(other)),
            })
        }
    };

    let qtype = QuestionType::parse_label(&raw_type);
    let qtype = match (mode, qtype) {
        (McqMode::Flexible, Some(t)) if t != QuestionType::Temporal => t,
        (McqMode::Temporal, Some(QuestionType::Temporal)) => QuestionType::Temporal,
        _ => return Err(McqParseError::Type { got: raw_type, mode }),
    };

    if !question.ends_with('?') {
        return Err(McqParseError::BadValue {
            key: "new_question",
            reason: "must end with a question mark".into(),
        });
    }
    let all = [&correct, &incorrect[0], &incorrect[1], &incorrect[2]];
    for i in 0..4 {
        for j in i + 1..4 {
            if all[i] == all[j] {
                return Err(McqParseError::BadValue {
                    key: "incorrect_options",
                    reason: "options must be pairwise distinct".into(),
                });
            }
        }
    }

    let mut warnings = Vec::new();
    if mode == McqMode::Temporal {
        check_temporal_options(&all, random_seconds)?;
        if word_count(&question) > TEMPORAL_QUESTION_WORD_LIMIT {
            warnings.push(format!(
                "question exceeds {TEMPORAL_QUESTION_WORD_LIMIT} words"
            ));
        }
    }

    Ok(McqDraft {
        qtype,
        question,
        correct,
        incorrect,
        warnings,
    })
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Every time value must be at most 30.0 s; options that carry times must
/// differ by at least `random_seconds` at every shared position.
fn check_temporal_options(options: &[&String; 4], random_seconds: f64) -> Result<(), McqParseError> {
    let times: Vec<Vec<f64>> = options.iter().map(|o| time_values(o)).collect();
    for (o, ts) in options.iter().zip(&times) {
        if let Some(t) = ts.iter().find(|t| **t > MAX_OPTION_SECONDS) {
            return Err(McqParseError::Constraint(format!(
                "option `{o}` mentions {t}s > {MAX_OPTION_SECONDS:.1}s"
            )));
        }
    }
    const EPS: f64 = 1e-9;
    for i in 0..4 {
        for j in i + 1..4 {
            for (a, b) in times[i].iter().zip(&times[j]) {
                if (a - b).abs() + EPS < random_seconds {
                    return Err(McqParseError::Constraint(format!(
                        "times {a}s and {b}s are closer than {random_seconds}s"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Seed-deterministic uniform permutation of the four options. Returns the
/// options and the 1-based index of the correct one.
pub fn assemble_options(draft: &McqDraft, seed: u64) -> ([String; 4], u8) {
    let mut opts = [
        draft.correct.clone(),
        draft.incorrect[0].clone(),
        draft.incorrect[1].clone(),
        draft.incorrect[2].clone(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    opts.shuffle(&mut rng);
    let idx = opts
        .iter()
        .position(|o| *o == draft.correct)
        .expect("correct option survives a permutation");
    (opts, idx as u8 + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagParseError {
    #[error("missing <{0}> ... </{0}> pair")]
    MissingTag(&'static str),
    #[error("empty <{0}> content")]
    Empty(&'static str),
    #[error("simplified reasoning has {words} words, limit {limit}")]
    TooLong { words: usize, limit: usize },
    #[error("simplified reasoning ({simple} words) is not shorter than the structured one ({structured} words)")]
    NotShorter { simple: usize, structured: usize },
    #[error("contains CJK characters")]
    NonEnglish,
    #[error("missing or unreadable <aspect{0}_score>")]
    MissingScore(u8),
    #[error("aspect {aspect} score `{raw}` is not an integer in 1..=5")]
    ScoreOutOfRange { aspect: u8, raw: String },
    #[error("aspect {0} scored more than once with different values")]
    ConflictingScore(u8),
}

/// Structured CoT parts. `r2` is the caption itself.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredCot {
    pub r1: String,
    pub r2: String,
    pub r3: String,
    /// Set when either analysis slot exceeds its 30-word budget.
    pub over_length: bool,
}

impl StructuredCot {
    pub fn word_count(&self) -> usize {
        word_count(&self.r1) + word_count(&self.r2) + word_count(&self.r3)
    }
}

pub fn parse_cot_response(text: &str, caption: &str) -> Result<StructuredCot, TagParseError> {
    let r1 = tagged(text, "first_analysis")
        .ok_or(TagParseError::MissingTag("first_analysis"))?
        .trim();
    let r3 = tagged(text, "second_analysis")
        .ok_or(TagParseError::MissingTag("second_analysis"))?
        .trim();
    if r1.is_empty() || r1 == "..." {
        return Err(TagParseError::Empty("first_analysis"));
    }
    if r3.is_empty() || r3 == "..." {
        return Err(TagParseError::Empty("second_analysis"));
    }
    let over_length = word_count(r1) > ANALYSIS_WORD_LIMIT || word_count(r3) > ANALYSIS_WORD_LIMIT;
    Ok(StructuredCot {
        r1: r1.to_string(),
        r2: caption.to_string(),
        r3: r3.to_string(),
        over_length,
    })
}

/// CJK ideographs, kana, CJK punctuation and full-width forms.
pub fn contains_cjk(text: &str) -> bool {
    text.chars().any(|c| {
        matches!(c as u32,
            0x3000..=0x303F
            | 0x3040..=0x30FF
            | 0x3400..=0x4DBF
            | 0x4E00..=0x9FFF
            | 0xF900..=0xFAFF
            | 0xFF00..=0xFFEF
            | 0x20000..=0x2FA1F)
    })
}

pub fn parse_simple_cot(text: &str, structured_words: usize) -> Result<String, TagParseError> {
    let body = tagged(text, "thinking process")
        .ok_or(TagParseError::MissingTag("thinking process"))?
        .trim();
    if body.is_empty() {
        return Err(TagParseError::Empty("thinking process"));
    }
    if contains_cjk(body) {
        return Err(TagParseError::NonEnglish);
    }
    let words = word_count(body);
    if words > SIMPLE_COT_WORD_LIMIT {
        return Err(TagParseError::TooLong {
            words,
            limit: SIMPLE_COT_WORD_LIMIT,
        });
    }
    if words >= structured_words {
        return Err(TagParseError::NotShorter {
            simple: words,
            structured: structured_words,
        });
    }
    Ok(body.to_string())
}

/// Aspect order follows the quality-check prompt: fluency, answer
/// consistency, distractors, CoT logic, simplified-CoT logic.
pub fn parse_qc_scores(text: &str) -> Result<QualityScores, TagParseError> {
    let mut scores = [0u8; 5];
    for aspect in 1..=5u8 {
        let tag = format!("aspect{aspect}_score");
        let found = tagged_all(text, &tag);
        let first = found.first().ok_or(TagParseError::MissingScore(aspect))?;
        let raw = first.trim();
        let value = raw
            .parse::<u8>()
            .ok()
            .filter(|v| (1..=5).contains(v))
            .ok_or_else(|| TagParseError::ScoreOutOfRange {
                aspect,
                raw: raw.chars().take(16).collect(),
            })?;
        if found.iter().any(|f| f.trim() != raw) {
            return Err(TagParseError::ConflictingScore(aspect));
        }
        scores[usize::from(aspect - 1)] = value;
    }
    Ok(QualityScores {
        language_fluency: scores[0],
        answer_consistency: scores[1],
        distractor_quality: scores[2],
        reasoning_logic: scores[3],
        simple_reasoning_quality: scores[4],
    })
}

/// Keep iff every score is at least 4.
pub fn quality_filter(scores: &QualityScores) -> bool {
    scores.min() >= QUALITY_THRESHOLD
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flexible_json(qtype: &str) -> String {
        format!(
            r#"{{"new_question_type": "{qtype}", "new_question": "What instrument leads?", "correct_answer": "A bright trumpet", "incorrect_options": ["A soft violin", "A deep cello", "A light flute"]}}"#
        )
    }

    fn temporal_json(opts: [&str; 4]) -> String {
        format!(
            r#"{{"new_question_type": "temporal", "new_question": "When does the horn start?", "correct_answer": "{}", "incorrect_options": ["{}", "{}", "{}"]}}"#,
            opts[0], opts[1], opts[2], opts[3]
        )
    }

    #[test]
    fn flexible_happy_path() {
        let d = parse_mcq_response(&flexible_json("music"), McqMode::Flexible, 3.0).unwrap();
        assert_eq!(d.qtype, QuestionType::Music);
        assert_eq!(d.correct, "A bright trumpet");
        assert_eq!(d.incorrect[2], "A light flute");
    }

    #[test]
    fn flexible_rejects_temporal_type() {
        assert!(matches!(
            parse_mcq_response(&flexible_json("temporal"), McqMode::Flexible, 3.0),
            Err(McqParseError::Type { .. })
        ));
        assert!(matches!(
            parse_mcq_response(&flexible_json("noise"), McqMode::Flexible, 3.0),
            Err(McqParseError::Type { .. })
        ));
    }

    #[test]
    fn temporal_requires_temporal_type() {
        assert!(matches!(
            parse_mcq_response(&flexible_json("sound"), McqMode::Temporal, 3.0),
            Err(McqParseError::Type { .. })
        ));
    }

    #[test]
    fn temporal_separation() {
        let close = temporal_json(["At 10.0s", "At 12.0s", "At 20.0s", "At 25.0s"]);
        assert!(matches!(
            parse_mcq_response(&close, McqMode::Temporal, 3.0),
            Err(McqParseError::Constraint(_))
        ));
        let ok = temporal_json(["At 10.0s", "At 14.0s", "At 20.0s", "At 25.0s"]);
        assert!(parse_mcq_response(&ok, McqMode::Temporal, 3.0).is_ok());
        // exactly random_seconds apart is allowed
        let edge = temporal_json(["At 10.0s", "At 13.0s", "At 20.0s", "At 25.0s"]);
        assert!(parse_mcq_response(&edge, McqMode::Temporal, 3.0).is_ok());
    }

    #[test]
    fn temporal_max_seconds() {
        let over = temporal_json(["At 31.5s", "At 2.0s", "At 8.0s", "At 15.0s"]);
        assert!(matches!(
            parse_mcq_response(&over, McqMode::Temporal, 3.0),
            Err(McqParseError::Constraint(_))
        ));
        let edge = temporal_json(["At 30.0s", "At 2.0s", "At 8.0s", "At 15.0s"]);
        assert!(parse_mcq_response(&edge, McqMode::Temporal, 3.0).is_ok());
    }

    #[test]
    fn temporal_without_times_passes() {
        let t = temporal_json(["Horn then dog", "Dog then horn", "Only horn", "Only dog"]);
        assert!(parse_mcq_response(&t, McqMode::Temporal, 3.0).is_ok());
    }

    #[test]
    fn long_temporal_question_is_flagged() {
        let t = r#"{"new_question_type": "temporal", "new_question": "one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen seventeen eighteen nineteen twenty twentyone?", "correct_answer": "a", "incorrect_options": ["b", "c", "d"]}"#;
        let d = parse_mcq_response(t, McqMode::Temporal, 3.0).unwrap();
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn key_set_enforced() {
        let missing = r#"{"new_question_type": "sound", "new_question": "Q?", "correct_answer": "a"}"#;
        assert_eq!(
            parse_mcq_response(missing, McqMode::Flexible, 3.0),
            Err(McqParseError::MissingKey("incorrect_options"))
        );
        let extra = r#"{"new_question_type": "sound", "new_question": "Q?", "correct_answer": "a", "incorrect_options": ["b","c","d"], "why": "x"}"#;
        assert!(matches!(
            parse_mcq_response(extra, McqMode::Flexible, 3.0),
            Err(McqParseError::UnexpectedKey(_))
        ));
        assert_eq!(parse_mcq_response("nope", McqMode::Flexible, 3.0), Err(McqParseError::NoJson));
    }

    #[test]
    fn question_mark_and_distinctness() {
        let no_q = r#"{"new_question_type": "sound", "new_question": "Q", "correct_answer": "a", "incorrect_options": ["b","c","d"]}"#;
        assert!(matches!(
            parse_mcq_response(no_q, McqMode::Flexible, 3.0),
            Err(McqParseError::BadValue { key: "new_question", .. })
        ));
        let dup = r#"{"new_question_type": "sound", "new_question": "Q?", "correct_answer": "a", "incorrect_options": ["b","a","d"]}"#;
        assert!(matches!(
            parse_mcq_response(dup, McqMode::Flexible, 3.0),
            Err(McqParseError::BadValue { .. })
        ));
    }

    #[test]
    fn time_value_extraction() {
        assert_eq!(time_values("From 1.5s to 3 seconds, then 12 sec"), vec![1.5, 3.0, 12.0]);
        assert!(time_values("it's loud").is_empty());
    }

    #[test]
    fn cot_tags() {
        let text = "x <first_analysis>the question asks about the animal</first_analysis> y <second_analysis>the caption mentions a dog</second_analysis>";
        let c = parse_cot_response(text, "A dog barks.").unwrap();
        assert_eq!(c.r1, "the question asks about the animal");
        assert_eq!(c.r2, "A dog barks.");
        assert!(!c.over_length);
        let broken = "<first_analysis>a</first_analysis><second_analysis>b";
        assert_eq!(
            parse_cot_response(broken, "c"),
            Err(TagParseError::MissingTag("second_analysis"))
        );
        let long = format!(
            "<first_analysis>{}</first_analysis><second_analysis>ok</second_analysis>",
            "w ".repeat(31)
        );
        assert!(parse_cot_response(&long, "c").unwrap().over_length);
    }

    #[test]
    fn simple_cot_bounds() {
        let wrap = |n: usize| format!("<thinking process>\n{}\n</thinking process>", "word ".repeat(n));
        assert!(parse_simple_cot(&wrap(120), 200).is_ok());
        assert!(matches!(parse_simple_cot(&wrap(160), 400), Err(TagParseError::TooLong { .. })));
        assert!(matches!(parse_simple_cot(&wrap(50), 50), Err(TagParseError::NotShorter { .. })));
        assert_eq!(
            parse_simple_cot("<thinking process>这是 a test</thinking process>", 100),
            Err(TagParseError::NonEnglish)
        );
        assert_eq!(
            parse_simple_cot("no tags", 100),
            Err(TagParseError::MissingTag("thinking process"))
        );
    }

    #[test]
    fn qc_scores() {
        let text = "<aspect1_score>5</aspect1_score>\n<aspect2_score>4</aspect2_score>\n<aspect3_score>3</aspect3_score>\n<aspect4_score>2</aspect4_score>\n<aspect5_score>4</aspect5_score>";
        let s = parse_qc_scores(text).unwrap();
        assert_eq!(s.language_fluency, 5);
        assert_eq!(s.answer_consistency, 4);
        assert_eq!(s.distractor_quality, 3);
        assert_eq!(s.reasoning_logic, 2);
        assert_eq!(s.simple_reasoning_quality, 4);
        let six = text.replace("<aspect4_score>2", "<aspect4_score>6");
        assert!(matches!(parse_qc_scores(&six), Err(TagParseError::ScoreOutOfRange { aspect: 4, .. })));
        let four = text.replace("<aspect5_score>4</aspect5_score>", "");
        assert_eq!(parse_qc_scores(&four), Err(TagParseError::MissingScore(5)));
    }

    #[test]
    fn quality_threshold() {
        let s = |v: [u8; 5]| QualityScores {
            answer_consistency: v[0],
            distractor_quality: v[1],
            language_fluency: v[2],
            reasoning_logic: v[3],
            simple_reasoning_quality: v[4],
        };
        assert!(quality_filter(&s([4, 4, 4, 4, 4])));
        assert!(!quality_filter(&s([5, 5, 3, 5, 5])));
        assert!(quality_filter(&s([5, 5, 5, 5, 5])));
    }

    #[test]
    fn assemble_keeps_correct_pointer() {
        let d = parse_mcq_response(&flexible_json("music"), McqMode::Flexible, 3.0).unwrap();
        for seed in 0..200 {
            let (opts, idx) = assemble_options(&d, seed);
            assert_eq!(opts[usize::from(idx) - 1], d.correct);
            let mut sorted = opts.to_vec();
            sorted.sort();
            let mut orig = vec![d.correct.clone()];
            orig.extend(d.incorrect.iter().cloned());
            orig.sort();
            assert_eq!(sorted, orig);
        }
    }
}
