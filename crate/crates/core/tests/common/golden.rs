//! Table-driven parser checks against the JSON case files in `tests/golden/`.
//! Each check returns the number of cases or the first mismatch.

use std::path::PathBuf;

use acfforge_core::backends::{extract_choice, PromptStyle};
use acfforge_core::genstage::parse::{
    parse_cot_response, parse_mcq_response, parse_qc_scores, parse_simple_cot, McqParseError, TagParseError,
};
use acfforge_core::genstage::prompts::McqMode;
use serde::Deserialize;

pub type Check = Result<usize, String>;

fn load<T: for<'de> Deserialize<'de>>(name: &str) -> Result<Vec<T>, String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum Expect<T> {
    Ok(T),
    Err(String),
}

fn mcq_code(e: &McqParseError) -> &'static str {
    match e {
        McqParseError::NoJson => "no-json",
        McqParseError::Ambiguous(_) => "ambiguous",
        McqParseError::MissingKey(_) => "missing-key",
        McqParseError::UnexpectedKey(_) => "unexpected-key",
        McqParseError::BadValue { .. } => "bad-value",
        McqParseError::Type { .. } => "type",
        McqParseError::Constraint(_) => "constraint",
    }
}

fn tag_code(e: &TagParseError) -> &'static str {
    match e {
        TagParseError::MissingTag(_) => "missing-tag",
        TagParseError::Empty(_) => "empty",
        TagParseError::TooLong { .. } => "too-long",
        TagParseError::NotShorter { .. } => "not-shorter",
        TagParseError::NonEnglish => "non-english",
        TagParseError::MissingScore(_) => "missing-score",
        TagParseError::ScoreOutOfRange { .. } => "out-of-range",
        TagParseError::ConflictingScore(_) => "conflicting",
    }
}

/// Compares a parse result with the expectation.
fn judge<T: std::fmt::Debug, W, E: std::fmt::Display>(
    name: &str,
    expect: &Expect<W>,
    got: Result<T, E>,
    same: impl Fn(&T, &W) -> bool,
    code: impl Fn(&E) -> &'static str,
) -> Result<(), String> {
    match (expect, got) {
        (Expect::Ok(w), Ok(g)) if same(&g, w) => Ok(()),
        (Expect::Err(c), Err(e)) if code(&e) == c => Ok(()),
        (Expect::Ok(_), Ok(g)) => Err(format!("{name}: wrong value {g:?}")),
        (Expect::Err(c), Ok(g)) => Err(format!("{name}: expected `{c}`, parsed {g:?}")),
        (_, Err(e)) => Err(format!("{name}: unexpected error `{}` ({e})", code(&e))),
    }
}

#[derive(Deserialize)]
struct McqDraftJson {
    qtype: String,
    question: String,
    correct: String,
    incorrect: [String; 3],
}

#[derive(Deserialize)]
struct McqCase {
    name: String,
    mode: String,
    random_seconds: f64,
    input: String,
    expect: Expect<McqDraftJson>,
}

pub fn mcq() -> Check {
    let cases: Vec<McqCase> = load("mcq.json")?;
    for c in &cases {
        let mode = if c.mode == "temporal" { McqMode::Temporal } else { McqMode::Flexible };
        judge(
            &c.name,
            &c.expect,
            parse_mcq_response(&c.input, mode, c.random_seconds),
            |d, w| d.qtype.label() == w.qtype && d.question == w.question && d.correct == w.correct && d.incorrect == w.incorrect,
            mcq_code,
        )?;
    }
    Ok(cases.len())
}

#[derive(Deserialize)]
struct CotJson {
    r1: String,
    r3: String,
    over_length: bool,
}

#[derive(Deserialize)]
struct CotCase {
    name: String,
    caption: String,
    input: String,
    expect: Expect<CotJson>,
}

pub fn structured_cot() -> Check {
    let cases: Vec<CotCase> = load("cot.json")?;
    for c in &cases {
        judge(
            &c.name,
            &c.expect,
            parse_cot_response(&c.input, &c.caption),
            |g, w| g.r1 == w.r1 && g.r3 == w.r3 && g.over_length == w.over_length && g.r2 == c.caption,
            tag_code,
        )?;
    }
    Ok(cases.len())
}

#[derive(Deserialize)]
struct SimpleCase {
    name: String,
    structured_words: usize,
    input: String,
    expect: Expect<String>,
}

pub fn simplified_cot() -> Check {
    let cases: Vec<SimpleCase> = load("simple.json")?;
    for c in &cases {
        judge(&c.name, &c.expect, parse_simple_cot(&c.input, c.structured_words), |g, w| g == w, tag_code)?;
    }
    Ok(cases.len())
}

#[derive(Deserialize)]
struct QcCase {
    name: String,
    input: String,
    expect: Expect<[u8; 5]>,
}

pub fn quality_scores() -> Check {
    let cases: Vec<QcCase> = load("qc.json")?;
    for c in &cases {
        judge(&c.name, &c.expect, parse_qc_scores(&c.input), |g, w| g.as_array() == *w, tag_code)?;
    }
    Ok(cases.len())
}

#[derive(Deserialize)]
struct ChoiceCase {
    name: String,
    style: PromptStyle,
    options: [String; 4],
    raw: String,
    expect: Option<u8>,
}

pub fn answer_extraction() -> Check {
    let cases: Vec<ChoiceCase> = load("choice.json")?;
    let styles: std::collections::HashSet<_> = cases.iter().map(|c| c.style).collect();
    if styles.len() != 4 {
        return Err(format!("choice.json covers {} of 4 prompt styles", styles.len()));
    }
    for c in &cases {
        let got = extract_choice(&c.raw, &c.options, c.style);
        if got != c.expect {
            return Err(format!("{}: expected {:?}, got {got:?}", c.name, c.expect));
        }
    }
    Ok(cases.len())
}
