//! Audio-QA prompt formatting per model family, and answer extraction.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::genstage::extract::tagged;

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// System prompt used with the answer-tag training/evaluation format.
pub const AUDIO_QA_SYSTEM_PROMPT: &str =
    "You are an audio understanding model that answers multiple choice questions based on audio content.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptStyle {
    /// `[Question] (A) Option1. (B) Option2. ...`
    FlamingoLetters,
    /// Python-list options plus an `<answer>` instruction.
    R1AqaAnswerTags,
    /// `[Question] A. Option1 B. Option2 ...`
    KimiLetterDot,
    /// Same user text as `R1AqaAnswerTags`, with a system prompt.
    OmniAnswerTags,
}

/// Python `repr` of a string, as produced when a list of options is
/// formatted into a prompt.
pub fn python_str_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

pub fn python_list_repr(options: &[String]) -> String {
    let inner: Vec<String> = options.iter().map(|o| python_str_repr(o)).collect();
    format!("[{}]", inner.join(", "))
}

/// User-message text for an audio MCQ in the given style.
pub fn format_question(style: PromptStyle, question: &str, options: &[String; 4]) -> String {
    match style {
        PromptStyle::FlamingoLetters => {
            let opts: Vec<String> = options
                .iter()
                .zip(LETTERS)
                .map(|(o, l)| format!("({l}) {o}."))
                .collect();
            format!("{question} {}", opts.join(" "))
        }
        PromptStyle::R1AqaAnswerTags | PromptStyle::OmniAnswerTags => format!(
            "{question} Please choose the answer from the following options: {}. Output the final answer in <answer> </answer>.",
            python_list_repr(options)
        ),
        PromptStyle::KimiLetterDot => {
            let opts: Vec<String> = options
                .iter()
                .zip(LETTERS)
                .map(|(o, l)| format!("{l}. {o}"))
                .collect();
            format!("{question} {}", opts.join(" "))
        }
    }
}

pub fn system_prompt(style: PromptStyle) -> Option<&'static str> {
    (style == PromptStyle::OmniAnswerTags).then_some(AUDIO_QA_SYSTEM_PROMPT)
}

fn letter_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:^|[^A-Za-z0-9])\(?([A-D])[.)]").expect("static regex"))
}

fn letter_index(c: char) -> Option<u8> {
    let i = LETTERS.iter().position(|l| l.eq_ignore_ascii_case(&c))?;
    Some(i as u8 + 1)
}

/// Matches `s` as a bare letter answer: `B`, `(B)`, `B.`, `B)`.
fn bare_letter(s: &str) -> Option<u8> {
    let t = s.trim().trim_start_matches('(').trim_end_matches(['.', ')']);
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => letter_index(c),
        _ => None,
    }
}

/// Options whose exact text occurs in `haystack`, minus options that only
/// match because they are contained in a longer matching option.
fn substring_match(haystack: &str, options: &[String; 4]) -> Option<u8> {
    let hits: Vec<usize> = (0..4)
        .filter(|&i| !options[i].is_empty() && haystack.contains(options[i].as_str()))
        .collect();
    let maximal: Vec<usize> = hits
        .iter()
        .copied()
        .filter(|&i| {
            !hits
                .iter()
                .any(|&j| j != i && options[j].len() > options[i].len() && options[j].contains(options[i].as_str()))
        })
        .collect();
    match maximal.as_slice() {
        [i] => Some(*i as u8 + 1),
        _ => None,
    }
}

/// Letter answers of the form `B.` / `B)` / `(B)`; a single distinct letter
/// is required.
fn letter_match(text: &str) -> Option<u8> {
    let mut found: Option<u8> = None;
    for cap in letter_token_regex().captures_iter(text) {
        let c = cap[1].chars().next()?;
        let idx = letter_index(c)?;
        match found {
            None => found = Some(idx),
            Some(prev) if prev == idx => {}
            Some(_) => return None,
        }
    }
    found
}

/// Picks the chosen option (1-based) from raw model output:
/// 1. the `<answer>` tag content, matched to option text or a letter;
/// 2. a single letter token followed by `.` or `)`;
/// 3. a unique exact option-text substring.
///
/// Letters match case-insensitively; option text matches case-sensitively.
pub fn extract_choice(raw: &str, options: &[String; 4], _style: PromptStyle) -> Option<u8> {
    if let Some(inner) = tagged(raw, "answer") {
        let t = inner.trim().trim_matches(|c| c == '"' || c == '\'').trim();
        if let Some(i) = options.iter().position(|o| o.trim() == t) {
            return Some(i as u8 + 1);
        }
        if let Some(i) = bare_letter(t) {
            return Some(i);
        }
        if let Some(i) = letter_match(t) {
            return Some(i);
        }
        if let Some(i) = substring_match(t, options) {
            return Some(i);
        }
    }
    if let Some(i) = letter_match(raw) {
        return Some(i);
    }
    substring_match(raw, options)
}
