//! Prompt templates for MCQ construction, CoT generation, simplification and
//! quality scoring. Templates are stored verbatim; only placeholders change.

use crate::model::{McqItem, UnifiedRecord};

pub const MCQ_FLEXIBLE: &str = include_str!("templates/mcq_flexible.txt");
pub const MCQ_TEMPORAL: &str = include_str!("templates/mcq_temporal.txt");
pub const COT_STRUCTURED: &str = include_str!("templates/cot_structured.txt");
pub const COT_SIMPLIFY: &str = include_str!("templates/cot_simplify.txt");
pub const QUALITY_CHECK: &str = include_str!("templates/qc.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum McqMode {
    Flexible,
    Temporal,
}

/// Single-pass placeholder substitution: `{name}` is replaced when `name`
/// is a known key. Substituted values are never re-scanned, so captions that
/// happen to contain `{answer}` stay literal.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Seconds rendered the way the temporal template and its checks agree on.
pub fn format_seconds(s: f64) -> String {
    format!("{s:.1}")
}

pub fn build_mcq_prompt(
    rec: &UnifiedRecord,
    mode: McqMode,
    random_seconds: f64,
    style_reference: &str,
) -> String {
    let secs = format_seconds(random_seconds);
    match mode {
        McqMode::Flexible => render(
            MCQ_FLEXIBLE,
            &[
                ("q_text", &rec.question),
                ("answer", &rec.caption),
                ("style_reference", style_reference),
            ],
        ),
        McqMode::Temporal => render(
            MCQ_TEMPORAL,
            &[
                ("q_text", &rec.question),
                ("answer", &rec.caption),
                ("random_seconds", &secs),
                ("style_reference", style_reference),
            ],
        ),
    }
}

/// Options quoted and comma-joined: `"a", "b", "c", "d"`.
pub fn quoted_choices(options: &[String]) -> String {
    options
        .iter()
        .map(|o| format!("\"{o}\""))
        .collect::<Vec<_>>()
        .join(", ")
}

fn answer_text(item: &McqItem) -> &str {
    item.correct_option().unwrap_or("")
}

pub fn build_cot_prompt(item: &McqItem, caption: &str) -> String {
    let choices = quoted_choices(&item.options);
    render(
        COT_STRUCTURED,
        &[
            ("question_text", &item.question),
            ("question_type", item.qtype.label()),
            ("choices", &choices),
            ("answer", answer_text(item)),
            ("original_answer", caption),
        ],
    )
}

/// The completed structured thinking process: the scaffold of the structured
/// CoT prompt with both analysis slots filled in.
pub fn structured_thinking_text(item: &McqItem, caption: &str, r1: &str, r3: &str) -> String {
    format!(
        "According to the question text, {r1}, so the question type is {qtype}.\n\n\
         I need to firstly analyze the audio content:\n{caption}\n\n\
         According to the audio content, {r3}, so the correct answer is \"{answer}\".",
        qtype = item.qtype.label(),
        answer = answer_text(item),
    )
}

pub fn build_simplify_prompt(item: &McqItem, caption: &str, structured_cot: &str) -> String {
    let choices = quoted_choices(&item.options);
    render(
        COT_SIMPLIFY,
        &[
            ("question_text", &item.question),
            ("question_type", item.qtype.label()),
            ("choices", &choices),
            ("answer", answer_text(item)),
            ("original_answer", caption),
            ("thinking_process", structured_cot),
        ],
    )
}

const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Requires `item.cot` for the thinking-process sections; an item without
/// CoT renders them empty.
pub fn build_qc_prompt(item: &McqItem, caption: &str) -> String {
    let choice_text = item
        .options
        .iter()
        .zip(LETTERS)
        .map(|(o, l)| format!("{l}. {o}"))
        .collect::<Vec<_>>()
        .join("\n");
    let incorrect = item
        .distractors()
        .iter()
        .map(|o| format!("- {o}"))
        .collect::<Vec<_>>()
        .join("\n");
    let (thinking, simple) = match &item.cot {
        Some(c) => (
            structured_thinking_text(item, &c.r2, &c.r1, &c.r3),
            c.simple.clone(),
        ),
        None => (String::new(), String::new()),
    };
    render(
        QUALITY_CHECK,
        &[
            ("question_text", &item.question),
            ("choice_text", choice_text.trim()),
            ("answer", answer_text(item)),
            ("original_answer", caption),
            ("thinking_process", &thinking),
            ("thinking_process_simple", &simple),
            ("incorrect_options_text", incorrect.trim()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AudioRef, Corpus, QuestionType};

    fn rec(source: Corpus) -> UnifiedRecord {
        UnifiedRecord {
            audio: AudioRef { id: "a".into(), path: "a.wav".into(), duration_s: None },
            question: "Please describe this audio in detail".into(),
            caption: "A dog barks while rain falls.".into(),
            source,
        }
    }

    fn item() -> McqItem {
        McqItem {
            id: "a#q1".into(),
            audio: AudioRef { id: "a".into(), path: "a.wav".into(), duration_s: None },
            question: "What animal is heard?".into(),
            options: ["A dog".into(), "A cat".into(), "A cow".into(), "A bird".into()],
            answer_index: 1,
            qtype: QuestionType::Sound,
            source: Corpus::AudioCaps,
            cot: None,
            quality: None,
            provenance: String::new(),
        }
    }

    #[test]
    fn render_is_single_pass() {
        let out = render("x {a} {b} {c}", &[("a", "{b}"), ("b", "B")]);
        assert_eq!(out, "x {b} B {c}");
    }

    #[test]
    fn flexible_prompt_shape() {
        let p = build_mcq_prompt(&rec(Corpus::AudioCaps), McqMode::Flexible, 3.0, "");
        assert!(p.starts_with("You are a test designer for advanced audio comprehension exams."));
        assert!(p.contains("ORIGINAL QUESTION: Please describe this audio in detail\n"));
        assert!(p.contains("ORIGINAL ANSWER: A dog barks while rain falls.\n"));
        for n in 1..=6 {
            assert!(p.contains(&format!("REQUIREMENT {n}:")), "requirement {n}");
        }
        assert!(p.contains("{\n\"new_question_type\": \"question type\","));
        assert!(!p.contains("{{"));
        assert!(!p.contains("{style_reference}"));
    }

    #[test]
    fn temporal_prompt_seconds() {
        let p = build_mcq_prompt(&rec(Corpus::Tacos), McqMode::Temporal, 4.0, "");
        assert!(p.contains("*at least 4.0s* apart"));
        assert!(p.contains("must not exceed 30.0s"));
        assert!(p.contains("Always use \"temporal\" as the question type."));
    }

    #[test]
    fn style_reference_substituted() {
        let p = build_mcq_prompt(&rec(Corpus::AudioCaps), McqMode::Flexible, 3.0, "STYLE: terse");
        assert!(p.ends_with("STYLE: terse\n"));
    }

    #[test]
    fn cot_prompt_embeds_choices_and_caption() {
        let p = build_cot_prompt(&item(), "A dog barks.");
        assert!(p.contains("<first_analysis>...</first_analysis>"));
        assert!(p.contains("- Choices: \"A dog\", \"A cat\", \"A cow\", \"A bird\"\n"));
        assert!(p.contains("I need to firstly analyze the audio content:\nA dog barks.\n"));
        assert!(p.contains("so the correct answer is \"A dog\"."));
        assert!(p.contains("- Question Type: sound\n"));
    }

    #[test]
    fn simplify_prompt_embeds_structured() {
        let p = build_simplify_prompt(&item(), "cap", "THE STRUCTURED COT");
        assert!(p.contains("ORIGINAL THINKING PROCESS:\nTHE STRUCTURED COT\n"));
        assert!(p.contains("<thinking process>"));
        assert!(p.contains("- Audio Description: cap\n"));
    }

    #[test]
    fn qc_prompt_lists_options() {
        let p = build_qc_prompt(&item(), "cap");
        assert!(p.contains("Multiple Choice Options:\nA. A dog\nB. A cat\nC. A cow\nD. A bird\n"));
        assert!(p.contains("Incorrect Options to evaluate:\n- A cat\n- A cow\n- A bird\n"));
        assert!(p.contains("<aspect5_score>V</aspect5_score>"));
    }
}
