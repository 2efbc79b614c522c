#![allow(dead_code)]

pub mod golden;

use acfforge_core::model::{AcLabel, AcVerdict, AudioRef, Corpus, McqItem, QuestionType};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn item(id: &str, source: Corpus, options: [&str; 4], answer_index: u8) -> McqItem {
    let qtype = if source == Corpus::Tacos { QuestionType::Temporal } else { QuestionType::Sound };
    McqItem {
        id: id.to_string(),
        audio: AudioRef { id: format!("a-{id}"), path: format!("audio/{id}.wav"), duration_s: Some(10.0) },
        question: "What is heard?".into(),
        options: options.map(String::from),
        answer_index,
        qtype,
        source,
        cot: None,
        quality: None,
        provenance: "0".repeat(64),
    }
}

/// Valid items with four distinct nonempty options.
pub fn arb_item() -> impl Strategy<Value = McqItem> {
    (
        "[a-z0-9]{1,12}",
        prop::sample::select(Corpus::ALL.to_vec()),
        prop::collection::btree_set("[A-Za-z][A-Za-z ]{0,15}", 4),
        1u8..=4,
        "[A-Za-z ]{1,40}\\?",
    )
        .prop_map(|(id, source, opts, answer, question)| {
            let opts: Vec<String> = opts.into_iter().collect();
            let mut it = item(&id, source, ["a", "b", "c", "d"], answer);
            it.options = [opts[0].clone(), opts[1].clone(), opts[2].clone(), opts[3].clone()];
            it.question = question;
            it
        })
}

pub fn verdict(id: &str, label: AcLabel) -> AcVerdict {
    let flags = match label {
        AcLabel::Weak => vec![true, true, false],
        AcLabel::Strong => vec![false, false, true],
    };
    AcVerdict { item_id: id.to_string(), silent_correct: flags, label, zero_ac_class: None }
}

/// `n` items across all corpora with seeded weak labels at rate `weak_rate`.
pub fn labelled_pool(n: usize, weak_rate: f64, seed: u64) -> (Vec<McqItem>, Vec<AcVerdict>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    let mut verdicts = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("item-{i:06}");
        let source = Corpus::ALL[i % Corpus::ALL.len()];
        let answer = rng.random_range(1..=4u8);
        items.push(item(&id, source, ["w", "x", "y", "z"], answer));
        let label = if rng.random_bool(weak_rate) { AcLabel::Weak } else { AcLabel::Strong };
        verdicts.push(verdict(&id, label));
    }
    (items, verdicts)
}

/// Feeds `n` seeded random inputs through every response parser and returns
/// how many of them panicked. Inputs mix raw bytes with tag and brace
/// fragments so the parsers get past their first checks.
pub fn fuzz_parsers(n: usize, seed: u64) -> usize {
    use acfforge_core::acf::parse_zero_ac_verdict;
    use acfforge_core::backends::{extract_choice, PromptStyle};
    use acfforge_core::genstage::extract::json_objects;
    use acfforge_core::genstage::parse::{
        parse_cot_response, parse_mcq_response, parse_qc_scores, parse_simple_cot, time_values,
    };
    use acfforge_core::genstage::prompts::McqMode;
    use acfforge_core::manifest::decode_line;

    const FRAGMENTS: [&str; 16] = [
        "{", "}", "\"", ":", ",", "[", "]", "<answer>", "</answer>", "<first_analysis>", "</second_analysis>",
        "<thinking process>", "<aspect3_score>", "\"new_question_type\"", "30.5s", "(B)",
    ];
    let options: [String; 4] = ["A dog".into(), "A cat".into(), "B".into(), "Piano and violin".into()];
    let styles = [
        PromptStyle::FlamingoLetters,
        PromptStyle::R1AqaAnswerTags,
        PromptStyle::KimiLetterDot,
        PromptStyle::OmniAnswerTags,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut panics = 0;
    for i in 0..n {
        let len = rng.random_range(0..160);
        let text = if i % 2 == 0 {
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            let mut s = String::new();
            for _ in 0..len / 4 {
                if rng.random_bool(0.5) {
                    s.push_str(FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]);
                } else {
                    s.push(char::from_u32(rng.random_range(0x20..0x3100)).unwrap_or('?'));
                }
            }
            s
        };
        let style = styles[i % 4];
        let r = std::panic::catch_unwind(|| {
            let _ = parse_mcq_response(&text, McqMode::Flexible, 3.0);
            let _ = parse_mcq_response(&text, McqMode::Temporal, 2.5);
            let _ = parse_cot_response(&text, "caption");
            let _ = parse_simple_cot(&text, 40);
            let _ = parse_qc_scores(&text);
            let _ = extract_choice(&text, &options, style);
            let _ = parse_zero_ac_verdict(&text);
            let _ = json_objects(&text);
            let _ = time_values(&text);
            let _ = decode_line::<McqItem>(&text);
        });
        if r.is_err() {
            panics += 1;
        }
    }
    panics
}

/// Minimal RIFF/WAVE reader written from the format layout, independent of
/// the writer: returns (channels, sample rate, bits per sample, data bytes).
pub fn parse_wav(bytes: &[u8]) -> Result<(u16, u32, u16, &[u8]), String> {
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not RIFF/WAVE".into());
    }
    if u32_at(4) as usize != bytes.len() - 8 {
        return Err("RIFF size mismatch".into());
    }
    let mut pos = 12;
    let mut fmt = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err("chunk overruns file".into());
        }
        match id {
            b"fmt " => {
                if u16_at(body) != 1 {
                    return Err("not PCM".into());
                }
                let channels = u16_at(body + 2);
                let rate = u32_at(body + 4);
                let byte_rate = u32_at(body + 8);
                let align = u16_at(body + 12);
                let bits = u16_at(body + 14);
                if align != channels * bits / 8 || byte_rate != rate * u32::from(align) {
                    return Err("inconsistent fmt chunk".into());
                }
                fmt = Some((channels, rate, bits));
            }
            b"data" => {
                let (c, r, b) = fmt.ok_or("data before fmt")?;
                return Ok((c, r, b, &bytes[body..body + size]));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err("no data chunk".into())
}
