//! Audio contribution, silent-probe majority voting and zero-AC triage.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{AudioAttachment, AudioInput, BackendError, Client, GenParams, Prediction, TextGenerator};
use crate::genstage::extract::tagged;
use crate::genstage::prompts::render;
use crate::model::{AcLabel, AcVerdict, McqItem, ZeroAcClass};
use crate::report::RatioRow;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AcfError {
    #[error("expected {expected} probe flags, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("no probe flags")]
    NoProbes,
    #[error("duplicate verdict for item `{0}`")]
    Duplicate(String),
    #[error("no verdict for item `{0}`")]
    Coverage(String),
    #[error("verdict for unknown item `{0}`")]
    UnknownItem(String),
    #[error("could not classify item `{item_id}`: {reason}")]
    Classification { item_id: String, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// `I[with audio correct] - I[silent correct]`.
pub fn audio_contribution(with_audio_correct: bool, silent_correct: bool) -> i8 {
    i8::from(with_audio_correct) - i8::from(silent_correct)
}

/// Zero audio contribution: correctness unchanged by removing the audio.
pub fn is_zero_ac(with_audio_correct: bool, silent_correct: bool) -> bool {
    audio_contribution(with_audio_correct, silent_correct) == 0
}

/// Weak iff more than half of the probe models answer correctly on silence.
pub fn majority_label(silent_correct: &[bool]) -> Result<AcLabel, AcfError> {
    if silent_correct.is_empty() {
        return Err(AcfError::NoProbes);
    }
    let hits = silent_correct.iter().filter(|f| **f).count();
    Ok(if 2 * hits > silent_correct.len() { AcLabel::Weak } else { AcLabel::Strong })
}

/// The three-model vote: Weak iff at least two flags are set.
pub fn acf_label(silent_correct: &[bool]) -> Result<AcLabel, AcfError> {
    if silent_correct.len() != 3 {
        return Err(AcfError::Arity { expected: 3, got: silent_correct.len() });
    }
    majority_label(silent_correct)
}

/// One model's answer to one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub item_id: String,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_audio: Option<Prediction>,
    pub silent: Prediction,
}

impl ProbeResult {
    pub fn silent_correct(&self, item: &McqItem) -> bool {
        self.silent.choice_index == Some(item.answer_index)
    }

    pub fn with_audio_correct(&self, item: &McqItem) -> Option<bool> {
        self.with_audio.as_ref().map(|p| p.choice_index == Some(item.answer_index))
    }

    /// `None` without a with-audio run.
    pub fn audio_contribution(&self, item: &McqItem) -> Option<i8> {
        Some(audio_contribution(self.with_audio_correct(item)?, self.silent_correct(item)))
    }

    /// Zero AC where both runs picked the same option (or both failed to
    /// answer); AC is also zero when both are wrong with different picks.
    pub fn identical_prediction(&self) -> Option<bool> {
        self.with_audio.as_ref().map(|p| p.choice_index == self.silent.choice_index)
    }
}

/// Runs every item through every probe model with `silent` replacing the
/// audio. With `with_audio` set, each item is also answered with its own
/// clip. Results come back ordered by (item, model).
pub fn probe_items(
    items: &[McqItem],
    models: &[&Client],
    silent: &AudioAttachment,
    with_audio: bool,
    params: &GenParams,
) -> Result<Vec<ProbeResult>, BackendError> {
    let jobs: Vec<(usize, usize)> = (0..items.len())
        .flat_map(|i| (0..models.len()).map(move |m| (i, m)))
        .collect();
    jobs.par_iter()
        .map(|&(i, m)| {
            let item = &items[i];
            let client = models[m];
            let silent_input = AudioInput::Clip(silent.clone());
            let silent_pred = client.answer_audio_mcq(&silent_input, &item.question, &item.options, params)?;
            let with = if with_audio {
                let input = AudioInput::File(item.audio.clone());
                Some(client.answer_audio_mcq(&input, &item.question, &item.options, params)?)
            } else {
                None
            };
            Ok(ProbeResult {
                item_id: item.id.clone(),
                model_name: client.name().to_string(),
                with_audio: with,
                silent: silent_pred,
            })
        })
        .collect()
}

/// Folds probe results into one verdict per item. `models` fixes the flag
/// order; a missing probe result counts as an incorrect silent answer.
pub fn verdicts_from_probes(
    items: &[McqItem],
    probes: &[ProbeResult],
    models: &[String],
) -> Result<Vec<AcVerdict>, AcfError> {
    let by_key: HashMap<(&str, &str), &ProbeResult> = probes
        .iter()
        .map(|p| ((p.item_id.as_str(), p.model_name.as_str()), p))
        .collect();
    items
        .iter()
        .map(|item| {
            let flags: Vec<bool> = models
                .iter()
                .map(|m| {
                    by_key
                        .get(&(item.id.as_str(), m.as_str()))
                        .is_some_and(|p| p.silent_correct(item))
                })
                .collect();
            Ok(AcVerdict {
                item_id: item.id.clone(),
                label: majority_label(&flags)?,
                silent_correct: flags,
                zero_ac_class: None,
            })
        })
        .collect()
}

/// Per-model zero-AC tallies, split into identical and differing picks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZeroAcTally {
    pub evaluated: usize,
    pub zero_ac: usize,
    pub identical: usize,
}

pub fn zero_ac_tally(items: &[McqItem], probes: &[ProbeResult]) -> BTreeMap<String, ZeroAcTally> {
    let by_id: HashMap<&str, &McqItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut out: BTreeMap<String, ZeroAcTally> = BTreeMap::new();
    for p in probes {
        let (Some(item), Some(_)) = (by_id.get(p.item_id.as_str()), &p.with_audio) else {
            continue;
        };
        let t = out.entry(p.model_name.clone()).or_default();
        t.evaluated += 1;
        if p.audio_contribution(item) == Some(0) {
            t.zero_ac += 1;
            if p.identical_prediction() == Some(true) {
                t.identical += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub weak_ids: BTreeSet<String>,
    pub strong_ids: BTreeSet<String>,
    /// One row per source present in the input, in corpus order.
    pub per_source: Vec<RatioRow>,
    pub overall: RatioRow,
}

fn index_verdicts<'a>(
    items: &[McqItem],
    verdicts: &'a [AcVerdict],
) -> Result<HashMap<&'a str, &'a AcVerdict>, AcfError> {
    let mut map: HashMap<&str, &AcVerdict> = HashMap::with_capacity(verdicts.len());
    for v in verdicts {
        if map.insert(v.item_id.as_str(), v).is_some() {
            return Err(AcfError::Duplicate(v.item_id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for it in items {
        if !seen.insert(it.id.as_str()) {
            return Err(AcfError::Duplicate(it.id.clone()));
        }
        if !map.contains_key(it.id.as_str()) {
            return Err(AcfError::Coverage(it.id.clone()));
        }
    }
    if let Some(v) = verdicts.iter().find(|v| !seen.contains(v.item_id.as_str())) {
        return Err(AcfError::UnknownItem(v.item_id.clone()));
    }
    Ok(map)
}

/// Splits `items` into weak and strong sets by their verdicts and tabulates
/// the weak/strong share per source.
pub fn partition_dataset(items: &[McqItem], verdicts: &[AcVerdict]) -> Result<PartitionResult, AcfError> {
    let map = index_verdicts(items, verdicts)?;
    let mut weak_ids = BTreeSet::new();
    let mut strong_ids = BTreeSet::new();
    let mut per: BTreeMap<crate::model::Corpus, (u64, u64)> = BTreeMap::new();
    for it in items {
        let entry = per.entry(it.source).or_default();
        entry.1 += 1;
        match map[it.id.as_str()].label {
            AcLabel::Weak => {
                weak_ids.insert(it.id.clone());
                entry.0 += 1;
            }
            AcLabel::Strong => {
                strong_ids.insert(it.id.clone());
            }
        }
    }
    let per_source = per
        .iter()
        .map(|(src, (weak, total))| RatioRow::from_counts(src.name(), *weak, *total))
        .collect();
    let overall = RatioRow::from_counts("Overall", weak_ids.len() as u64, items.len() as u64);
    Ok(PartitionResult { weak_ids, strong_ids, per_source, overall })
}

/// Strong-labelled benchmark items, in their original order.
pub fn build_ac_strong_split(items: &[McqItem], verdicts: &[AcVerdict]) -> Result<Vec<McqItem>, AcfError> {
    let map = index_verdicts(items, verdicts)?;
    Ok(items
        .iter()
        .filter(|it| map[it.id.as_str()].label == AcLabel::Strong)
        .cloned()
        .collect())
}

pub const ZERO_AC_PROMPT: &str = "TASK: Decide whether the correct answer to an audio-based multiple-choice question can be determined from the text alone, without listening to the audio.

QUESTION: \"{question_text}\"
OPTIONS:
{choice_text}
CORRECT ANSWER: \"{answer}\"

Judge only the question text and the options:
- explicit: the wording of the question or the options contains cues (for example a keyword that matches exactly one option, or descriptors that contradict the question) from which the correct answer can be logically deduced.
- implicit: the text contains no such cue; the answer depends on the audio content, and a model could only reach it without audio by recalling what similar recordings usually contain.

Begin your response with exactly one tag, <verdict>explicit</verdict> or <verdict>implicit</verdict>, then give a short analysis.
";

pub fn build_zero_ac_prompt(item: &McqItem) -> String {
    let choice_text = item
        .options
        .iter()
        .zip(crate::backends::choice::LETTERS)
        .map(|(o, l)| format!("{l}. {o}"))
        .collect::<Vec<_>>()
        .join("\n");
    render(
        ZERO_AC_PROMPT,
        &[
            ("question_text", &item.question),
            ("choice_text", &choice_text),
            ("answer", item.correct_option().unwrap_or("")),
        ],
    )
}

pub fn parse_zero_ac_verdict(text: &str) -> Option<ZeroAcClass> {
    match tagged(text, "verdict")?.trim().to_ascii_lowercase().as_str() {
        "explicit" => Some(ZeroAcClass::ExplicitLogicalReasoning),
        "implicit" => Some(ZeroAcClass::ImplicitKnowledgeRetrieval),
        _ => None,
    }
}

/// Asks the judge for a verdict, retrying once with the next seed when the
/// answer has no readable verdict tag.
pub fn classify_zero_ac(
    item: &McqItem,
    judge: &dyn TextGenerator,
    params: &GenParams,
) -> Result<ZeroAcClass, AcfError> {
    let prompt = build_zero_ac_prompt(item);
    for attempt in 0..2u64 {
        let p = GenParams { seed: params.seed.wrapping_add(attempt), ..*params };
        let text = judge.generate_text(&prompt, &p)?;
        if let Some(c) = parse_zero_ac_verdict(&text) {
            return Ok(c);
        }
    }
    Err(AcfError::Classification {
        item_id: item.id.clone(),
        reason: "no <verdict>explicit|implicit</verdict> tag".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::CannedTransport;
    use crate::backends::{BackendKind, BackendProfile, PromptStyle, RetryPolicy};
    use crate::model::{AudioRef, Corpus, QuestionType};
    use std::sync::Arc;

    fn item(id: &str, source: Corpus) -> McqItem {
        McqItem {
            id: id.into(),
            audio: AudioRef { id: id.into(), path: format!("{id}.wav"), duration_s: None },
            question: "What is heard?".into(),
            options: ["a".into(), "b".into(), "c".into(), "d".into()],
            answer_index: 1,
            qtype: QuestionType::Sound,
            source,
            cot: None,
            quality: None,
            provenance: String::new(),
        }
    }

    fn verdict(id: &str, label: AcLabel) -> AcVerdict {
        AcVerdict { item_id: id.into(), silent_correct: vec![], label, zero_ac_class: None }
    }

    #[test]
    fn contribution_values() {
        assert_eq!(audio_contribution(true, false), 1);
        assert_eq!(audio_contribution(true, true), 0);
        assert_eq!(audio_contribution(false, true), -1);
        assert_eq!(audio_contribution(false, false), 0);
    }

    #[test]
    fn label_examples_and_arity() {
        assert_eq!(acf_label(&[true, true, false]), Ok(AcLabel::Weak));
        assert_eq!(acf_label(&[true, false, false]), Ok(AcLabel::Strong));
        assert_eq!(acf_label(&[false, false, false]), Ok(AcLabel::Strong));
        assert_eq!(acf_label(&[true, true]), Err(AcfError::Arity { expected: 3, got: 2 }));
        assert_eq!(majority_label(&[true, true, false, false]), Ok(AcLabel::Strong));
        assert_eq!(majority_label(&[true, true, true, false, false]), Ok(AcLabel::Weak));
        assert_eq!(majority_label(&[]), Err(AcfError::NoProbes));
    }

    #[test]
    fn partition_errors() {
        let items = vec![item("a", Corpus::Clotho), item("b", Corpus::Clotho)];
        let only_a = vec![verdict("a", AcLabel::Weak)];
        assert_eq!(partition_dataset(&items, &only_a).unwrap_err(), AcfError::Coverage("b".into()));
        let dup = vec![verdict("a", AcLabel::Weak), verdict("a", AcLabel::Weak), verdict("b", AcLabel::Weak)];
        assert_eq!(partition_dataset(&items, &dup).unwrap_err(), AcfError::Duplicate("a".into()));
        let extra = vec![verdict("a", AcLabel::Weak), verdict("b", AcLabel::Weak), verdict("c", AcLabel::Weak)];
        assert_eq!(partition_dataset(&items, &extra).unwrap_err(), AcfError::UnknownItem("c".into()));
    }

    #[test]
    fn all_weak_partition() {
        let items = vec![item("a", Corpus::Clotho), item("b", Corpus::Tacos)];
        let v = vec![verdict("b", AcLabel::Weak), verdict("a", AcLabel::Weak)];
        let p = partition_dataset(&items, &v).unwrap();
        assert!(p.strong_ids.is_empty());
        assert_eq!(p.overall.weak_pct(), "100.0");
        assert_eq!(p.overall.strong_pct(), "0.0");
        assert_eq!(p.per_source.len(), 2);
        assert_eq!(p.per_source[1].label, "TACOS");
    }

    #[test]
    fn strong_split_keeps_order() {
        let items: Vec<_> = ["d", "a", "c", "b"].iter().map(|i| item(i, Corpus::Clotho)).collect();
        let v = vec![
            verdict("a", AcLabel::Strong),
            verdict("b", AcLabel::Weak),
            verdict("c", AcLabel::Strong),
            verdict("d", AcLabel::Strong),
        ];
        let ids: Vec<_> = build_ac_strong_split(&items, &v).unwrap().into_iter().map(|i| i.id).collect();
        assert_eq!(ids, ["d", "a", "c"]);
        let all_weak: Vec<_> = items.iter().map(|i| verdict(&i.id, AcLabel::Weak)).collect();
        assert!(build_ac_strong_split(&items, &all_weak).unwrap().is_empty());
    }

    #[test]
    fn probe_results_fold_into_verdicts() {
        let it = item("x", Corpus::Clotho);
        let pred = |c: Option<u8>| Prediction { raw_text: String::new(), choice_index: c, latency_ms: 0 };
        let probes = vec![
            ProbeResult { item_id: "x".into(), model_name: "m1".into(), with_audio: Some(pred(Some(2))), silent: pred(Some(1)) },
            ProbeResult { item_id: "x".into(), model_name: "m2".into(), with_audio: Some(pred(Some(3))), silent: pred(Some(2)) },
            ProbeResult { item_id: "x".into(), model_name: "m3".into(), with_audio: Some(pred(Some(1))), silent: pred(None) },
        ];
        let models: Vec<String> = ["m1", "m2", "m3"].map(String::from).to_vec();
        let v = verdicts_from_probes(std::slice::from_ref(&it), &probes, &models).unwrap();
        assert_eq!(v[0].silent_correct, vec![true, false, false]);
        assert_eq!(v[0].label, AcLabel::Strong);
        assert_eq!(probes[0].audio_contribution(&it), Some(-1));
        assert_eq!(probes[2].audio_contribution(&it), Some(1));
        let t = zero_ac_tally(std::slice::from_ref(&it), &probes);
        assert_eq!(t["m2"], ZeroAcTally { evaluated: 1, zero_ac: 1, identical: 0 });
    }

    fn appendix_item(id: &str, q: &str, opts: [&str; 4], answer: u8) -> McqItem {
        McqItem {
            question: q.into(),
            options: opts.map(String::from),
            answer_index: answer,
            ..item(id, Corpus::AudioCaps)
        }
    }

    #[test]
    fn appendix_cases_classified_from_judge_output() {
        let explicit = appendix_item(
            "b1",
            "What mechanical sound is continuously present in the background?",
            ["The revving motorcycle", "The running engine", "The passing train", "The screeching brakes"],
            2,
        );
        let implicit_a = appendix_item(
            "b2a",
            "What specific actions are clearly heard in the audio?",
            [
                "Ducks quacking and liquid splashing",
                "Birds chirping and wind blowing",
                "Ducks flying and thunder rumbling",
                "Frogs croaking and water dripping",
            ],
            1,
        );
        let implicit_b = appendix_item(
            "b2b",
            "What is the sequence of audio elements at the beginning?",
            [
                "Steam hissing followed by speech",
                "Music playing followed by speech",
                "Footsteps approaching followed by speech",
                "Wind blowing followed by speech",
            ],
            1,
        );
        let mut canned = CannedTransport::new();
        canned.insert(
            &build_zero_ac_prompt(&explicit),
            "<verdict>explicit</verdict>\nThe key word in the question is \"continuously\", which implies a sustained sound.",
        );
        canned.insert(
            &build_zero_ac_prompt(&implicit_a),
            "<verdict>implicit</verdict>\nThe question itself does not contain any explicit textual indicators about what is heard.",
        );
        canned.insert(
            &build_zero_ac_prompt(&implicit_b),
            "Analysis first.\n<verdict> Implicit </verdict>",
        );
        let judge = Client::new(
            BackendProfile {
                name: "judge".into(),
                kind: BackendKind::TextJudge,
                endpoint: "canned://".into(),
                model_id: "judge".into(),
                prompt_style: PromptStyle::OmniAnswerTags,
                max_concurrency: 1,
                timeout_s: 1.0,
                retry: RetryPolicy { max_attempts: 1, backoff_s: 0.0 },
                api_key: None,
            },
            Arc::new(canned),
        );
        let p = GenParams::default();
        assert_eq!(classify_zero_ac(&explicit, &judge, &p), Ok(ZeroAcClass::ExplicitLogicalReasoning));
        assert_eq!(classify_zero_ac(&implicit_a, &judge, &p), Ok(ZeroAcClass::ImplicitKnowledgeRetrieval));
        assert_eq!(classify_zero_ac(&implicit_b, &judge, &p), Ok(ZeroAcClass::ImplicitKnowledgeRetrieval));
    }

    #[test]
    fn unparseable_verdict_after_retry() {
        struct Vague;
        impl TextGenerator for Vague {
            fn generate_text(&self, _p: &str, _g: &GenParams) -> Result<String, BackendError> {
                Ok("<verdict>maybe</verdict>".into())
            }
        }
        let err = classify_zero_ac(&item("z", Corpus::Clotho), &Vague, &GenParams::default()).unwrap_err();
        assert!(matches!(err, AcfError::Classification { .. }));
    }

    #[test]
    fn prompt_lists_options_and_answer() {
        let p = build_zero_ac_prompt(&item("q", Corpus::Clotho));
        assert!(p.contains("OPTIONS:\nA. a\nB. b\nC. c\nD. d\n"));
        assert!(p.contains("CORRECT ANSWER: \"a\""));
        assert!(p.contains("<verdict>explicit</verdict>"));
    }
}
