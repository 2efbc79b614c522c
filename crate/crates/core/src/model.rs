//! Shared domain types and item validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::hash::{canonical_json, content_hash};

/// A reference to an audio clip. The pipeline never decodes audio; it only
/// carries the reference through every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRef {
    pub id: String,
    /// Path relative to the corpus root.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

/// The seven source corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Corpus {
    Clotho,
    AudioCaps,
    #[serde(rename = "CompA-R")]
    CompAR,
    MusicCaps,
    #[serde(rename = "LP-MusicCaps")]
    LpMusicCaps,
    SpeechCraft,
    #[serde(rename = "TACOS")]
    Tacos,
}

impl Corpus {
    pub const ALL: [Corpus; 7] = [
        Corpus::Clotho,
        Corpus::AudioCaps,
        Corpus::CompAR,
        Corpus::MusicCaps,
        Corpus::LpMusicCaps,
        Corpus::SpeechCraft,
        Corpus::Tacos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corpus::Clotho => "Clotho",
            Corpus::AudioCaps => "AudioCaps",
            Corpus::CompAR => "CompA-R",
            Corpus::MusicCaps => "MusicCaps",
            Corpus::LpMusicCaps => "LP-MusicCaps",
            Corpus::SpeechCraft => "SpeechCraft",
            Corpus::Tacos => "TACOS",
        }
    }

    /// Corpora whose MCQs draw their type from {Sound, Music, Speech}.
    pub fn is_flexible(self) -> bool {
        self != Corpus::Tacos
    }
}

impl fmt::Display for Corpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corpus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "clotho" => Corpus::Clotho,
            "audiocaps" => Corpus::AudioCaps,
            "compar" => Corpus::CompAR,
            "musiccaps" => Corpus::MusicCaps,
            "lpmusiccaps" => Corpus::LpMusicCaps,
            "speechcraft" => Corpus::SpeechCraft,
            "tacos" => Corpus::Tacos,
            _ => return Err(format!("unknown corpus `{s}`")),
        })
    }
}

/// One (audio, question, caption) tuple in the unified Q-A format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedRecord {
    pub audio: AudioRef,
    pub question: String,
    pub caption: String,
    pub source: Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    Sound,
    Music,
    Speech,
    Temporal,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [
        QuestionType::Sound,
        QuestionType::Music,
        QuestionType::Speech,
        QuestionType::Temporal,
    ];

    /// Lowercase label as used inside prompts and model output.
    pub fn label(self) -> &'static str {
        match self {
            QuestionType::Sound => "sound",
            QuestionType::Music => "music",
            QuestionType::Speech => "speech",
            QuestionType::Temporal => "temporal",
        }
    }

    /// Case-insensitive parse of a model-produced type label. Anything outside
    /// the closed set is rejected.
    pub fn parse_label(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sound" => Some(QuestionType::Sound),
            "music" => Some(QuestionType::Music),
            "speech" => Some(QuestionType::Speech),
            "temporal" => Some(QuestionType::Temporal),
            _ => None,
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Structured three-stage reasoning plus its simplified free-text form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotBundle {
    /// Question-type analysis.
    pub r1: String,
    /// Audio-content analysis (the source caption).
    pub r2: String,
    /// Answer selection.
    pub r3: String,
    pub simple: String,
}

impl CotBundle {
    pub fn structured_word_count(&self) -> usize {
        word_count(&self.r1) + word_count(&self.r2) + word_count(&self.r3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityScores {
    pub answer_consistency: u8,
    pub distractor_quality: u8,
    pub language_fluency: u8,
    pub reasoning_logic: u8,
    pub simple_reasoning_quality: u8,
}

impl QualityScores {
    /// Scores in the quality-check prompt's aspect order.
    pub fn as_array(&self) -> [u8; 5] {
        [
            self.language_fluency,
            self.answer_consistency,
            self.distractor_quality,
            self.reasoning_logic,
            self.simple_reasoning_quality,
        ]
    }

    pub fn min(&self) -> u8 {
        self.as_array().into_iter().min().unwrap_or(0)
    }
}

/// One four-option multiple-choice question about an audio clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub audio: AudioRef,
    pub question: String,
    pub options: [String; 4],
    /// 1-based index of the correct option.
    pub answer_index: u8,
    pub qtype: QuestionType,
    pub source: Corpus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<CotBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityScores>,
    pub provenance: String,
}

impl McqItem {
    /// Text of the correct option, if `answer_index` is in range.
    pub fn correct_option(&self) -> Option<&str> {
        let i = usize::from(self.answer_index).checked_sub(1)?;
        self.options.get(i).map(String::as_str)
    }

    /// Options other than the correct one, in their stored order.
    pub fn distractors(&self) -> Vec<&str> {
        self.options
            .iter()
            .enumerate()
            .filter(|(i, _)| i + 1 != usize::from(self.answer_index))
            .map(|(_, o)| o.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AcLabel {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZeroAcClass {
    ExplicitLogicalReasoning,
    ImplicitKnowledgeRetrieval,
}

/// Silent-probe outcome for one item across the probe models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcVerdict {
    pub item_id: String,
    /// One flag per probe model, in configured probe order.
    pub silent_correct: Vec<bool>,
    pub label: AcLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_ac_class: Option<ZeroAcClass>,
}

/// A single invariant violation found by [`validate_item`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptyAudioId,
    NegativeDuration,
    EmptyQuestion,
    EmptyOption(usize),
    DuplicateOption,
    IndexOutOfRange(u8),
    TypeSourceMismatch,
    CotEmptyField,
    CotNotShorter,
    ScoreOutOfRange,
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::EmptyId => "empty-id",
            Violation::EmptyAudioId => "empty-audio-id",
            Violation::NegativeDuration => "negative-duration",
            Violation::EmptyQuestion => "empty-question",
            Violation::EmptyOption(_) => "empty-option",
            Violation::DuplicateOption => "duplicate-option",
            Violation::IndexOutOfRange(_) => "index-out-of-range",
            Violation::TypeSourceMismatch => "type-source-mismatch",
            Violation::CotEmptyField => "cot-empty-field",
            Violation::CotNotShorter => "cot-simple-not-shorter",
            Violation::ScoreOutOfRange => "score-out-of-range",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyOption(i) => write!(f, "empty-option({})", i + 1),
            Violation::IndexOutOfRange(i) => write!(f, "index-out-of-range({i})"),
            other => f.write_str(other.code()),
        }
    }
}

/// Every invariant violation of `item`; an empty list means the item is valid.
pub fn validate_item(item: &McqItem) -> Vec<Violation> {
    let mut out = Vec::new();
    if item.id.trim().is_empty() {
        out.push(Violation::EmptyId);
    }
    if item.audio.id.trim().is_empty() {
        out.push(Violation::EmptyAudioId);
    }
    if matches!(item.audio.duration_s, Some(d) if !(d >= 0.0)) {
        out.push(Violation::NegativeDuration);
    }
    if item.question.trim().is_empty() {
        out.push(Violation::EmptyQuestion);
    }
    for (i, opt) in item.options.iter().enumerate() {
        if opt.trim().is_empty() {
            out.push(Violation::EmptyOption(i));
        }
    }
    let has_dup = (0..4).any(|i| (i + 1..4).any(|j| item.options[i] == item.options[j]));
    if has_dup {
        out.push(Violation::DuplicateOption);
    }
    if !(1..=4).contains(&item.answer_index) {
        out.push(Violation::IndexOutOfRange(item.answer_index));
    }
    let temporal = item.qtype == QuestionType::Temporal;
    if temporal == item.source.is_flexible() {
        out.push(Violation::TypeSourceMismatch);
    }
    if let Some(cot) = &item.cot {
        if [&cot.r1, &cot.r2, &cot.r3, &cot.simple]
            .iter()
            .any(|t| t.trim().is_empty())
        {
            out.push(Violation::CotEmptyField);
        }
        if word_count(&cot.simple) >= cot.structured_word_count() {
            out.push(Violation::CotNotShorter);
        }
    }
    if let Some(q) = &item.quality {
        if q.as_array().iter().any(|s| !(1..=5).contains(s)) {
            out.push(Violation::ScoreOutOfRange);
        }
    }
    out
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Digest of an item's canonical JSON form.
pub fn item_digest(item: &McqItem) -> String {
    content_hash(canonical_json(item).as_bytes())
}
