//! Source-corpus ingestion into the unified (audio, question, caption) form.
//!
//! Captioning corpora get a fixed template question and one selected
//! caption; CompA-R question/answer pairs pass through unchanged; TACOS
//! timestamped event tags are rendered into a caption first.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AudioRef, Corpus, UnifiedRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error("{0} keeps its original question; no template applies")]
    TemplateNotApplicable(Corpus),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("malformed event `{label}`: start {start_s} > end {end_s} or non-finite")]
    MalformedEvent { label: String, start_s: f64, end_s: f64 },
    #[error("entry `{id}` has no {field}")]
    MissingField { id: String, field: &'static str },
    #[error("entry `{id}` does not match {corpus}: {reason}")]
    Shape {
        id: String,
        corpus: Corpus,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedEvent {
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// One line of a source-corpus manifest, as produced by a per-corpus converter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceManifestEntry {
    pub audio: AudioRef,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<QaPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagged_events: Option<Vec<TaggedEvent>>,
}

/// Template question for a captioning or sound-event corpus.
pub fn apply_template(source: Corpus) -> Result<&'static str, IngestError> {
    Ok(match source {
        Corpus::AudioCaps | Corpus::Clotho => "Please describe this audio in detail",
        Corpus::MusicCaps | Corpus::LpMusicCaps => "Please describe this music in detail",
        Corpus::SpeechCraft => "Please describe this speech in detail",
        Corpus::Tacos => "Please identify and describe all sound events",
        Corpus::CompAR => return Err(IngestError::TemplateNotApplicable(source)),
    })
}

/// Longest caption by character count; the first one wins ties.
pub fn select_longest_caption(captions: &[String]) -> Result<&str, IngestError> {
    let mut best: Option<&String> = None;
    for c in captions {
        match best {
            Some(b) if c.chars().count() <= b.chars().count() => {}
            _ => best = Some(c),
        }
    }
    best.map(String::as_str)
        .ok_or(IngestError::EmptyInput("caption list"))
}

/// Keep iff `min_s <= duration <= max_s`.
pub fn filter_by_duration(
    entry: &SourceManifestEntry,
    min_s: f64,
    max_s: f64,
) -> Result<bool, IngestError> {
    let d = entry.audio.duration_s.ok_or_else(|| IngestError::MissingField {
        id: entry.audio.id.clone(),
        field: "duration_s",
    })?;
    Ok(min_s <= d && d <= max_s)
}

/// Renders timestamped tags as `From {start}s to {end}s: {label}.` sentences
/// in start-time order, separated by single spaces.
pub fn tacos_events_to_caption(events: &[TaggedEvent]) -> Result<String, IngestError> {
    if events.is_empty() {
        return Err(IngestError::EmptyInput("event list"));
    }
    for e in events {
        if !(e.start_s.is_finite() && e.end_s.is_finite() && 0.0 <= e.start_s && e.start_s <= e.end_s)
        {
            return Err(IngestError::MalformedEvent {
                label: e.label.clone(),
                start_s: e.start_s,
                end_s: e.end_s,
            });
        }
    }
    let mut sorted: Vec<&TaggedEvent> = events.iter().collect();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let parts: Vec<String> = sorted
        .iter()
        .map(|e| format!("From {:.1}s to {:.1}s: {}.", e.start_s, e.end_s, e.label.trim()))
        .collect();
    Ok(parts.join(" "))
}

/// Converts one source entry to the unified form. Audio references are
/// carried through untouched.
pub fn unify(entry: &SourceManifestEntry, source: Corpus) -> Result<UnifiedRecord, IngestError> {
    let shape = |reason| IngestError::Shape {
        id: entry.audio.id.clone(),
        corpus: source,
        reason,
    };
    let (question, caption) = match source {
        Corpus::CompAR => {
            let qa = entry.qa.as_ref().ok_or_else(|| shape("missing qa pair"))?;
            if qa.question.trim().is_empty() || qa.answer.trim().is_empty() {
                return Err(shape("empty question or answer"));
            }
            (qa.question.clone(), qa.answer.clone())
        }
        Corpus::Tacos => {
            let events = entry
                .tagged_events
                .as_ref()
                .ok_or_else(|| shape("missing tagged_events"))?;
            (apply_template(source)?.to_string(), tacos_events_to_caption(events)?)
        }
        Corpus::Clotho => {
            if entry.captions.is_empty() {
                return Err(shape("missing captions"));
            }
            let c = select_longest_caption(&entry.captions)?;
            (apply_template(source)?.to_string(), c.to_string())
        }
        // Single-caption corpora; converters place the caption to use first
        // (the summary-style caption for LP-MusicCaps).
        Corpus::AudioCaps | Corpus::MusicCaps | Corpus::LpMusicCaps | Corpus::SpeechCraft => {
            let c = entry.captions.first().ok_or_else(|| shape("missing captions"))?;
            (apply_template(source)?.to_string(), c.clone())
        }
    };
    if caption.trim().is_empty() {
        return Err(shape("empty caption"));
    }
    Ok(UnifiedRecord {
        audio: entry.audio.clone(),
        question,
        caption,
        source,
    })
}

/// Per-corpus ingest options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    /// Inclusive duration bounds; `None` disables the filter.
    pub duration_bounds: Option<(f64, f64)>,
}

impl IngestOptions {
    /// SpeechCraft keeps only 3-30 s clips; other corpora are unfiltered.
    pub fn for_corpus(source: Corpus) -> Self {
        let duration_bounds = (source == Corpus::SpeechCraft).then_some((3.0, 30.0));
        Self { duration_bounds }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestCounts {
    pub input: usize,
    pub output: usize,
    pub dropped: usize,
    pub errored: usize,
    /// Drop/error reason → count.
    pub reasons: BTreeMap<String, usize>,
}

impl IngestCounts {
    pub fn conserved(&self) -> bool {
        self.input == self.output + self.dropped + self.errored
    }
}

/// Runs the whole ingest for one corpus: duration filtering, unification
/// and id sorting. Entries that fail are counted, not fatal.
pub fn ingest_entries(
    entries: &[SourceManifestEntry],
    source: Corpus,
    opts: IngestOptions,
) -> (Vec<UnifiedRecord>, IngestCounts) {
    let mut counts = IngestCounts {
        input: entries.len(),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        if let Some((lo, hi)) = opts.duration_bounds {
            match filter_by_duration(entry, lo, hi) {
                Ok(true) => {}
                Ok(false) => {
                    counts.dropped += 1;
                    *counts.reasons.entry("duration-out-of-bounds".into()).or_default() += 1;
                    continue;
                }
                Err(_) => {
                    counts.dropped += 1;
                    *counts.reasons.entry("missing-duration".into()).or_default() += 1;
                    continue;
                }
            }
        }
        match unify(entry, source) {
            Ok(rec) => out.push(rec),
            Err(e) => {
                counts.errored += 1;
                let key = match e {
                    IngestError::Shape { .. } => "shape",
                    IngestError::MalformedEvent { .. } => "malformed-event",
                    IngestError::EmptyInput(_) => "empty-input",
                    _ => "other",
                };
                *counts.reasons.entry(key.into()).or_default() += 1;
            }
        }
    }
    out.sort_by(|a, b| a.audio.id.cmp(&b.audio.id));
    counts.output = out.len();
    (out, counts)
}
