//! Deterministic offline backends.
//!
//! Every mock answer is a pure function of the request text, the audio
//! digest and the sampling seed, so repeated calls are byte-identical.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::Deserialize;

use super::choice::LETTERS;
use super::{BackendError, ChatRequest, PromptStyle, Transport, TransportError};
use crate::hash::{content_hash, hash_to_u64};

/// Marker strings the judge mock uses to recognise each prompt family.
const MCQ_MARKER: &str = "You are a test designer for advanced audio comprehension exams";
const TEMPORAL_MARKER: &str = "TEMPORAL INFORMATION";
const COT_MARKER: &str = "TASK: Complete the following THINKING PROCESS";
const SIMPLIFY_MARKER: &str = "TASK: Create a SIMPLIFIED thinking process";
const QC_MARKER: &str = "TASK: Quality check an audio-based multiple-choice question";
const VERDICT_MARKER: &str = "<verdict>";

/// Rule-based stand-in for the text judge.
#[derive(Debug, Clone)]
pub struct MockJudge {
    /// Share (per mille) of responses deliberately returned malformed.
    pub malformed_per_mille: u64,
    /// Share (per mille) of quality checks that score one aspect 3.
    pub low_quality_per_mille: u64,
    /// Share (per mille) of zero-AC verdicts answered `explicit`.
    pub explicit_per_mille: u64,
}

impl Default for MockJudge {
    fn default() -> Self {
        Self {
            malformed_per_mille: 30,
            low_quality_per_mille: 80,
            explicit_per_mille: 311,
        }
    }
}

fn roll(prompt: &str, seed: u64, salt: &str) -> u64 {
    hash_to_u64(&[prompt.as_bytes(), &seed.to_le_bytes(), salt.as_bytes()])
}

fn line_after<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    let start = text.find(label)? + label.len();
    let rest = &text[start..];
    Some(rest[..rest.find('\n').unwrap_or(rest.len())].trim())
}

fn unquote(s: &str) -> &str {
    s.trim().trim_matches('"')
}

fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace()
        .take(n)
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

const SOUND_DISTRACTORS: [&str; 8] = [
    "Heavy rain on a tin roof",
    "A distant train horn",
    "Birds chirping in a park",
    "A crowd cheering loudly",
    "Waves crashing on rocks",
    "A vacuum cleaner humming",
    "Church bells ringing slowly",
    "Keyboard keys clicking fast",
];
const MUSIC_DISTRACTORS: [&str; 8] = [
    "A slow solo piano ballad",
    "An upbeat brass marching band",
    "A heavy distorted metal riff",
    "A gentle acoustic folk strum",
    "A fast electronic dance beat",
    "A choir singing in harmony",
    "A lone violin playing softly",
    "A jazz trio with brushes",
];
const SPEECH_DISTRACTORS: [&str; 8] = [
    "An elderly man whispering slowly",
    "A young girl shouting excitedly",
    "A woman speaking in monotone",
    "A man laughing between words",
    "A child reading haltingly aloud",
    "A deep voice speaking rapidly",
    "A calm voice with pauses",
    "A tense voice trembling slightly",
];

impl MockJudge {
    fn respond(&self, prompt: &str, seed: u64) -> String {
        if roll(prompt, seed, "malformed") % 1000 < self.malformed_per_mille {
            return "I am unable to follow the requested format for this entry.".into();
        }
        if prompt.starts_with(MCQ_MARKER) {
            if prompt.contains(TEMPORAL_MARKER) {
                self.temporal_mcq(prompt, seed)
            } else {
                self.flexible_mcq(prompt, seed)
            }
        } else if prompt.starts_with(COT_MARKER) {
            self.cot(prompt)
        } else if prompt.starts_with(SIMPLIFY_MARKER) {
            self.simplify(prompt)
        } else if prompt.starts_with(QC_MARKER) {
            self.quality(prompt, seed)
        } else if prompt.contains(VERDICT_MARKER) {
            self.verdict(prompt, seed)
        } else {
            format!("mock response {}", &content_hash(prompt.as_bytes())[..12])
        }
    }

    fn flexible_mcq(&self, prompt: &str, seed: u64) -> String {
        let q = line_after(prompt, "ORIGINAL QUESTION:").unwrap_or("");
        let answer = line_after(prompt, "ORIGINAL ANSWER:").unwrap_or("");
        let (qtype, pool, question) = if q.contains("music") {
            ("music", &MUSIC_DISTRACTORS, "Which description best matches the music?")
        } else if q.contains("speech") {
            ("speech", &SPEECH_DISTRACTORS, "How would you describe the speaker's delivery?")
        } else {
            ("sound", &SOUND_DISTRACTORS, "Which sound scene is heard in the clip?")
        };
        let mut correct = capitalize(&first_words(answer, 6));
        if correct.is_empty() {
            correct = "An unidentified sound".into();
        }
        let start = (roll(prompt, seed, "distractors") % pool.len() as u64) as usize;
        let mut incorrect = Vec::with_capacity(3);
        for k in 0..pool.len() {
            let cand = pool[(start + k) % pool.len()];
            if cand != correct && incorrect.len() < 3 {
                incorrect.push(cand);
            }
        }
        format!(
            "```json\n{{\n\"new_question_type\": \"{qtype}\",\n\"new_question\": {},\n\"correct_answer\": {},\n\"incorrect_options\": [{}, {}, {}]\n}}\n```",
            json_str(question),
            json_str(&correct),
            json_str(incorrect[0]),
            json_str(incorrect[1]),
            json_str(incorrect[2]),
        )
    }

    fn temporal_mcq(&self, prompt: &str, seed: u64) -> String {
        static EVENT: OnceLock<Regex> = OnceLock::new();
        static SECS: OnceLock<Regex> = OnceLock::new();
        let event_re = EVENT.get_or_init(|| {
            Regex::new(r"From (\d+(?:\.\d+)?)s to (\d+(?:\.\d+)?)s: ([^.]+)\.").expect("static regex")
        });
        let secs_re = SECS
            .get_or_init(|| Regex::new(r"at least (\d+(?:\.\d+)?)s\*").expect("static regex"));
        let answer = line_after(prompt, "ORIGINAL ANSWER:").unwrap_or("");
        let events: Vec<(f64, String)> = event_re
            .captures_iter(answer)
            .filter_map(|c| Some((c[1].parse().ok()?, c[3].trim().to_string())))
            .collect();
        let gap: f64 = secs_re
            .captures(prompt)
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(3.0);
        if events.is_empty() {
            return "{\"new_question_type\": \"temporal\"}".into();
        }
        let pick = (roll(prompt, seed, "event") % events.len() as u64) as usize;
        let (start, label) = &events[pick];
        let start = start.min(30.0);
        let step = gap + 0.2;
        let mut times = Vec::new();
        for m in 1..=12 {
            for sign in [1.0, -1.0] {
                let t = start + sign * step * f64::from(m);
                if (0.0..=30.0).contains(&t) && times.len() < 3 {
                    times.push(t);
                }
            }
        }
        while times.len() < 3 {
            times.push(start + step * (times.len() as f64 + 1.0));
        }
        let question = format!("When does the {} first begin?", first_words(label, 6));
        format!(
            "{{\"new_question_type\": \"temporal\", \"new_question\": {}, \"correct_answer\": \"At {:.1}s\", \"incorrect_options\": [\"At {:.1}s\", \"At {:.1}s\", \"At {:.1}s\"]}}",
            json_str(&question),
            start,
            times[0],
            times[1],
            times[2]
        )
    }

    fn cot(&self, prompt: &str) -> String {
        let qtype = line_after(prompt, "- Question Type:").unwrap_or("sound");
        let answer = unquote(line_after(prompt, "- Correct Answer:").unwrap_or(""));
        format!(
            "<first_analysis>the question asks which {qtype} detail is present in the clip, so I need evidence from the audio about that specific {qtype} content</first_analysis>\n\
             <second_analysis>the description directly supports \"{answer}\" while the other choices describe content that does not appear in the audio</second_analysis>"
        )
    }

    fn simplify(&self, prompt: &str) -> String {
        let qtype = line_after(prompt, "- Question Type:").unwrap_or("sound");
        let answer = unquote(line_after(prompt, "- Correct Answer:").unwrap_or(""));
        let desc = line_after(prompt, "- Audio Description:").unwrap_or("");
        format!(
            "<thinking process>\nThis is a {qtype} question. The audio features {}. The correct choice is \"{answer}\".\n</thinking process>",
            first_words(desc, 12)
        )
    }

    fn quality(&self, prompt: &str, seed: u64) -> String {
        let mut scores = [5u8, 5, 4, 5, 4];
        let r = roll(prompt, seed, "quality");
        if r % 1000 < self.low_quality_per_mille {
            scores[((r / 1000) % 5) as usize] = 3;
        }
        scores
            .iter()
            .enumerate()
            .map(|(i, s)| format!("<aspect{n}_score>{s}</aspect{n}_score>", n = i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn verdict(&self, prompt: &str, seed: u64) -> String {
        let explicit = roll(prompt, seed, "verdict") % 1000 < self.explicit_per_mille;
        let v = if explicit { "explicit" } else { "implicit" };
        format!("<verdict>{v}</verdict>\nMock analysis of the question wording.")
    }
}

impl Transport for MockJudge {
    fn send(&self, req: &ChatRequest, _timeout: Duration) -> Result<String, TransportError> {
        Ok(self.respond(req.user_text(), req.seed))
    }
}

/// Stand-in audio-QA model. It answers with a letter chosen from a hash of
/// (model name, question text, audio digest, seed) and formats the answer
/// the way its prompt style asks for. A small share of answers carry no
/// extractable choice.
#[derive(Debug, Clone)]
pub struct MockAudioQa {
    name: String,
    style: PromptStyle,
    pub unextractable_per_mille: u64,
}

impl MockAudioQa {
    pub fn new(name: &str, style: PromptStyle) -> Self {
        Self {
            name: name.to_string(),
            style,
            unextractable_per_mille: 20,
        }
    }

    pub fn respond(&self, req: &ChatRequest) -> String {
        let digest = req.audio.as_ref().map(|a| a.sha256.as_str()).unwrap_or("");
        let h = hash_to_u64(&[
            self.name.as_bytes(),
            req.user_text().as_bytes(),
            digest.as_bytes(),
            &req.seed.to_le_bytes(),
        ]);
        if h % 1000 < self.unextractable_per_mille {
            return "I cannot determine the answer from this recording.".into();
        }
        let letter = LETTERS[((h / 1000) % 4) as usize];
        match self.style {
            PromptStyle::FlamingoLetters => format!("({letter})"),
            PromptStyle::KimiLetterDot => format!("{letter}."),
            PromptStyle::R1AqaAnswerTags | PromptStyle::OmniAnswerTags => {
                format!("<think>Listening closely.</think>\n<answer>{letter}</answer>")
            }
        }
    }
}

impl Transport for MockAudioQa {
    fn send(&self, req: &ChatRequest, _timeout: Duration) -> Result<String, TransportError> {
        Ok(self.respond(req))
    }
}

/// Table-driven backend: the response is looked up by the SHA-256 of the
/// last user message. Unknown prompts get HTTP 404.
#[derive(Debug, Clone, Default)]
pub struct CannedTransport {
    table: HashMap<String, String>,
}

#[derive(Deserialize)]
struct CannedLine {
    #[serde(default)]
    prompt_sha256: Option<String>,
    #[serde(default)]
    prompt: Option<String>,
    response: String,
}

impl CannedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.table.insert(content_hash(prompt.as_bytes()), response.into());
    }

    /// JSONL lines of `{"prompt": ..., "response": ...}` or
    /// `{"prompt_sha256": ..., "response": ...}`.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Setup(format!("{}: {e}", path.display())))?;
        let mut out = Self::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: CannedLine = serde_json::from_str(line)
                .map_err(|e| BackendError::Setup(format!("{}:{}: {e}", path.display(), n + 1)))?;
            let key = match (l.prompt_sha256, l.prompt) {
                (Some(h), _) => h,
                (None, Some(p)) => content_hash(p.as_bytes()),
                (None, None) => {
                    return Err(BackendError::Setup(format!(
                        "{}:{}: needs prompt or prompt_sha256",
                        path.display(),
                        n + 1
                    )))
                }
            };
            out.table.insert(key, l.response);
        }
        Ok(out)
    }
}

impl Transport for CannedTransport {
    fn send(&self, req: &ChatRequest, _timeout: Duration) -> Result<String, TransportError> {
        let key = content_hash(req.user_text().as_bytes());
        self.table.get(&key).cloned().ok_or(TransportError::Status {
            status: 404,
            body: format!("no canned response for prompt {key}"),
        })
    }
}
