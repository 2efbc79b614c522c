//! Config-driven pipeline runner with a content-addressed response cache.
//!
//! Stages run in the fixed order ingest → mcq → cot → simplify → qc → acf →
//! curriculum; a config may stop after any prefix. Every stage reads the
//! previous stage's manifest and writes its own, sorted by id. Backend
//! responses are cached under `hash(stage, version, input, prompt, seed)`,
//! so a rerun after success makes no backend calls and a rerun after an
//! interruption only makes the calls that were never answered.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acf::{self, ProbeResult};
use crate::backends::{
    extract_choice, make_silent_wav, AudioAttachment, AudioInput, BackendError, BackendKind, BackendProfile,
    Client, GenParams, Prediction, TextGenerator,
};
use crate::curriculum::{self, Paradigm, TrainingFormat};
use crate::error::{Error, Result};
use crate::genstage::{self, McqOptions, StageError, StructuredCot};
use crate::hash::{hash_canonical, hash_parts};
use crate::ingest::{self, IngestOptions, QaPair, SourceManifestEntry, TaggedEvent};
use crate::manifest::{read_plain_jsonl, write_atomic, write_jsonl, write_lines, write_plain_jsonl};
use crate::model::{AcLabel, AcVerdict, AudioRef, Corpus, McqItem, UnifiedRecord, ZeroAcClass};
use crate::report;

pub const STAGE_ORDER: [&str; 7] = ["ingest", "mcq", "cot", "simplify", "qc", "acf", "curriculum"];

/// Bumping a version invalidates that stage's cached responses only.
fn stage_version(stage: &str) -> u32 {
    match stage {
        "mcq" | "cot" | "simplify" | "qc" | "acf" | "zero-ac" => 1,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub corpus: Corpus,
    pub path: PathBuf,
    /// Overrides the corpus default duration filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum StageConfig {
    Ingest,
    Mcq {
        backend: String,
        #[serde(default)]
        options: McqOptions,
    },
    Cot {
        backend: String,
    },
    Simplify {
        backend: String,
    },
    Qc {
        backend: String,
    },
    Acf {
        probes: Vec<String>,
        #[serde(default = "default_silent_seconds")]
        silent_duration_s: f64,
        #[serde(default = "default_sample_rate")]
        sample_rate: u32,
        #[serde(default)]
        with_audio: bool,
        /// Judge used to sort weak items into explicit/implicit cases.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        zero_ac_judge: Option<String>,
    },
    Curriculum {
        #[serde(default = "all_paradigms")]
        paradigms: Vec<Paradigm>,
        /// Defaults to the size of the weak split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sft_volume: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rl_volume: Option<usize>,
        #[serde(default = "default_copies")]
        augment_copies: usize,
        #[serde(default = "yes")]
        augment_rl: bool,
        #[serde(default = "default_format")]
        format: TrainingFormat,
    },
}

fn default_silent_seconds() -> f64 {
    crate::backends::wav::DEFAULT_SILENT_SECONDS
}
fn default_sample_rate() -> u32 {
    crate::backends::wav::DEFAULT_SAMPLE_RATE
}
fn all_paradigms() -> Vec<Paradigm> {
    Paradigm::ALL.to_vec()
}
fn default_copies() -> usize {
    curriculum::DEFAULT_AUGMENT_COPIES
}
fn yes() -> bool {
    true
}
fn default_format() -> TrainingFormat {
    TrainingFormat::AnswerTags
}

impl StageConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StageConfig::Ingest => "ingest",
            StageConfig::Mcq { .. } => "mcq",
            StageConfig::Cot { .. } => "cot",
            StageConfig::Simplify { .. } => "simplify",
            StageConfig::Qc { .. } => "qc",
            StageConfig::Acf { .. } => "acf",
            StageConfig::Curriculum { .. } => "curriculum",
        }
    }

    fn backends(&self) -> Vec<(&str, BackendKind)> {
        match self {
            StageConfig::Ingest | StageConfig::Curriculum { .. } => vec![],
            StageConfig::Mcq { backend, .. }
            | StageConfig::Cot { backend }
            | StageConfig::Simplify { backend }
            | StageConfig::Qc { backend } => vec![(backend.as_str(), BackendKind::TextJudge)],
            StageConfig::Acf { probes, zero_ac_judge, .. } => {
                let mut v: Vec<_> = probes.iter().map(|p| (p.as_str(), BackendKind::AudioQA)).collect();
                if let Some(j) = zero_ac_judge {
                    v.push((j.as_str(), BackendKind::TextJudge));
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub report_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Root that audio paths are relative to.
    #[serde(default = "dot")]
    pub audio_root: PathBuf,
    pub backends: Vec<BackendProfile>,
    pub sources: Vec<SourceSpec>,
    pub stages: Vec<StageConfig>,
}

fn dot() -> PathBuf {
    PathBuf::from(".")
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against its directory and
    /// `${VAR}` in API keys is substituted from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        for b in &mut cfg.backends {
            if let Some(k) = &b.api_key {
                b.api_key = Some(crate::backends::substitute_env(k).map_err(Error::Config)?);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.work_dir);
        fix(&mut self.cache_dir);
        fix(&mut self.report_dir);
        fix(&mut self.audio_root);
        for s in &mut self.sources {
            fix(&mut s.path);
        }
        for b in &mut self.backends {
            for scheme in ["replay://", "canned://"] {
                if let Some(rest) = b.endpoint.strip_prefix(scheme) {
                    let p = Path::new(rest);
                    if p.is_relative() {
                        b.endpoint = format!("{scheme}{}", base.join(p).display());
                    }
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("no stages configured".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.name() != STAGE_ORDER[i] {
                return Err(Error::Config(format!(
                    "stage {} is `{}`; stages must follow {} from the start",
                    i + 1,
                    s.name(),
                    STAGE_ORDER.join(" → ")
                )));
            }
        }
        let mut names = std::collections::HashSet::new();
        for b in &self.backends {
            b.validate().map_err(Error::Config)?;
            if !names.insert(b.name.as_str()) {
                return Err(Error::Config(format!("backend `{}` defined twice", b.name)));
            }
        }
        for s in &self.stages {
            for (name, kind) in s.backends() {
                let b = self
                    .backends
                    .iter()
                    .find(|b| b.name == name)
                    .ok_or_else(|| Error::Config(format!("stage `{}` uses unknown backend `{name}`", s.name())))?;
                if b.kind != kind {
                    return Err(Error::Config(format!(
                        "stage `{}` needs a {kind:?} backend; `{name}` is {:?}",
                        s.name(),
                        b.kind
                    )));
                }
            }
            if let StageConfig::Acf { probes, .. } = s {
                if probes.is_empty() {
                    return Err(Error::Config("acf stage needs at least one probe model".into()));
                }
            }
        }
        if self.sources.is_empty() {
            return Err(Error::Config("no sources configured".into()));
        }
        Ok(())
    }
}

/// Content-addressed store of raw backend responses, one file per key,
/// sharded by the first two hex digits.
#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    response: String,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    /// Cached value for `key`, or the result of `fetch`, which is stored.
    /// Unreadable entries count as misses.
    pub fn get_or_fetch(
        &self,
        key: &str,
        fetch: impl FnOnce() -> std::result::Result<String, BackendError>,
    ) -> std::result::Result<String, BackendError> {
        let path = self.path(key);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(e) = serde_json::from_slice::<CacheEntry>(&bytes) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(e.response);
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let response = fetch()?;
        let bytes = serde_json::to_vec(&CacheEntry { response: response.clone() }).expect("cache entry serializes");
        if let Err(e) = write_atomic(&path, &bytes) {
            tracing::warn!(error = %e, "cache write failed");
        }
        Ok(response)
    }

    pub fn counters(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }
}

/// A judge seen through the cache for one (stage, input).
struct CachedJudge<'a> {
    inner: &'a Client,
    cache: &'a ResponseCache,
    stage: &'static str,
    input_hash: String,
}

impl TextGenerator for CachedJudge<'_> {
    fn generate_text(&self, prompt: &str, params: &GenParams) -> std::result::Result<String, BackendError> {
        let key = hash_parts(&[
            self.stage.as_bytes(),
            &stage_version(self.stage).to_le_bytes(),
            self.input_hash.as_bytes(),
            prompt.as_bytes(),
            &params.seed.to_le_bytes(),
        ]);
        self.cache.get_or_fetch(&key, || self.inner.generate_text(prompt, params))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLedger {
    pub stage: String,
    pub input: usize,
    pub output: usize,
    pub dropped: usize,
    pub errored: usize,
    /// Records written to the stage manifest; differs from `output` where
    /// one input yields several records.
    pub emitted: usize,
    pub wall_ms: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub backend_calls: u64,
    pub reasons: BTreeMap<String, usize>,
    pub manifest: String,
}

impl StageLedger {
    pub fn conserved(&self) -> bool {
        self.input == self.output + self.dropped + self.errored
    }

    pub fn cache_hit_rate(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            1.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub stages: Vec<StageLedger>,
}

impl RunLedger {
    pub fn backend_calls(&self) -> u64 {
        self.stages.iter().map(|s| s.backend_calls).sum()
    }

    pub fn conserved(&self) -> bool {
        self.stages.iter().all(StageLedger::conserved)
    }

    pub fn stage(&self, name: &str) -> Option<&StageLedger> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many backend calls, as if the process were killed.
    pub call_budget: Option<i64>,
}

pub mod paths {
    pub const UNIFIED: &str = "unified.jsonl";
    pub const MCQ: &str = "mcq.jsonl";
    pub const COT_STRUCTURED: &str = "cot_structured.jsonl";
    pub const COT: &str = "cot.jsonl";
    pub const QC_SCORED: &str = "qc_scored.jsonl";
    pub const QC: &str = "qc.jsonl";
    pub const PROBES: &str = "probes.jsonl";
    pub const VERDICTS: &str = "verdicts.jsonl";
    pub const CURRICULUM: &str = "curriculum";
    pub const LEDGER: &str = "ledger.json";
}

/// Structured CoT carried between the cot and simplify stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub item_id: String,
    pub r1: String,
    pub r2: String,
    pub r3: String,
    pub over_length: bool,
}

/// Probe settings for the acf stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub probes: Vec<String>,
    pub silent_duration_s: f64,
    pub sample_rate: u32,
    pub with_audio: bool,
    pub zero_ac_judge: Option<String>,
}

/// Settings for the curriculum stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumOptions {
    pub paradigms: Vec<Paradigm>,
    pub sft_volume: Option<usize>,
    pub rl_volume: Option<usize>,
    pub augment_copies: usize,
    pub augment_rl: bool,
    pub format: TrainingFormat,
}

/// Runs individual stages against a set of backends and one response cache,
/// appending a ledger entry per stage. `run_pipeline` drives it in order;
/// the CLI stage subcommands call single stages.
pub struct StageRunner {
    seed: u64,
    clients: HashMap<String, Client>,
    cache: ResponseCache,
    ledger: RunLedger,
    last_manifest: String,
}

enum Outcome<T> {
    Ok(T),
    Dropped(String),
    Errored(String),
}

impl StageRunner {
    pub fn new(
        backends: &[BackendProfile],
        cache_dir: &Path,
        audio_root: &Path,
        seed: u64,
        call_budget: Option<i64>,
    ) -> Result<Self> {
        let budget = call_budget.map(|b| Arc::new(AtomicI64::new(b)));
        let mut clients = HashMap::new();
        for b in backends {
            let mut c = Client::from_profile(b.clone())?.with_audio_root(audio_root);
            if let Some(budget) = &budget {
                c = c.with_budget(budget.clone());
            }
            clients.insert(b.name.clone(), c);
        }
        Ok(Self {
            seed,
            clients,
            cache: ResponseCache::new(cache_dir),
            ledger: RunLedger::default(),
            last_manifest: "(none)".into(),
        })
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> RunLedger {
        self.ledger
    }

    fn client(&self, name: &str) -> Result<&Client> {
        self.clients.get(name).ok_or_else(|| Error::Config(format!("unknown backend `{name}`")))
    }

    fn calls(&self) -> u64 {
        self.clients.values().map(Client::calls).sum()
    }

    fn judge<'b>(&'b self, client: &'b Client, stage: &'static str, input_hash: String) -> CachedJudge<'b> {
        CachedJudge { inner: client, cache: &self.cache, stage, input_hash }
    }

    /// Maps a stage error to an outcome; interruption halts the stage.
    fn outcome<T>(&self, stage: &str, r: std::result::Result<T, StageError>) -> Result<Outcome<T>> {
        match r {
            Ok(v) => Ok(Outcome::Ok(v)),
            Err(StageError::Rejected(reason)) => Ok(Outcome::Dropped(reason)),
            Err(StageError::Backend(BackendError::Interrupted)) => Err(self.interrupted(stage)),
            Err(StageError::Backend(e)) => Ok(Outcome::Errored(e.to_string())),
        }
    }

    fn interrupted(&self, stage: &str) -> Error {
        Error::Interrupted { stage: stage.to_string(), checkpoint: self.last_manifest.clone() }
    }

    /// Folds per-item outcomes into the ledger and returns the kept values.
    /// A stage where every item failed at the backend is a backend failure.
    fn tally<T>(&self, led: &mut StageLedger, outcomes: Vec<Outcome<T>>) -> Result<Vec<T>> {
        let mut kept = Vec::new();
        let mut first_error = None;
        for o in outcomes {
            match o {
                Outcome::Ok(v) => {
                    led.output += 1;
                    kept.push(v);
                }
                Outcome::Dropped(r) => {
                    led.dropped += 1;
                    *led.reasons.entry(short_reason(&r)).or_default() += 1;
                }
                Outcome::Errored(r) => {
                    led.errored += 1;
                    *led.reasons.entry("backend".into()).or_default() += 1;
                    first_error.get_or_insert(r);
                }
            }
        }
        if led.input > 0 && led.errored == led.input {
            return Err(Error::Backend(BackendError::Setup(format!(
                "stage `{}`: every item failed at the backend; first error: {}",
                led.stage,
                first_error.unwrap_or_default()
            ))));
        }
        Ok(kept)
    }

    fn begin(&self, stage: &str, input: usize) -> (StageLedger, Instant, u64, (u64, u64)) {
        tracing::info!(stage, input, "stage start");
        let led = StageLedger { stage: stage.to_string(), input, ..Default::default() };
        (led, Instant::now(), self.calls(), self.cache.counters())
    }

    fn finish(&mut self, mut led: StageLedger, t0: Instant, calls0: u64, cache0: (u64, u64), manifest: &Path) {
        led.wall_ms = t0.elapsed().as_millis() as u64;
        led.backend_calls = self.calls() - calls0;
        let (h, m) = self.cache.counters();
        led.cache_hits = h - cache0.0;
        led.cache_misses = m - cache0.1;
        led.manifest = manifest.display().to_string();
        tracing::info!(
            stage = %led.stage, input = led.input, output = led.output, dropped = led.dropped,
            errored = led.errored, calls = led.backend_calls, "stage done"
        );
        self.last_manifest = led.manifest.clone();
        self.ledger.stages.push(led);
    }

    pub fn ingest(&mut self, sources: &[SourceSpec], out: &Path) -> Result<Vec<UnifiedRecord>> {
        let mut all_entries = Vec::new();
        for s in sources {
            let entries: Vec<SourceManifestEntry> = read_plain_jsonl(&s.path)?;
            all_entries.push((s, entries));
        }
        let total = all_entries.iter().map(|(_, e)| e.len()).sum();
        let (mut led, t0, c0, k0) = self.begin("ingest", total);
        let mut records = Vec::new();
        for (spec, entries) in &all_entries {
            let mut opts = IngestOptions::for_corpus(spec.corpus);
            if spec.duration_bounds.is_some() {
                opts.duration_bounds = spec.duration_bounds;
            }
            let (recs, counts) = ingest::ingest_entries(entries, spec.corpus, opts);
            led.output += counts.output;
            led.dropped += counts.dropped;
            led.errored += counts.errored;
            for (k, v) in counts.reasons {
                *led.reasons.entry(k).or_default() += v;
            }
            records.extend(recs);
        }
        records.sort_by(|a, b| a.audio.id.cmp(&b.audio.id));
        if let Some(w) = records.windows(2).find(|w| w[0].audio.id == w[1].audio.id) {
            return Err(Error::Validation(format!("duplicate audio id `{}` across sources", w[0].audio.id)));
        }
        led.emitted = records.len();
        write_jsonl(out, &records)?;
        self.finish(led, t0, c0, k0, out);
        Ok(records)
    }

    pub fn mcq(
        &mut self,
        records: &[UnifiedRecord],
        backend: &str,
        opts: &McqOptions,
        out: &Path,
    ) -> Result<Vec<McqItem>> {
        let (mut led, t0, c0, k0) = self.begin("mcq", records.len());
        let client = self.client(backend)?;
        let results: Vec<_> = records
            .par_iter()
            .map(|rec| {
                let judge = self.judge(client, "mcq", hash_canonical(rec));
                genstage::mcq_items_for_record(rec, &judge, opts, self.seed)
            })
            .collect();
        let outcomes = results.into_iter().map(|x| self.outcome("mcq", x)).collect::<Result<Vec<_>>>()?;
        let mut items: Vec<McqItem> = self.tally(&mut led, outcomes)?.into_iter().flatten().collect();
        items.sort_by(|a, b| a.id.cmp(&b.id));
        led.emitted = items.len();
        write_jsonl(out, &items)?;
        self.finish(led, t0, c0, k0, out);
        Ok(items)
    }

    pub fn cot(
        &mut self,
        records: &[UnifiedRecord],
        items: &[McqItem],
        backend: &str,
        out: &Path,
    ) -> Result<Vec<CotRecord>> {
        let (mut led, t0, c0, k0) = self.begin("cot", items.len());
        let caps = captions(records);
        let client = self.client(backend)?;
        let results: Vec<_> = items
            .par_iter()
            .map(|it| {
                let caption = caption_for(&caps, it)?;
                let judge = self.judge(client, "cot", hash_canonical(it));
                let c: StructuredCot =
                    genstage::structured_cot(it, caption, &judge, genstage::item_seed(self.seed, &it.id))?;
                Ok(CotRecord { item_id: it.id.clone(), r1: c.r1, r2: c.r2, r3: c.r3, over_length: c.over_length })
            })
            .collect();
        let outcomes = results.into_iter().map(|x| self.outcome("cot", x)).collect::<Result<Vec<_>>>()?;
        let cots = self.tally(&mut led, outcomes)?;
        let over = cots.iter().filter(|c| c.over_length).count();
        if over > 0 {
            led.reasons.insert("over-length (kept)".into(), over);
        }
        led.emitted = cots.len();
        write_jsonl(out, &cots)?;
        self.finish(led, t0, c0, k0, out);
        Ok(cots)
    }

    pub fn simplify(
        &mut self,
        records: &[UnifiedRecord],
        items: &[McqItem],
        cots: &[CotRecord],
        backend: &str,
        out: &Path,
    ) -> Result<Vec<McqItem>> {
        let (mut led, t0, c0, k0) = self.begin("simplify", cots.len());
        let caps = captions(records);
        let by_id: HashMap<&str, &McqItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
        let client = self.client(backend)?;
        let results: Vec<_> = cots
            .par_iter()
            .map(|c| {
                let it = *by_id
                    .get(c.item_id.as_str())
                    .ok_or_else(|| StageError::Rejected(format!("unknown item `{}`", c.item_id)))?;
                let caption = caption_for(&caps, it)?;
                let sc =
                    StructuredCot { r1: c.r1.clone(), r2: c.r2.clone(), r3: c.r3.clone(), over_length: c.over_length };
                let judge = self.judge(client, "simplify", hash_canonical(&(it, c)));
                let bundle = genstage::simplified_cot(it, caption, &sc, &judge, genstage::item_seed(self.seed, &it.id))?;
                let mut out = it.clone();
                out.cot = Some(bundle);
                if !crate::model::validate_item(&out).is_empty() {
                    return Err(StageError::Rejected("invalid cot bundle".into()));
                }
                Ok(out)
            })
            .collect();
        let outcomes = results.into_iter().map(|x| self.outcome("simplify", x)).collect::<Result<Vec<_>>>()?;
        let kept = self.tally(&mut led, outcomes)?;
        led.emitted = kept.len();
        write_jsonl(out, &kept)?;
        self.finish(led, t0, c0, k0, out);
        Ok(kept)
    }

    /// Scores every item and writes them to `scored_out`. With `kept_out`,
    /// items failing the quality filter are dropped and the rest written
    /// there; the returned items are the kept ones in that case.
    pub fn qc(
        &mut self,
        records: &[UnifiedRecord],
        items: &[McqItem],
        backend: &str,
        scored_out: &Path,
        kept_out: Option<&Path>,
    ) -> Result<Vec<McqItem>> {
        let (mut led, t0, c0, k0) = self.begin("qc", items.len());
        let caps = captions(records);
        let client = self.client(backend)?;
        let results: Vec<_> = items
            .par_iter()
            .map(|it| {
                let caption = caption_for(&caps, it)?;
                let judge = self.judge(client, "qc", hash_canonical(it));
                let q = genstage::quality_scores(it, caption, &judge, genstage::item_seed(self.seed, &it.id))?;
                let mut out = it.clone();
                out.quality = Some(q);
                Ok(out)
            })
            .collect();
        let outcomes = results.into_iter().map(|x| self.outcome("qc", x)).collect::<Result<Vec<_>>>()?;
        let scored = self.tally(&mut led, outcomes)?;
        write_jsonl(scored_out, &scored)?;
        let Some(kept_out) = kept_out else {
            led.emitted = scored.len();
            self.finish(led, t0, c0, k0, scored_out);
            return Ok(scored);
        };
        let (kept, low) = split_by_quality(scored);
        led.output -= low;
        led.dropped += low;
        if low > 0 {
            led.reasons.insert("score below 4".into(), low);
        }
        led.emitted = kept.len();
        write_jsonl(kept_out, &kept)?;
        self.finish(led, t0, c0, k0, kept_out);
        Ok(kept)
    }

    /// Silent-audio probes and majority vote. Items whose probes fail at the
    /// backend are counted as errored and get no verdict.
    pub fn acf(
        &mut self,
        items: &[McqItem],
        opts: &ProbeOptions,
        probes_out: &Path,
        verdicts_out: &Path,
    ) -> Result<Vec<AcVerdict>> {
        let (mut led, t0, c0, k0) = self.begin("acf", items.len());
        let wav = make_silent_wav(opts.silent_duration_s, opts.sample_rate).map_err(|e| Error::Config(e.to_string()))?;
        let silent = AudioAttachment::from_wav(&wav);
        let params = GenParams { temperature: 0.0, max_tokens: 256, seed: self.seed };
        let clients = opts.probes.iter().map(|p| self.client(p)).collect::<Result<Vec<_>>>()?;

        let jobs: Vec<(usize, usize)> =
            (0..items.len()).flat_map(|i| (0..clients.len()).map(move |m| (i, m))).collect();
        let results: Vec<std::result::Result<ProbeResult, BackendError>> = jobs
            .par_iter()
            .map(|&(i, m)| {
                let it = &items[i];
                let client = clients[m];
                let silent_pred = self.probe(client, it, &AudioInput::Clip(silent.clone()), "silent", &params)?;
                let with = if opts.with_audio {
                    Some(self.probe(client, it, &AudioInput::File(it.audio.clone()), "audio", &params)?)
                } else {
                    None
                };
                Ok(ProbeResult {
                    item_id: it.id.clone(),
                    model_name: opts.probes[m].clone(),
                    with_audio: with,
                    silent: silent_pred,
                })
            })
            .collect();

        let mut probe_results = Vec::with_capacity(results.len());
        let mut failed = std::collections::BTreeSet::new();
        let mut first_err = None;
        for (res, &(i, _)) in results.into_iter().zip(&jobs) {
            match res {
                Ok(p) => probe_results.push(p),
                Err(BackendError::Interrupted) => return Err(self.interrupted("acf")),
                Err(e) => {
                    failed.insert(items[i].id.clone());
                    first_err.get_or_insert(e);
                }
            }
        }
        if !items.is_empty() && failed.len() == items.len() {
            return Err(Error::Backend(first_err.expect("an error was recorded")));
        }
        let ok_items: Vec<McqItem> = items.iter().filter(|it| !failed.contains(&it.id)).cloned().collect();
        probe_results.retain(|p| !failed.contains(&p.item_id));
        led.errored = failed.len();
        led.output = ok_items.len();
        if led.errored > 0 {
            led.reasons.insert("backend".into(), led.errored);
        }
        let mut verdicts = acf::verdicts_from_probes(&ok_items, &probe_results, &opts.probes)?;
        if let Some(judge) = &opts.zero_ac_judge {
            let unclassified = self.classify_weak(&ok_items, &mut verdicts, judge)?;
            if unclassified > 0 {
                led.reasons.insert("zero-ac unclassified".into(), unclassified);
            }
        }
        probe_results.sort_by(|a, b| (&a.item_id, &a.model_name).cmp(&(&b.item_id, &b.model_name)));
        verdicts.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        write_jsonl(probes_out, &probe_results)?;
        led.emitted = verdicts.len();
        write_jsonl(verdicts_out, &verdicts)?;
        self.finish(led, t0, c0, k0, verdicts_out);
        Ok(verdicts)
    }

    fn probe(
        &self,
        client: &Client,
        it: &McqItem,
        input: &AudioInput,
        tag: &str,
        params: &GenParams,
    ) -> std::result::Result<Prediction, BackendError> {
        let audio_key = match input {
            AudioInput::Clip(a) => a.sha256.clone(),
            AudioInput::File(a) => format!("{}:{}", a.id, a.path),
        };
        let key = hash_parts(&[
            b"acf",
            &stage_version("acf").to_le_bytes(),
            tag.as_bytes(),
            hash_canonical(client.profile()).as_bytes(),
            it.question.as_bytes(),
            hash_canonical(&it.options).as_bytes(),
            audio_key.as_bytes(),
            &params.seed.to_le_bytes(),
        ]);
        let raw = self.cache.get_or_fetch(&key, || {
            client.answer_audio_mcq(input, &it.question, &it.options, params).map(|p| p.raw_text)
        })?;
        let choice_index = extract_choice(&raw, &it.options, client.profile().prompt_style);
        // Latency is not persisted so that manifests stay reproducible.
        Ok(Prediction { raw_text: raw, choice_index, latency_ms: 0 })
    }

    /// Sets `zero_ac_class` on weak verdicts using the judge; returns how
    /// many weak items could not be classified.
    pub fn classify_weak(&self, items: &[McqItem], verdicts: &mut [AcVerdict], judge: &str) -> Result<usize> {
        let client = self.client(judge)?;
        let by_id: HashMap<&str, &McqItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
        let classes: Vec<std::result::Result<Option<ZeroAcClass>, ()>> = verdicts
            .par_iter()
            .map(|v| {
                if v.label != AcLabel::Weak {
                    return Ok(None);
                }
                let Some(it) = by_id.get(v.item_id.as_str()) else {
                    return Ok(None);
                };
                let judge = self.judge(client, "zero-ac", hash_canonical(it));
                let params = GenParams { seed: genstage::item_seed(self.seed, &it.id), ..GenParams::default() };
                match acf::classify_zero_ac(it, &judge, &params) {
                    Ok(c) => Ok(Some(c)),
                    Err(acf::AcfError::Backend(BackendError::Interrupted)) => Err(()),
                    Err(e) => {
                        tracing::warn!(item = %it.id, error = %e, "zero-AC item unclassified");
                        Ok(None)
                    }
                }
            })
            .collect();
        let mut unclassified = 0;
        for (v, c) in verdicts.iter_mut().zip(classes) {
            let c = c.map_err(|()| self.interrupted("acf"))?;
            if v.label == AcLabel::Weak && c.is_none() {
                unclassified += 1;
            }
            v.zero_ac_class = c;
        }
        Ok(unclassified)
    }

    /// Materializes every paradigm under `out_dir/<paradigm>/`: id lists,
    /// training JSONL and a summary. Items without a verdict are ignored.
    pub fn curriculum(
        &mut self,
        items: &[McqItem],
        verdicts: &[AcVerdict],
        c: &CurriculumOptions,
        out_dir: &Path,
    ) -> Result<Vec<(Paradigm, curriculum::Allocation)>> {
        let verdict_ids: std::collections::HashSet<&str> = verdicts.iter().map(|v| v.item_id.as_str()).collect();
        let labelled: Vec<McqItem> = items.iter().filter(|i| verdict_ids.contains(i.id.as_str())).cloned().collect();
        let (mut led, t0, c0, k0) = self.begin("curriculum", labelled.len());
        let partition = acf::partition_dataset(&labelled, verdicts)?;
        let pool: Vec<String> = labelled.iter().map(|i| i.id.clone()).collect();
        let by_id: HashMap<&str, &McqItem> = labelled.iter().map(|i| (i.id.as_str(), i)).collect();
        let volume = c.sft_volume.unwrap_or(partition.weak_ids.len());
        let mut assigned: std::collections::HashSet<String> = std::collections::HashSet::new();
        let mut allocations = Vec::new();
        for p in &c.paradigms {
            let mut spec = curriculum::CurriculumSpec::for_paradigm(*p, volume, self.seed);
            spec.rl_volume = c.rl_volume;
            let alloc = curriculum::materialize(&spec, &partition, &pool)?;
            let pdir = out_dir.join(p.name());
            write_lines(&pdir.join("sft_ids.txt"), &alloc.sft_ids)?;
            write_lines(&pdir.join("rl_ids.txt"), &alloc.rl_ids)?;
            for (name, ids, augment) in [("sft.jsonl", &alloc.sft_ids, true), ("rl.jsonl", &alloc.rl_ids, c.augment_rl)] {
                let mut recs = Vec::new();
                for id in ids {
                    let it = by_id[id.as_str()];
                    assigned.insert(id.clone());
                    if augment && c.augment_copies > 0 {
                        for rep in curriculum::augment_option_orders(it, c.augment_copies, self.seed) {
                            recs.push(curriculum::training_record(&rep, c.format));
                        }
                    } else {
                        recs.push(curriculum::training_record(it, c.format));
                    }
                }
                write_plain_jsonl(&pdir.join(name), &recs)?;
            }
            let summary = serde_json::json!({
                "paradigm": p.name(),
                "sft_volume": alloc.sft_ids.len(),
                "rl_volume": alloc.rl_ids.len(),
                "augment_copies": c.augment_copies,
                "seed": self.seed,
            });
            write_atomic(&pdir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json").as_bytes())?;
            allocations.push((*p, alloc));
        }
        led.output = assigned.len();
        led.dropped = labelled.len() - assigned.len();
        if led.dropped > 0 {
            led.reasons.insert("unassigned".into(), led.dropped);
        }
        led.emitted = assigned.len();
        self.finish(led, t0, c0, k0, out_dir);
        Ok(allocations)
    }
}

/// Splits scored items into those passing the quality filter and a count of
/// the rest. Unscored items fail.
pub fn split_by_quality(scored: Vec<McqItem>) -> (Vec<McqItem>, usize) {
    let n = scored.len();
    let kept: Vec<McqItem> =
        scored.into_iter().filter(|it| it.quality.as_ref().is_some_and(genstage::quality_filter)).collect();
    let low = n - kept.len();
    (kept, low)
}

fn short_reason(r: &str) -> String {
    let r = r.strip_prefix("rejected: ").unwrap_or(r);
    r.split([':', '(']).next().unwrap_or(r).trim().chars().take(60).collect()
}

fn captions(records: &[UnifiedRecord]) -> HashMap<&str, &str> {
    records.iter().map(|r| (r.audio.id.as_str(), r.caption.as_str())).collect()
}

fn caption_for<'c>(caps: &HashMap<&str, &'c str>, item: &McqItem) -> std::result::Result<&'c str, StageError> {
    caps.get(item.audio.id.as_str())
        .copied()
        .ok_or_else(|| StageError::Rejected(format!("no caption for audio `{}`", item.audio.id)))
}

/// Runs the configured stages and writes the run ledger to the work dir.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunLedger> {
    cfg.validate()?;
    let mut r = StageRunner::new(&cfg.backends, &cfg.cache_dir, &cfg.audio_root, cfg.seed, opts.call_budget)?;
    let m = |name: &str| cfg.work_dir.join(name);
    let mut records: Vec<UnifiedRecord> = Vec::new();
    let mut items: Vec<McqItem> = Vec::new();
    let mut cots: Vec<CotRecord> = Vec::new();
    let mut verdicts: Option<Vec<AcVerdict>> = None;
    for stage in &cfg.stages {
        match stage {
            StageConfig::Ingest => records = r.ingest(&cfg.sources, &m(paths::UNIFIED))?,
            StageConfig::Mcq { backend, options } => items = r.mcq(&records, backend, options, &m(paths::MCQ))?,
            StageConfig::Cot { backend } => cots = r.cot(&records, &items, backend, &m(paths::COT_STRUCTURED))?,
            StageConfig::Simplify { backend } => items = r.simplify(&records, &items, &cots, backend, &m(paths::COT))?,
            StageConfig::Qc { backend } => {
                items = r.qc(&records, &items, backend, &m(paths::QC_SCORED), Some(&m(paths::QC)))?
            }
            StageConfig::Acf { probes, silent_duration_s, sample_rate, with_audio, zero_ac_judge } => {
                let o = ProbeOptions {
                    probes: probes.clone(),
                    silent_duration_s: *silent_duration_s,
                    sample_rate: *sample_rate,
                    with_audio: *with_audio,
                    zero_ac_judge: zero_ac_judge.clone(),
                };
                verdicts = Some(r.acf(&items, &o, &m(paths::PROBES), &m(paths::VERDICTS))?);
            }
            StageConfig::Curriculum { paradigms, sft_volume, rl_volume, augment_copies, augment_rl, format } => {
                let o = CurriculumOptions {
                    paradigms: paradigms.clone(),
                    sft_volume: *sft_volume,
                    rl_volume: *rl_volume,
                    augment_copies: *augment_copies,
                    augment_rl: *augment_rl,
                    format: *format,
                };
                let v = verdicts.as_deref().expect("acf precedes curriculum");
                r.curriculum(&items, v, &o, &m(paths::CURRICULUM))?;
            }
        }
    }
    write_reports(&cfg.report_dir, &items, verdicts.as_deref())?;
    let ledger = r.into_ledger();
    let text = serde_json::to_string_pretty(&ledger).expect("ledger serializes");
    write_atomic(&cfg.work_dir.join(paths::LEDGER), text.as_bytes())?;
    Ok(ledger)
}

/// Distribution tables, the weak/strong ratio table when verdicts exist,
/// a Markdown summary and SVG plots. Nothing is written for no items.
pub fn write_reports(dir: &Path, items: &[McqItem], verdicts: Option<&[AcVerdict]>) -> Result<()> {
    if items.is_empty() {
        tracing::warn!("no items; reports skipped");
        return Ok(());
    }
    let types = report::type_distribution(items);
    let sources = report::source_distribution(items);
    write_atomic(&dir.join("types.csv"), types.to_csv()?.as_bytes())?;
    write_atomic(&dir.join("sources.csv"), sources.to_csv()?.as_bytes())?;
    let mut md = types.to_markdown();
    md.push('\n');
    md.push_str(&sources.to_markdown());
    let mut ratios = Vec::new();
    if let Some(verdicts) = verdicts {
        let ids: std::collections::HashSet<&str> = verdicts.iter().map(|v| v.item_id.as_str()).collect();
        let labelled: Vec<McqItem> = items.iter().filter(|i| ids.contains(i.id.as_str())).cloned().collect();
        let p = acf::partition_dataset(&labelled, verdicts)?;
        ratios = p.per_source.clone();
        ratios.push(p.overall.clone());
        write_atomic(&dir.join("ratios.csv"), report::ratio_csv(&ratios)?.as_bytes())?;
        md.push('\n');
        md.push_str(&report::ratio_markdown("Audio-contribution split", &ratios));
    }
    write_atomic(&dir.join("report.md"), md.as_bytes())?;
    report::emit_plots(dir, &types, &sources, &ratios)?;
    Ok(())
}

/// Judge plus three probe models, all deterministic mocks.
pub fn mock_backends() -> Vec<BackendProfile> {
    use crate::backends::{PromptStyle, RetryPolicy};
    let mk = |name: &str, kind, endpoint: &str, style| BackendProfile {
        name: name.into(),
        kind,
        endpoint: endpoint.into(),
        model_id: name.into(),
        prompt_style: style,
        max_concurrency: 8,
        timeout_s: 30.0,
        retry: RetryPolicy { max_attempts: 2, backoff_s: 0.0 },
        api_key: None,
    };
    vec![
        mk("judge", BackendKind::TextJudge, "mock://judge", PromptStyle::OmniAnswerTags),
        mk("audio-flamingo-2", BackendKind::AudioQA, "mock://audio", PromptStyle::FlamingoLetters),
        mk("r1-aqa", BackendKind::AudioQA, "mock://audio", PromptStyle::R1AqaAnswerTags),
        mk("kimi-audio", BackendKind::AudioQA, "mock://audio", PromptStyle::KimiLetterDot),
    ]
}

/// Full-stage config over mock backends, with everything under `root`.
pub fn mock_config(root: &Path, sources: Vec<SourceSpec>, seed: u64) -> PipelineConfig {
    PipelineConfig {
        work_dir: root.join("work"),
        cache_dir: root.join("cache"),
        report_dir: root.join("reports"),
        seed,
        audio_root: root.to_path_buf(),
        backends: mock_backends(),
        sources,
        stages: vec![
            StageConfig::Ingest,
            StageConfig::Mcq { backend: "judge".into(), options: McqOptions::default() },
            StageConfig::Cot { backend: "judge".into() },
            StageConfig::Simplify { backend: "judge".into() },
            StageConfig::Qc { backend: "judge".into() },
            StageConfig::Acf {
                probes: vec!["audio-flamingo-2".into(), "r1-aqa".into(), "kimi-audio".into()],
                silent_duration_s: default_silent_seconds(),
                sample_rate: default_sample_rate(),
                with_audio: false,
                zero_ac_judge: Some("judge".into()),
            },
            StageConfig::Curriculum {
                paradigms: all_paradigms(),
                sft_volume: None,
                rl_volume: None,
                augment_copies: default_copies(),
                augment_rl: true,
                format: default_format(),
            },
        ],
    }
}

const SOUND_WORDS: [&str; 10] = [
    "a dog barks", "rain falls on leaves", "a car engine idles", "birds sing", "a door creaks open",
    "footsteps echo in a hall", "wind howls", "a bell rings", "water drips into a bucket", "a crowd murmurs",
];
const MUSIC_WORDS: [&str; 8] = [
    "a mellow piano melody", "an energetic rock band", "a slow string quartet", "a funky bass groove",
    "a dreamy synth pad", "a lively fiddle tune", "a soft acoustic guitar", "a pounding techno beat",
];
const SPEECH_WORDS: [&str; 8] = [
    "a calm female voice", "an excited young man", "an elderly woman speaking slowly", "a deep male voice",
    "a cheerful child", "a nervous speaker", "a confident presenter", "a tired voice",
];

/// Deterministic synthetic source entries, spread over all seven corpora in
/// proportions loosely following the real mix.
pub fn synthetic_sources(n: usize, seed: u64) -> Vec<(Corpus, Vec<SourceManifestEntry>)> {
    let weights = [(Corpus::Clotho, 3), (Corpus::AudioCaps, 12), (Corpus::CompAR, 30), (Corpus::MusicCaps, 5),
        (Corpus::LpMusicCaps, 5), (Corpus::SpeechCraft, 35), (Corpus::Tacos, 10)];
    let total_w: usize = weights.iter().map(|(_, w)| w).sum();
    let mut counts: Vec<usize> = weights.iter().map(|(_, w)| n * w / total_w).collect();
    let assigned: usize = counts.iter().sum();
    let buckets = counts.len();
    for k in 0..(n - assigned) {
        counts[k % buckets] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
    let mut out = Vec::new();
    for ((corpus, _), count) in weights.iter().zip(counts) {
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{}-{i:05}", corpus.name().to_lowercase().replace('-', ""));
            let duration = match corpus {
                Corpus::SpeechCraft => rng.random_range(1.0..34.0_f64),
                _ => rng.random_range(5.0..30.0_f64),
            };
            let audio = AudioRef { id: id.clone(), path: format!("audio/{id}.wav"), duration_s: Some((duration * 10.0).round() / 10.0) };
            let mut e = SourceManifestEntry { audio, captions: vec![], qa: None, tagged_events: None };
            match corpus {
                Corpus::Clotho => {
                    e.captions = (0..5)
                        .map(|_| format!("{} while {}", pick(&mut rng, &SOUND_WORDS), pick(&mut rng, &SOUND_WORDS)))
                        .collect();
                }
                Corpus::AudioCaps => e.captions = vec![format!("{} and {}", pick(&mut rng, &SOUND_WORDS), pick(&mut rng, &SOUND_WORDS))],
                Corpus::CompAR => {
                    e.qa = Some(QaPair {
                        question: format!("Why might {} be heard here?", pick(&mut rng, &SOUND_WORDS)),
                        answer: format!("Because {} suggests an outdoor setting near {}", pick(&mut rng, &SOUND_WORDS), pick(&mut rng, &SOUND_WORDS)),
                    })
                }
                Corpus::MusicCaps | Corpus::LpMusicCaps => {
                    e.captions = vec![format!("{} with {}", pick(&mut rng, &MUSIC_WORDS), pick(&mut rng, &MUSIC_WORDS))]
                }
                Corpus::SpeechCraft => e.captions = vec![format!("{} says something about the weather", pick(&mut rng, &SPEECH_WORDS))],
                Corpus::Tacos => {
                    let k = rng.random_range(1..=5);
                    let mut t = 0.0_f64;
                    let events = (0..k)
                        .map(|_| {
                            let start = t + rng.random_range(0..30) as f64 / 10.0;
                            let end = start + rng.random_range(5..40) as f64 / 10.0;
                            t = end;
                            TaggedEvent { label: pick(&mut rng, &SOUND_WORDS), start_s: start.min(29.0), end_s: end.min(30.0) }
                        })
                        .collect();
                    e.tagged_events = Some(events);
                }
            }
            entries.push(e);
        }
        out.push((*corpus, entries));
    }
    out
}

/// Writes synthetic source manifests under `dir` and returns their specs.
pub fn write_synthetic_sources(dir: &Path, n: usize, seed: u64) -> Result<Vec<SourceSpec>> {
    let mut specs = Vec::new();
    for (corpus, entries) in synthetic_sources(n, seed) {
        let path = dir.join(format!("{}.jsonl", corpus.name().to_lowercase()));
        write_plain_jsonl(&path, &entries)?;
        specs.push(SourceSpec { corpus, path, duration_bounds: None });
    }
    Ok(specs)
}
