//! SFT/RL data allocation by audio contribution, option-order augmentation
//! and position-balanced validation expansion.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acf::PartitionResult;
use crate::backends::choice::{python_list_repr, AUDIO_QA_SYSTEM_PROMPT, LETTERS};
use crate::hash::hash_to_u64;
use crate::model::McqItem;

/// SFT volume used by every paradigm: the size of the weak split.
pub const DEFAULT_SFT_VOLUME: usize = 313_177;
pub const DEFAULT_AUGMENT_COPIES: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurriculumError {
    #[error("{stage} pool has {available} ids, {needed} requested (short by {})", needed - available)]
    Capacity {
        stage: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("pool id `{0}` has no audio-contribution label")]
    Coverage(String),
    #[error("duplicate pool id `{0}`")]
    Duplicate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SftPolicy {
    WeakOnly,
    MixedRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RlPolicy {
    StrongOnly,
    MixedRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    WeakToStrong,
    MixedToStrong,
    MixedToMixed,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::WeakToStrong, Paradigm::MixedToStrong, Paradigm::MixedToMixed];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::WeakToStrong => "weak-to-strong",
            Paradigm::MixedToStrong => "mixed-to-strong",
            Paradigm::MixedToMixed => "mixed-to-mixed",
        }
    }

    pub fn policies(self) -> (SftPolicy, RlPolicy) {
        match self {
            Paradigm::WeakToStrong => (SftPolicy::WeakOnly, RlPolicy::StrongOnly),
            Paradigm::MixedToStrong => (SftPolicy::MixedRandom, RlPolicy::StrongOnly),
            Paradigm::MixedToMixed => (SftPolicy::MixedRandom, RlPolicy::MixedRandom),
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown paradigm `{s}` (expected weak-to-strong, mixed-to-strong or mixed-to-mixed)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSpec {
    pub name: String,
    pub sft_policy: SftPolicy,
    pub rl_policy: RlPolicy,
    #[serde(default = "default_sft_volume")]
    pub sft_volume: usize,
    /// Optional cap on the RL draw; by default RL takes every remaining id
    /// its policy allows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rl_volume: Option<usize>,
    pub seed: u64,
}

fn default_sft_volume() -> usize {
    DEFAULT_SFT_VOLUME
}

impl CurriculumSpec {
    pub fn for_paradigm(p: Paradigm, sft_volume: usize, seed: u64) -> Self {
        let (sft_policy, rl_policy) = p.policies();
        Self { name: p.name().to_string(), sft_policy, rl_policy, sft_volume, rl_volume: None, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    /// Sorted.
    pub sft_ids: Vec<String>,
    /// Sorted.
    pub rl_ids: Vec<String>,
}

/// Seeded draw of `n` ids without replacement from the sorted candidates.
fn draw(mut candidates: Vec<&str>, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    candidates.sort_unstable();
    let (picked, _) = candidates.partial_shuffle(rng, n);
    let mut out: Vec<String> = picked.iter().map(|s| s.to_string()).collect();
    out.sort_unstable();
    out
}

/// Draws the SFT set from the policy's candidates, then the RL set from what
/// remains. Both draws come from one ChaCha8 stream seeded by `spec.seed`.
pub fn materialize(
    spec: &CurriculumSpec,
    partition: &PartitionResult,
    pool: &[String],
) -> Result<Allocation, CurriculumError> {
    let mut seen = BTreeSet::new();
    for id in pool {
        if !seen.insert(id.as_str()) {
            return Err(CurriculumError::Duplicate(id.clone()));
        }
        if !partition.weak_ids.contains(id) && !partition.strong_ids.contains(id) {
            return Err(CurriculumError::Coverage(id.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let sft_candidates: Vec<&str> = match spec.sft_policy {
        SftPolicy::WeakOnly => seen.iter().copied().filter(|id| partition.weak_ids.contains(*id)).collect(),
        SftPolicy::MixedRandom => seen.iter().copied().collect(),
    };
    if sft_candidates.len() < spec.sft_volume {
        return Err(CurriculumError::Capacity {
            stage: "SFT",
            needed: spec.sft_volume,
            available: sft_candidates.len(),
        });
    }
    let sft_ids = draw(sft_candidates, spec.sft_volume, &mut rng);
    let taken: BTreeSet<&str> = sft_ids.iter().map(String::as_str).collect();

    let rl_candidates: Vec<&str> = seen
        .iter()
        .copied()
        .filter(|id| !taken.contains(id))
        .filter(|id| match spec.rl_policy {
            RlPolicy::StrongOnly => partition.strong_ids.contains(*id),
            RlPolicy::MixedRandom => true,
        })
        .collect();
    let rl_n = match spec.rl_volume {
        Some(n) if n > rl_candidates.len() => {
            return Err(CurriculumError::Capacity { stage: "RL", needed: n, available: rl_candidates.len() })
        }
        Some(n) => n,
        None => rl_candidates.len(),
    };
    let rl_ids = draw(rl_candidates, rl_n, &mut rng);
    Ok(Allocation { sft_ids, rl_ids })
}

fn with_options(item: &McqItem, id: String, options: [String; 4], answer_index: u8) -> McqItem {
    McqItem { id, options, answer_index, ..item.clone() }
}

/// `copies` replicas with independently shuffled options. Replica `k`
/// (1-based) gets id `<id>#r<k>` and a permutation seeded by
/// `(seed, id, k)`.
pub fn augment_option_orders(item: &McqItem, copies: usize, seed: u64) -> Vec<McqItem> {
    let correct = item.correct_option().unwrap_or_default().to_string();
    (1..=copies)
        .map(|k| {
            let s = hash_to_u64(&[&seed.to_le_bytes(), item.id.as_bytes(), &(k as u64).to_le_bytes()]);
            let mut perm = [0usize, 1, 2, 3];
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            let options = perm.map(|i| item.options[i].clone());
            let answer = perm
                .iter()
                .position(|&i| i + 1 == usize::from(item.answer_index))
                .map_or(item.answer_index, |p| p as u8 + 1);
            debug_assert_eq!(options[usize::from(answer) - 1], correct);
            with_options(item, format!("{}#r{k}", item.id), options, answer)
        })
        .collect()
}

/// Four variants with the correct option at positions 1..4. Distractors
/// keep their original relative order, rotated left by `k - 1` for
/// variant `k`. Ids get `#p<k>`.
pub fn expand_positionwise(item: &McqItem) -> [McqItem; 4] {
    let correct = item.correct_option().unwrap_or_default().to_string();
    let distractors: Vec<String> = item.distractors().into_iter().map(String::from).collect();
    std::array::from_fn(|v| {
        let k = v + 1;
        let mut rotated = distractors.clone();
        if !rotated.is_empty() {
            let n = rotated.len();
            rotated.rotate_left(v % n);
        }
        let mut it = rotated.into_iter();
        let options: [String; 4] =
            std::array::from_fn(|pos| if pos == v { correct.clone() } else { it.next().unwrap_or_default() });
        with_options(item, format!("{}#p{k}", item.id), options, k as u8)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingFormat {
    /// `Q Please choose the answer from the following options: A. o1 B. o2 ...`
    LetterList,
    /// Python-list options with an `<answer>` instruction.
    AnswerTags,
}

/// One line of the training-ready JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub audio: String,
    pub system: String,
    pub prompt: String,
    pub answer: String,
    pub answer_index: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinking: Option<String>,
}

pub fn training_prompt(item: &McqItem, format: TrainingFormat) -> String {
    match format {
        TrainingFormat::LetterList => {
            let opts: Vec<String> = item
                .options
                .iter()
                .zip(LETTERS)
                .map(|(o, l)| format!("{l}. {o}"))
                .collect();
            format!("{} Please choose the answer from the following options: {}", item.question, opts.join(" "))
        }
        TrainingFormat::AnswerTags => format!(
            "{} Please choose the answer from the following options: {}. Output the final answer in <answer> </answer>.",
            item.question,
            python_list_repr(&item.options)
        ),
    }
}

pub fn training_record(item: &McqItem, format: TrainingFormat) -> TrainingRecord {
    TrainingRecord {
        id: item.id.clone(),
        audio: item.audio.path.clone(),
        system: AUDIO_QA_SYSTEM_PROMPT.to_string(),
        prompt: training_prompt(item, format),
        answer: item.correct_option().unwrap_or_default().to_string(),
        answer_index: item.answer_index,
        thinking: item.cot.as_ref().map(|c| c.simple.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::sample_item;
    use crate::model::validate_item;

    fn partition(weak: usize, strong: usize) -> (PartitionResult, Vec<String>) {
        let weak_ids: BTreeSet<String> = (0..weak).map(|i| format!("w{i:05}")).collect();
        let strong_ids: BTreeSet<String> = (0..strong).map(|i| format!("s{i:05}")).collect();
        let pool = weak_ids.iter().chain(&strong_ids).cloned().collect();
        let overall = crate::report::RatioRow::from_counts("Overall", weak as u64, (weak + strong) as u64);
        (PartitionResult { weak_ids, strong_ids, per_source: vec![], overall }, pool)
    }

    #[test]
    fn weak_only_takes_whole_weak_set() {
        let (p, pool) = partition(50, 80);
        let spec = CurriculumSpec::for_paradigm(Paradigm::WeakToStrong, 50, 1);
        let a = materialize(&spec, &p, &pool).unwrap();
        assert_eq!(a.sft_ids, p.weak_ids.iter().cloned().collect::<Vec<_>>());
        assert_eq!(a.rl_ids, p.strong_ids.iter().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn capacity_error_names_shortfall() {
        let (p, pool) = partition(10, 10);
        let spec = CurriculumSpec::for_paradigm(Paradigm::WeakToStrong, 12, 1);
        let err = materialize(&spec, &p, &pool).unwrap_err();
        assert_eq!(err, CurriculumError::Capacity { stage: "SFT", needed: 12, available: 10 });
        assert!(err.to_string().contains("short by 2"));
        let mut capped = CurriculumSpec::for_paradigm(Paradigm::MixedToMixed, 15, 1);
        capped.rl_volume = Some(6);
        assert!(matches!(materialize(&capped, &p, &pool), Err(CurriculumError::Capacity { stage: "RL", .. })));
    }

    #[test]
    fn coverage_and_duplicates() {
        let (p, mut pool) = partition(3, 3);
        pool.push("stranger".into());
        let spec = CurriculumSpec::for_paradigm(Paradigm::MixedToMixed, 1, 0);
        assert_eq!(materialize(&spec, &p, &pool).unwrap_err(), CurriculumError::Coverage("stranger".into()));
        pool.pop();
        pool.push(pool[0].clone());
        assert!(matches!(materialize(&spec, &p, &pool), Err(CurriculumError::Duplicate(_))));
    }

    #[test]
    fn rl_cap() {
        let (p, pool) = partition(20, 20);
        let mut spec = CurriculumSpec::for_paradigm(Paradigm::MixedToStrong, 10, 3);
        spec.rl_volume = Some(5);
        let a = materialize(&spec, &p, &pool).unwrap();
        assert_eq!(a.rl_ids.len(), 5);
        assert!(a.rl_ids.iter().all(|id| p.strong_ids.contains(id)));
    }

    #[test]
    fn paradigm_names_round_trip() {
        for p in Paradigm::ALL {
            assert_eq!(p.name().parse::<Paradigm>().unwrap(), p);
        }
        assert!("strong-to-weak".parse::<Paradigm>().is_err());
    }

    #[test]
    fn augment_replicas() {
        let item = sample_item();
        let reps = augment_option_orders(&item, 4, 9);
        assert_eq!(reps.len(), 4);
        let mut orig = item.options.to_vec();
        orig.sort();
        for (k, r) in reps.iter().enumerate() {
            assert_eq!(r.id, format!("{}#r{}", item.id, k + 1));
            assert_eq!(r.correct_option(), item.correct_option());
            let mut o = r.options.to_vec();
            o.sort();
            assert_eq!(o, orig);
            assert!(validate_item(r).is_empty());
        }
        assert_eq!(augment_option_orders(&item, 4, 9), reps);
    }

    #[test]
    fn expand_rotation() {
        let mut item = sample_item();
        item.options = ["C".into(), "D1".into(), "D2".into(), "D3".into()];
        item.answer_index = 1;
        let v = expand_positionwise(&item);
        let opts: Vec<[String; 4]> = v.iter().map(|i| i.options.clone()).collect();
        assert_eq!(opts[0], ["C", "D1", "D2", "D3"].map(String::from));
        assert_eq!(opts[1], ["D2", "C", "D3", "D1"].map(String::from));
        assert_eq!(opts[2], ["D3", "D1", "C", "D2"].map(String::from));
        assert_eq!(opts[3], ["D1", "D2", "D3", "C"].map(String::from));
        for (k, it) in v.iter().enumerate() {
            assert_eq!(usize::from(it.answer_index), k + 1);
            assert_eq!(it.id, format!("{}#p{}", item.id, k + 1));
        }
    }

    #[test]
    fn training_prompts() {
        let mut item = sample_item();
        item.question = "Q?".into();
        item.options = ["o1".into(), "o2".into(), "o3".into(), "o4".into()];
        assert_eq!(
            training_prompt(&item, TrainingFormat::LetterList),
            "Q? Please choose the answer from the following options: A. o1 B. o2 C. o3 D. o4"
        );
        assert_eq!(
            training_prompt(&item, TrainingFormat::AnswerTags),
            "Q? Please choose the answer from the following options: ['o1', 'o2', 'o3', 'o4']. Output the final answer in <answer> </answer>."
        );
        let r = training_record(&item, TrainingFormat::AnswerTags);
        assert_eq!(r.system, AUDIO_QA_SYSTEM_PROMPT);
        assert_eq!(r.answer, item.correct_option().unwrap());
    }
}
