use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use acfforge_core::acf::{self, AcfError, ProbeResult};
use acfforge_core::backends::{BackendError, BackendProfile, GenParams, TextGenerator};
use acfforge_core::curriculum::{self, Paradigm, TrainingFormat};
use acfforge_core::genstage::{self, McqOptions, StructuredCot};
use acfforge_core::grpo::{self, GrpoConfig};
use acfforge_core::manifest::{read_jsonl, write_jsonl};
use acfforge_core::model::{AcVerdict, Corpus, McqItem, UnifiedRecord};
use acfforge_core::pipeline::{
    self, CotRecord, CurriculumOptions, PipelineConfig, ProbeOptions, RunOptions, SourceSpec, StageRunner,
};
use acfforge_core::report::{self, BenchmarkMeta, ScoredPrediction};
use acfforge_core::Error;
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "acfforge", version, about = "Audio MCQ dataset construction and audio-contribution filtering")]
struct Cli {
    /// Pipeline config (JSON). Without one, the built-in mock backends are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unify one source corpus manifest.
    Ingest {
        #[arg(long)]
        source: Corpus,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_dur: Option<f64>,
        #[arg(long)]
        max_dur: Option<f64>,
    },
    /// Generate MCQs from unified records.
    GenMcq {
        #[command(flatten)]
        io: StageIo,
    },
    /// Structured chain-of-thought for MCQ items.
    GenCot {
        #[command(flatten)]
        io: StageIo,
        #[arg(long)]
        unified: PathBuf,
    },
    /// Simplified chain-of-thought from structured CoT records.
    GenSimple {
        #[command(flatten)]
        io: StageIo,
        #[arg(long)]
        unified: PathBuf,
        /// MCQ items the CoT records refer to.
        #[arg(long)]
        items: PathBuf,
    },
    /// Five-aspect quality scores.
    QcScore {
        #[command(flatten)]
        io: StageIo,
        #[arg(long)]
        unified: PathBuf,
    },
    /// Keep items whose five scores are all at least 4.
    QcFilter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Silent-audio probes, weak/strong partitions and zero-AC classes.
    #[command(subcommand)]
    Acf(AcfCmd),
    /// SFT/RL splits, position augmentation and 4x expansion.
    #[command(subcommand)]
    Curriculum(CurriculumCmd),
    /// Randomized finite-difference checks of the GRPO gradient.
    GrpoCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Run every configured stage.
    Run {
        /// Stop after this many backend calls (testing resumption).
        #[arg(long)]
        call_budget: Option<i64>,
    },
    /// Distribution, ratio and accuracy tables plus SVG plots.
    Report {
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        verdicts: Option<PathBuf>,
        /// Scored predictions and benchmark metadata for an accuracy table.
        #[arg(long, requires = "meta")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write synthetic source manifests and a mock config.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct StageIo {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "judge")]
    backend: String,
    /// Print the prompts that would be sent and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum AcfCmd {
    /// Silent-audio probes and majority vote.
    Probe {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "audio-flamingo-2,r1-aqa,kimi-audio")]
        models: Vec<String>,
        #[arg(long, default_value_t = 30.0)]
        silent_duration: f64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long)]
        with_audio: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        probes_out: Option<PathBuf>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Weak/strong id lists and the ratio table.
    Partition {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Keep the strong items of a benchmark, in order.
    BenchSplit {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label weak items as explicit or implicit cases.
    ClassifyZero {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long, default_value = "judge")]
        backend: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CurriculumCmd {
    /// SFT/RL id lists and training JSONL for one paradigm.
    Make {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        paradigm: Paradigm,
        #[arg(long)]
        sft_volume: Option<usize>,
        #[arg(long)]
        rl_volume: Option<usize>,
        #[arg(long, default_value_t = 0)]
        copies: usize,
        #[arg(long, default_value = "answer-tags")]
        format: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Replicate items with shuffled option orders.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        copies: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One variant per answer position for every item.
    #[command(name = "expand-4k")]
    Expand4k {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Backends, cache, audio root and seed for standalone stage commands.
struct Env {
    backends: Vec<BackendProfile>,
    cache_dir: PathBuf,
    audio_root: PathBuf,
    seed: u64,
}

impl Env {
    fn load(cli: &Cli) -> anyhow::Result<Self> {
        let (backends, cache_dir, audio_root, seed) = match &cli.config {
            Some(path) => {
                let cfg = PipelineConfig::load(path)?;
                (cfg.backends, cfg.cache_dir, cfg.audio_root, cfg.seed)
            }
            None => (pipeline::mock_backends(), PathBuf::from(".acfforge-cache"), PathBuf::from("."), 0),
        };
        Ok(Self {
            backends,
            cache_dir: cli.cache_dir.clone().unwrap_or(cache_dir),
            audio_root,
            seed: cli.seed.unwrap_or(seed),
        })
    }

    fn runner(&self) -> anyhow::Result<StageRunner> {
        Ok(StageRunner::new(&self.backends, &self.cache_dir, &self.audio_root, self.seed, None)?)
    }
}

/// Collects prompts instead of sending them.
#[derive(Default)]
struct PromptEcho(Mutex<Vec<String>>);

impl TextGenerator for PromptEcho {
    fn generate_text(&self, prompt: &str, _: &GenParams) -> Result<String, BackendError> {
        self.0.lock().expect("echo lock").push(prompt.to_string());
        Err(BackendError::Setup("dry run".into()))
    }
}

impl PromptEcho {
    fn print(self) {
        for (i, p) in self.0.into_inner().expect("echo lock").iter().enumerate() {
            println!("----- prompt {} -----\n{p}", i + 1);
        }
    }
}

fn print_ledger(runner: &StageRunner) {
    for s in &runner.ledger().stages {
        eprintln!(
            "{}: in {} out {} dropped {} errored {} | calls {} cache hits {} misses {}",
            s.stage, s.input, s.output, s.dropped, s.errored, s.backend_calls, s.cache_hits, s.cache_misses
        );
    }
}

fn captions(records: &[UnifiedRecord]) -> std::collections::HashMap<String, String> {
    records.iter().map(|r| (r.audio.id.clone(), r.caption.clone())).collect()
}

fn parse_format(s: &str) -> anyhow::Result<TrainingFormat> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .with_context(|| format!("unknown format `{s}`; expected letter-list or answer-tags"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes whose text the message above already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Interrupted { .. }) => 4,
        Some(Error::Backend(_)) | Some(Error::Acf(AcfError::Backend(_))) => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.cmd {
        Command::Ingest { source, input, out, min_dur, max_dur } => {
            let mut spec = SourceSpec { corpus: *source, path: input.clone(), duration_bounds: None };
            if min_dur.is_some() || max_dur.is_some() {
                spec.duration_bounds = Some((min_dur.unwrap_or(0.0), max_dur.unwrap_or(f64::INFINITY)));
            }
            let env = Env::load(cli)?;
            let mut r = env.runner()?;
            r.ingest(&[spec], out)?;
            print_ledger(&r);
        }
        Command::GenMcq { io } => {
            let env = Env::load(cli)?;
            let records: Vec<UnifiedRecord> = read_jsonl(&io.input)?;
            let opts = McqOptions::default();
            if io.dry_run {
                let echo = PromptEcho::default();
                for rec in &records {
                    let _ = genstage::mcq_items_for_record(rec, &echo, &opts, env.seed);
                }
                echo.print();
                return Ok(ExitCode::SUCCESS);
            }
            let mut r = env.runner()?;
            r.mcq(&records, &io.backend, &opts, &io.out)?;
            print_ledger(&r);
        }
        Command::GenCot { io, unified } => {
            let env = Env::load(cli)?;
            let records: Vec<UnifiedRecord> = read_jsonl(unified)?;
            let items: Vec<McqItem> = read_jsonl(&io.input)?;
            if io.dry_run {
                let echo = PromptEcho::default();
                let caps = captions(&records);
                for it in &items {
                    if let Some(c) = caps.get(&it.audio.id) {
                        let _ = genstage::structured_cot(it, c, &echo, env.seed);
                    }
                }
                echo.print();
                return Ok(ExitCode::SUCCESS);
            }
            let mut r = env.runner()?;
            r.cot(&records, &items, &io.backend, &io.out)?;
            print_ledger(&r);
        }
        Command::GenSimple { io, unified, items } => {
            let env = Env::load(cli)?;
            let records: Vec<UnifiedRecord> = read_jsonl(unified)?;
            let items: Vec<McqItem> = read_jsonl(items)?;
            let cots: Vec<CotRecord> = read_jsonl(&io.input)?;
            if io.dry_run {
                let echo = PromptEcho::default();
                let caps = captions(&records);
                for c in &cots {
                    let Some(it) = items.iter().find(|i| i.id == c.item_id) else { continue };
                    if let Some(cap) = caps.get(&it.audio.id) {
                        let sc = StructuredCot {
                            r1: c.r1.clone(),
                            r2: c.r2.clone(),
                            r3: c.r3.clone(),
                            over_length: c.over_length,
                        };
                        let _ = genstage::simplified_cot(it, cap, &sc, &echo, env.seed);
                    }
                }
                echo.print();
                return Ok(ExitCode::SUCCESS);
            }
            let mut r = env.runner()?;
            r.simplify(&records, &items, &cots, &io.backend, &io.out)?;
            print_ledger(&r);
        }
        Command::QcScore { io, unified } => {
            let env = Env::load(cli)?;
            let records: Vec<UnifiedRecord> = read_jsonl(unified)?;
            let items: Vec<McqItem> = read_jsonl(&io.input)?;
            if io.dry_run {
                let echo = PromptEcho::default();
                let caps = captions(&records);
                for it in &items {
                    if let Some(c) = caps.get(&it.audio.id) {
                        let _ = genstage::quality_scores(it, c, &echo, env.seed);
                    }
                }
                echo.print();
                return Ok(ExitCode::SUCCESS);
            }
            let mut r = env.runner()?;
            r.qc(&records, &items, &io.backend, &io.out, None)?;
            print_ledger(&r);
        }
        Command::QcFilter { input, out } => {
            let items: Vec<McqItem> = read_jsonl(input)?;
            let n = items.len();
            let (kept, low) = pipeline::split_by_quality(items);
            write_jsonl(out, &kept)?;
            eprintln!("qc-filter: in {n} out {} dropped {low}", kept.len());
        }
        Command::Acf(cmd) => return acf_cmd(cli, cmd),
        Command::Curriculum(cmd) => curriculum_cmd(cli, cmd)?,
        Command::GrpoCheck { instances, tolerance, step } => {
            let seed = cli.seed.unwrap_or(0);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = GrpoConfig::default();
            let mut worst: f64 = 0.0;
            let (mut checked, mut skipped) = (0, 0);
            for i in 0..*instances {
                let g = [2, 4, 8][i % 3];
                let samples = grpo::random_group(&mut rng, g, 16);
                let r = grpo::gradient_check(&samples, &cfg, *step)?;
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
                skipped += r.skipped;
            }
            println!("instances {instances} coordinates {checked} skipped {skipped} max relative error {worst:.3e}");
            if worst >= *tolerance {
                eprintln!("gradient check failed: {worst:.3e} >= {tolerance:.1e}");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Run { call_budget } => {
            let path = cli.config.as_ref().context("`run` needs --config")?;
            let mut cfg = PipelineConfig::load(path)?;
            if let Some(d) = &cli.cache_dir {
                cfg.cache_dir = d.clone();
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let ledger = pipeline::run_pipeline(&cfg, &RunOptions { call_budget: *call_budget })?;
            for s in &ledger.stages {
                println!(
                    "{:<10} in {:>7} out {:>7} dropped {:>6} errored {:>5} | {:>6} ms, calls {:>6}, cache hit {:>5.1}%",
                    s.stage,
                    s.input,
                    s.output,
                    s.dropped,
                    s.errored,
                    s.wall_ms,
                    s.backend_calls,
                    s.cache_hit_rate() * 100.0
                );
            }
        }
        Command::Report { items, verdicts, predictions, meta, out_dir } => {
            if items.is_none() && predictions.is_none() {
                bail!("nothing to report: pass --items and/or --predictions with --meta");
            }
            if let Some(items) = items {
                let items: Vec<McqItem> = read_jsonl(items)?;
                let verdicts: Option<Vec<AcVerdict>> = verdicts.as_deref().map(read_jsonl).transpose()?;
                pipeline::write_reports(out_dir, &items, verdicts.as_deref())?;
            }
            if let (Some(p), Some(m)) = (predictions, meta) {
                let preds: Vec<ScoredPrediction> = acfforge_core::manifest::read_plain_jsonl(p)?;
                let meta: Vec<BenchmarkMeta> = acfforge_core::manifest::read_plain_jsonl(m)?;
                let table = report::accuracy_breakdown(&preds, &meta, &[])?;
                let md = table.to_markdown("Accuracy with silent audio");
                write_file(&out_dir.join("accuracy.md"), md.as_bytes())?;
                write_file(&out_dir.join("accuracy.csv"), table.to_csv()?.as_bytes())?;
                print!("{md}");
            }
        }
        Command::Synth { n, out_dir } => {
            let seed = cli.seed.unwrap_or(0);
            let sources = pipeline::write_synthetic_sources(&out_dir.join("sources"), *n, seed)?;
            let mut cfg = pipeline::mock_config(Path::new("."), sources, seed);
            for s in &mut cfg.sources {
                s.path = s.path.strip_prefix(out_dir).unwrap_or(&s.path).to_path_buf();
            }
            let path = out_dir.join("config.json");
            write_file(&path, serde_json::to_string_pretty(&cfg)?.as_bytes())?;
            println!("{}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn acf_cmd(cli: &Cli, cmd: &AcfCmd) -> anyhow::Result<ExitCode> {
    match cmd {
        AcfCmd::Probe { input, models, silent_duration, sample_rate, with_audio, out, probes_out, report_dir } => {
            let env = Env::load(cli)?;
            let items: Vec<McqItem> = read_jsonl(input)?;
            let opts = ProbeOptions {
                probes: models.clone(),
                silent_duration_s: *silent_duration,
                sample_rate: *sample_rate,
                with_audio: *with_audio,
                zero_ac_judge: None,
            };
            let probes_out = probes_out.clone().unwrap_or_else(|| out.with_file_name("probes.jsonl"));
            let mut r = env.runner()?;
            let verdicts = r.acf(&items, &opts, &probes_out, out)?;
            print_ledger(&r);
            let probes: Vec<ProbeResult> = read_jsonl(&probes_out)?;
            for (model, t) in acf::zero_ac_tally(&items, &probes) {
                if t.zero_ac > 0 {
                    eprintln!("{model}: zero-AC {} (identical predictions {})", t.zero_ac, t.identical);
                }
            }
            let p = acf::partition_dataset(
                &items.into_iter().filter(|i| verdicts.iter().any(|v| v.item_id == i.id)).collect::<Vec<_>>(),
                &verdicts,
            )?;
            let mut rows = p.per_source.clone();
            rows.push(p.overall.clone());
            print!("{}", report::ratio_markdown("Audio-contribution split", &rows));
            if let Some(dir) = report_dir {
                write_file(&dir.join("ratios.csv"), report::ratio_csv(&rows)?.as_bytes())?;
            }
        }
        AcfCmd::Partition { items, verdicts, out_dir } => {
            let items: Vec<McqItem> = read_jsonl(items)?;
            let verdicts: Vec<AcVerdict> = read_jsonl(verdicts)?;
            let p = acf::partition_dataset(&items, &verdicts)?;
            let join = |ids: &std::collections::BTreeSet<String>| {
                ids.iter().map(|s| format!("{s}\n")).collect::<String>()
            };
            write_file(&out_dir.join("weak_ids.txt"), join(&p.weak_ids).as_bytes())?;
            write_file(&out_dir.join("strong_ids.txt"), join(&p.strong_ids).as_bytes())?;
            let mut rows = p.per_source.clone();
            rows.push(p.overall.clone());
            write_file(&out_dir.join("ratios.csv"), report::ratio_csv(&rows)?.as_bytes())?;
            let md = report::ratio_markdown("Audio-contribution split", &rows);
            write_file(&out_dir.join("ratios.md"), md.as_bytes())?;
            print!("{md}");
        }
        AcfCmd::BenchSplit { items, verdicts, out } => {
            let items: Vec<McqItem> = read_jsonl(items)?;
            let verdicts: Vec<AcVerdict> = read_jsonl(verdicts)?;
            let split = acf::build_ac_strong_split(&items, &verdicts)?;
            write_jsonl(out, &split)?;
            println!(
                "kept {} of {} ({}%)",
                split.len(),
                items.len(),
                report::format_pct(split.len() as u64, items.len() as u64)
            );
        }
        AcfCmd::ClassifyZero { items, verdicts, backend, out } => {
            let env = Env::load(cli)?;
            let items: Vec<McqItem> = read_jsonl(items)?;
            let mut verdicts: Vec<AcVerdict> = read_jsonl(verdicts)?;
            let r = env.runner()?;
            let unclassified = r.classify_weak(&items, &mut verdicts, backend)?;
            write_jsonl(out, &verdicts)?;
            let weak = verdicts.iter().filter(|v| v.zero_ac_class.is_some()).count();
            let explicit = verdicts
                .iter()
                .filter(|v| v.zero_ac_class == Some(acfforge_core::model::ZeroAcClass::ExplicitLogicalReasoning))
                .count();
            println!(
                "classified {weak} weak items: explicit {explicit} ({}%), unclassified {unclassified}",
                report::format_pct(explicit as u64, weak as u64)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn curriculum_cmd(cli: &Cli, cmd: &CurriculumCmd) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cmd {
        CurriculumCmd::Make { items, verdicts, paradigm, sft_volume, rl_volume, copies, format, out_dir } => {
            let env = Env::load(cli)?;
            let items: Vec<McqItem> = read_jsonl(items)?;
            let verdicts: Vec<AcVerdict> = read_jsonl(verdicts)?;
            let opts = CurriculumOptions {
                paradigms: vec![*paradigm],
                sft_volume: *sft_volume,
                rl_volume: *rl_volume,
                augment_copies: *copies,
                augment_rl: *copies > 0,
                format: parse_format(format)?,
            };
            let mut r = env.runner()?;
            for (p, alloc) in r.curriculum(&items, &verdicts, &opts, out_dir)? {
                println!("{}: sft {} rl {}", p.name(), alloc.sft_ids.len(), alloc.rl_ids.len());
            }
        }
        CurriculumCmd::Augment { input, copies, out } => {
            let items: Vec<McqItem> = read_jsonl(input)?;
            let reps: Vec<McqItem> =
                items.iter().flat_map(|it| curriculum::augment_option_orders(it, *copies, seed)).collect();
            write_jsonl(out, &reps)?;
            println!("{} items → {}", items.len(), reps.len());
        }
        CurriculumCmd::Expand4k { input, out } => {
            let items: Vec<McqItem> = read_jsonl(input)?;
            let expanded: Vec<McqItem> = items.iter().flat_map(curriculum::expand_positionwise).collect();
            write_jsonl(out, &expanded)?;
            println!("{} items → {}", items.len(), expanded.len());
        }
    }
    Ok(())
}
