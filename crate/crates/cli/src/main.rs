//! `efv`: tokenization, planning, profiling, gradient checks, corpus
//! generation, staged training and evaluation from the command line.
//!
//! Exit status is 0 on success, 1 on a domain or contract error and 2 on a
//! usage error. All randomness flows from `--seed`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use efv_core::backbone::BackboneConfig;
use efv_core::hybridres::{self, Placement};
use efv_core::merge::MergeConfig;
use efv_core::profiler::{self, Emit, FrameGroup, ScenarioConfig};
use efv_core::synth::{self, CorpusConfig};
use efv_core::trainer::{self, Corpus, Model, ModelConfig, StageConfig};
use efv_core::videotok::{self, ResolutionPolicy, Tier};
use efv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "efv", version, about = "Encoder-free video-language model toolkit")]
struct Cli {
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Default directory for generated files.
    #[arg(long, global = true, env = "EFV_OUT_DIR", default_value = "efv-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 672 high edge, 336 low edge.
    Runtime,
    /// 672 high edge, 224 low edge.
    Table5,
}

impl Preset {
    fn policy(self) -> ResolutionPolicy {
        match self {
            Preset::Runtime => ResolutionPolicy::runtime(),
            Preset::Table5 => ResolutionPolicy::table5(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TierArg {
    High,
    Low,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitArg {
    Csv,
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a clip (PPM frame directory or ELVT tensor) into JSON lines.
    Tokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "high")]
        tier: TierArg,
        #[arg(long, value_enum, default_value = "runtime")]
        preset: Preset,
        /// Write the token stream here and print only counts.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Assign high/low tiers to frames and predict the visual token count.
    Plan {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        high: usize,
        #[arg(long)]
        low: usize,
        #[arg(long, value_enum, default_value = "table5")]
        preset: Preset,
        /// uniform, first-k or stride:N
        #[arg(long, default_value = "uniform")]
        placement: String,
        /// Source frame size as HxW; defaults to square at the high edge.
        #[arg(long)]
        source: Option<String>,
        /// Print the whole plan as JSON instead of the count.
        #[arg(long)]
        json: bool,
    },
    /// Analytic FLOPs scenario table, or a measured prefill on the toy model.
    Profile {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        frames: Vec<usize>,
        #[arg(long, value_enum, default_value = "table")]
        emit: EmitArg,
        /// Time prefill with and without merging instead of the table.
        #[arg(long)]
        measure: bool,
        /// Frame edge in pixels for the measured run.
        #[arg(long, default_value_t = 672)]
        edge: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        /// Threads for independent frame counts in the table.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Finite-difference check of the full training pipeline.
    Gradcheck {
        /// Use the smallest model (8×8 frames, width 16).
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 1)]
        instances: u64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 4)]
        coords: usize,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output directory; defaults to `<out-dir>/corpus-s<stage>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        corpus: PathBuf,
        /// Stage config as TOML; defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint of the previous stage; stage 1 starts fresh without it.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory; defaults to `<out-dir>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact-match QA accuracy of a checkpoint on a stage-3 corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also write every prediction as JSON here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Token counts, FLOPs and (optionally) QA accuracy across merge ratios, as CSV.
    MergeSweep {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        /// Checkpoint and stage-3 corpus for the accuracy column.
        #[arg(long, requires = "corpus")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        corpus: Option<PathBuf>,
    },
}

fn parse_placement(s: &str) -> Result<Placement> {
    match s {
        "uniform" => Ok(Placement::Uniform),
        "first-k" => Ok(Placement::FirstK),
        _ => match s.strip_prefix("stride:").and_then(|n| n.parse().ok()) {
            Some(step) => Ok(Placement::Stride(step)),
            None => Err(Error::Input(format!("unknown placement {s:?}; use uniform, first-k or stride:N"))),
        },
    }
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Input(format!("source size {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_tokenize(input: &Path, tier: TierArg, preset: Preset, output: Option<&Path>) -> Result<()> {
    let policy = preset.policy();
    let tier = match tier {
        TierArg::High => Tier::High,
        TierArg::Low => Tier::Low,
    };
    let clip = videotok::load_clip(input)?;
    let clip = videotok::resize_to_policy(&clip, &policy, tier)?;
    let stream = videotok::tokenize(&clip, &policy)?;
    let counts = serde_json::to_string(&stream.counts()).expect("counts serialize");
    match output {
        Some(p) => {
            stream.write_jsonl(p)?;
            println!("{counts}");
        }
        None => {
            print!("{}", stream.to_jsonl());
            eprintln!("{counts}");
        }
    }
    Ok(())
}

fn cmd_plan(
    frames: usize,
    high: usize,
    low: usize,
    preset: Preset,
    placement: &str,
    source: Option<&str>,
    as_json: bool,
) -> Result<()> {
    let policy = preset.policy();
    let source = match source {
        Some(s) => parse_hw(s)?,
        None => (policy.max_edge_high, policy.max_edge_high),
    };
    let plan = hybridres::plan(frames, high, low, &policy, parse_placement(placement)?, source)?;
    if as_json {
        println!("{}", plan.to_json());
    } else {
        println!("{}", plan.predicted_tokens);
    }
    Ok(())
}

fn emit_of(e: EmitArg) -> Emit {
    match e {
        EmitArg::Csv => Emit::Csv,
        EmitArg::Json => Emit::Json,
        EmitArg::Table => Emit::Table,
    }
}

fn cmd_profile_table(frames: &[usize], emit: EmitArg, workers: usize) -> Result<()> {
    let cfg = ScenarioConfig::paper_scale();
    let chunk = frames.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<profiler::ScenarioRow>>> = std::thread::scope(|s| {
        let hs: Vec<_> = frames
            .chunks(chunk)
            .map(|part| {
                let cfg = &cfg;
                s.spawn(move || profiler::scenario_table(part, cfg))
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("profile worker panicked")).collect()
    });
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    print!("{}", profiler::render_rows(&rows, emit_of(emit)));
    Ok(())
}

fn cmd_profile_measure(frames: usize, edge: usize, runs: usize, warmups: usize, seed: u64, emit: EmitArg) -> Result<()> {
    let c = profiler::compare_prefill(
        BackboneConfig::toy(),
        &ResolutionPolicy::runtime(),
        frames,
        edge,
        seed,
        warmups,
        runs,
    )?;
    let (m_off, m_on) = (&c.without_merge, &c.with_merge);
    match emit {
        EmitArg::Json => println!("{}", serde_json::to_string_pretty(&c).expect("comparison serializes")),
        EmitArg::Csv => {
            println!("scenario,visual_tokens,median_secs,ttft_secs,analytic_macs,instrumented_macs");
            for (name, m) in [("no-merge", m_off), ("merge", m_on)] {
                println!(
                    "{name},{},{:.6},{:.6},{},{}",
                    c.visual_tokens,
                    m.median_secs,
                    m.ttft_secs,
                    m.analytic.total_macs,
                    m.instrumented_macs
                );
            }
        }
        EmitArg::Table => {
            println!("{:<10} {:>8} {:>12} {:>12} {:>16}", "scenario", "tokens", "prefill s", "TTFT s", "MACs");
            for (name, m) in [("no-merge", m_off), ("merge", m_on)] {
                println!(
                    "{name:<10} {:>8} {:>12.4} {:>12.4} {:>16}",
                    c.visual_tokens,
                    m.median_secs,
                    m.ttft_secs,
                    m.instrumented_macs
                );
            }
        }
    }
    for m in [m_off, m_on] {
        if let Some(a) = &m.advisory {
            eprintln!("advisory: {a}");
        }
    }
    Ok(())
}

fn cmd_gradcheck(tiny: bool, instances: u64, coords: usize, seed: u64) -> Result<()> {
    let cfg = if tiny { ModelConfig::tiny() } else { ModelConfig::toy() };
    let mut worst: f64 = 0.0;
    for i in 0..instances.max(1) {
        let check = trainer::pipeline_grad_check(&cfg, seed + i, coords)?;
        worst = worst.max(check.report.max_rel_error);
    }
    println!("max relative error: {worst:.3e}");
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {worst:.3e} >= 1e-4")))
    }
}

fn cmd_synth(stage: u8, n: usize, frames: usize, size: usize, workers: usize, out: PathBuf, seed: u64) -> Result<()> {
    let cfg = CorpusConfig {
        n,
        stage,
        seed,
        frames,
        height: size,
        width: size,
        shape_size: (size * 3 / 8).max(1),
        workers,
    };
    let recs = synth::make_corpus(&out, &cfg)?;
    println!("{}", serde_json::json!({ "samples": recs.len(), "manifest": out.join(synth::MANIFEST) }));
    Ok(())
}

fn cmd_train(
    stage: u8,
    corpus: &Path,
    config: Option<&Path>,
    init: Option<&Path>,
    out: PathBuf,
    seed: u64,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => StageConfig::load(p)?,
        None => StageConfig::toy(stage)?,
    };
    if cfg.stage != stage {
        return Err(Error::Config(format!("config is for stage {}, --stage is {stage}", cfg.stage)));
    }
    cfg.seed = seed;
    let (corpus_stage, samples) = synth::load_samples(corpus)?;
    let mut model = match init {
        Some(p) => Model::load(p)?,
        None => Model::init(ModelConfig::toy(), seed)?,
    };
    let log = trainer::run_stage(&cfg, &Corpus { stage: corpus_stage, samples }, &mut model, Some(&out))?;
    let log_path = out.join(format!("train_stage{stage}.jsonl"));
    log.write_jsonl(&log_path)?;
    let first = log.steps.first().map(|s| s.l_gen);
    let last = log.steps.last().map(|s| s.l_gen);
    println!(
        "{}",
        serde_json::json!({
            "stage": stage,
            "steps": log.steps.len(),
            "l_gen_first": first,
            "l_gen_last": last,
            "checkpoint": log.checkpoints.last(),
            "hash": model.hash(),
            "log": log_path,
        })
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, corpus: &Path, predictions: Option<&Path>) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let (_, samples) = synth::load_samples(corpus)?;
    let rep = trainer::evaluate_toy(&model, &samples)?;
    if let Some(p) = predictions {
        write_file(p, &serde_json::to_string_pretty(&rep.predictions).expect("predictions serialize"))?;
    }
    println!(
        "{}",
        serde_json::json!({ "total": rep.total, "correct": rep.correct, "accuracy": rep.accuracy })
    );
    Ok(())
}

fn cmd_merge_sweep(ratios: &[f64], frames: usize, checkpoint: Option<&Path>, corpus: Option<&Path>) -> Result<()> {
    let cfg = ScenarioConfig::paper_scale();
    let (rows, cols) = cfg.policy.grid(cfg.policy.max_edge_high, cfg.policy.max_edge_high, Tier::High);
    let groups = [FrameGroup { frames, rows, cols }];
    let depth = cfg.model.depth;
    let dense = profiler::simulate_counts(&groups, &MergeConfig::disabled(), depth, 1.0);
    let dense_flops = profiler::analytic_flops(&dense, &cfg.model, cfg.text_len, "dense")?.total_flops();
    let eval_set = match (checkpoint, corpus) {
        (Some(c), Some(d)) => Some((Model::load(c)?, synth::load_samples(d)?.1)),
        _ => None,
    };
    println!("ratio,final_visual_tokens,mean_visual_tokens,tflops,reduction_vs_no_merge,accuracy");
    for &r in ratios {
        let merge = MergeConfig { ratio: r, ..MergeConfig::default() };
        merge.validate(depth)?;
        let counts = profiler::simulate_counts(&groups, &merge, depth, r);
        let flops = profiler::analytic_flops(&counts, &cfg.model, cfg.text_len, "sweep")?.total_flops();
        let accuracy = match &eval_set {
            Some((model, samples)) => {
                let mut m = model.clone();
                m.set_merge(true);
                m.backbone.config.merge.ratio = r;
                m.config.backbone.merge.ratio = r;
                format!("{:.4}", trainer::evaluate_toy(&m, samples)?.accuracy)
            }
            None => String::new(),
        };
        println!(
            "{r},{},{:.1},{:.3},{:.4},{accuracy}",
            counts.last().copied().unwrap_or(0),
            counts.iter().sum::<usize>() as f64 / depth as f64,
            flops / 1e12,
            1.0 - flops / dense_flops
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Tokenize { input, tier, preset, output } => cmd_tokenize(&input, tier, preset, output.as_deref()),
        Command::Plan { frames, high, low, preset, placement, source, json } => {
            cmd_plan(frames, high, low, preset, &placement, source.as_deref(), json)
        }
        Command::Profile { frames, emit, measure, edge, runs, warmups, workers } => {
            if measure {
                let t = frames.last().copied().unwrap_or(8);
                cmd_profile_measure(t, edge, runs, warmups, seed, emit)
            } else {
                cmd_profile_table(&frames, emit, workers)
            }
        }
        Command::Gradcheck { tiny, instances, coords } => cmd_gradcheck(tiny, instances, coords, seed),
        Command::Synth { stage, n, frames, size, workers, out } => {
            let out = out.unwrap_or_else(|| cli.out_dir.join(format!("corpus-s{stage}")));
            cmd_synth(stage, n, frames, size, workers, out, seed)
        }
        Command::Train { stage, corpus, config, init, out } => {
            cmd_train(stage, &corpus, config.as_deref(), init.as_deref(), out.unwrap_or(cli.out_dir), seed)
        }
        Command::Eval { checkpoint, corpus, predictions } => cmd_eval(&checkpoint, &corpus, predictions.as_deref()),
        Command::MergeSweep { ratios, frames, checkpoint, corpus } => {
            cmd_merge_sweep(&ratios, frames, checkpoint.as_deref(), corpus.as_deref())
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Index(_) => "index",
        Error::Numeric(_) => "numeric",
        Error::Input(_) => "input",
        Error::Contract(_) => "contract",
        Error::Structure(_) => "structure",
        Error::Capacity(_) => "capacity",
        Error::Config(_) => "config",
        Error::Format(_) => "format",
        Error::Io { .. } => "io",
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": error_kind(&e), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
