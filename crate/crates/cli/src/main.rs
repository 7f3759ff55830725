use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use prosody_core::pipeline::corpus::{generate_corpus, CorpusKind, CorpusSizes};
use prosody_core::pipeline::evaluate::{
    compare_trajectories, named_path, run_evaluate, run_extract_style,
};
use prosody_core::pipeline::synth::run_synthesize;
use prosody_core::pipeline::train::{run_train_ser, run_train_tts};
use prosody_core::pipeline::{write_json, Profile, RunConfig};
use prosody_core::ser::StyleLevel;
use prosody_core::tts::{HaltReason, TrainingMode};

/// Exit status of a command that finished but needs attention.
const EXIT_WARNING: u8 = 2;

#[derive(Parser)]
#[command(
    name = "prosody",
    version,
    about = "Expressive TTS training with a style reconstruction loss"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON file overriding profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// Run feature extraction and evaluation on one thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a deterministic synthetic corpus into --out-dir.
    GenSyntheticCorpus {
        #[arg(long)]
        kind: CorpusKind,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Utterances per emotion (ser), in total (tts) or per group (styled6).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Trains the emotion recognizer used as style descriptor.
    TrainSer {
        /// Corpus directory with train.csv and optionally holdout.csv.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Trains the acoustic model.
    TrainTts {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mode: Option<TrainingMode>,
        /// Style level for the style loss or conditioning: L, M, H or LMH.
        #[arg(long)]
        level: Option<StyleLevel>,
        /// Recognizer checkpoint, required by the pl and st modes.
        #[arg(long)]
        ser_ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesizes one sentence.
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
        /// Output WAV; defaults to <out-dir>/synth.wav.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reference recording for style-conditioned models.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Extracts style features of a labelled manifest and scores their clustering.
    ExtractStyle {
        #[arg(long)]
        ser_ckpt: PathBuf,
        /// CSV with id,wav_path,label.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "LMH")]
        level: StyleLevel,
    },
    /// Scores reference/synthesized pairs; one `[name=]pairs.csv` per system.
    Evaluate {
        #[arg(required = true)]
        pairs: Vec<String>,
    },
    /// Aligns trajectory logs (`[name=]trajectory.csv`) and summarizes them.
    CompareTrajectories {
        #[arg(required = true, num_args = 2..)]
        logs: Vec<String>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.profile, g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    if g.single_thread {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .ok();
    }
    let mut cfg = load_config(g)?;
    match cli.command {
        Command::GenSyntheticCorpus { kind, force, count } => {
            let mut sizes = CorpusSizes::default();
            if let Some(n) = count {
                match kind {
                    CorpusKind::Ser => sizes.ser_per_class = n,
                    CorpusKind::Tts => sizes.tts_utterances = n,
                    CorpusKind::Styled6 => sizes.styled_per_group = n,
                }
            }
            let s = generate_corpus(
                kind,
                &g.out_dir,
                cfg.seed,
                sizes,
                cfg.holdout_fraction,
                force,
                g.single_thread,
            )?;
            info!(
                "{} corpus: {} utterances ({} train, {} holdout), {:.1} s",
                s.kind, s.utterances, s.train, s.holdout, s.seconds
            );
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::TrainSer { corpus } => {
            ensure_exists(&corpus, "corpus")?;
            cfg.validate()?;
            let s = run_train_ser(&cfg, &corpus, &g.out_dir, g.single_thread)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::TrainTts {
            corpus,
            mode,
            level,
            ser_ckpt,
            steps,
            resume,
        } => {
            ensure_exists(&corpus, "corpus")?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(l) = level {
                cfg.style_level = l;
            }
            if let Some(n) = steps {
                cfg.tts_train.steps = n;
            }
            let cfg = cfg.resolved();
            cfg.validate()?;
            let every = (cfg.tts_train.steps / 20).max(1);
            let s = run_train_tts(
                &cfg,
                &corpus,
                ser_ckpt.as_deref(),
                &g.out_dir,
                resume.as_deref(),
                g.single_thread,
                |step, b| {
                    if step % every == 0 {
                        info!(
                            "step {step}: frame {:.4} style {:.4} stop {:.4}",
                            b.frame, b.style, b.stop
                        );
                    }
                },
            )?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Synthesize {
            model,
            text,
            out,
            reference,
        } => {
            ensure_exists(&model, "model checkpoint")?;
            let out = out.unwrap_or_else(|| g.out_dir.join("synth.wav"));
            let s = run_synthesize(&cfg, &model, &text, &out, reference.as_deref())?;
            println!("{}", serde_json::to_string(&s)?);
            if s.halt == HaltReason::MaxSteps {
                warn!(
                    "decoder hit the {}-step limit without predicting a stop",
                    s.frames
                );
                return Ok(EXIT_WARNING);
            }
        }
        Command::ExtractStyle {
            ser_ckpt,
            manifest,
            level,
        } => {
            ensure_exists(&ser_ckpt, "recognizer checkpoint")?;
            let levels = run_extract_style(
                &cfg,
                &ser_ckpt,
                &manifest,
                level,
                &g.out_dir,
                g.single_thread,
            )?;
            println!("{}", serde_json::to_string(&levels)?);
        }
        Command::Evaluate { pairs } => {
            let systems: Vec<_> = pairs.iter().map(|p| named_path(p)).collect();
            let o = run_evaluate(&cfg, &systems, &g.out_dir, g.single_thread)?;
            println!("{}", serde_json::to_string(&o.table)?);
            if o.failed_rows() > 0 {
                for (name, r) in &o.reports {
                    for (id, reason) in &r.failures {
                        warn!("{name}/{id}: {reason}");
                    }
                }
                return Ok(EXIT_WARNING);
            }
        }
        Command::CompareTrajectories { logs } => {
            let logs: Vec<(String, PathBuf)> = logs
                .iter()
                .map(|l| match l.split_once('=') {
                    Some(_) => named_path(l),
                    None => (String::new(), PathBuf::from(l)),
                })
                .map(|(name, path)| {
                    if !name.is_empty() {
                        return Ok((name, path));
                    }
                    let first = prosody_core::loss::read_trajectory(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let mode = first
                        .first()
                        .map(|r| r.mode.to_string())
                        .unwrap_or_default();
                    Ok((mode, path))
                })
                .collect::<Result<_>>()?;
            let s = compare_trajectories(&logs, &g.out_dir)?;
            write_json(
                &g.out_dir.join("run.json"),
                &serde_json::json!({ "config_hash": cfg.hash() }),
            )?;
            println!("{}", serde_json::to_string(&s)?);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
