use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dynalang::checkpoint::Checkpoint;
use dynalang::runtime::{
    agent_checkpoint, evaluate_agent, load_agent, pretrain_loop, rollout_episode, substream, Agent, Metrics,
    RunConfig, TextCorpus, Trainer, PRESETS,
};
use dynalang::{Error, Result};
use dynalang_envs::{Corpus, Vocab};

/// Train, evaluate and inspect the world-model agent.
///
/// Exit codes: 0 success, 1 I/O or environment failure, 2 configuration
/// or usage error, 3 numerical failure (non-finite loss or gradient).
#[derive(Parser)]
#[command(name = "dynalang", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Act and learn until the configured step budget.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a training checkpoint (its configuration wins).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Text-only world-model training on a corpus.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Tokenizer vocabulary, one token per line (line 0 is padding).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train in an environment starting from a pretrained world model.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint written by `pretrain`.
        #[arg(long)]
        from: PathBuf,
    },
    /// Greedy evaluation episodes on fresh environments.
    Eval {
        #[command(flatten)]
        load: LoadArgs,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Dump real steps with reconstructions and imagined continuations as
    /// JSON lines.
    Rollout {
        #[command(flatten)]
        load: LoadArgs,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Imagined steps per continuation.
        #[arg(long, default_value_t = 15)]
        horizon: usize,
        /// Continuations per real step.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample a text continuation of a prefix.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prefix: String,
        #[arg(long, default_value_t = 10)]
        length: usize,
        /// 0 takes the most likely token at every step.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file or preset name.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; must not exist or be empty.
    #[arg(long)]
    out: PathBuf,
    /// Act and learn on separate threads (not bit-reproducible).
    #[arg(long)]
    threaded: bool,
}

#[derive(Args)]
struct LoadArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override applied to the checkpoint's configuration; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Config(_) | Error::Usage(_) | Error::Data(_) | Error::Checkpoint(_) => 2,
        Error::Shape { .. } | Error::Env(_) | Error::Io(_) => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { run, resume } => train(run, resume),
        Command::Pretrain { run, vocab } => pretrain(run, vocab),
        Command::Finetune { run, from } => finetune(run, from),
        Command::Eval { load, episodes } => eval(load, episodes),
        Command::Rollout {
            load,
            episodes,
            horizon,
            samples,
            output,
        } => rollout(load, episodes, horizon, samples, output),
        Command::Generate {
            checkpoint,
            prefix,
            length,
            temperature,
            vocab,
            seed,
        } => generate(&checkpoint, &prefix, length, temperature, vocab, seed),
    }
}

/// Defaults, then the file or preset, then `--set`, then `--seed`.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let base = match (&args.config, &args.preset) {
        (Some(_), Some(_)) => return Err(Error::Usage("give --config or --preset, not both".into())),
        (None, None) => return Err(Error::Usage("one of --config or --preset is required".into())),
        (None, Some(p)) => RunConfig::preset(p)?,
        (Some(c), None) => {
            let path = Path::new(c);
            if path.is_file() {
                RunConfig::from_toml(&fs::read_to_string(path)?)?
            } else if PRESETS.contains(&c.as_str()) {
                RunConfig::preset(c)?
            } else {
                return Err(Error::Usage(format!(
                    "config {c:?} is neither a file nor a preset ({})",
                    PRESETS.join(", ")
                )));
            }
        }
    };
    let mut cfg = base.with_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.threaded {
        cfg.train.threaded = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory with its resolved config under a temporary
/// name, then renames it into place.
fn create_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Usage(format!("output directory {} is not empty", dir.display())));
    }
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Usage(format!("invalid output directory {}", dir.display())))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    fs::create_dir(tmp.join("checkpoints"))?;
    fs::write(tmp.join("config.toml"), cfg.to_toml())?;
    if dir.exists() {
        fs::remove_dir(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

fn train(args: RunArgs, resume: Option<PathBuf>) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let peek = Trainer::<f32>::resume(&path, None)?;
            create_run_dir(&args.out, &peek.config)?;
            drop(peek);
            Trainer::<f32>::resume(&path, Some(&args.out))?
        }
        None => {
            let cfg = resolve(&args)?;
            create_run_dir(&args.out, &cfg)?;
            Trainer::<f32>::new(cfg, Some(&args.out))?
        }
    };
    trainer.run()?;
    println!(
        "{}",
        json!({
            "env_steps": trainer.env_steps(),
            "updates": trainer.agent.updates(),
            "checkpoint": args.out.join("checkpoints/final.ckpt"),
        })
    );
    Ok(())
}

fn load_vocab(path: Option<&Path>) -> Result<Vocab> {
    match path {
        Some(p) => Ok(Vocab::load(p)?),
        None => Ok(Vocab::default()),
    }
}

fn pretrain(args: RunArgs, vocab: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(&args)?;
    let vocab = load_vocab(vocab.as_deref())?;
    let env = cfg.env.build(0)?;
    if vocab.len() != env.obs_space().vocab {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but the environment observes {}",
            vocab.len(),
            env.obs_space().vocab
        )));
    }
    let p = &cfg.pretrain;
    let (train_docs, heldout) = match &p.corpus {
        Some(path) => {
            let docs = Corpus::parse_text(&fs::read_to_string(path)?);
            if docs.len() <= p.heldout {
                return Err(Error::Usage(format!(
                    "corpus {path} has {} documents, not more than the {} held out",
                    docs.len(),
                    p.heldout
                )));
            }
            let (train, held) = docs.split_at(docs.len() - p.heldout);
            let held_set: std::collections::HashSet<&String> = held.iter().collect();
            let train: Vec<String> = train.iter().filter(|d| !held_set.contains(d)).cloned().collect();
            (train, held.to_vec())
        }
        None => {
            let c = Corpus::generate(cfg.seed, p.documents, p.heldout);
            (c.train, c.heldout)
        }
    };
    let corpus = TextCorpus::new(&train_docs, &heldout, &vocab)?;
    create_run_dir(&args.out, &cfg)?;
    let mut agent = Agent::<f32>::with_model_lr(
        &cfg,
        env.obs_space(),
        env.action_space(),
        p.lr,
        &mut substream(cfg.seed, "init"),
    )?;
    let mut metrics = Metrics::to_file(&args.out.join("metrics.jsonl"))?;
    let report = pretrain_loop(&mut agent, &corpus, p, &mut metrics, &mut substream(cfg.seed, "pretrain"))?;
    let path = args.out.join("checkpoints/pretrained.ckpt");
    agent_checkpoint(&agent, &cfg).save(&path)?;
    println!(
        "{}",
        json!({
            "updates": report.updates,
            "heldout_cross_entropy": report.heldout_cross_entropy,
            "unigram_cross_entropy": report.unigram_cross_entropy,
            "checkpoint": path,
        })
    );
    Ok(())
}

fn finetune(args: RunArgs, from: PathBuf) -> Result<()> {
    let cfg = resolve(&args)?;
    // validate the pretrained model against this config before creating
    // the run directory
    let probe = Trainer::<f32>::new(cfg.clone(), None)?;
    let ckpt = Checkpoint::<f32>::load(&from, &probe.agent.config_hash())?;
    drop(probe);
    create_run_dir(&args.out, &cfg)?;
    let mut trainer = Trainer::<f32>::new(cfg, Some(&args.out))?;
    trainer.agent.load_world_model(&ckpt)?;
    trainer.run()?;
    println!(
        "{}",
        json!({
            "env_steps": trainer.env_steps(),
            "updates": trainer.agent.updates(),
            "checkpoint": args.out.join("checkpoints/final.ckpt"),
        })
    );
    Ok(())
}

fn load(args: &LoadArgs) -> Result<(RunConfig, Agent<f32>)> {
    let (mut cfg, agent) = load_agent::<f32>(&args.checkpoint, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok((cfg, agent))
}

fn eval(args: LoadArgs, episodes: Option<usize>) -> Result<()> {
    let (cfg, agent) = load(&args)?;
    let episodes = episodes.unwrap_or(cfg.train.eval_episodes);
    if episodes == 0 {
        return Err(Error::Usage("episodes must be positive".into()));
    }
    let report = evaluate_agent(&agent, &cfg, episodes, 0)?;
    println!(
        "{}",
        json!({
            "episodes": report.episodes,
            "mean_return": report.mean_return,
            "returns": report.returns,
            "answer_accuracy": report.answer_accuracy(),
        })
    );
    Ok(())
}

fn rollout(args: LoadArgs, episodes: usize, horizon: usize, samples: usize, output: Option<PathBuf>) -> Result<()> {
    if horizon == 0 || samples == 0 {
        return Err(Error::Usage("horizon and samples must be positive".into()));
    }
    let (cfg, agent) = load(&args)?;
    let mut out: Box<dyn Write> = match &output {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut rng = substream(cfg.seed, "rollout");
    for ep in 0..episodes {
        let mut env = cfg.env.build(cfg.seed.wrapping_add(ep as u64))?;
        writeln!(out, "{}", json!({"kind": "episode", "episode": ep, "env": cfg.env.name(), "horizon": horizon}))?;
        rollout_episode(&agent, env.as_mut(), ep, horizon, samples, &mut rng, |step| {
            let mut v = serde_json::to_value(&step).map_err(io::Error::from)?;
            v["kind"] = json!("step");
            writeln!(out, "{v}")?;
            Ok(())
        })?;
    }
    out.flush()?;
    Ok(())
}

fn generate(
    checkpoint: &Path,
    prefix: &str,
    length: usize,
    temperature: f64,
    vocab: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let (cfg, agent) = load_agent::<f32>(checkpoint, &[])?;
    let vocab = load_vocab(vocab.as_deref())?;
    if vocab.len() != agent.wm.obs.vocab {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but the checkpoint's model has {}",
            vocab.len(),
            agent.wm.obs.vocab
        )));
    }
    let prefix = vocab.tokenize(prefix);
    let mut rng = substream(seed.unwrap_or(cfg.seed), "generate");
    let ids = agent.wm.generate(&agent.wm_store, &prefix, length, temperature, &mut rng)?;
    if !ids.is_empty() {
        println!("{}", vocab.detokenize(&ids));
    }
    Ok(())
}
