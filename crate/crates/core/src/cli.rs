//! The `mole` command: argument parsing, config resolution and the
//! subcommand drivers.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_corpus, load_corpus, save_corpus, split_stats, CorpusCounts, CueMask, Split};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, latency_bench, router_analysis, AblationTable, EvalOptions, LatencyConfig,
};
use crate::model::{ModelConfig, TinyLM};
use crate::selfinstruct::{run_pipeline, to_qarecords, MockBackend, RemoteBackend, Retrying, SelfInstructConfig};
use crate::train::{OptimizerKind, TrainConfig, Trainer};

pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected internal failure
  2  invalid command line
  3  file or network I/O failure
  4  corpus or field validation failure
  5  shape or range error
  6  checkpoint config does not match the requested config
  7  self-instruct backend transport failure
  8  degenerate input or violated contract
  9  malformed checkpoint or report file
  10 invalid config file

Environment:
  MOLE_BACKEND_URL    endpoint for --backend remote
  MOLE_BACKEND_TOKEN  bearer token for --backend remote";

/// Every setting a subcommand may use. Loaded from a TOML file, then
/// overridden by flags; the result is written as `config.toml` into each
/// output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Cue letters from `TAVR`.
    pub mask: String,
    pub split: String,
    pub corpus: CorpusCounts,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub latency: LatencyConfig,
    pub self_instruct: SelfInstructConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            mask: "TAVR".into(),
            split: "test".into(),
            corpus: CorpusCounts::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            latency: LatencyConfig::default(),
            self_instruct: SelfInstructConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn cue_mask(&self) -> Result<CueMask> {
        self.mask.parse()
    }

    pub fn split(&self) -> Result<Split> {
        self.split.parse()
    }
}

#[derive(Debug, Parser)]
#[command(name = "mole", version, about = "Mixture-of-laugh-experts training and evaluation", after_help = EXIT_CODES)]
pub struct Cli {
    /// TOML run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Train records per task.
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Run the self-instruct pipeline and write self-instruct records.
    SelfInstruct {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
        /// Accepted instances to produce.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        dedup_threshold: Option<f64>,
    },
    /// Fine-tune a fresh model on the train split.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<String>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score greedy generations on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate one checkpoint under the T and TAVR cue masks.
    Ablate {
        /// Directory holding `model.bin` from `train`.
        #[arg(long)]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Per-task mean router weights.
    RouteAnalyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        mask: Option<String>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Single-expert versus MoLE generation latency.
    Latency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// New tokens per sample.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        samples_per_task: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Schema-check a corpus and print split statistics.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub num_experts: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
}

impl ModelFlags {
    fn is_empty(&self) -> bool {
        self.embed_dim.is_none()
            && self.num_layers.is_none()
            && self.num_heads.is_none()
            && self.max_seq_len.is_none()
            && self.num_experts.is_none()
            && self.rank.is_none()
            && self.alpha.is_none()
            && self.init_std.is_none()
            && self.model_seed.is_none()
    }

    fn apply(&self, m: &mut ModelConfig) {
        set(&mut m.embed_dim, self.embed_dim);
        set(&mut m.num_layers, self.num_layers);
        set(&mut m.num_heads, self.num_heads);
        set(&mut m.max_seq_len, self.max_seq_len);
        set(&mut m.num_experts, self.num_experts);
        set(&mut m.rank, self.rank);
        set(&mut m.alpha, self.alpha);
        set(&mut m.init_std, self.init_std);
        set(&mut m.seed, self.model_seed);
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" | "adaptive-moment" => Ok(OptimizerKind::AdaptiveMoment),
        _ => Err(format!("unknown optimizer {s:?}; expected sgd or adaptive-moment")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Config file contents plus whether it pinned a `[model]` section.
fn load_config(path: Option<&Path>) -> Result<(RunConfig, bool)> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), false));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let cfg = RunConfig::from_toml(&text)?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok((cfg, table.contains_key("model")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    ensure_dir(dir)?;
    write(&dir.join("config.toml"), &cfg.to_toml()?)
}

/// Load a checkpoint, rejecting it if its config differs from one the user
/// pinned through the config file or flags.
fn load_checkpoint(path: &Path, cfg: &RunConfig, pinned: bool) -> Result<TinyLM> {
    let model = TinyLM::load(path)?;
    if pinned && model.config() != &cfg.model {
        return Err(Error::ConfigMismatch(format!(
            "{} was trained with {:?}, but {:?} was requested",
            path.display(),
            model.config(),
            cfg.model
        )));
    }
    Ok(model)
}

/// Parse `args` and run the subcommand.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            std::process::exit(code);
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    let (mut cfg, model_in_file) = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::SynthData { out, train, val, test } => {
            for task in [&mut cfg.corpus.detection, &mut cfg.corpus.classification, &mut cfg.corpus.reasoning] {
                set(&mut task.train, train);
                set(&mut task.val, val);
                set(&mut task.test, test);
            }
            echo_config(&out, &cfg)?;
            let corpus = generate_synthetic_corpus(cfg.seed, &cfg.corpus);
            save_corpus(&corpus, &out.join("corpus.jsonl"))?;
            let stats = split_stats(&corpus);
            write(&out.join("stats.csv"), &stats.to_csv())?;
            print!("{}", stats.to_text());
        }
        Command::SelfInstruct {
            out,
            backend,
            target,
            dedup_threshold,
        } => {
            set(&mut cfg.self_instruct.target, target);
            set(&mut cfg.self_instruct.dedup_threshold, dedup_threshold);
            if cli.seed.is_some() {
                cfg.self_instruct.seed = cfg.seed;
            }
            echo_config(&out, &cfg)?;
            let output = match backend {
                BackendKind::Mock => run_pipeline(&MockBackend, &cfg.self_instruct)?,
                BackendKind::Remote => {
                    let remote = Retrying {
                        inner: RemoteBackend::from_env()?,
                        retries: 3,
                        base_delay: std::time::Duration::from_millis(500),
                    };
                    run_pipeline(&remote, &cfg.self_instruct)?
                }
            };
            let records = to_qarecords(&output.instances, "self-instruct")?;
            save_corpus(&records, &out.join("records.jsonl"))?;
            write(&out.join("task_report.csv"), &output.report.to_csv())?;
            let text = output.report.top_k_text(5);
            write(&out.join("task_report.txt"), &text)?;
            print!("{text}");
            println!("accepted {} records, {} malformed generations", records.len(), output.malformed);
        }
        Command::Train {
            corpus,
            out,
            mask,
            model,
            train,
        } => {
            model.apply(&mut cfg.model);
            set(&mut cfg.mask, mask);
            set(&mut cfg.train.learning_rate, train.lr);
            set(&mut cfg.train.epochs, train.epochs);
            set(&mut cfg.train.batch_size, train.batch_size);
            set(&mut cfg.train.dropout, train.dropout);
            set(&mut cfg.train.optimizer, train.optimizer);
            if train.grad_clip.is_some() {
                cfg.train.grad_clip = train.grad_clip;
            }
            if cli.seed.is_some() {
                cfg.train.seed = cfg.seed;
            }
            let mask = cfg.cue_mask()?;
            echo_config(&out, &cfg)?;
            let records = load_corpus(&corpus)?;
            let mut trainer = Trainer::new(TinyLM::new(cfg.model.clone())?, cfg.train.clone())?;
            let log = trainer.train(&records, mask, |epoch, m| {
                m.save(&out.join(format!("checkpoint-epoch-{epoch}.bin")))
            })?;
            let model = trainer.into_model();
            model.save(&out.join("model.bin"))?;
            write(&out.join("train_log.csv"), &log.to_csv())?;
            let summary = log.summary();
            write(&out.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Eval {
            checkpoint,
            corpus,
            out,
            split,
            mask,
            max_new_tokens,
            model,
        } => {
            model.apply(&mut cfg.model);
            set(&mut cfg.split, split);
            set(&mut cfg.mask, mask);
            set(&mut cfg.eval.max_new_tokens, max_new_tokens);
            let (mask, split) = (cfg.cue_mask()?, cfg.split()?);
            let m = load_checkpoint(&checkpoint, &cfg, model_in_file || !model.is_empty())?;
            echo_config(&out, &cfg)?;
            let records = load_corpus(&corpus)?;
            let report = evaluate(&m, &records, split, mask, &cfg.eval)?;
            write(&out.join(format!("eval_{}_{mask}.csv", split.as_str())), &report.to_csv()?)?;
            let summary = report.summary();
            write(&out.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Ablate {
            checkpoint_dir,
            corpus,
            out,
            split,
            model,
        } => {
            model.apply(&mut cfg.model);
            set(&mut cfg.split, split);
            let split = cfg.split()?;
            let m = load_checkpoint(&checkpoint_dir.join("model.bin"), &cfg, model_in_file || !model.is_empty())?;
            let out = out.unwrap_or_else(|| checkpoint_dir.join("ablation"));
            echo_config(&out, &cfg)?;
            let records = load_corpus(&corpus)?;
            let table = AblationTable::run(&m, &records, split, &[CueMask::TRANSCRIPT_ONLY, CueMask::FULL], &cfg.eval)?;
            let csv = table.to_csv();
            write(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::RouteAnalyze {
            checkpoint,
            corpus,
            out,
            split,
            mask,
            model,
        } => {
            model.apply(&mut cfg.model);
            set(&mut cfg.split, split);
            set(&mut cfg.mask, mask);
            let (mask, split) = (cfg.cue_mask()?, cfg.split()?);
            let m = load_checkpoint(&checkpoint, &cfg, model_in_file || !model.is_empty())?;
            echo_config(&out, &cfg)?;
            let records = load_corpus(&corpus)?;
            let table = router_analysis(&m, &records, split, mask)?;
            let csv = table.to_csv();
            write(&out.join("router.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Latency {
            checkpoint,
            corpus,
            out,
            reps,
            warmup,
            budget,
            samples_per_task,
            model,
        } => {
            model.apply(&mut cfg.model);
            set(&mut cfg.latency.repetitions, reps);
            set(&mut cfg.latency.warmup, warmup);
            set(&mut cfg.latency.budget, budget);
            set(&mut cfg.latency.samples_per_task, samples_per_task);
            let (mask, split) = (cfg.cue_mask()?, cfg.split()?);
            let m = load_checkpoint(&checkpoint, &cfg, model_in_file || !model.is_empty())?;
            echo_config(&out, &cfg)?;
            let records: Vec<_> = load_corpus(&corpus)?.into_iter().filter(|r| r.split == split).collect();
            let table = latency_bench(&m, &records, mask, &cfg.latency)?;
            let csv = table.render(3);
            write(&out.join("latency.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Validate { corpus, out } => {
            let records = load_corpus(&corpus)?;
            let stats = split_stats(&records);
            if let Some(out) = out {
                echo_config(&out, &cfg)?;
                write(&out.join("stats.csv"), &stats.to_csv())?;
            }
            print!("{}", stats.to_text());
            println!("{} records valid", records.len());
        }
    }
    Ok(())
}

/// Entry point for the binary: runs the command and maps errors to exit
/// codes with a one-line diagnostic.
pub fn main() -> ! {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run_from(std::env::args_os()) {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
