//! Command-line surface: `gen-corpus`, `pretrain`, `finetune`, `eval`,
//! `predict-source`, `inspect`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::corpus::{generate_split, load_corpus, write_directory_corpus, CorpusFormat, CorpusRegistry, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{eval_lm, eval_msp, EvalOptions, SpMode};
use crate::finetune::{
    finetune, prepare_task, task_metric, ModelPredictor, SourcePredictor, SpAssignment, TaskDataset,
};
use crate::model::ModelState;
use crate::persist::{
    load_checkpoint, save_checkpoint, write_atomic, Checkpoint, Manifest, NamingRecord, Precision, RngState,
    RunConfig, TaskRecord,
};
use crate::pretrain::{Placement, Pretrainer, Prompter, SpTokenMode};
use crate::tokenizer::Vocabulary;

/// Environment variable that overrides every configured seed.
pub const SEED_ENV: &str = "SPLM_SEED";

#[derive(Parser, Debug)]
#[command(name = "splm", version, about = "Source-prompted language-model pre-training")]
struct Cli {
    /// Worker threads for batch scoring and preparation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Bits {
    #[value(name = "32")]
    B32,
    #[value(name = "64")]
    B64,
}

impl From<Bits> for Precision {
    fn from(b: Bits) -> Self {
        match b {
            Bits::B32 => Precision::F32,
            Bits::B64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SpEval {
    With,
    Without,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic corpus from a generator spec.
    GenCorpus {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write held-out documents, if the spec asks for any.
        #[arg(long)]
        heldout_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train a model on a corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "dir")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "32")]
        precision: Bits,
    },
    /// Fine-tune a checkpoint on a task file.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// none | manual:<NAME> | auto | random[:<seed>]
        #[arg(long, default_value = "none")]
        sp_mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint used for auto assignment; defaults to --checkpoint.
        #[arg(long)]
        source_model: Option<PathBuf>,
        /// Defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "32")]
        precision: Bits,
    },
    /// Evaluate a checkpoint on a corpus (LM loss) or a task (test metric).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "task", required_unless_present = "task")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "dir")]
        format: String,
        #[arg(long)]
        task: Option<PathBuf>,
        /// Corpus mode: score with or without the true source prompt.
        #[arg(long, value_enum)]
        sp: Option<SpEval>,
        /// Also report masked-source-prediction accuracy.
        #[arg(long)]
        msp: bool,
        /// Task mode: overrides the assignment recorded at fine-tuning.
        #[arg(long)]
        sp_mode: Option<String>,
        #[arg(long)]
        source_model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Print one predicted source name per input line.
    PredictSource {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Runs the CLI with process stdout/stderr.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Runs the CLI writing to the given streams; returns the exit code.
pub fn run_cli_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build();
    let mut buf: Vec<u8> = Vec::new();
    let result = match pool {
        Ok(pool) => pool.install(|| dispatch(cli.command, &mut buf)),
        Err(e) => Err(Error::Usage(format!("cannot start thread pool: {e}"))),
    };
    let _ = out.write_all(&buf);
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Usage(_) => 1,
                _ => 2,
            }
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = env_seed()? {
        c.set_seed(s);
    }
    Ok(c)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let say = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cmd {
        Command::GenCorpus {
            spec,
            out: dir,
            heldout_out,
            seed,
        } => {
            let seed = env_seed()?.unwrap_or(seed);
            let s = SyntheticSpec::load(&spec)?;
            let mut m = Manifest::start(
                "gen-corpus",
                vec![("spec", s.to_text()), ("seed", seed.to_string())],
                seed,
            );
            m.add_input(&spec)?;
            m.artifacts.push(dir.clone());
            m.artifacts.extend(heldout_out.clone());
            let mpath = Manifest::path_for(&dir);
            m.save(&mpath)?;
            let (train, heldout) = generate_split(&s, seed)?;
            write_directory_corpus(&train, &dir)?;
            if let Some(h) = &heldout_out {
                write_directory_corpus(&heldout, h)?;
            }
            m.corpus_digest = train.digest().into_iter().collect();
            m.finish();
            m.save(&mpath)?;
            say(
                out,
                format!(
                    "wrote {} documents from {} sources to {}",
                    train.total_documents(),
                    train.num_sources(),
                    dir.display()
                ),
            );
            Ok(())
        }
        Command::Pretrain {
            config,
            corpus,
            format,
            out: ckpt_path,
            metrics,
            precision,
        } => {
            let cfg = run_config(config.as_deref())?;
            let format: CorpusFormat = format.parse()?;
            let registry = load_corpus(&corpus, format, cfg.naming.clone())?;
            let metrics = metrics.unwrap_or_else(|| sibling(&ckpt_path, ".metrics.csv"));
            let mut m = Manifest::start("pretrain", cfg.entries(), cfg.pretrain.seed);
            m.add_input(&corpus)?;
            if let Some(c) = &config {
                m.add_input(c)?;
            }
            m.corpus_digest = registry.digest().into_iter().collect();
            m.artifacts = vec![ckpt_path.clone(), metrics.clone()];
            let mpath = Manifest::path_for(&ckpt_path);
            m.save(&mpath)?;

            let vocab = Vocabulary::build(&registry, &cfg.vocab)?;
            let mcfg = cfg.model.config(vocab.len());
            let mut model = ModelState::init(mcfg, cfg.pretrain.seed)?;
            let mut trainer = Pretrainer::new(&mut model, &vocab, &registry, cfg.pretrain.clone())?;
            trainer.run()?;
            let (log, adam) = trainer.into_parts();
            let ckpt = Checkpoint {
                model,
                vocab,
                naming: NamingRecord {
                    policy: cfg.naming.clone(),
                    registered: registry.names(),
                },
                task: None,
                rng: RngState {
                    seed: cfg.pretrain.seed,
                    step: adam.step,
                },
                adam: Some(adam),
            };
            save_checkpoint(&ckpt, &ckpt_path, precision.into())?;
            write_text(&metrics, &log.to_csv())?;
            m.finish();
            m.save(&mpath)?;
            let last = log.last().map_or(f64::NAN, |r| r.loss);
            say(
                out,
                format!(
                    "pre-trained {} steps ({} parameters); final loss {last:.4}; checkpoint {}",
                    cfg.pretrain.steps,
                    ckpt.model.num_parameters(),
                    ckpt_path.display()
                ),
            );
            Ok(())
        }
        Command::Finetune {
            checkpoint,
            task,
            sp_mode,
            out: out_path,
            config,
            source_model,
            metrics,
            precision,
        } => {
            let cfg = run_config(config.as_deref())?;
            let assignment = SpAssignment::parse(&sp_mode, cfg.finetune.seed)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let dataset = TaskDataset::load(&task)?;
            let metrics = metrics.unwrap_or_else(|| sibling(&out_path, ".metrics.csv"));
            let mut m = Manifest::start("finetune", cfg.entries(), cfg.finetune.seed);
            m.config.insert("sp_mode".into(), assignment.to_string());
            m.add_input(&checkpoint)?;
            m.add_input(&task)?;
            if let Some(s) = &source_model {
                m.add_input(s)?;
            }
            m.artifacts = vec![out_path.clone(), metrics.clone()];
            let mpath = Manifest::path_for(&out_path);
            m.save(&mpath)?;

            let source_ckpt = match &source_model {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            let predictor_model = source_ckpt.as_ref().unwrap_or(&ckpt);
            let data = task_data(&ckpt, &dataset, &assignment, &cfg, predictor_model)?;
            let (model, report) = finetune(&ckpt.model, &ckpt.vocab, &data, &cfg.finetune)?;
            let tuned = Checkpoint {
                model,
                vocab: ckpt.vocab.clone(),
                naming: ckpt.naming.clone(),
                task: Some(TaskRecord {
                    kind: dataset.kind,
                    labels: dataset.labels.clone(),
                    sp_mode: assignment.to_string(),
                }),
                adam: None,
                rng: RngState {
                    seed: cfg.finetune.seed,
                    step: 0,
                },
            };
            save_checkpoint(&tuned, &out_path, precision.into())?;
            write_text(&metrics, &report.to_csv())?;
            m.finish();
            m.save(&mpath)?;
            match &report.test {
                Some(t) => say(out, format!("fine-tuned; test {} = {:.4}", t.name, t.value)),
                None => say(out, "fine-tuned (0 epochs)".into()),
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            corpus,
            format,
            task,
            sp,
            msp,
            sp_mode,
            source_model,
            config,
            report,
        } => {
            let cfg = run_config(config.as_deref())?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut m = Manifest::start("eval", cfg.entries(), cfg.pretrain.seed);
            m.add_input(&checkpoint)?;
            m.artifacts = vec![report.clone()];
            let mpath = Manifest::path_for(&report);
            if let Some(corpus) = corpus {
                let registry = load_corpus(&corpus, format.parse()?, ckpt.naming.policy.clone())?;
                check_sources(&registry, &ckpt.naming)?;
                m.add_input(&corpus)?;
                m.corpus_digest = registry.digest().into_iter().collect();
                let knows = ckpt.model.source_training.as_ref().is_some_and(|s| s.knows_sources());
                let mode = match sp {
                    Some(SpEval::With) => SpMode::WithSp,
                    Some(SpEval::Without) => SpMode::WithoutSp,
                    None if knows => SpMode::WithSp,
                    None => SpMode::WithoutSp,
                };
                m.config.insert("sp".into(), format!("{mode:?}"));
                m.save(&mpath)?;
                let opts = EvalOptions {
                    rotation: cfg.eval_rotation,
                    batch_size: cfg.eval_batch_size,
                    max_len: cfg.pretrain.max_len,
                    placement: cfg.pretrain.placement,
                    token_mode: cfg.pretrain.sp_token_mode,
                };
                let mut r = eval_lm(&ckpt.model, &ckpt.vocab, &registry, mode, &opts)?;
                if msp {
                    r.msp_accuracy = Some(eval_msp(&ckpt.model, &ckpt.vocab, &registry, &opts)?);
                }
                write_text(&report, &r.to_csv())?;
                let _ = write!(out, "{}", r.to_table());
            } else {
                let task = task.expect("clap enforces --corpus or --task");
                let rec = ckpt
                    .task
                    .clone()
                    .ok_or_else(|| Error::Data("checkpoint was not fine-tuned on a task".into()))?;
                let dataset = TaskDataset::load(&task)?;
                if dataset.kind != rec.kind || dataset.labels != rec.labels {
                    return Err(Error::Data("task file differs from the one the checkpoint was tuned on".into()));
                }
                let assignment = SpAssignment::parse(sp_mode.as_deref().unwrap_or(&rec.sp_mode), cfg.finetune.seed)?;
                m.config.insert("sp_mode".into(), assignment.to_string());
                m.add_input(&task)?;
                m.save(&mpath)?;
                let source_ckpt = match &source_model {
                    Some(p) => Some(load_checkpoint(p)?),
                    None => None,
                };
                let data = task_data(&ckpt, &dataset, &assignment, &cfg, source_ckpt.as_ref().unwrap_or(&ckpt))?;
                let t = task_metric(&ckpt.model, &ckpt.vocab, &data, &data.test, cfg.eval_batch_size)?;
                let text = format!("split,examples,metric,value\ntest,{},{},{}\n", data.test.len(), t.name, t.value);
                write_text(&report, &text)?;
                say(out, format!("test {} = {:.4} over {} examples", t.name, t.value, data.test.len()));
            }
            m.finish();
            m.save(&mpath)?;
            Ok(())
        }
        Command::PredictSource {
            checkpoint,
            input,
            out: dest,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let st = ckpt
                .model
                .source_training
                .as_ref()
                .ok_or_else(|| Error::Data("model has no source knowledge".into()))?;
            let prompter = Prompter::new(&ckpt.vocab, st.placement, st.token_mode)?;
            let causal = usize::from(ckpt.model.config.architecture == crate::model::Architecture::DecoderOnly);
            let room = ckpt.model.config.max_seq_len.saturating_sub(prompter.sp_len() + 1 + causal).max(1);
            let bodies: Vec<Vec<u32>> = text
                .lines()
                .map(|l| {
                    let mut ids = ckpt.vocab.encode(l);
                    ids.truncate(room);
                    ids
                })
                .collect();
            let pred = crate::finetune::predict_sources(&ckpt.model, &ckpt.vocab, &bodies, 32)?;
            let mut lines = String::new();
            for k in pred {
                lines.push_str(&ckpt.naming.registered[k]);
                lines.push('\n');
            }
            match dest {
                Some(p) => write_text(&p, &lines)?,
                None => {
                    let _ = write!(out, "{lines}");
                }
            }
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let _ = write!(out, "{}", inspect(&ckpt));
            Ok(())
        }
    }
}

fn check_sources(registry: &CorpusRegistry, naming: &NamingRecord) -> Result<()> {
    if registry.names() != naming.registered {
        return Err(Error::Data(format!(
            "corpus sources [{}] differ from the checkpoint's [{}]",
            registry.names().join(", "),
            naming.registered.join(", ")
        )));
    }
    Ok(())
}

fn task_data(
    ckpt: &Checkpoint,
    dataset: &TaskDataset,
    assignment: &SpAssignment,
    cfg: &RunConfig,
    source: &Checkpoint,
) -> Result<crate::finetune::FinetuneData> {
    let (placement, mode) = match &ckpt.model.source_training {
        Some(st) => (st.placement, st.token_mode),
        None => (Placement::Start, SpTokenMode::Reserved),
    };
    let prompter = Prompter::new(&ckpt.vocab, placement, mode)?;
    if *assignment == SpAssignment::Auto && source.vocab.source_names() != ckpt.vocab.source_names() {
        return Err(Error::Data("source model has different sources".into()));
    }
    let predictor = ModelPredictor {
        model: &source.model,
        vocab: &source.vocab,
        batch_size: cfg.eval_batch_size,
    };
    prepare_task(
        dataset,
        &ckpt.model,
        &ckpt.vocab,
        &prompter,
        assignment,
        &ckpt.naming.registered,
        Some(&predictor as &dyn SourcePredictor),
        &cfg.finetune,
    )
}

/// Human-readable summary of a checkpoint.
pub fn inspect(ckpt: &Checkpoint) -> String {
    let c = &ckpt.model.config;
    let mut s = String::new();
    let mut line = |k: &str, v: String| s.push_str(&format!("{k:<20} {v}\n"));
    line("architecture", c.architecture.to_string());
    line("d_model", c.d_model.to_string());
    line("n_layers", c.n_layers.to_string());
    line("n_heads", c.n_heads.to_string());
    line("d_ff", c.d_ff.to_string());
    line("max_seq_len", c.max_seq_len.to_string());
    line("vocab_size", c.vocab_size.to_string());
    line("classifier_classes", c.classifier_classes.to_string());
    line("parameters", ckpt.model.num_parameters().to_string());
    line("naming", ckpt.naming.policy.to_string());
    let pairs: Vec<String> = ckpt
        .naming
        .registered
        .iter()
        .zip(ckpt.vocab.source_names())
        .map(|(r, d)| if r == d { r.clone() } else { format!("{r} ({d})") })
        .collect();
    line("sources", pairs.join(", "));
    match &ckpt.model.source_training {
        Some(t) => line(
            "source_prompts",
            format!(
                "rho={} P={} placement={} mode={}",
                t.include_prob, t.mask_prob, t.placement, t.token_mode
            ),
        ),
        None => line("source_prompts", "none".into()),
    }
    if let Some(t) = &ckpt.task {
        line("task", format!("{} labels=[{}] sp_mode={}", t.kind, t.labels.join(","), t.sp_mode));
    }
    line(
        "optimizer",
        ckpt.adam.as_ref().map_or("none".into(), |a| format!("adam step {}", a.step)),
    );
    line("seed", ckpt.rng.seed.to_string());
    let layout = ckpt.model.layout();
    for (n, shape) in layout.names.iter().zip(&layout.shapes) {
        s.push_str(&format!("  {n:<28} {shape:?}\n"));
    }
    s
}
