//! `mcnmt`: batch front end for training, translation, evaluation, channel
//! ablation and gradient checking. One command per process; every run is
//! reproducible from the config file, the seed and the input files, and the
//! resolved config is written next to the artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcnmt_core::checkpoint::{load_checkpoint, peek_vocab_refs};
use mcnmt_core::checks;
use mcnmt_core::config::RunConfig;
use mcnmt_core::corpus::{filter_pairs, read_lines, read_parallel, Vocabulary};
use mcnmt_core::evaluation::{
    ablation_csv, ablation_suite, ablation_table, bleu, length_buckets, token_accuracy,
    ALL_CONFIGS, DEFAULT_THRESHOLDS,
};
use mcnmt_core::inference::translate_corpus;
use mcnmt_core::model::Model;
use mcnmt_core::rng::{streams, Rng};
use mcnmt_core::task::{generate, TaskData, TaskKind, TaskSpec};
use mcnmt_core::training::{append_trace, fit, fit_from, write_trace, AdamState, TrainConfig};

#[derive(Parser)]
#[command(name = "mcnmt", version, about = "Multi-channel encoder NMT toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a model; writes checkpoints, a loss trace and the resolved config.
    Train(TrainArgs),
    /// Beam-search a tokenized input file through a trained checkpoint.
    Translate(TranslateArgs),
    /// Translate the test set and score it with corpus BLEU.
    Evaluate(EvaluateArgs),
    /// Train every channel configuration on one synthetic task and rank them.
    Ablate(AblateArgs),
    /// Finite-difference audit of every operation's gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; every key has a default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key (repeatable), e.g. --set dropout=0.3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Fixed learning rate replacing the warmup schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// Set e, d and m at once.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    /// File values first, `--set` pairs next, dedicated flags last.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(v) = self.dim {
            for key in ["e", "d", "m"] {
                pairs.push((key.to_string(), v.to_string()));
            }
        }
        let mut flag = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v));
            }
        };
        flag("beam", self.beam.map(|v| v.to_string()));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("epochs", self.epochs.map(|v| v.to_string()));
        flag("batch", self.batch.map(|v| v.to_string()));
        flag("dropout", self.dropout.map(|v| v.to_string()));
        flag("lr", self.lr.map(|v| v.to_string()));
        flag("out_dir", self.out_dir.as_ref().map(|v| v.display().to_string()));
        cfg.apply_overrides(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TaskArgs {
    /// Generate a synthetic task instead of reading corpus files.
    #[arg(long, value_parser = parse_task_kind)]
    task: Option<TaskKind>,
    #[arg(long, default_value_t = 20)]
    task_words: usize,
    #[arg(long, default_value_t = 3)]
    task_min_len: usize,
    #[arg(long, default_value_t = 10)]
    task_max_len: usize,
    #[arg(long, default_value_t = 1000)]
    task_train: usize,
    #[arg(long, default_value_t = 100)]
    task_test: usize,
    /// Data seed, independent of the training seed so reruns with other
    /// training seeds see the same corpus.
    #[arg(long, default_value_t = 7)]
    task_seed: u64,
}

fn parse_task_kind(s: &str) -> std::result::Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("unknown task {s:?}; use copy or reverse"))
}

impl TaskArgs {
    fn data(&self) -> Result<Option<TaskData>> {
        let Some(kind) = self.task else {
            return Ok(None);
        };
        let spec = TaskSpec {
            kind,
            words: self.task_words,
            min_len: self.task_min_len,
            max_len: self.task_max_len,
            train_pairs: self.task_train,
            test_pairs: self.task_test,
            seed: self.task_seed,
        };
        Ok(Some(generate(&spec)?))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    task: TaskArgs,
    /// Continue from `<out_dir>/last.ckpt` instead of starting fresh.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to decode with; defaults to `<out_dir>/last.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Tokenized source text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Hypothesis file; defaults to `<out_dir>/hypotheses.txt`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Append each hypothesis' length-normalized log-probability.
    #[arg(long)]
    scores: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also report BLEU restricted to sources longer than each threshold.
    #[arg(long)]
    buckets: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    task: TaskArgs,
    /// Training seeds; the report rows are per-config medians across them.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Translate(args) => cmd_translate(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::GradCheck(args) => cmd_grad_check(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn train_config(cfg: &RunConfig, vocab_refs: (String, String)) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        dropout: cfg.dropout,
        d_model: cfg.d,
        warmup: cfg.warmup,
        num_gpus: cfg.num_gpus,
        clip_norm: 1.0,
        seed: cfg.seed,
        checkpoint_every: cfg.checkpoint_every,
        lr_override: cfg.lr,
        keep_best: false,
        fingerprint: cfg.fingerprint(),
        vocab_refs,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Training corpus plus both vocabularies, from the synthetic generator or
/// from the configured files. Vocabulary files land in `out_dir` so later
/// commands can find them through the checkpoint.
fn prepare_training_data(
    cfg: &RunConfig,
    task: &TaskArgs,
    out_dir: &Path,
) -> Result<(Vec<(String, String)>, Vocabulary, Vocabulary)> {
    let (pairs, src_vocab, tgt_vocab) = match task.data()? {
        Some(data) => {
            for (name, set) in [("train", &data.train), ("test", &data.test)] {
                let mut src = String::new();
                let mut tgt = String::new();
                for (s, t) in set {
                    src.push_str(s);
                    src.push('\n');
                    tgt.push_str(t);
                    tgt.push('\n');
                }
                write_text(&out_dir.join(format!("task.{name}.src")), &src)?;
                write_text(&out_dir.join(format!("task.{name}.tgt")), &tgt)?;
            }
            (data.train, data.vocab.clone(), data.vocab)
        }
        None => {
            let (src_path, tgt_path) = match (&cfg.train_src, &cfg.train_tgt) {
                (Some(s), Some(t)) => (s.clone(), t.clone()),
                _ => bail!("train needs train_src and train_tgt in the config, or --task"),
            };
            let pairs = filter_pairs(read_parallel(&src_path, &tgt_path)?, cfg.max_len)?;
            let src_vocab = Vocabulary::build(pairs.iter().map(|(s, _)| s), cfg.src_vocab)?;
            let tgt_vocab = Vocabulary::build(pairs.iter().map(|(_, t)| t), cfg.tgt_vocab)?;
            (pairs, src_vocab, tgt_vocab)
        }
    };
    src_vocab.save(&out_dir.join("vocab.src"))?;
    tgt_vocab.save(&out_dir.join("vocab.tgt"))?;
    Ok((pairs, src_vocab, tgt_vocab))
}

fn new_model(cfg: &RunConfig, src_vocab: usize, tgt_vocab: usize) -> Model<f64> {
    let mut rng = Rng::stream(cfg.seed, streams::INIT, 0);
    Model::with_init_width(
        &mut rng,
        cfg.channels(),
        src_vocab,
        tgt_vocab,
        cfg.zero_init,
        cfg.init_width,
    )
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let (pairs, src_vocab, tgt_vocab) = prepare_training_data(&cfg, &args.task, &out_dir)?;
    println!(
        "training {} on {} pairs (|V| {} -> {})",
        cfg.channels().name(),
        pairs.len(),
        src_vocab.len(),
        tgt_vocab.len()
    );

    let mut model = new_model(&cfg, src_vocab.len(), tgt_vocab.len());
    let mut adam = AdamState::new(&model);
    let tc = train_config(
        &cfg,
        (
            out_dir.join("vocab.src").display().to_string(),
            out_dir.join("vocab.tgt").display().to_string(),
        ),
    );

    let started = Instant::now();
    let output = if args.resume {
        let ckpt = out_dir.join("last.ckpt");
        if !ckpt.exists() {
            bail!("--resume: no checkpoint at {}", ckpt.display());
        }
        let (snap, _) =
            load_checkpoint(&ckpt, tc.fingerprint, &mut model, &mut adam.m, &mut adam.v)?;
        println!("resuming from step {} (epoch {})", snap.step, snap.epoch);
        fit_from(&mut model, &mut adam, snap, &pairs, &src_vocab, &tgt_vocab, &tc, Some(&out_dir))?
    } else {
        fit(&mut model, &mut adam, &pairs, &src_vocab, &tgt_vocab, &tc, Some(&out_dir))?
    };

    let trace_path = out_dir.join("trace.csv");
    if args.resume {
        append_trace(&trace_path, &output.trace)?;
    } else {
        write_trace(&trace_path, &output.trace)?;
    }
    cfg.save_resolved(&out_dir)?;

    for (i, mean) in output.epoch_means.iter().enumerate() {
        println!("epoch {:>3}  mean loss {mean:.6}", output.snapshot.epoch - output.epoch_means.len() as u64 + i as u64 + 1);
    }
    println!(
        "done: {} steps in {:.1}s, best epoch loss {:.6}",
        output.snapshot.step,
        started.elapsed().as_secs_f64(),
        output.snapshot.best_loss
    );
    if let Some(p) = &output.last_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

/// Rebuild the model a checkpoint was trained with: vocabularies from the
/// paths recorded in its header, shapes from the config, tensors from the
/// file. The fingerprint guards against a config that disagrees.
fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Model<f64>, Vocabulary, Vocabulary)> {
    if !ckpt.exists() {
        bail!(
            "no checkpoint at {}; run `mcnmt train` first or pass --checkpoint",
            ckpt.display()
        );
    }
    let (src_ref, tgt_ref) = peek_vocab_refs(ckpt)?;
    let src_vocab = Vocabulary::load(Path::new(&src_ref))
        .with_context(|| format!("source vocabulary {src_ref} referenced by the checkpoint"))?;
    let tgt_vocab = Vocabulary::load(Path::new(&tgt_ref))
        .with_context(|| format!("target vocabulary {tgt_ref} referenced by the checkpoint"))?;
    let mut model = new_model(cfg, src_vocab.len(), tgt_vocab.len());
    let mut adam = AdamState::new(&model);
    load_checkpoint(ckpt, cfg.fingerprint(), &mut model, &mut adam.m, &mut adam.v)?;
    Ok((model, src_vocab, tgt_vocab))
}

fn cmd_translate(args: TranslateArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let ckpt = args.checkpoint.unwrap_or_else(|| cfg.out_dir.join("last.ckpt"));
    let (model, src_vocab, tgt_vocab) = load_model(&cfg, &ckpt)?;
    let lines = read_lines(&args.input)?;
    let translations = translate_corpus(&model, &src_vocab, &tgt_vocab, &lines, cfg.beam)?;

    let mut text = String::new();
    for (hyp, score) in &translations {
        if args.scores {
            text.push_str(&format!("{hyp}\t{score:.6}\n"));
        } else {
            text.push_str(hyp);
            text.push('\n');
        }
    }
    let out_path = args.output.unwrap_or_else(|| cfg.out_dir.join("hypotheses.txt"));
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    write_text(&out_path, &text)?;
    println!("wrote {} hypotheses to {}", translations.len(), out_path.display());
    Ok(())
}

/// Test pairs for evaluate: the synthetic task's held-out split, or the
/// configured test files.
fn test_pairs(cfg: &RunConfig, task: &TaskArgs) -> Result<Vec<(String, String)>> {
    if let Some(data) = task.data()? {
        return Ok(data.test);
    }
    match (&cfg.test_src, &cfg.test_tgt) {
        (Some(s), Some(t)) => Ok(read_parallel(s, t)?),
        _ => bail!("evaluate needs test_src and test_tgt in the config, or --task"),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let ckpt = args.checkpoint.unwrap_or_else(|| cfg.out_dir.join("last.ckpt"));
    let (model, src_vocab, tgt_vocab) = load_model(&cfg, &ckpt)?;
    let pairs = test_pairs(&cfg, &args.task)?;
    let sources: Vec<String> = pairs.iter().map(|(s, _)| s.clone()).collect();
    let references: Vec<String> = pairs.iter().map(|(_, t)| t.clone()).collect();

    let hypotheses: Vec<String> =
        translate_corpus(&model, &src_vocab, &tgt_vocab, &sources, cfg.beam)?
            .into_iter()
            .map(|(h, _)| h)
            .collect();
    let report = bleu(&hypotheses, &references, 4, cfg.lowercase)?;
    let accuracy = token_accuracy(&model, &src_vocab, &tgt_vocab, &pairs)?;
    let buckets = if args.buckets {
        let src_lens: Vec<usize> = sources.iter().map(|s| s.split_whitespace().count()).collect();
        Some(length_buckets(&src_lens, &hypotheses, &references, &DEFAULT_THRESHOLDS)?)
    } else {
        None
    };

    let json = serde_json::json!({
        "bleu": report,
        "token_accuracy": accuracy,
        "buckets": buckets,
        "sentences": pairs.len(),
    });
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_text(&cfg.out_dir.join("evaluation.json"), &serde_json::to_string_pretty(&json)?)?;
    cfg.save_resolved(&cfg.out_dir)?;

    if args.json {
        println!("{}", serde_json::to_string_pretty(&json)?);
        return Ok(());
    }
    println!(
        "BLEU {:.2}  (precisions {}, BP {:.4}, hyp len {}, ref len {})",
        report.bleu,
        report
            .precisions
            .iter()
            .map(|p| format!("{p:.4}"))
            .collect::<Vec<_>>()
            .join("/"),
        report.brevity_penalty,
        report.hyp_len,
        report.ref_len
    );
    println!("token accuracy {:.4} over {} sentences", accuracy, pairs.len());
    if let Some(buckets) = buckets {
        for b in buckets {
            match b.bleu {
                Some(score) => {
                    println!("len > {:>3}: BLEU {score:.2} ({} sentences)", b.threshold, b.sentences)
                }
                None => println!("len > {:>3}: empty bucket", b.threshold),
            }
        }
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let data = args
        .task
        .data()?
        .ok_or_else(|| anyhow!("ablate requires --task copy or --task reverse"))?;
    let kind = args.task.task.unwrap();
    if !(cfg.e == cfg.d && cfg.d == cfg.m) {
        bail!("ablate sweeps all seven configs, so it needs square dims (e == d == m)");
    }
    let base = train_config(&cfg, (String::new(), String::new()));
    let report = ablation_suite::<f64>(
        &data,
        kind.name(),
        cfg.d,
        cfg.init_width,
        &base,
        cfg.beam,
        &ALL_CONFIGS,
        &args.seeds,
    );

    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_text(&cfg.out_dir.join("ablation.csv"), &ablation_csv(&report))?;
    write_text(&cfg.out_dir.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    cfg.save_resolved(&cfg.out_dir)?;

    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", ablation_table(&report));
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let started = Instant::now();
    let rows = checks::run_all(args.seed)?;
    let mut failed = 0;
    for row in &rows {
        println!(
            "{:<28} max rel err {:>10.3e}  worst {:<20} {}",
            row.name,
            row.report.max_rel_err,
            row.report.worst_param,
            if row.passed() { "ok" } else { "FAIL" }
        );
        if !row.passed() {
            failed += 1;
        }
    }
    println!(
        "{} scenarios in {:.2}s, tolerance {:.0e}",
        rows.len(),
        started.elapsed().as_secs_f64(),
        checks::TOLERANCE
    );
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded tolerance");
    }
    Ok(())
}
