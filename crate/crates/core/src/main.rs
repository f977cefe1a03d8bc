use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use signrl::harness::checkpoint::Checkpoint;
use signrl::harness::config::RunConfig;
use signrl::harness::corpus::{generate, read_corpus, read_split, write_corpus};
use signrl::harness::io::{read_file, write_atomic};
use signrl::harness::pipeline::{evaluate, learning_curve, run_pretrain, run_rft, run_sft, StageOutput};
use signrl::harness::HarnessError;
use signrl::metrics::{bleu, corpus_scores, rouge_l, tokenize, Smoothing, TokenMode};

#[derive(Parser)]
#[command(name = "signrl", version, about = "Three-stage sign-to-text training on a synthetic corpus")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` and `corpus.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `score`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a corpus into --out.
    Gen,
    /// Contrastive plus translation pre-training.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tuning over fused cues from a pretrain checkpoint.
    Sft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
    },
    /// GRPO fine-tuning from a merged sft checkpoint.
    Rft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
    },
    /// Beam-decode a split and score it, or trace a curve over step checkpoints.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file, or a directory of step checkpoints with --every.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Emit a (step, bleu4) CSV over every N-th step checkpoint.
        #[arg(long)]
        every: Option<u64>,
    },
    /// Score line-aligned candidate and reference files.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value = "latin-word")]
        mode: TokenMode,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse(&text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.corpus.seed = seed;
    }
    Ok(cfg)
}

fn text(p: &Path) -> Result<String, HarnessError> {
    String::from_utf8(read_file(p)?).map_err(|e| HarnessError::Format(format!("{}: {e}", p.display())))
}

fn out_dir(cli: &Cli) -> Result<&Path, HarnessError> {
    let dir = cli.out.as_deref().ok_or_else(|| HarnessError::Config("--out is required".into()))?;
    std::fs::create_dir_all(dir)?;
    Ok(dir)
}

fn save_stage(dir: &Path, name: &str, out: &StageOutput) -> Result<serde_json::Value, HarnessError> {
    let ck = dir.join(format!("{name}.rvck"));
    out.checkpoint.save(&ck)?;
    write_atomic(&dir.join(format!("{name}.log.jsonl")), out.log.to_jsonl().as_bytes())?;
    Ok(json!({ "stage": name, "checkpoint": ck, "dev_bleu4": out.dev_bleu4 }))
}

fn run(cli: &Cli) -> Result<serde_json::Value, HarnessError> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Gen => {
            let dir = out_dir(cli)?;
            let corpus = generate(&cfg.corpus)?;
            write_corpus(dir, &corpus)?;
            Ok(json!({ "train": corpus.train.len(), "dev": corpus.dev.len(), "test": corpus.test.len() }))
        }
        Cmd::Pretrain { data } => {
            let out = run_pretrain(&cfg, &read_corpus(data)?)?;
            save_stage(out_dir(cli)?, "pretrain", &out)
        }
        Cmd::Sft { data, init } => {
            let out = run_sft(&cfg, &read_corpus(data)?, &Checkpoint::load(init)?)?;
            save_stage(out_dir(cli)?, "sft", &out)
        }
        Cmd::Rft { data, init } => {
            let dir = out_dir(cli)?;
            let out = run_rft(&cfg, &read_corpus(data)?, &Checkpoint::load(init)?, Some(dir))?;
            save_stage(dir, "rft", &out)
        }
        Cmd::Eval { data, ckpt, split, every } => {
            let examples = read_split(data, split)?;
            let dir = out_dir(cli)?;
            if let Some(every) = every {
                let curve = learning_curve(ckpt, &examples, *every)?;
                let mut csv = String::from("step,bleu4\n");
                for (step, b) in &curve {
                    csv.push_str(&format!("{step},{b:.4}\n"));
                }
                let path = dir.join(format!("curve-{split}.csv"));
                write_atomic(&path, csv.as_bytes())?;
                return Ok(json!({ "curve": path, "points": curve.len() }));
            }
            let eval = evaluate(&Checkpoint::load(ckpt)?, &examples)?;
            let path = dir.join(format!("eval-{split}.tsv"));
            write_atomic(&path, eval.to_tsv().as_bytes())?;
            Ok(json!({ "split": split, "outputs": path, "report": eval.report }))
        }
        Cmd::Score { candidates, references, mode } => {
            let c = text(candidates)?;
            let r = text(references)?;
            let (c, r): (Vec<&str>, Vec<&str>) = (c.lines().collect(), r.lines().collect());
            if c.len() != r.len() {
                return Err(HarnessError::Format(format!("{} candidate lines vs {} reference lines", c.len(), r.len())));
            }
            let pairs: Vec<_> = c.iter().zip(&r).map(|(c, r)| (tokenize(c, *mode), tokenize(r, *mode))).collect();
            let mut lines = Vec::with_capacity(pairs.len());
            for (h, r) in &pairs {
                lines.push(json!({ "bleu4": bleu(h, r, 4, Smoothing::None)?, "rouge_l": rouge_l(h, r, 1.0)? }));
            }
            let report = json!({ "corpus": corpus_scores(&pairs)?, "lines": lines });
            if let Some(path) = &cli.out {
                write_atomic(path, serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
            }
            Ok(report)
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return fail("usage", first);
        }
    };
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
