//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input errors,
//! 3 for runtime failures such as divergence.

pub mod config;
pub mod eval;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::decoding::{generate, GenerationResult};
use crate::duration::{
    estimate_from_rate, estimate_from_reference, target_token_count, DurationEstimate, RateTable,
};
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::synthcorpus::{generate_corpus, prompt_for, read_jsonl, write_jsonl, Codebook, CorpusConfig, Utterance};
use crate::training::{train, TrainPaths};
pub use config::{EvalConfig, RunConfig};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pmtts", version, about = "Duration-controlled codec language model at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus as JSON Lines plus a manifest.
    Corpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Generate audio tokens for one text.
    Generate(GenerateArgs),
    /// Oracle-length evaluation of a split.
    Eval {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        pm_rope: Toggle,
        /// Scatter CSV; defaults to the report path with a .csv extension.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Paired evaluation with progress rotation on and off.
    Ablate {
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Estimate a target duration and token count.
    Duration(DurationArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory written by `corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated text symbol ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub text: Vec<usize>,
    /// Render the voice prompt in this style (needs --corpus).
    #[arg(long, requires = "corpus", conflicts_with = "prompt")]
    pub style: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated prompt audio tokens.
    #[arg(long, value_delimiter = ',')]
    pub prompt: Option<Vec<usize>>,
    #[arg(long, conflicts_with = "oracle_length", required_unless_present = "oracle_length")]
    pub target_seconds: Option<f64>,
    #[arg(long)]
    pub oracle_length: Option<usize>,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub pm_rope: Toggle,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frame_rate: Option<u32>,
}

#[derive(Debug, Args)]
pub struct DurationArgs {
    #[arg(long, requires_all = ["ref_units"], conflicts_with = "lang")]
    pub ref_seconds: Option<f64>,
    #[arg(long, requires = "ref_seconds")]
    pub ref_units: Option<usize>,
    #[arg(long, required_unless_present = "ref_seconds")]
    pub lang: Option<String>,
    #[arg(long)]
    pub tgt_units: usize,
    #[arg(long, default_value_t = crate::duration::DEFAULT_FRAME_RATE)]
    pub frame_rate: u32,
}

/// Written next to the corpus splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: CorpusConfig,
    pub codebook: Codebook,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub const MANIFEST: &str = "manifest.json";

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::file(&path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    if !["train", "val", "test"].contains(&split) {
        return Err(Error::invalid(format!("unknown split {split:?} (expected train, val or test)")));
    }
    read_jsonl(&dir.join(format!("{split}.jsonl")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::file(path))
}

pub fn cmd_corpus(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    fs::create_dir_all(out).map_err(Error::file(out))?;
    let (codebook, splits) = generate_corpus(&cfg.corpus)?;
    write_jsonl(&out.join("train.jsonl"), &splits.train)?;
    write_jsonl(&out.join("val.jsonl"), &splits.val)?;
    write_jsonl(&out.join("test.jsonl"), &splits.test)?;
    let manifest = Manifest {
        seed: cfg.corpus.seed,
        config: cfg.corpus.clone(),
        codebook,
        counts: SplitCounts {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn cmd_train(cfg: &RunConfig, corpus: &Path, out: &Path, loss_csv: Option<&Path>) -> Result<()> {
    let manifest = read_manifest(corpus)?;
    let train_set = read_split(corpus, "train")?;
    let val_set = read_split(corpus, "val")?;
    let paths = TrainPaths {
        checkpoint: Some(out.to_path_buf()),
        loss_curve: Some(loss_csv.map_or_else(|| out.with_extension("csv"), Path::to_path_buf)),
    };
    let started = std::time::Instant::now();
    let outcome = train(&train_set, &val_set, &manifest.codebook, &cfg.train, &cfg.model, &paths, |p| {
        eprintln!(
            "step {:>6}  train {:.4}  val {:.4}  {:>7.1}s",
            p.step,
            p.train_loss,
            p.val_loss,
            started.elapsed().as_secs_f64()
        );
    })?;
    eprintln!(
        "best validation loss {:.4} at step {}; checkpoint {}",
        outcome.best_val_loss,
        outcome.best_step,
        out.display()
    );
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerationResult> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let mut model = checkpoint::load(&args.checkpoint)?;
    model.set_pm_rope(args.pm_rope == Toggle::On);
    let frame_rate = args.frame_rate.unwrap_or(cfg.eval.frame_rate);
    let target_len = match (args.oracle_length, args.target_seconds) {
        (Some(n), _) if n > 0 => n,
        (Some(_), _) => return Err(Error::invalid("--oracle-length must be at least 1")),
        (None, Some(s)) if s > 0.0 && s.is_finite() => target_token_count(
            &DurationEstimate {
                seconds: s,
                source: crate::duration::EstimateSource::ReferenceRatio,
            },
            frame_rate,
        ),
        _ => return Err(Error::invalid("--target-seconds must be positive")),
    };
    let prompt = match (&args.prompt, args.style, &args.corpus) {
        (Some(p), _, _) => p.clone(),
        (None, Some(style), Some(dir)) => {
            let manifest = read_manifest(dir)?;
            let utt = Utterance {
                text: args.text.clone(),
                style_id: style,
                stretch: 1,
                audio: Vec::new(),
                duration_tokens: 0,
            };
            prompt_for(&utt, &manifest.codebook, cfg.train.prompt_symbols)?
        }
        _ => Vec::new(),
    };
    let sampler = crate::decoding::SamplerConfig {
        top_k: args.top_k.unwrap_or(cfg.sampler.top_k),
        top_p: args.top_p.unwrap_or(cfg.sampler.top_p),
        temperature: args.temperature.unwrap_or(cfg.sampler.temperature),
        seed: args.seed.unwrap_or(cfg.sampler.seed),
    };
    generate(&model, &args.text, &prompt, target_len, &sampler)
}

fn eval_inputs(common: &EvalArgs) -> Result<(RunConfig, crate::model::ModelParams<f32>, Manifest, Vec<Utterance>)> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if common.limit.is_some() {
        cfg.eval.limit = common.limit;
    }
    let model = checkpoint::load(&common.checkpoint)?;
    let manifest = read_manifest(&common.corpus)?;
    let utts = read_split(&common.corpus, &common.split)?;
    Ok((cfg, model, manifest, utts))
}

fn log_row(tag: &str, i: usize, r: &eval::UtteranceResult) {
    if (i + 1) % 20 == 0 {
        eprintln!("{tag} {:>4}: target {} generated {}", i + 1, r.target_len, r.generated_len);
    }
}

fn print_summary(run: &eval::EvalRun) {
    for r in &run.reports {
        eprintln!(
            "pm_rope={} {:<18} {:.4}  [{:.4}, {:.4}]  n={}",
            run.pm_rope, r.metric, r.mean, r.ci_low, r.ci_high, r.n
        );
    }
    match run.pearson_r {
        Some(r) => eprintln!("pm_rope={} pearson_r          {r:.4}", run.pm_rope),
        None => eprintln!("pm_rope={} pearson_r          undefined", run.pm_rope),
    }
}

pub fn cmd_eval(common: &EvalArgs, pm_rope: bool, scatter: Option<&Path>) -> Result<eval::EvalRun> {
    let (cfg, model, manifest, utts) = eval_inputs(common)?;
    let run = eval::evaluate(&model, &utts, &manifest.codebook, &cfg, pm_rope, |i, r| log_row("eval", i, r))?;
    write_json(&common.report, &run.reports)?;
    let scatter = scatter.map_or_else(|| common.report.with_extension("csv"), Path::to_path_buf);
    eval::write_scatter(&scatter, &run.rows, cfg.eval.frame_rate)?;
    print_summary(&run);
    Ok(run)
}

pub fn cmd_ablate(common: &EvalArgs) -> Result<eval::Ablation> {
    let (cfg, model, manifest, utts) = eval_inputs(common)?;
    let ab = eval::ablate(&model, &utts, &manifest.codebook, &cfg, |on, i, r| {
        log_row(if on { "pm-on " } else { "pm-off" }, i, r)
    })?;
    write_json(&common.report, &ab)?;
    for (run, suffix) in ab.configurations.iter().zip(["pm_on", "pm_off"]) {
        let path = common.report.with_extension(format!("{suffix}.csv"));
        eval::write_scatter(&path, &run.rows, cfg.eval.frame_rate)?;
        print_summary(run);
    }
    eprintln!(
        "delta (on - off): duration_accuracy {:+.4}, error_rate {:+.4}",
        ab.delta.duration_accuracy, ab.delta.error_rate
    );
    Ok(ab)
}

/// Formats e.g. `10.000 s, 500 tokens`.
pub fn cmd_duration(args: &DurationArgs) -> Result<String> {
    let estimate = match (args.ref_seconds, args.ref_units, &args.lang) {
        (Some(secs), Some(n_ref), _) => estimate_from_reference(secs, n_ref, args.tgt_units)?,
        (None, _, Some(lang)) => estimate_from_rate(args.tgt_units, lang, &RateTable::default())?,
        _ => return Err(Error::invalid("give --ref-seconds with --ref-units, or --lang")),
    };
    if args.frame_rate == 0 {
        return Err(Error::invalid("--frame-rate must be positive"));
    }
    let tokens = target_token_count(&estimate, args.frame_rate);
    Ok(format!("{:.3} s, {} tokens", estimate.seconds, tokens))
}

/// Maps a library error onto the documented exit codes.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::UnknownLanguage { .. }
        | Error::File { .. }
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::OutOfRange { .. }
        | Error::Empty(_)
        | Error::Oversized { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Corpus { config, out } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let m = cmd_corpus(&cfg, &out)?;
            eprintln!(
                "wrote {} / {} / {} utterances to {}",
                m.counts.train,
                m.counts.val,
                m.counts.test,
                out.display()
            );
        }
        Command::Train {
            config,
            corpus,
            out,
            loss_csv,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            cmd_train(&cfg, &corpus, &out, loss_csv.as_deref())?;
        }
        Command::Generate(args) => {
            let result = cmd_generate(&args)?;
            writeln!(stdout.lock(), "{}", serde_json::to_string(&result)?)?;
        }
        Command::Eval {
            common,
            pm_rope,
            scatter,
        } => {
            cmd_eval(&common, pm_rope == Toggle::On, scatter.as_deref())?;
        }
        Command::Ablate { common } => {
            cmd_ablate(&common)?;
        }
        Command::Duration(args) => {
            writeln!(stdout.lock(), "{}", cmd_duration(&args)?)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the selected command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn duration(args: &[&str]) -> Result<String> {
        let cli = Cli::try_parse_from(std::iter::once("pmtts").chain(std::iter::once("duration")).chain(args.iter().copied()))
            .expect("valid flags");
        match cli.command {
            Command::Duration(a) => cmd_duration(&a),
            _ => unreachable!(),
        }
    }

    #[test]
    fn duration_command_output() {
        assert_eq!(
            duration(&["--ref-seconds", "5.0", "--ref-units", "50", "--tgt-units", "100"]).unwrap(),
            "10.000 s, 500 tokens"
        );
        assert!(duration(&["--lang", "EN", "--tgt-units", "20"]).unwrap().starts_with("1.700 s"));
        let err = duration(&["--lang", "KO", "--tgt-units", "20"]).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
        assert!(err.to_string().contains("EN, JA, ZH"));
    }

    #[test]
    fn conflicting_flags_rejected() {
        assert!(Cli::try_parse_from(["pmtts", "duration", "--tgt-units", "3"]).is_err());
        assert!(Cli::try_parse_from(["pmtts", "generate", "--checkpoint", "x", "--text", "1"]).is_err());
    }

    #[test]
    fn divergence_is_a_runtime_failure() {
        assert_eq!(exit_code(&Error::Diverged { step: 3 }), EXIT_RUNTIME);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    }
}
