use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use tsrelab_core::config::RunConfig;
use tsrelab_core::datagen::{build_corpus, Corpus, Split};
use tsrelab_core::encoder::RetrievalModel;
use tsrelab_core::gradsuite::run_suite;
use tsrelab_core::retrieval::{evaluate, write_reports, Protocol, DEFAULT_KS};
use tsrelab_core::trainer::{train, Checkpoint, RunOutput, Stage, BEST_CHECKPOINT, LAST_CHECKPOINT};
use tsrelab_core::tsre::{count_params, paper_scale_count, TsreConfig, Variant};
use tsrelab_core::Error;

#[derive(Parser, Debug)]
#[command(name = "tsrelab", version, about = "Target-speaker speech-image retrieval lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a corpus and print its split statistics.
    SynthData(SynthArgs),
    /// Train the base encoder or fine-tune adapters.
    Train(TrainArgs),
    /// Recall@K of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Adapter parameter counts.
    CountParams(CountArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config and TSRELAB_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.resolve_seed(self.seed)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    corpus_dir: PathBuf,
    /// Speakers per mixture (1, 2 or 3).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_parser = parse_stage)]
    stage: Option<Stage>,
    /// Base checkpoint for fine-tuning, or a checkpoint of the same stage to resume.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Corpus directory; synthesized from the config's data section when omitted.
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus_dir: PathBuf,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Protocol,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    ks: Vec<usize>,
    /// Output directory for the JSON and CSV reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// One variant; all four when omitted.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Count at D=1024, speaker_dim=256, C_b=512 with adapters in one block.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[command(flatten)]
    config: ConfigArg,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split {s:?}"))
}

/// Exit status for a failure: 2 for numerical trouble, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn synth_data(args: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(k) = args.k {
        cfg.data.k = k;
    }
    let corpus = build_corpus(&cfg.data)?;
    corpus.save(&args.corpus_dir)?;
    println!("{:<6} {:>7} {:>11} {:>13}", "split", "images", "utterances", "speakers/utt");
    for s in corpus.stats() {
        println!("{:<6} {:>7} {:>11} {:>13}", s.split.name(), s.images, s.utterances, s.speakers_per_utterance);
    }
    println!("corpus written to {}", args.corpus_dir.display());
    Ok(())
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(stage) = args.stage {
        cfg.trainer.stage = stage;
    }
    cfg.validate()?;
    let corpus = match &args.corpus_dir {
        Some(d) => load_corpus(d)?,
        None => build_corpus(&cfg.data)?,
    };
    let init = match &args.init {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let out = RunOutput {
        dir: Some(args.out.clone()),
    };
    let result = train(&cfg.run_spec(), &corpus, init.as_ref(), &out)?;
    std::fs::write(args.out.join("config.json"), cfg.to_json())?;
    let best = result.best.best.map_or(String::from("none"), |b| format!("step {} r@1 {:.4}", b.step, b.recall_at_1));
    println!("stage {} finished at step {}; best val speech->image {best}", cfg.trainer.stage, result.last.step);
    println!(
        "checkpoints: {} {}",
        args.out.join(LAST_CHECKPOINT).display(),
        args.out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let corpus = load_corpus(&args.corpus_dir)?;
    let mut model: RetrievalModel = ck.model()?;
    if args.protocol == Protocol::Single && model.tsre().is_some() {
        log::warn!("single protocol: evaluating the host encoder with adapters detached");
        model.detach_tsre();
    }
    let (s2i, i2s) = evaluate(&model, &corpus, args.split, args.protocol, &args.ks)?;
    let stem = args.out.join(format!("recall_{}_{}", args.protocol.name(), args.split.name()));
    let reports = [s2i, i2s];
    write_reports(&reports, &stem)?;
    for r in &reports {
        for w in &r.recall.warnings {
            log::warn!("{w}");
        }
        let vals: Vec<String> = r.recall.values.iter().map(|v| format!("R@{}={:.4}", v.k, v.recall)).collect();
        println!("{} {} {}", r.protocol.name(), r.direction.name(), vals.join(" "));
    }
    println!("reports written to {}.{{json,csv}}", stem.display());
    Ok(())
}

fn count(args: &CountArgs) -> anyhow::Result<()> {
    let variants = args.variant.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]);
    if args.paper_scale {
        println!("{:<8} {:>12} {:>9}", "variant", "params", "millions");
        for v in variants {
            let n = paper_scale_count(v).table_value(v);
            println!("{:<8} {:>12} {:>9.2}", v.label(), n, n as f64 / 1e6);
        }
        return Ok(());
    }
    let cfg = args.config.load()?;
    println!("{:<8} {:>10} {:>10} {:>10}", "variant", "weights", "biases", "total");
    for v in variants {
        let tsre = match &cfg.tsre {
            Some(t) => TsreConfig {
                variant: v,
                kernel_size: None,
                ..t.clone()
            },
            None => TsreConfig::new(v),
        };
        let c = count_params(&cfg.encoder, &tsre)?;
        println!(
            "{:<8} {:>10} {:>10} {:>10}",
            v.label(),
            c.scl_weights + c.conv_weights,
            c.scl_biases + c.conv_biases,
            c.total()
        );
    }
    Ok(())
}

fn gradcheck(args: &GradArgs) -> anyhow::Result<bool> {
    let cfg = args.config.load()?;
    let report = run_suite(cfg.seed.unwrap_or(0))?;
    print!("{}", report.table());
    let worst = report.worst().map_or(0.0, |w| w.max_rel_err);
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("{verdict}: worst relative error {worst:.3e} (tolerance {:.0e})", report.tolerance);
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::CountParams(a) => count(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
