mod live;

use std::collections::BTreeSet;
use std::error::Error;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phq_core::corpus::{generate_synthetic, load_corpus, save_corpus, split_counts};
use phq_core::harness::{self, Ablation, Checkpoint, HarnessError, RunConfig, RunReport, TrainOutcome};
use phq_core::labeling::{Labeler, LexiconClient};
use phq_core::llm::{AuditLog, LlmClient, ResponseCache};
use phq_core::metrics::{fleiss_kappa_iou, percent, HashedEmbedder};
use phq_core::phqcot::{run_evaluation, ConstantZeroClient, OracleClient, PromptReport, PromptSpec, RunOptions, ScriptedSchemaClient, Strategy};
use phq_core::{Corpus, Split};

use live::LiveClient;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "phq", version, about = "Depression screening from interview transcripts: training, evaluation and prompting runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus to disk.
    GenSynthetic {
        #[arg(long, default_value_t = 76)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file; writes checkpoint, step log and reports to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Corpus directory; defaults to the corpus recorded in the checkpoint.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with components removed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: audio, vision, ic.
        #[arg(long, value_delimiter = ',', required = true)]
        drop: Vec<Ablation>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label utterances with PHQ-8 items by majority vote and save a labeled corpus copy.
    Label {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// mock: three offline lexicon voters; live: the clients configured in PHQ_LLM_*.
        #[arg(long, default_value = "mock", value_parser = ["mock", "live"])]
        clients: String,
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Prompt an LLM for summaries and severity, then score the answers.
    PhqcotRun(PhqcotArgs),
    /// Fleiss' kappa of free-text annotations: a JSON array of subjects, each an array of rater spans.
    Agreement {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Render the tables of a saved run.
    Report {
        /// run.json written by train or ablate.
        #[arg(long)]
        run: PathBuf,
        /// Print the scaled JSON report instead of tables.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct PhqcotArgs {
    /// Corpus directory; without it a synthetic corpus is generated.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 76)]
    synthetic_count: usize,
    #[arg(long, default_value_t = 1)]
    synthetic_seed: u64,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "phqcot")]
    strategy: Strategy,
    /// 0, 2 or 4 exemplars from the training split.
    #[arg(long, default_value_t = 0)]
    shots: usize,
    /// Exemplar ids, overriding automatic selection.
    #[arg(long, value_delimiter = ',')]
    exemplars: Vec<String>,
    /// oracle (alias mock), zero, scripted, or the name of a client configured in PHQ_LLM_*.
    #[arg(long, default_value = "oracle")]
    client: String,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    audit: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn save_run(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    outcome.model.checkpoint(outcome.report.steps).save(&out.join("checkpoint.json"))?;
    outcome.model.vocab.save(&out.join("vocab.txt"))?;
    write_reports(out, &outcome.report)
}

fn write_reports(out: &Path, report: &RunReport) -> Result<()> {
    write_json(&out.join("run.json"), report)?;
    write_json(&out.join("report.json"), &harness::report_json(report))?;
    let text = harness::render_report(report);
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn finish_training(out: &Path, result: std::result::Result<TrainOutcome, HarnessError>) -> Result<()> {
    match result {
        Ok(outcome) => save_run(out, &outcome),
        Err(HarnessError::NonFinite { step, component, checkpoint }) => {
            let path = out.join("checkpoint-last-finite.json");
            checkpoint.save(&path)?;
            Err(format!("non-finite {component} at step {step}; last finite parameters saved to {}", path.display()).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let config = RunConfig::load(config)?;
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("steps.jsonl"))?);
    let result = harness::train(&config, Some(&mut log));
    log.flush()?;
    finish_training(out, result)
}

fn ablate(config: &Path, drop: Vec<Ablation>, out: &Path) -> Result<()> {
    let config = RunConfig::load(config)?;
    let corpus = config.load_corpus()?;
    fs::create_dir_all(out)?;
    let drop: BTreeSet<Ablation> = drop.into_iter().collect();
    finish_training(out, harness::ablate(&config, &corpus, &drop))
}

fn evaluate(checkpoint: &Path, split: Split, corpus: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = match corpus {
        Some(dir) => load_corpus(dir)?,
        None => ck.config.load_corpus()?,
    };
    let section = harness::evaluate(ck, &corpus, split)?;
    let report = RunReport { tags: vec!["evaluate".into()], seed: 0, steps: 0, epochs: vec![], evaluations: vec![harness::EvalPoint { epoch: 0, sections: vec![section] }] };
    print!("{}", harness::render_report(&report));
    if let Some(out) = out {
        write_json(out, &harness::report_json(&report))?;
    }
    Ok(())
}

fn label(corpus_dir: &Path, out: &Path, use_live: bool, audit: Option<&Path>) -> Result<()> {
    let mut corpus = load_corpus(corpus_dir)?;
    let live_clients = if use_live { LiveClient::all_from_env()? } else { Vec::new() };
    let lexicon: Vec<LexiconClient> = (1..=3).map(|i| LexiconClient::new(format!("lexicon-{i}"))).collect();
    let clients: Vec<&dyn LlmClient> =
        if use_live { live_clients.iter().map(|c| c as &dyn LlmClient).collect() } else { lexicon.iter().map(|c| c as &dyn LlmClient).collect() };
    let audit_log = audit.map(AuditLog::create).transpose()?;
    let mut labeler = Labeler::new(clients);
    labeler.audit = audit_log.as_ref();
    let mut failed = 0;
    for split in Split::ALL {
        let results = labeler.label_all(corpus.split(split));
        for (sample, result) in corpus.split_mut(split).iter_mut().zip(results) {
            match result {
                Ok(seq) => sample.truth.utterance_items = Some(seq.labels),
                Err(e) => {
                    failed += 1;
                    eprintln!("{}: {e}", sample.id);
                }
            }
        }
    }
    save_corpus(&corpus, out)?;
    let (a, b, c) = split_counts(&corpus);
    println!("labeled {} samples ({failed} failed) into {}", a + b + c - failed, out.display());
    Ok(())
}

fn phqcot_client(name: &str, gold: &[phq_core::Sample]) -> Result<Box<dyn LlmClient>> {
    Ok(match name {
        "oracle" | "mock" => Box::new(OracleClient::new(gold)),
        "zero" => Box::new(ConstantZeroClient),
        "scripted" => Box::new(ScriptedSchemaClient::new(gold)),
        other => Box::new(LiveClient::from_env(other)?),
    })
}

fn phqcot_run(a: PhqcotArgs) -> Result<()> {
    let corpus: Corpus = match &a.corpus {
        Some(dir) => load_corpus(dir)?,
        None => generate_synthetic(a.synthetic_count, a.synthetic_seed)?,
    };
    let ids = (!a.exemplars.is_empty()).then_some(a.exemplars.as_slice());
    let spec = if a.shots == 0 && ids.is_none() { PromptSpec::zero_shot(a.strategy) } else { PromptSpec::with_exemplars(a.strategy, a.shots, &corpus.train, ids)? };
    let samples = corpus.split(a.split);
    let client = phqcot_client(&a.client, samples)?;
    let cache = a.cache.map(ResponseCache::new).transpose()?;
    let audit = a.audit.as_deref().map(AuditLog::create).transpose()?;
    let opts = RunOptions { cache: cache.as_ref(), audit: audit.as_ref(), parallelism: a.parallelism, ..Default::default() };
    let report = run_evaluation(samples, client.as_ref(), &spec, &opts, &HashedEmbedder::default())?;
    print_prompt_report(&report);
    if let Some(out) = a.out {
        write_json(&out, &report)?;
    }
    if !report.valid {
        return Err(format!("{} of {} samples failed; the run is invalid", report.failures, report.samples).into());
    }
    Ok(())
}

fn print_prompt_report(r: &PromptReport) {
    println!("{} {} {}-shot: {} samples, {} failed", r.client, r.strategy, r.shots, r.samples, r.failures);
    if let Some(g) = r.generation.map(|g| g.percent()) {
        println!("R-1 {:.2}  R-2 {:.2}  R-L {:.2}  BLEU {:.2}  Embed {:.2}", g.rouge1, g.rouge2, g.rouge_l, g.bleu, g.embed_score);
    }
    if let (Some(b), Some(p)) = (&r.binary, &r.per_class) {
        println!("binary P {:.2}  R {:.2}  macro-F1 {:.2}; 4-class macro-F1 {:.2}", percent(b.precision), percent(b.recall), percent(b.macro_f1), percent(p.macro_f1));
    }
    let flagged = r.records.iter().filter(|x| x.discrepancy).count();
    if flagged > 0 {
        println!("{flagged} answers stated a severity or total that disagrees with their item scores");
    }
}

fn agreement(input: &Path, threshold: f64) -> Result<()> {
    let annotations: Vec<Vec<String>> = serde_json::from_str(&fs::read_to_string(input)?)?;
    let r = fleiss_kappa_iou(&annotations, threshold)?;
    println!("subjects {}  raters {}  P {:.4}  Pe {:.4}  kappa {:.4}", annotations.len(), annotations[0].len(), r.p_bar, r.p_e, r.kappa);
    Ok(())
}

fn report(run: &Path, json: bool) -> Result<()> {
    let report: RunReport = serde_json::from_str(&fs::read_to_string(run)?)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&harness::report_json(&report))?);
    } else {
        print!("{}", harness::render_report(&report));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { count, seed, out } => {
            let corpus = generate_synthetic(count, seed)?;
            save_corpus(&corpus, &out)?;
            let (a, b, c) = split_counts(&corpus);
            println!("wrote {a}/{b}/{c} train/dev/test samples to {}", out.display());
            Ok(())
        }
        Command::Train { config, out } => train(&config, &out),
        Command::Evaluate { checkpoint, split, corpus, out } => evaluate(&checkpoint, split, corpus.as_deref(), out.as_deref()),
        Command::Ablate { config, drop, out } => ablate(&config, drop, &out),
        Command::Label { corpus, out, clients, audit } => label(&corpus, &out, clients == "live", audit.as_deref()),
        Command::PhqcotRun(a) => phqcot_run(a),
        Command::Agreement { input, threshold } => agreement(&input, threshold),
        Command::Report { run, json } => report(&run, json),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
