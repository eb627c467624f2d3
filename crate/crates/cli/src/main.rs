//! `selftag`: corpus preparation, training, self-training and analysis.

mod metrics;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use selftag::data::{
    greedy_kshot_split, parse_conll, synth_corpus, write_conll, CorpusSplit, GeneratorSettings, LabelScheme, Sentence,
};
use selftag::eval::{evaluate_model, evaluate_tags, selection_error_rate, MetricsReport};
use selftag::model::{load_checkpoint, save_checkpoint, HeadKind, SequenceLabeler};
use selftag::numerics::RunSeeds;
use selftag::selftrain::{initial_model, pseudo_label, self_train, Mode, TrainingConfig};
use selftag::uncertainty::write_reports_jsonl;

use metrics::{mean_std, RunMetrics, SeedRun};

const DEFAULT_SEEDS: &str = "12,21,42,87,100";

#[derive(Parser)]
#[command(name = "selftag", version, about = "Uncertainty-aware self-training for sequence labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gold-tagged corpus in two-column format.
    Synth(SynthArgs),
    /// Greedy K-shot split of a corpus into labeled, validation and unlabeled parts.
    Split(SplitArgs),
    /// Supervised training on the labeled part only.
    Train(RunArgs),
    /// Iterated teacher-student self-training.
    Selftrain(RunArgs),
    /// Entity-level F1 of predictions or of a checkpoint on a test file.
    Evaluate(EvaluateArgs),
    /// Selection error rates per strategy and per-token selection reports.
    Analyze(AnalyzeArgs),
    /// Per-token hidden states of a checkpoint, one JSON object per token.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 2000)]
    sentences: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 15)]
    max_len: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    shots: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = selftag::data::DEFAULT_MAX_LENGTH)]
    max_length: usize,
}

/// Flags shared by every command that resolves a [`TrainingConfig`].
/// Precedence: defaults, then `--config`, then `--set`, then named flags.
#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML file with any TrainingConfig field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single training seed; overrides `--seeds`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    t_passes: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k_perturb: Option<usize>,
    /// `field=value` override for any config field; repeatable.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory written by `split`.
    #[arg(long, conflicts_with = "input")]
    split: Option<PathBuf>,
    /// Full corpus, split per seed with `--shots`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    shots: usize,
    /// Held-out gold file; the validation part is scored when absent.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, default_value = DEFAULT_SEEDS, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, requires = "pred", conflicts_with = "checkpoint")]
    gold: Option<PathBuf>,
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, requires = "test")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Directory for `metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Teacher checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Gold-tagged two-column file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("error: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_runs(a, Some(Mode::SupervisedOnly)),
        Command::Selftrain(a) => train_runs(a, None),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze(a),
        Command::ExportEmbeddings(a) => export_embeddings(a),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Parses a gold-tagged file, inferring the scheme unless one is given.
fn read_corpus(path: &Path, scheme: Option<&LabelScheme>, max_length: usize) -> Result<(LabelScheme, Vec<Sentence>)> {
    let text = read(path)?;
    let scheme = match scheme {
        Some(s) => s.clone(),
        None => LabelScheme::infer_from_conll(&text).with_context(|| path.display().to_string())?,
    };
    let parsed = parse_conll(&text, &scheme, max_length).with_context(|| path.display().to_string())?;
    Ok((scheme, parsed.sentences))
}

fn synth(a: SynthArgs) -> Result<()> {
    let settings = GeneratorSettings {
        num_classes: a.classes,
        vocab_size: a.vocab,
        corpus_size: a.sentences,
        min_len: a.min_len,
        max_len: a.max_len,
        ..Default::default()
    };
    let (scheme, corpus) = synth_corpus(&settings, a.seed)?;
    write(&a.out, &write_conll(&corpus, &scheme)?)?;
    println!("wrote {} sentences to {}", corpus.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let (scheme, corpus) = read_corpus(&a.input, None, a.max_length)?;
    let split = greedy_kshot_split(&corpus, &scheme, a.shots, a.seed)?;
    split.save(&a.out)?;
    println!(
        "labeled {} / validation {} / unlabeled {} sentences in {}",
        split.labeled.len(),
        split.validation.len(),
        split.unlabeled.len(),
        a.out.display()
    );
    for w in &split.manifest.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainingConfig> {
        let text = match &self.config {
            Some(p) => read(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| anyhow::anyhow!("config file: {}", e.message()))?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv:?}: expected FIELD=VALUE"))?;
            let (k, v) = (k.trim(), v.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
                .map(|mut t| t.remove("v").expect("key present"))
                .unwrap_or_else(|_| toml::Value::String(v.to_owned()));
            table.insert(k.to_owned(), value);
        }
        let mut cfg = TrainingConfig::from_toml(&table.to_string())?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.head {
            cfg.head = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.t_passes {
            cfg.t_passes = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.k_perturb {
            cfg.k_perturb = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train_runs(a: RunArgs, forced: Option<Mode>) -> Result<()> {
    let mut base = a.cfg.resolve()?;
    if let Some(m) = forced {
        base.mode = m;
    }
    let seeds = match a.cfg.seed {
        Some(s) => vec![s],
        None => a.seeds.clone(),
    };
    if seeds.is_empty() {
        bail!("seeds: at least one seed is required");
    }
    let fixed_split = match (&a.split, &a.input) {
        (Some(dir), _) => Some(CorpusSplit::load(dir, base.max_length)?),
        (None, Some(_)) => None,
        (None, None) => bail!("data: pass --split <dir> or --input <file>"),
    };
    let corpus = match &a.input {
        Some(p) => Some(read_corpus(p, None, base.max_length)?),
        None => None,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write(&a.out.join("config.toml"), &base.to_toml())?;

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let cfg = TrainingConfig { seed, ..base.clone() };
        let split = match (&fixed_split, &corpus) {
            (Some(s), _) => s.clone(),
            (None, Some((scheme, sentences))) => greedy_kshot_split(sentences, scheme, a.shots, seed)?,
            (None, None) => unreachable!("checked above"),
        };
        let test = match &a.test {
            Some(p) => read_corpus(p, Some(split.scheme()), cfg.max_length)?.1,
            None => split.validation.clone(),
        };
        let run_dir = a.out.join(format!("seed_{seed}"));
        let model = initial_model::<f64>(&split, &cfg)?;
        let outcome = self_train(&model, &split, &cfg, Some(&run_dir))?;
        save_checkpoint(&outcome.model, &run_dir.join("best.json"))?;
        let report = evaluate_model(&outcome.model, &test);
        let best = &outcome.records[outcome.best_iteration];
        println!(
            "seed {seed}: F1 = {:.2} (validation {:.2}, best iteration {})",
            100.0 * report.f1,
            100.0 * best.validation_f1,
            outcome.best_iteration
        );
        runs.push(SeedRun {
            seed,
            config_hash: cfg.hash(),
            best_iteration: outcome.best_iteration,
            validation_f1: best.validation_f1,
            test: report,
        });
    }
    let (mean, std) = mean_std(runs.iter().map(|r| r.test.f1));
    println!("{} over {} seeds: F1 = {:.2} ± {:.2}", base.mode.name(), runs.len(), 100.0 * mean, 100.0 * std);
    let metrics = RunMetrics {
        mode: base.mode.name().to_owned(),
        head: base.head.name().to_owned(),
        config_hash: base.hash(),
        seeds,
        f1_mean: mean,
        f1_std: std,
        runs,
    };
    write_json(&a.out.join("metrics.json"), &metrics)
}

fn print_report(r: &MetricsReport) {
    println!("{:<12} {:>9} {:>9} {:>9}", "class", "precision", "recall", "F1");
    for (name, c) in &r.per_class {
        println!(
            "{:<12} {:>9.2} {:>9.2} {:>9.2}",
            name,
            100.0 * c.precision,
            100.0 * c.recall,
            100.0 * c.f1
        );
    }
    println!(
        "{:<12} {:>9.2} {:>9.2} {:>9.2}",
        "micro",
        100.0 * r.precision,
        100.0 * r.recall,
        100.0 * r.f1
    );
    println!("F1 = {:.2}", 100.0 * r.f1);
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let report = match (&a.gold, &a.pred, &a.checkpoint, &a.test) {
        (Some(gold), Some(pred), None, _) => {
            let (gold_text, pred_text) = (read(gold)?, read(pred)?);
            let scheme = LabelScheme::infer_from_conll(&format!("{gold_text}\n\n{pred_text}"))
                .context("inferring the label scheme")?;
            let g = parse_conll(&gold_text, &scheme, usize::MAX).with_context(|| gold.display().to_string())?;
            let p = parse_conll(&pred_text, &scheme, usize::MAX).with_context(|| pred.display().to_string())?;
            if g.sentences.len() != p.sentences.len() {
                bail!(
                    "pred: {} sentences, gold has {}",
                    p.sentences.len(),
                    g.sentences.len()
                );
            }
            for (i, (gs, ps)) in g.sentences.iter().zip(&p.sentences).enumerate() {
                if gs.tokens != ps.tokens {
                    bail!("pred: sentence {i} tokens differ from gold");
                }
            }
            let tags = |c: &[Sentence]| -> Vec<Vec<usize>> {
                c.iter().map(|s| s.gold_tags.clone().expect("parsed with tags")).collect()
            };
            evaluate_tags(&tags(&g.sentences), &tags(&p.sentences), &scheme)
        }
        (None, None, Some(ckpt), Some(test)) => {
            let model: SequenceLabeler<f64> = load_checkpoint(ckpt)?;
            let (_, sentences) = read_corpus(test, Some(model.scheme()), usize::MAX)?;
            evaluate_model(&model, &sentences)
        }
        _ => bail!("evaluate: pass --gold with --pred, or --checkpoint with --test"),
    };
    print_report(&report);
    if let Some(dir) = &a.out {
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let teacher: SequenceLabeler<f64> = load_checkpoint(&a.checkpoint)?;
    let split = CorpusSplit::load(&a.split, cfg.max_length)?;
    if teacher.scheme() != split.scheme() {
        bail!("checkpoint: label scheme differs from the split's");
    }
    let analysis_cfg = TrainingConfig {
        mode: Mode::Sequst,
        ..cfg.clone()
    };
    let reports = pseudo_label(&teacher, &split.unlabeled, &analysis_cfg, RunSeeds::new(cfg.seed));
    let rates = selection_error_rate(&reports, split.gold_for_analysis(), cfg.rho, cfg.seed, cfg.selection);
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let path = a.out.join("selection.jsonl");
    let file = fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_reports_jsonl(&mut w, &reports, &split.unlabeled, split.scheme())?;
    w.flush()?;
    println!("{:<12} {:>9} {:>7} {:>8}", "strategy", "selected", "errors", "rate %");
    for r in &rates {
        println!("{:<12} {:>9} {:>7} {:>8.2}", r.strategy.name(), r.selected, r.errors, 100.0 * r.rate);
    }
    write_json(
        &a.out.join("analysis.json"),
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "rho": cfg.rho,
            "t_passes": cfg.t_passes,
            "selection": cfg.selection,
            "rates": rates,
        }),
    )
}

fn export_embeddings(a: ExportArgs) -> Result<()> {
    let model: SequenceLabeler<f64> = load_checkpoint(&a.checkpoint)?;
    let (scheme, sentences) = read_corpus(&a.input, Some(model.scheme()), usize::MAX)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let file = fs::File::create(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    let mut count = 0usize;
    for (i, s) in sentences.iter().enumerate() {
        let enc = model.encode(s, false, 0);
        let gold = s.gold_tags.as_ref().expect("parsed with tags");
        for (j, tok) in s.tokens.iter().enumerate() {
            let rec = serde_json::json!({
                "sentence": i,
                "position": j,
                "token": tok,
                "gold_tag": scheme.tag_name(gold[j]),
                "hidden": enc.hidden.row(j),
            });
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
            count += 1;
        }
    }
    w.flush()?;
    println!("wrote {count} token vectors to {}", a.out.display());
    Ok(())
}
