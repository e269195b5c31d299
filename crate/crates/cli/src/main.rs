mod settings;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use berttune::bertscore::score_hard;
use berttune::corpus::{build_source_vocab, ParallelCorpus, Split};
use berttune::eval::{
    entropy_report, evaluate, export_curves, make_synthetic_corpus, ClusterMap, Search, SyntheticSpec, CLUSTERS_FILE,
    LM_DIR,
};
use berttune::lm::LmEncoder;
use berttune::nmt::{ModelConfig, Seq2SeqModel};
use berttune::softpred::{PredictionMode, DEFAULT_TAU};
use berttune::training::{
    finetune, train_baseline, Checkpoint, GreedyValidator, RunOutcome, TrainConfig, BEST_DIR, METRICS_FILE,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use settings::Settings;

#[derive(Parser)]
#[command(name = "berttune", version, about = "Fine-tune small translation models against a differentiable BERTScore")]
struct Cli {
    /// Flat JSON file supplying defaults for any flag (flags win).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synonym-cluster task and its scoring encoder.
    MakeData(MakeData),
    /// Train a baseline with label-smoothed NLL.
    TrainBaseline(TrainBaseline),
    /// Fine-tune a checkpoint against the soft F score.
    Finetune(Finetune),
    /// Beam-decode a split and report BLEU and mean F.
    Evaluate(Evaluate),
    /// Score candidate lines against reference lines.
    Score(Score),
    /// Histogram the entropy of greedy decoding steps.
    EntropyReport(EntropyReport),
    /// Turn a metrics.csv into plot-ready series.
    ExportCurves(ExportCurves),
}

#[derive(Args)]
struct MakeData {
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    synonyms: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    valid_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBaseline {
    /// Directory with train/valid splits.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scoring encoder (defaults to <data>/lm).
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    /// Select on token BLEU even when the data has a cluster map.
    #[arg(long)]
    token_bleu: bool,
}

#[derive(Args)]
struct Finetune {
    /// Starting checkpoint (a ckpt.json or its directory).
    #[arg(long)]
    from: Option<PathBuf>,
    /// dense, sparsemax or gumbel.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, valid or test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Score {
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Per-line CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EntropyReport {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    /// Histogram CSV path; a JSON summary is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCurves {
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let s = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::MakeData(a) => make_data(&s, a),
        Command::TrainBaseline(a) => run_train_baseline(&s, a),
        Command::Finetune(a) => run_finetune(&s, a),
        Command::Evaluate(a) => run_evaluate(&s, a),
        Command::Score(a) => run_score(&s, a),
        Command::EntropyReport(a) => run_entropy(&s, a),
        Command::ExportCurves(a) => run_curves(&s, a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_lm(lm: Option<PathBuf>, data: Option<&Path>) -> Result<LmEncoder> {
    let path = match (lm, data) {
        (Some(p), _) => p,
        (None, Some(d)) => d.join(LM_DIR),
        (None, None) => bail!("missing --lm"),
    };
    LmEncoder::load(&path).with_context(|| format!("loading encoder {}", path.display()))
}

fn load_split(data: &Path, split: Split) -> Result<ParallelCorpus> {
    ParallelCorpus::load(data, split).with_context(|| format!("loading {split} split from {}", data.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn make_data(s: &Settings, a: MakeData) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        clusters: s.get("clusters", a.clusters, d.clusters)?,
        synonyms: s.get("synonyms", a.synonyms, d.synonyms)?,
        min_len: s.get("min_len", a.min_len, d.min_len)?,
        max_len: s.get("max_len", a.max_len, d.max_len)?,
        train_size: s.get("train_size", a.train_size, d.train_size)?,
        valid_size: s.get("valid_size", a.valid_size, d.valid_size)?,
        test_size: s.get("test_size", a.test_size, d.test_size)?,
        dim: s.get("dim", a.dim, d.dim)?,
        seed: s.get("seed", a.seed, d.seed)?,
    };
    let out: PathBuf = s.require("out_dir", a.out_dir)?;
    let task = make_synthetic_corpus(&spec, &out)?;
    write_json(&out.join("spec.json"), &spec)?;
    print_json(&serde_json::json!({
        "out_dir": out,
        "vocab_size": task.lm.vocab().len(),
        "train": task.train.len(),
        "valid": task.valid.len(),
        "test": task.test.len(),
    }))
}

#[derive(Serialize)]
struct RunSummary {
    phase: &'static str,
    epochs: usize,
    best_epoch: usize,
    stopped_early: bool,
    best_valid_bleu: Option<f64>,
    best_valid_fbert: Option<f64>,
    start_valid_bleu: Option<f64>,
    start_valid_fbert: Option<f64>,
    best_checkpoint: PathBuf,
}

fn summarize(phase: &'static str, out: &Path, run: &RunOutcome) -> RunSummary {
    RunSummary {
        phase,
        epochs: run.validations.len(),
        best_epoch: run.best.meta.epoch,
        stopped_early: run.stopped_early,
        best_valid_bleu: run.best.meta.valid_bleu,
        best_valid_fbert: run.best.meta.valid_fbert,
        start_valid_bleu: run.start_scores.map(|s| s.bleu),
        start_valid_fbert: run.start_scores.map(|s| s.fbert),
        best_checkpoint: out.join(BEST_DIR),
    }
}

fn run_train_baseline(s: &Settings, a: TrainBaseline) -> Result<()> {
    let data: PathBuf = s.require("data", a.data)?;
    let out: PathBuf = s.require("out", a.out)?;
    let lm = load_lm(s.opt("lm", a.lm)?, Some(&data))?;
    let train_c = load_split(&data, Split::Train)?;
    let valid_c = load_split(&data, Split::Valid)?;
    let d = TrainConfig::baseline();
    let config = TrainConfig {
        batch_size: s.get("batch_size", a.batch_size, d.batch_size)?,
        lr: s.get("lr", a.lr, d.lr)?,
        warmup_steps: s.get("warmup_steps", a.warmup_steps, d.warmup_steps)?,
        label_smoothing: s.get("label_smoothing", a.label_smoothing, d.label_smoothing)?,
        patience: s.get("patience", a.patience, d.patience)?,
        max_epochs: s.get("max_epochs", a.max_epochs, d.max_epochs)?,
        seed: s.get("seed", a.seed, d.seed)?,
        ..d
    };
    let m = ModelConfig::default();
    let model_config = ModelConfig {
        d_model: s.get("d_model", a.d_model, m.d_model)?,
        heads: s.get("heads", a.heads, m.heads)?,
        ff_dim: s.get("ff_dim", a.ff_dim, m.ff_dim)?,
        encoder_layers: s.get("encoder_layers", a.encoder_layers, m.encoder_layers)?,
        decoder_layers: s.get("decoder_layers", a.decoder_layers, m.decoder_layers)?,
        max_len: m.max_len,
    };
    let src_vocab = build_source_vocab(&train_c)?;
    let tgt_vocab = lm.vocab().clone();
    let train = train_c.encode(&src_vocab, &tgt_vocab);
    let valid = valid_c.encode(&src_vocab, &tgt_vocab);
    let model = Seq2SeqModel::init(model_config, src_vocab, tgt_vocab, config.seed)?;

    let token_bleu = s.get("token_bleu", a.token_bleu.then_some(true), false)?;
    let clusters = if !token_bleu && data.join(CLUSTERS_FILE).exists() { Some(ClusterMap::load(&data)?) } else { None };
    let mut validator = GreedyValidator::new(&lm, &valid);
    if let Some(c) = &clusters {
        validator = validator.with_classes(c);
    }
    let run = train_baseline(model, &train, &mut validator, &config, Some(&out))?;
    let summary = summarize("baseline", &out, &run);
    write_json(&out.join("summary.json"), &summary)?;
    print_json(&summary)
}

fn run_finetune(s: &Settings, a: Finetune) -> Result<()> {
    let from: PathBuf = s.require("from", a.from)?;
    let out: PathBuf = s.require("out", a.out)?;
    let data: PathBuf = s.require("data", a.data)?;
    let mode_name: String = s.require("mode", a.mode)?;
    let tau = s.get("tau", a.tau, DEFAULT_TAU)?;
    let mode = PredictionMode::parse(&mode_name, tau).map_err(anyhow::Error::msg)?;
    let start = load_ckpt(&from)?;
    let lm = load_lm(s.opt("lm", a.lm)?, Some(&data))?;
    let d = TrainConfig::finetune_from(&start.meta.config, mode);
    let config = TrainConfig {
        lr: s.get("lr", a.lr, d.lr)?,
        max_epochs: s.get("max_epochs", a.max_epochs, d.max_epochs)?,
        patience: s.get("patience", a.patience, d.patience)?,
        eval_every: s.get("eval_every", a.eval_every, d.eval_every)?,
        seed: s.get("seed", a.seed, d.seed)?,
        ..d
    };
    let train = load_split(&data, Split::Train)?.encode(start.model.src_vocab(), start.model.tgt_vocab());
    let valid = load_split(&data, Split::Valid)?.encode(start.model.src_vocab(), start.model.tgt_vocab());
    let mut validator = GreedyValidator::new(&lm, &valid);
    let run = finetune(&start, &lm, &train, &mut validator, &config, Some(&out))?;
    let summary = summarize("finetune", &out, &run);
    write_json(&out.join("summary.json"), &summary)?;
    print_json(&summary)
}

fn split_arg(s: &Settings, flag: Option<String>) -> Result<Split> {
    let name: String = s.get("split", flag, "test".to_string())?;
    Ok(name.parse()?)
}

fn run_evaluate(s: &Settings, a: Evaluate) -> Result<()> {
    let ckpt = load_ckpt(&s.require::<PathBuf>("ckpt", a.ckpt)?)?;
    let data: PathBuf = s.require("data", a.data)?;
    let lm = load_lm(s.opt("lm", a.lm)?, Some(&data))?;
    let split = split_arg(s, a.split)?;
    let beam = s.get("beam", a.beam, 5)?;
    let alpha = s.get("length_penalty", a.length_penalty, 1.0)?;
    let examples = load_split(&data, split)?.encode(ckpt.model.src_vocab(), ckpt.model.tgt_vocab());
    let report = evaluate(&ckpt.model, &lm, &examples, Search::Beam { size: beam, alpha })?;
    if let Some(out) = s.opt::<PathBuf>("out", a.out)? {
        write_json(&out, &report)?;
    }
    print_json(&report)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| l.trim().to_lowercase()).collect())
}

fn run_score(s: &Settings, a: Score) -> Result<()> {
    let cands = read_lines(&s.require::<PathBuf>("candidates", a.candidates)?)?;
    let refs = read_lines(&s.require::<PathBuf>("references", a.references)?)?;
    if cands.len() != refs.len() {
        bail!("{} candidate lines but {} reference lines", cands.len(), refs.len());
    }
    let lm = load_lm(s.opt("lm", a.lm)?, None)?;
    let v = lm.vocab();
    let mut rows = Vec::with_capacity(cands.len());
    for (c, r) in cands.iter().zip(&refs) {
        rows.push(score_hard(&v.encode(c), &v.encode(r), &lm)?);
    }
    if let Some(out) = s.opt::<PathBuf>("out", a.out)? {
        let mut text = String::from("line,precision,recall,f1,empty\n");
        for (i, t) in rows.iter().enumerate() {
            text.push_str(&format!("{},{},{},{},{}\n", i + 1, t.precision, t.recall, t.f1, t.empty));
        }
        fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    let n = rows.len().max(1) as f64;
    print_json(&serde_json::json!({
        "lines": rows.len(),
        "precision": rows.iter().map(|t| t.precision).sum::<f64>() / n,
        "recall": rows.iter().map(|t| t.recall).sum::<f64>() / n,
        "f1": rows.iter().map(|t| t.f1).sum::<f64>() / n,
    }))
}

fn run_entropy(s: &Settings, a: EntropyReport) -> Result<()> {
    let ckpt = load_ckpt(&s.require::<PathBuf>("ckpt", a.ckpt)?)?;
    let data: PathBuf = s.require("data", a.data)?;
    let split = split_arg(s, a.split)?;
    let bins = s.get("bins", a.bins, 20)?;
    let examples = load_split(&data, split)?.encode(ckpt.model.src_vocab(), ckpt.model.tgt_vocab());
    let sources: Vec<Vec<usize>> = examples.into_iter().map(|e| e.source).collect();
    let report = entropy_report(&ckpt.model, &sources, bins)?;
    if let Some(out) = s.opt::<PathBuf>("out", a.out)? {
        report.write_csv(&out)?;
        report.write_json(&out.with_extension("json"))?;
    }
    print_json(&report)
}

fn run_curves(s: &Settings, a: ExportCurves) -> Result<()> {
    let metrics: PathBuf = match s.opt("metrics", a.metrics)? {
        Some(p) => p,
        None => bail!("missing --metrics (for example <run>/{METRICS_FILE})"),
    };
    let curves = export_curves(&metrics)?;
    match s.opt::<PathBuf>("out", a.out)? {
        Some(out) => write_json(&out, &curves),
        None => print_json(&curves),
    }
}
