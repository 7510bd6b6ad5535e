//! Command-line front end: synthetic data, training, evaluation, clustering,
//! fairness metrics and run comparison.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use debiasclip::cluster::{cluster_report, kmeans, KMeansConfig};
use debiasclip::compare::compare;
use debiasclip::data::{gen_synthetic, load_jsonl, save_jsonl, split, Dataset, GroupSpec, SyntheticSpec};
use debiasclip::metrics::{read_predictions_csv, write_predictions_csv, EsAucMode, HardLabelRule, ReportSet};
use debiasclip::model::{DualEncoder, PromptSet, Tower};
use debiasclip::trainer::{evaluate, report_set, train, EvalOptions, TrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "debiasclip", version, about = "Attribute-free debiasing of dual-encoder zero-shot classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic JSONL dataset and matching class prompts.
    GenData(GenData),
    /// Train an encoder from a TOML config.
    Train(Train),
    /// Zero-shot predictions and fairness reports for a checkpoint.
    Evaluate(Evaluate),
    /// K-means on image embeddings, cross-tabulated against attributes.
    Cluster(Cluster),
    /// Fairness reports from a predictions CSV.
    Metrics(Metrics),
    /// Compare two report files.
    Compare(Compare),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    n: usize,
    /// Image feature dimension.
    #[arg(long)]
    p: usize,
    /// Text feature dimension.
    #[arg(long)]
    q: usize,
    /// Group specs as a JSON array, or a path to a JSON file holding one.
    /// Defaults to a 90/10 majority/minority split.
    #[arg(long)]
    groups: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    class_balance: f64,
    #[arg(long, env = "DEBIAS_SEED", default_value_t = 0)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Prompt file path; defaults to `<out stem>.prompts.json`.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Also write `<out stem>.{train,val,test}.jsonl` using these fractions,
    /// e.g. `0.6,0.2,0.2`.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
}

#[derive(Args)]
struct Train {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Prompt JSON; defaults to the hashed glaucoma prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Hash dimension for free-text notes.
    #[arg(long, default_value_t = 64)]
    text_dim: usize,
    #[arg(long, env = "DEBIAS_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "DEBIAS_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportOptions {
    /// Attribute to report on (repeatable); defaults to every attribute.
    #[arg(long = "attr")]
    attrs: Vec<String>,
    #[arg(long, default_value = "ratio")]
    es_auc_mode: EsAucMode,
    /// Hard-label rule `score >= t`; the zero-shot argmax is used otherwise.
    #[arg(long)]
    threshold: Option<f64>,
}

impl ReportOptions {
    fn eval_options(&self) -> EvalOptions {
        EvalOptions { es_auc_mode: self.es_auc_mode, rule: self.threshold.map_or(HardLabelRule::Argmax, HardLabelRule::Threshold) }
    }
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[command(flatten)]
    report: ReportOptions,
    /// Receives predictions.csv, reports.json and radar.csv.
    #[arg(long, env = "DEBIAS_OUT_DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Cluster {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    /// Attribute to cross-tabulate (repeatable); defaults to every attribute.
    #[arg(long = "attr")]
    attrs: Vec<String>,
    #[arg(long, env = "DEBIAS_SEED", default_value_t = 0)]
    seed: u64,
    /// Receives clusters.csv and cluster_report.json.
    #[arg(long, env = "DEBIAS_OUT_DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Metrics {
    /// Predictions CSV (`id,score,pred,label,<attributes...>`).
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    report: ReportOptions,
    /// Report JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Optional radar-plot CSV output.
    #[arg(long)]
    radar: Option<PathBuf>,
}

#[derive(Args)]
struct Compare {
    /// Reports of run A.
    #[arg(long)]
    a: PathBuf,
    /// Reports of run B.
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Cluster(a) => run_cluster(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Compare(a) => run_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": error_line(&e) }));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line. Causes whose text the previous message
/// already contains are skipped.
fn error_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        if parts.last().is_none_or(|prev| !prev.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = SyntheticSpec::minority_bias(a.n, a.p, a.q, a.seed);
    spec.class_balance = a.class_balance;
    if let Some(g) = &a.groups {
        let text = if g.trim_start().starts_with('[') {
            g.clone()
        } else {
            std::fs::read_to_string(g).with_context(|| format!("reading groups file {g}"))?
        };
        spec.groups = serde_json::from_str::<Vec<GroupSpec>>(&text).context("parsing group specs")?;
    }
    let (ds, prompts) = gen_synthetic(&spec)?;
    save_jsonl(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let prompt_path = a.prompts.unwrap_or_else(|| sibling(&a.out, "prompts.json"));
    prompts.save(&prompt_path)?;
    let mut written = vec![a.out.display().to_string(), prompt_path.display().to_string()];
    if let Some(fr) = a.split {
        if fr.len() != 3 {
            bail!("--split needs three fractions, got {}", fr.len());
        }
        let (tr, va, te) = split(&ds, [fr[0], fr[1], fr[2]], a.seed)?;
        for (part, name) in [(&tr, "train"), (&va, "val"), (&te, "test")] {
            let path = sibling(&a.out, &format!("{name}.jsonl"));
            save_jsonl(part, &path)?;
            written.push(path.display().to_string());
        }
    }
    println!("{}", json!({ "records": ds.len(), "written": written }));
    Ok(())
}

fn load_prompts(path: Option<&Path>, text_dim: usize) -> Result<PromptSet> {
    let prompts = match path {
        Some(p) => PromptSet::load(p).with_context(|| format!("loading prompts {}", p.display()))?,
        None => PromptSet::glaucoma_default(text_dim),
    };
    let dim = prompts.prompts[0].features.len();
    if dim != text_dim {
        bail!("prompt features have dimension {dim}, expected {text_dim}");
    }
    Ok(prompts)
}

fn load_data(path: &Path) -> Result<Dataset> {
    let ds = load_jsonl(path).with_context(|| format!("loading {}", path.display()))?;
    if ds.is_empty() {
        bail!("{} has no records", path.display());
    }
    Ok(ds)
}

fn run_train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        cfg.set(o).with_context(|| format!("applying --set {o}"))?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = a.out_dir {
        cfg.out_dir = Some(dir);
    }
    if cfg.out_dir.is_none() {
        bail!("no output directory: pass --out-dir, set DEBIAS_OUT_DIR or out_dir in the config");
    }
    let train_ds = load_data(&a.train)?;
    let text_dim = train_ds.text_feature_dim().unwrap_or(a.text_dim);
    let train_set = train_ds.to_train_set(text_dim)?;
    let val_set = match &a.val {
        Some(p) => Some(load_data(p)?.to_train_set(text_dim)?),
        None => None,
    };
    let prompts = load_prompts(a.prompts.as_deref(), text_dim)?;
    let out = train(&cfg, &train_set, val_set.as_ref(), &prompts)?;
    let dir = cfg.out_dir.as_ref().expect("checked above");
    prompts.save(dir.join("prompts.json"))?;
    let last = out.log.steps.last();
    println!(
        "{}",
        json!({
            "out_dir": dir.display().to_string(),
            "steps": out.log.steps.len(),
            "final_loss": last.map(|s| s.total),
            "final_tau": last.map(|s| s.tau),
            "best_epoch": out.log.best_epoch,
        })
    );
    Ok(())
}

fn attributes_or_all(requested: &[String], available: Vec<String>) -> Result<Vec<String>> {
    if requested.is_empty() {
        if available.is_empty() {
            bail!("records carry no attributes");
        }
        return Ok(available);
    }
    Ok(requested.to_vec())
}

fn write_reports(reports: &ReportSet, dir: &Path) -> Result<()> {
    reports.save(dir.join("reports.json"))?;
    let mut w = create(&dir.join("radar.csv"))?;
    reports.write_radar_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn print_summary(reports: &ReportSet) {
    for r in &reports.reports {
        println!("{:<12} AUC {:>6}  ES-AUC {:>6}  EOD {:>6}", r.attribute, r.percent.overall_auc, r.percent.es_auc, r.percent.eod);
    }
}

fn run_evaluate(a: Evaluate) -> Result<()> {
    let model = DualEncoder::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ds = load_data(&a.data)?;
    let prompts = load_prompts(a.prompts.as_deref(), model.config().text_dim)?;
    let attrs = attributes_or_all(&a.report.attrs, ds.attribute_names())?;
    let eval = evaluate(&model, &ds, &prompts, &attrs, a.report.eval_options())?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut w = create(&a.out_dir.join("predictions.csv"))?;
    write_predictions_csv(&eval.predictions, &mut w)?;
    w.flush()?;
    write_reports(&eval.reports, &a.out_dir)?;
    print_summary(&eval.reports);
    Ok(())
}

fn run_cluster(a: Cluster) -> Result<()> {
    let model = DualEncoder::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ds = load_data(&a.data)?;
    let attrs = attributes_or_all(&a.attrs, ds.attribute_names())?;
    let emb = model.embed(Tower::Image, &ds.image_matrix())?;
    let fit = kmeans(&emb, &KMeansConfig::new(a.k, a.seed))?;
    let mut reports = Vec::new();
    for attr in &attrs {
        let (labels, cats): (Vec<usize>, Vec<String>) =
            ds.records.iter().zip(&fit.labels).filter_map(|(r, &l)| r.attributes.get(attr).map(|c| (l, c.clone()))).unzip();
        if labels.is_empty() {
            bail!("attribute '{attr}' is absent from every record");
        }
        reports.push(cluster_report(attr, &labels, &cats)?);
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let mut w = csv_writer(&a.out_dir.join("clusters.csv"))?;
    w.write_record(["id", "cluster"])?;
    for (r, l) in ds.records.iter().zip(&fit.labels) {
        w.write_record([r.id.as_str(), &l.to_string()])?;
    }
    w.flush()?;
    let report = json!({
        "schema_version": debiasclip::metrics::SCHEMA_VERSION,
        "k": a.k,
        "seed": a.seed,
        "inertia": fit.inertia,
        "iterations": fit.iterations,
        "inertia_history": fit.inertia_history,
        "attributes": reports,
    });
    std::fs::write(a.out_dir.join("cluster_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    for r in &reports {
        println!("{:<12} NMI {:.4}", r.attribute, r.nmi);
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn run_metrics(a: Metrics) -> Result<()> {
    let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let mut rows = read_predictions_csv(file)?;
    if rows.is_empty() {
        bail!("{} has no rows", a.input.display());
    }
    if let Some(t) = a.report.threshold {
        for r in &mut rows {
            r.pred = u8::from(r.score >= t);
        }
    }
    let mut available: Vec<String> = rows.iter().flat_map(|r| r.attributes.keys().cloned()).collect();
    available.sort();
    available.dedup();
    let attrs = attributes_or_all(&a.report.attrs, available)?;
    let reports = report_set(&rows, &attrs, a.report.eval_options())?;
    reports.save(&a.out)?;
    if let Some(p) = &a.radar {
        let mut w = create(p)?;
        reports.write_radar_csv(&mut w)?;
        w.flush()?;
    }
    print_summary(&reports);
    Ok(())
}

fn run_compare(a: Compare) -> Result<()> {
    let ra = ReportSet::load(&a.a).with_context(|| format!("loading {}", a.a.display()))?;
    let rb = ReportSet::load(&a.b).with_context(|| format!("loading {}", a.b.display()))?;
    let summary = compare(&ra, &rb)?;
    if let Some(p) = &a.out_json {
        std::fs::write(p, serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    if let Some(p) = &a.out_csv {
        let mut w = create(p)?;
        summary.write_csv(&mut w)?;
        w.flush()?;
    }
    print!("{}", summary.to_table());
    Ok(())
}
