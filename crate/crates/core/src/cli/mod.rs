//! Batch command-line entry points.

mod explain;
mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datagen::{generate, GenConfig};
use crate::embedding::{EmbeddingProvider, UnknownPolicy, DEFAULT_DIM};
use crate::error::{read_input, Error, Result};
use crate::model::gradcheck::{grad_check_full_loss, GradCheckSetup};
use crate::model::Model;
use crate::ontology::{
    coverage, load_scale_terms, EmbeddingMatcher, ExactMatcher, Ontology, SynonymMatcher,
    DEFAULT_MATCH_THRESHOLD,
};
use crate::trace::{ingest, save_traces};
use crate::training::{
    check_ontology, compute_metrics, encode_all, evaluate_encoded, predict, run_ablations, train,
    TrainConfig,
};

pub use explain::{bucket_label, explain_user, Explanation, BUCKETS};
pub use report::{render_metrics, TrainReport};

/// Environment variable naming a training config file used when `--config`
/// is absent.
pub const CONFIG_ENV: &str = "KADET_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "kadet",
    version,
    about = "Knowledge-aware attention model for depression-risk traces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labeled trace corpus.
    Generate(GenerateArgs),
    /// Train a model and report validation metrics.
    Train(TrainArgs),
    /// Score labeled traces with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Repeated runs of the full model and each ablation.
    Ablate(AblateArgs),
    /// Per-user attention explanation grouped by recency.
    Explain(ExplainArgs),
    /// Fraction of scale items covered by the ontology.
    Coverage(CoverageArgs),
    /// Finite-difference check of the full training loss.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Unknown {
    Error,
    Fallback,
}

#[derive(Debug, Args)]
pub struct EmbeddingArgs {
    /// Embedding table; hashed 32-dimensional vectors when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// What to do with words missing from the table.
    #[arg(long, value_enum, default_value = "error")]
    pub unknown: Unknown,
}

impl EmbeddingArgs {
    fn provider(&self) -> Result<EmbeddingProvider> {
        let policy = match self.unknown {
            Unknown::Error => UnknownPolicy::Error,
            Unknown::Fallback => UnknownPolicy::Fallback,
        };
        match &self.embeddings {
            Some(p) => EmbeddingProvider::load_table(p, policy),
            None => EmbeddingProvider::hashed(DEFAULT_DIM),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Ontology,
    Recency,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings (TOML); replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub ontology: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    /// Training settings (TOML). Defaults to $KADET_CONFIG when set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint destination.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_temporal: bool,
    #[arg(long)]
    pub no_ontology: bool,
    #[arg(long)]
    pub no_entity: bool,
    /// Most recent entities fed to the model (default 200).
    #[arg(long)]
    pub memory_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also write the text report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Machine-readable twin of the report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub ontology: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub ontology: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeded runs per row.
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// First seed; run r uses seed + r.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub memory_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub ontology: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    /// Entities listed per recency bucket.
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Matcher {
    Exact,
    Embed,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub ontology: PathBuf,
    /// Scale item list, one per line; repeat for several scales.
    #[arg(long, required = true)]
    pub scale: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "exact")]
    pub matcher: Matcher,
    #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
    pub threshold: f64,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub time_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub concepts: usize,
    #[arg(long, default_value_t = 5)]
    pub entities: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to `err` as one line.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Explain(a) => cmd_explain(&a, out),
        Command::Coverage(a) => cmd_coverage(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    s.push('\n');
    write_file(path, &s)
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = read_input("config", path)?;
    toml::from_str(&body).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e
            .span()
            .map_or(0, |s| body[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })
}

/// `--config`, else `$KADET_CONFIG`, else defaults.
fn train_config(explicit: Option<&Path>) -> Result<TrainConfig> {
    let from_env = std::env::var_os(CONFIG_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    match explicit.map(Path::to_path_buf).or(from_env) {
        Some(p) => load_toml(&p),
        None => Ok(TrainConfig::default()),
    }
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<i32> {
    let ontology = Ontology::load(&a.ontology)?;
    let mut config = match &a.config {
        Some(p) => load_toml(p)?,
        None => match a.preset {
            Preset::Default => GenConfig::default(),
            Preset::Ontology => GenConfig::ontology_planted(0),
            Preset::Recency => GenConfig::recency_planted(0),
        },
    };
    if let Some(n) = a.users {
        config.n_users = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let traces = generate(&config, &ontology, &EmbeddingProvider::hashed(DEFAULT_DIM)?)?;
    save_traces(&traces, &a.out)?;
    let pos = traces.iter().filter(|t| t.label() == Some(true)).count();
    emit(
        out,
        &format!(
            "wrote {} users ({pos} positive, {} negative) to {}\n",
            traces.len(),
            traces.len() - pos,
            a.out.display()
        ),
    )?;
    Ok(0)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let ontology = Ontology::load(&a.ontology)?;
    let mut config = train_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(m) = a.memory_size {
        config.memory_size = m;
    }
    if let Some(lr) = a.lr {
        config.learning_rate = lr;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    config.ablation.no_temporal |= a.no_temporal;
    config.ablation.no_ontology |= a.no_ontology;
    config.ablation.no_entity |= a.no_entity;
    config.validate()?;

    let provider = a.embeddings.provider()?;
    let traces = ingest(&a.traces, &provider)?;
    let outcome = train(&traces, &ontology, &provider, &config)?;
    outcome.model.save(&a.out)?;

    let val_traces: Vec<_> = outcome
        .split
        .val
        .iter()
        .map(|&i| traces[i].clone())
        .collect();
    let validation = if val_traces.is_empty() {
        Err(Error::Validation("validation split is empty".into()))
    } else {
        let enc = encode_all(&val_traces, &outcome.model.config, &ontology, &provider)?;
        evaluate_encoded(&outcome.model, &enc)
    };
    let report = TrainReport::new(&config, &ontology, &traces, &outcome, validation);
    let text = report.render();
    emit(out, &text)?;
    if let Some(p) = &a.report {
        write_file(p, &text)?;
    }
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(0)
}

fn load_model_for(ckpt: &Path, ontology: &Ontology, provider: &EmbeddingProvider) -> Result<Model> {
    let model = Model::load(ckpt)?;
    check_ontology(&model, ontology)?;
    if model.config.embedding_dim != provider.dim() {
        return Err(Error::EmbeddingDimMismatch {
            checkpoint: model.config.embedding_dim,
            provider: provider.dim(),
        });
    }
    Ok(model)
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let ontology = Ontology::load(&a.ontology)?;
    let provider = a.embeddings.provider()?;
    let model = load_model_for(&a.ckpt, &ontology, &provider)?;
    let traces = ingest(&a.traces, &provider)?;
    let enc = encode_all(&traces, &model.config, &ontology, &provider)?;
    let labels: Vec<bool> = enc
        .iter()
        .map(|x| {
            x.label
                .ok_or_else(|| Error::Validation(format!("user {:?} is unlabeled", x.user_id)))
        })
        .collect::<Result<_>>()?;
    let scores = predict(&model, &enc)?;
    let metrics = compute_metrics(&scores, &labels);
    let header = format!(
        "evaluation on {} users ({} positive)\n",
        labels.len(),
        labels.iter().filter(|&&l| l).count()
    );
    emit(out, &(header + &render_metrics(&metrics)))?;
    if let Some(p) = &a.json {
        let m = metrics.as_ref().ok();
        write_json(
            p,
            &serde_json::json!({ "users": labels.len(), "metrics": m }),
        )?;
    }
    metrics.map(|_| 0)
}

fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let ontology = Ontology::load(&a.ontology)?;
    let mut config = train_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(m) = a.memory_size {
        config.memory_size = m;
    }
    if let Some(lr) = a.lr {
        config.learning_rate = lr;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.validate()?;
    if a.runs < 2 {
        return Err(Error::Config("need ≥2 runs for std".into()));
    }
    let provider = a.embeddings.provider()?;
    let traces = ingest(&a.traces, &provider)?;
    let table = run_ablations(&traces, &ontology, &provider, &config, a.runs)?;
    let text = table.render();
    emit(out, &text)?;
    if let Some(p) = &a.out {
        write_file(p, &text)?;
    }
    if let Some(p) = &a.json {
        write_json(p, &table)?;
    }
    Ok(0)
}

fn cmd_explain(a: &ExplainArgs, out: &mut dyn Write) -> Result<i32> {
    if a.top_k == 0 {
        return Err(Error::Config("--top-k must be at least 1".into()));
    }
    let ontology = Ontology::load(&a.ontology)?;
    let provider = a.embeddings.provider()?;
    let model = load_model_for(&a.ckpt, &ontology, &provider)?;
    let traces = ingest(&a.traces, &provider)?;
    let explanations = explain::explain_all(&model, &traces, &ontology, &provider, a.top_k)?;
    let text: String = explanations
        .iter()
        .map(Explanation::render)
        .collect::<Vec<_>>()
        .join("\n");
    match &a.out {
        Some(p) => write_file(p, &text)?,
        None => emit(out, &text)?,
    }
    if let Some(p) = &a.json {
        write_json(p, &explanations)?;
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
struct CoverageRow {
    scale: PathBuf,
    items: usize,
    coverage: f64,
}

fn cmd_coverage(a: &CoverageArgs, out: &mut dyn Write) -> Result<i32> {
    let ontology = Ontology::load(&a.ontology)?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!(
            "threshold must lie in [0,1], got {}",
            a.threshold
        )));
    }
    let provider = match a.matcher {
        Matcher::Exact => None,
        Matcher::Embed => Some(a.embeddings.provider()?),
    };
    let matcher: Box<dyn SynonymMatcher + '_> = match &provider {
        None => Box::new(ExactMatcher),
        Some(provider) => Box::new(EmbeddingMatcher {
            provider,
            threshold: a.threshold,
        }),
    };
    let mut rows = Vec::new();
    for path in &a.scale {
        let terms = load_scale_terms(path)?;
        let c = coverage(&ontology, &terms, matcher.as_ref())?;
        rows.push(CoverageRow {
            scale: path.clone(),
            items: terms.len(),
            coverage: c,
        });
    }
    let mut text = String::new();
    for r in &rows {
        if rows.len() == 1 {
            text.push_str(&format!("{:.1}%\n", 100.0 * r.coverage));
        } else {
            text.push_str(&format!(
                "{}\t{:.1}%\n",
                r.scale.display(),
                100.0 * r.coverage
            ));
        }
    }
    emit(out, &text)?;
    if let Some(p) = &a.json {
        write_json(p, &rows)?;
    }
    Ok(0)
}

fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<i32> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let setup = GradCheckSetup {
        embedding_dim: a.embedding_dim,
        hidden_dim: a.hidden_dim,
        time_dim: a.time_dim,
        concepts: a.concepts,
        entities: a.entities,
        eps: a.eps,
        ..GradCheckSetup::default()
    };
    let mut text = String::new();
    let mut worst = 0.0f64;
    for seed in a.first_seed..a.first_seed + a.seeds {
        let err = grad_check_full_loss(&setup, seed)?;
        worst = worst.max(err);
        text.push_str(&format!("seed {seed}: max relative error {err:.3e}\n"));
    }
    let pass = worst < a.tolerance;
    text.push_str(&format!(
        "overall: {worst:.3e} ({} tolerance {:.0e})\n",
        if pass { "within" } else { "ABOVE" },
        a.tolerance
    ));
    emit(out, &text)?;
    Ok(if pass { 0 } else { 1 })
}
