use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fewdoc::corpus::{load_catalog, Corpus, CorpusFormat, RelationSplit, RelationType, SourceSplit};
use fewdoc::episode::{
    episode_stats, read_episode_file, sample_episodes, write_episode_file, Episode, EpisodeConfig,
    EpisodeFileHeader, EPISODE_SCHEMA_VERSION,
};
use fewdoc::evaluation::{
    bin_by_nota_rate, bin_by_support_count, dump_support_embeddings, macro_f1, macro_f1_on_items,
    predict_episodes, target_universe, F1Aggregation, PredictionSet, DEFAULT_NOTA_BOUNDARIES,
};
use fewdoc::model::Model;
use fewdoc::trainer::{train as run_training, Checkpoint, DevSet, TrainSetup};
use fewdoc::Error;
use log::info;
use serde::Serialize;

use crate::config::{resolve, CommonArgs, DataConfig, ModelOverrides, Resolved};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Corpus and catalog paths given on the command line.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct DataArgs {
    /// DocRED-style corpus file; defaults to the config entry for the split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Relation catalog; defaults to the config entry for the split.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

fn load_split(data: &DataConfig) -> Result<RelationSplit> {
    Ok(match &data.split {
        Some(path) => RelationSplit::load(path)?,
        None => RelationSplit::docred_standard(),
    })
}

fn load_corpus(data: &DataConfig, args: &DataArgs, split: SourceSplit) -> Result<Corpus> {
    let configured = match split {
        SourceSplit::Train => &data.train_corpus,
        SourceSplit::Dev => &data.dev_corpus,
        SourceSplit::TestIn => &data.test_corpus,
        SourceSplit::TestCross => &data.cross_corpus,
    };
    let corpus_path = args
        .corpus
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| config_error(format!("no corpus for split {} (--corpus or data config)", split.name())))?;
    let catalog_path = args
        .catalog
        .clone()
        .or_else(|| match split {
            SourceSplit::TestCross => data.cross_catalog.clone().or_else(|| data.catalog.clone()),
            _ => data.catalog.clone(),
        })
        .ok_or_else(|| config_error("no relation catalog (--catalog or data.catalog)"))?;
    let catalog: BTreeMap<String, RelationType> = load_catalog(&catalog_path)?;
    let (corpus, summary) = Corpus::load(&corpus_path, CorpusFormat::DocredJson, catalog)
        .with_context(|| format!("loading corpus {}", corpus_path.display()))?;
    info!(
        "loaded {} documents, {} triples ({} duplicates dropped) from {}",
        summary.documents,
        summary.triples,
        summary.duplicate_triples,
        corpus_path.display()
    );
    Ok(corpus)
}

#[derive(Clone, Debug, clap::Args)]
pub struct BuildEpisodesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// train, dev, test_in or test_cross.
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub n_docs: usize,
    #[arg(long)]
    pub max_target_relations: Option<usize>,
}

pub fn build_episodes(args: &BuildEpisodesArgs) -> Result<()> {
    let run = resolve(&args.common, ModelOverrides::default())?;
    let source: SourceSplit = args.split.parse()?;
    if args.count == 0 {
        return Err(config_error("--count must be at least 1"));
    }
    let out = run.out_required()?;
    let corpus = load_corpus(&run.data, &args.data, source)?;
    let split = load_split(&run.data)?;
    let cfg = EpisodeConfig {
        n_docs: args.n_docs,
        seed: run.seed,
        max_target_relations: args.max_target_relations.unwrap_or(usize::MAX),
        source_split: source,
    };
    let episodes = sample_episodes(&corpus, &split, &cfg, args.count)?;
    let header = EpisodeFileHeader {
        schema_version: EPISODE_SCHEMA_VERSION,
        n_docs: args.n_docs,
        split_name: source.name().to_string(),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_episode_file(out, &header, &episodes)?;
    let (relations, instances) = episode_stats(&episodes)?;
    println!(
        "wrote {} episodes to {}: {relations:.2} target relations per episode, {instances:.2} support instances per relation",
        episodes.len(),
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Drop the contrastive term (λ = 0).
    #[arg(long)]
    pub no_rcl: bool,
    /// Build support instances with the pair path only.
    #[arg(long)]
    pub no_ibpc: bool,
    /// Unweighted supervised contrastive loss instead of the relation-weighted one.
    #[arg(long)]
    pub scl: bool,
    /// Use the base NOTA prototypes unchanged.
    #[arg(long)]
    pub no_tnpg: bool,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: usize,
    best_step: Option<usize>,
    best_dev_f1: Option<f64>,
    early_stopped: bool,
    checkpoint: PathBuf,
    hyperparameters: (f64, f64, usize, f64, f64),
    config: &'a Resolved,
}

#[derive(Serialize)]
struct TraceLine {
    step: usize,
    lr: f64,
    loss: f64,
    bce: f64,
    rcl: f64,
    grad_norm: f64,
}

fn dev_set(run: &Resolved, train_corpus: &Corpus, split: &RelationSplit) -> Result<Option<(Corpus, Vec<Episode>)>> {
    let data = &run.data;
    if let Some(path) = &data.dev_episodes {
        let (_, episodes) = read_episode_file(path)?;
        let corpus = match &data.dev_corpus {
            Some(_) => load_corpus(data, &DataArgs::default(), SourceSplit::Dev)?,
            None => train_corpus.clone(),
        };
        return Ok(Some((corpus, episodes)));
    }
    if data.dev_corpus.is_none() || split.dev_ids().is_empty() {
        return Ok(None);
    }
    let corpus = load_corpus(data, &DataArgs::default(), SourceSplit::Dev)?;
    let cfg = EpisodeConfig {
        n_docs: run.train.n_docs,
        seed: run.seed.wrapping_add(1),
        max_target_relations: run.train.max_target_relations,
        source_split: SourceSplit::Dev,
    };
    let episodes = sample_episodes(&corpus, split, &cfg, run.train.dev_episodes)?;
    Ok(Some((corpus, episodes)))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let overrides = ModelOverrides {
        no_rcl: args.no_rcl,
        no_ibpc: args.no_ibpc,
        scl: args.scl,
        no_tnpg: args.no_tnpg,
    };
    let run = resolve(&args.common, overrides)?;
    let out = run.out_required()?.to_path_buf();
    let corpus = load_corpus(&run.data, &DataArgs::default(), SourceSplit::Train)?;
    let split = load_split(&run.data)?;
    let dev = dev_set(&run, &corpus, &split)?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;

    let ckpt_dir = out.join("ckpt");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut model = Model::new(run.model.clone())?;
    info!(
        "training {} episodes, hyperparameters (k, tau, N_nota, alpha, lambda) = {:?}",
        run.train.total_episodes,
        run.model.hyper.as_tuple()
    );
    let mut trace = String::new();
    let setup = TrainSetup {
        corpus: &corpus,
        split: &split,
        dev: dev.as_ref().map(|(c, e)| DevSet { corpus: c, episodes: e }),
        checkpoint_dir: Some(&ckpt_dir),
        resume,
    };
    let log_every = (run.train.total_steps() / 20).max(1);
    let (best, report) = run_training(&mut model, setup, &run.train, |r| {
        let line = TraceLine {
            step: r.step,
            lr: r.lr,
            loss: r.loss,
            bce: r.bce,
            rcl: r.rcl,
            grad_norm: r.grad_norm,
        };
        trace.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
        trace.push('\n');
        if (r.step + 1) % log_every == 0 {
            info!("step {} loss {:.4} (bce {:.4}, rcl {:.4}) lr {:.2e}", r.step + 1, r.loss, r.bce, r.rcl, r.lr);
        }
    })?;
    let best_dir = ckpt_dir.join(format!("step-{}", best.meta.step));
    write_text(&out.join("trace.jsonl"), &trace)?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            steps: report.steps,
            best_step: report.best_step,
            best_dev_f1: report.best_dev_f1,
            early_stopped: report.early_stopped,
            checkpoint: best_dir.clone(),
            hyperparameters: run.model.hyper.as_tuple(),
            config: &run,
        },
    )?;
    println!("{}", best_dir.display());
    Ok(())
}

/// Checkpoint, episodes and the corpus they refer to.
#[derive(Clone, Debug, clap::Args)]
pub struct ScoringArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint directory (`.../ckpt/step-<n>`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Episode file written by `build-episodes`.
    #[arg(long)]
    pub episodes: PathBuf,
}

struct Scoring {
    model: Model,
    corpus: Corpus,
    episodes: Vec<Episode>,
    out: PathBuf,
}

fn prepare(args: &ScoringArgs) -> Result<Scoring> {
    let run = resolve(&args.common, ModelOverrides::default())?;
    let out = run.out_required()?.to_path_buf();
    if !args.checkpoint.is_dir() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", args.checkpoint.display())).into());
    }
    let model = Checkpoint::load(&args.checkpoint)?.restore_model()?;
    let (header, episodes) = read_episode_file(&args.episodes)?;
    let source: SourceSplit = header.split_name.parse()?;
    let corpus = load_corpus(&run.data, &args.data, source)?;
    for e in &episodes {
        e.validate(&corpus)?;
    }
    Ok(Scoring {
        model,
        corpus,
        episodes,
        out,
    })
}

#[derive(Clone, Debug, clap::Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// pooled or per-episode-mean.
    #[arg(long, default_value = "pooled")]
    pub f1_aggregation: String,
    /// Also write NOTA-rate bins to bins.json.
    #[arg(long)]
    pub bins: bool,
}

#[derive(Serialize)]
struct BinScore {
    bin: String,
    episodes: usize,
    macro_f1: Option<f64>,
}

fn nota_rate_scores(s: &Scoring, preds: &[PredictionSet], boundaries: &[f64]) -> Result<Vec<BinScore>> {
    bin_by_nota_rate(&s.episodes, &s.corpus, boundaries)?
        .into_iter()
        .map(|(bin, idx)| {
            let eps: Vec<Episode> = idx.iter().map(|&i| s.episodes[i].clone()).collect();
            let ps: Vec<PredictionSet> = idx.iter().map(|&i| preds[i].clone()).collect();
            let macro_f1 = if eps.is_empty() {
                None
            } else {
                Some(macro_f1(&ps, &eps, &target_universe(&eps), F1Aggregation::Pooled)?.macro_f1)
            };
            Ok(BinScore {
                bin: bin.to_string(),
                episodes: idx.len(),
                macro_f1,
            })
        })
        .collect()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let aggregation: F1Aggregation = args.f1_aggregation.parse()?;
    let s = prepare(&args.scoring)?;
    let preds = predict_episodes(&s.model, &s.corpus, &s.episodes)?;
    let report = macro_f1(&preds, &s.episodes, &target_universe(&s.episodes), aggregation)?;
    write_json(&s.out.join("report.json"), &report)?;
    if args.bins {
        write_json(&s.out.join("bins.json"), &nota_rate_scores(&s, &preds, &DEFAULT_NOTA_BOUNDARIES)?)?;
    }
    println!("macro F1 ({}) {:.4} over {} episodes", args.f1_aggregation, report.macro_f1, report.episode_count);
    Ok(())
}

#[derive(Clone, Debug, clap::Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// NOTA-rate bin boundaries, from 0 to 1.
    #[arg(long, value_delimiter = ',')]
    pub boundaries: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct CategoryScore {
    category: String,
    items: usize,
    macro_f1: f64,
}

#[derive(Serialize)]
struct Analysis {
    nota_rate: Vec<BinScore>,
    support_count: Vec<CategoryScore>,
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let s = prepare(&args.scoring)?;
    let boundaries = args.boundaries.clone().unwrap_or_else(|| DEFAULT_NOTA_BOUNDARIES.to_vec());
    let preds = predict_episodes(&s.model, &s.corpus, &s.episodes)?;
    let nota_rate = nota_rate_scores(&s, &preds, &boundaries)?;
    let support_count = bin_by_support_count(&s.episodes)
        .into_iter()
        .map(|(cat, items)| {
            Ok(CategoryScore {
                category: cat.to_string(),
                items: items.len(),
                macro_f1: macro_f1_on_items(&preds, &s.episodes, &items)?.macro_f1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for b in &nota_rate {
        println!("NOTA rate {}: {} episodes, macro F1 {:?}", b.bin, b.episodes, b.macro_f1);
    }
    for c in &support_count {
        println!("support count {}: {} items, macro F1 {:.4}", c.category, c.items, c.macro_f1);
    }
    write_json(
        &s.out.join("analysis.json"),
        &Analysis {
            nota_rate,
            support_count,
        },
    )
}

#[derive(Clone, Debug, clap::Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// At most this many instances per relation and episode.
    #[arg(long)]
    pub per_relation: Option<usize>,
}

pub fn dump_embeddings(args: &DumpArgs) -> Result<()> {
    let s = prepare(&args.scoring)?;
    if let Some(parent) = s.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let rows = dump_support_embeddings(&s.model, &s.corpus, &s.episodes, args.per_relation, &s.out)?;
    println!("wrote {rows} rows to {}", s.out.display());
    Ok(())
}
