//! Episodic meta-training: warmup/decay schedule, AdamW, global-norm
//! clipping, dev early stopping and checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, RelationSplit, SourceSplit};
use crate::episode::{sample_training_episode, Episode, EpisodeConfig};
use crate::evaluation::{macro_f1, predict_episodes, target_universe, F1Aggregation};
use crate::model::{Hyperparameters, Model, ModelConfig, TaskFamily};
use crate::objectives::LossBreakdown;
use crate::params::{ParamArchive, ParamId, ParamStore, TensorRecord};
use crate::tape::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub total_episodes: usize,
    pub episodes_per_batch: usize,
    pub warmup_fraction: f64,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    /// Optimizer steps between dev evaluations.
    pub eval_interval: usize,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    pub dev_episodes: usize,
    pub seed: u64,
    pub n_docs: usize,
    pub max_target_relations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            total_episodes: 50_000,
            episodes_per_batch: 4,
            warmup_fraction: 0.04,
            grad_clip_norm: 1.0,
            weight_decay: 0.01,
            eval_interval: 500,
            patience: 10,
            dev_episodes: 200,
            seed: 0,
            n_docs: 1,
            max_target_relations: usize::MAX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.total_episodes == 0 || self.episodes_per_batch == 0 {
            return bad("total_episodes and episodes_per_batch must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.eval_interval == 0 || self.patience == 0 || self.n_docs == 0 || self.max_target_relations == 0 {
            return bad("eval_interval, patience, n_docs and max_target_relations must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_episodes.div_ceil(self.episodes_per_batch)
    }
}

/// `(k, τ, N_nota, α, λ)` for a task family name.
pub fn hyperparameter_defaults(task_family: &str) -> Result<Hyperparameters> {
    Ok(Hyperparameters::for_family(task_family.parse::<TaskFamily>()?))
}

/// Linear warmup from 0 to `lr` over the first `warmup_fraction·T` steps,
/// then linear decay to 0 at step `T`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let total = cfg.total_steps() as f64;
    let warmup = cfg.warmup_fraction * total;
    let s = step as f64;
    if s < warmup {
        cfg.learning_rate * s / warmup
    } else {
        (cfg.learning_rate * (total - s) / (total - warmup)).max(0.0)
    }
}

/// Global L2 norm across all gradients.
pub fn global_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: BTreeMap<usize, Matrix>,
    second: BTreeMap<usize, Matrix>,
}

/// Serialized optimizer moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: BTreeMap<String, TensorRecord>,
    pub second: BTreeMap<String, TensorRecord>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update with decoupled weight decay on parameters flagged `decay`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            if !store.entry(*id).trainable {
                continue;
            }
            let m = self.first.entry(id.index()).or_insert_with(|| Matrix::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.second.entry(id.index()).or_insert_with(|| Matrix::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let decay = if store.entry(*id).decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&self.first[&id.index()], &self.second[&id.index()]);
            let eps = self.eps;
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * ((m / c1) / ((v / c2).sqrt() + eps) + decay * *p);
            });
        }
    }

    pub fn state(&self, store: &ParamStore) -> OptimizerState {
        let named = |map: &BTreeMap<usize, Matrix>| {
            store
                .iter()
                .filter_map(|(id, e)| map.get(&id.index()).map(|m| (e.name.clone(), TensorRecord::from(m))))
                .collect()
        };
        OptimizerState {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            step: self.step,
            first: named(&self.first),
            second: named(&self.second),
        }
    }

    pub fn from_state(state: &OptimizerState, store: &ParamStore) -> Result<Self> {
        let unnamed = |map: &BTreeMap<String, TensorRecord>| -> Result<BTreeMap<usize, Matrix>> {
            map.iter()
                .map(|(name, rec)| {
                    let id = store
                        .find(name)
                        .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
                    Ok((id.index(), rec.to_matrix()?))
                })
                .collect()
        };
        Ok(Self {
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            weight_decay: state.weight_decay,
            step: state.step,
            first: unnamed(&state.first)?,
            second: unnamed(&state.second)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunSnapshot {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub dev_f1: Option<f64>,
    pub best_dev_f1: Option<f64>,
    /// Step of the checkpoint holding `best_dev_f1`.
    pub best_step: Option<usize>,
    pub stale_evals: usize,
    /// Draw index of the next training episode.
    pub next_episode: u64,
    pub config_hash: String,
    pub config: RunSnapshot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamArchive,
    pub optimizer: OptimizerState,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    crate::corpus::decode_json(&path.display().to_string(), &text)
}

impl Checkpoint {
    /// Writes `root/step-<n>/{params,optimizer,meta}.json`; returns the
    /// step directory.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(format!("step-{}", self.meta.step));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("params.json"), &self.params)?;
        write_json(&dir.join("optimizer.json"), &self.optimizer)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        Ok(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint directory", dir.display())));
        }
        let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Checkpoint(format!("config hash mismatch in {}", dir.display())));
        }
        Ok(Self {
            params: read_json(&dir.join("params.json"))?,
            optimizer: read_json(&dir.join("optimizer.json"))?,
            meta,
        })
    }

    /// Most recent `step-<n>` directory under `root`.
    pub fn latest(root: &Path) -> Result<Option<PathBuf>> {
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let name = entry.file_name();
            let Some(step) = name.to_str().and_then(|n| n.strip_prefix("step-")).and_then(|n| n.parse().ok()) else {
                continue;
            };
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, entry.path()));
            }
        }
        Ok(best.map(|b| b.1))
    }

    /// Rebuilds the model described by the checkpoint with its parameters.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::new(self.meta.config.model.clone())?;
        model.params.load_archive(&self.params)?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    pub rcl: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub trace: Vec<StepRecord>,
    pub best_dev_f1: Option<f64>,
    pub best_step: Option<usize>,
    pub early_stopped: bool,
}

pub struct DevSet<'a> {
    pub corpus: &'a Corpus,
    pub episodes: &'a [Episode],
}

pub struct TrainSetup<'a> {
    pub corpus: &'a Corpus,
    pub split: &'a RelationSplit,
    pub dev: Option<DevSet<'a>>,
    /// Checkpoints go to `<dir>/step-<n>/` when set.
    pub checkpoint_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
}

/// Pooled macro F1 on dev episodes; parameters are only read.
pub fn evaluate_dev(model: &Model, corpus: &Corpus, episodes: &[Episode]) -> Result<f64> {
    let predictions = predict_episodes(model, corpus, episodes)?;
    Ok(macro_f1(&predictions, episodes, &target_universe(episodes), F1Aggregation::Pooled)?.macro_f1)
}

struct Progress {
    step: usize,
    dev_f1: Option<f64>,
    best_dev_f1: Option<f64>,
    best_step: Option<usize>,
    stale_evals: usize,
    next_episode: u64,
}

fn checkpoint(model: &Model, opt: &AdamW, snapshot: &RunSnapshot, p: Progress) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            step: p.step,
            dev_f1: p.dev_f1,
            best_dev_f1: p.best_dev_f1,
            best_step: p.best_step,
            stale_evals: p.stale_evals,
            next_episode: p.next_episode,
            config_hash: snapshot.hash(),
            config: snapshot.clone(),
        },
        params: model.params.to_archive(),
        optimizer: opt.state(&model.params),
    }
}

/// Trains `model` in place. With a dev set the best-scoring parameters are
/// restored at the end and returned as the checkpoint; otherwise the final
/// parameters are.
pub fn train(
    model: &mut Model,
    setup: TrainSetup<'_>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let snapshot = RunSnapshot {
        train: cfg.clone(),
        model: model.config.clone(),
    };
    let total_steps = cfg.total_steps();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut start = 0;
    let mut stale = 0;
    if let Some(ck) = &setup.resume {
        if ck.meta.config.model != model.config {
            return Err(Error::Checkpoint("resumed checkpoint has a different model config".into()));
        }
        model.params.load_archive(&ck.params)?;
        opt = AdamW::from_state(&ck.optimizer, &model.params)?;
        start = ck.meta.step;
        stale = ck.meta.stale_evals;
        report.best_dev_f1 = ck.meta.best_dev_f1;
        report.best_step = ck.meta.best_step;
    }
    let episode_cfg = EpisodeConfig {
        n_docs: cfg.n_docs,
        seed: cfg.seed,
        max_target_relations: cfg.max_target_relations,
        source_split: SourceSplit::Train,
    };
    let mut best: Option<Checkpoint> = None;
    if let (Some(ck), Some(best_step)) = (&setup.resume, report.best_step) {
        if best_step == ck.meta.step {
            best = Some(ck.clone());
        } else if let Some(dir) = setup.checkpoint_dir {
            best = Some(Checkpoint::load(&dir.join(format!("step-{best_step}")))?);
        } else {
            warn!("best checkpoint (step {best_step}) is not reachable without a checkpoint directory");
        }
    }

    for step in start..total_steps {
        let first = step * cfg.episodes_per_batch;
        let last = ((step + 1) * cfg.episodes_per_batch).min(cfg.total_episodes);
        let draws: Vec<u64> = (first as u64..last as u64).collect();
        let episodes = draws
            .iter()
            .map(|&d| sample_training_episode(setup.corpus, setup.split, &episode_cfg, d))
            .collect::<Result<Vec<_>>>()?;
        let model_ref: &Model = model;
        let results = episodes
            .par_iter()
            .map(|e| model_ref.loss_and_gradients(setup.corpus, e))
            .collect::<Result<Vec<_>>>()?;

        let n = results.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut summed: BTreeMap<ParamId, Matrix> = BTreeMap::new();
        for ((breakdown, grads), (episode, draw)) in results.into_iter().zip(episodes.iter().zip(&draws)) {
            let finite = breakdown.total.is_finite() && grads.iter().all(|(_, g)| g.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(Error::NonFiniteLoss {
                    episode: format!("draw {draw} (query {})", episode.query_doc_id),
                    detail: format!("bce {} rcl {} total {}", breakdown.bce, breakdown.rcl, breakdown.total),
                });
            }
            mean.bce += breakdown.bce / n;
            mean.rcl += breakdown.rcl / n;
            mean.total += breakdown.total / n;
            for (id, g) in grads {
                match summed.get_mut(&id) {
                    Some(acc) => *acc += &g,
                    None => {
                        summed.insert(id, g);
                    }
                }
            }
        }
        let mut grads: Vec<(ParamId, Matrix)> = summed.into_iter().map(|(id, g)| (id, g / n)).collect();
        let grad_norm = clip_gradients(&mut grads, cfg.grad_clip_norm);
        let lr = lr_at(cfg, step);
        opt.update(&mut model.params, &grads, lr);

        let record = StepRecord {
            step,
            lr,
            loss: mean.total,
            bce: mean.bce,
            rcl: mean.rcl,
            grad_norm,
        };
        on_step(&record);
        report.trace.push(record);
        report.steps = step + 1;

        let done = step + 1 == total_steps;
        if let Some(dev) = &setup.dev {
            if (step + 1) % cfg.eval_interval == 0 || done {
                let take = dev.episodes.len().min(cfg.dev_episodes);
                let f1 = evaluate_dev(model, dev.corpus, &dev.episodes[..take])?;
                info!("step {}: dev macro F1 {f1:.4}", step + 1);
                let improved = report.best_dev_f1.is_none_or(|b| f1 > b);
                if improved {
                    report.best_dev_f1 = Some(f1);
                    report.best_step = Some(step + 1);
                    stale = 0;
                } else {
                    stale += 1;
                }
                let ck = checkpoint(
                    model,
                    &opt,
                    &snapshot,
                    Progress {
                        step: step + 1,
                        dev_f1: Some(f1),
                        best_dev_f1: report.best_dev_f1,
                        best_step: report.best_step,
                        stale_evals: stale,
                        next_episode: last as u64,
                    },
                );
                if let Some(dir) = setup.checkpoint_dir {
                    ck.save(dir)?;
                }
                if improved {
                    best = Some(ck);
                } else if stale >= cfg.patience {
                    warn!("early stopping after {} steps", step + 1);
                    report.early_stopped = true;
                    break;
                }
            }
        }
    }

    let final_ck = match best {
        Some(ck) => {
            model.params.load_archive(&ck.params)?;
            ck
        }
        None => {
            let ck = checkpoint(
                model,
                &opt,
                &snapshot,
                Progress {
                    step: report.steps,
                    dev_f1: None,
                    best_dev_f1: report.best_dev_f1,
                    best_step: report.best_step,
                    stale_evals: stale,
                    next_episode: (report.steps * cfg.episodes_per_batch).min(cfg.total_episodes) as u64,
                },
            );
            if let Some(dir) = setup.checkpoint_dir {
                ck.save(dir)?;
            }
            ck
        }
    };
    Ok((final_ck, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_breakpoints() {
        let cfg = TrainConfig::default();
        let t = cfg.total_steps();
        assert_eq!(t, 12_500);
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert!((lr_at(&cfg, 500) - 1e-5).abs() < 1e-20);
        assert_eq!(lr_at(&cfg, t), 0.0);
        assert!(lr_at(&cfg, t - 1) <= 1e-5 / 12_000.0 + 1e-20);
        let max = (0..t).map(|s| lr_at(&cfg, s)).fold(0.0, f64::max);
        assert_eq!(max, 1e-5);
    }

    #[test]
    fn clipping_rescales_to_the_limit() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::zeros((1, 2)), false);
        let mut grads = vec![(id, ndarray::array![[3.0, 4.0]])];
        assert_eq!(clip_gradients(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-15);
        let mut small = vec![(id, ndarray::array![[0.3, 0.4]])];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0].1, ndarray::array![[0.3, 0.4]]);
    }

    #[test]
    fn defaults_by_family() {
        assert_eq!(hyperparameter_defaults("in_domain").unwrap().as_tuple(), (15.0, 0.4, 15, 0.9, 0.1));
        assert_eq!(hyperparameter_defaults("cross_domain").unwrap().as_tuple(), (10.0, 0.4, 20, 0.95, 0.1));
        assert!(hyperparameter_defaults("few_shot").is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", ndarray::array![[1.0, -1.0]], false);
        let mut opt = AdamW::new(0.0);
        opt.update(&mut store, &[(id, ndarray::array![[2.0, -0.5]])], 0.1);
        let v = store.value(id);
        assert!((v[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((v[[0, 1]] + 0.9).abs() < 1e-7);
    }
}
