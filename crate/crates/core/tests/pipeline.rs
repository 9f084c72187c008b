use std::collections::BTreeSet;

use fewdoc::corpus::{Corpus, RelationSplit, SourceSplit, Triple};
use fewdoc::encoding::ToyEncoderConfig;
use fewdoc::episode::{ordered_pairs, sample_episodes, Episode, EpisodeConfig};
use fewdoc::evaluation::{dump_support_embeddings, parse_embedding_dump, predict_episode, predict_episodes};
use fewdoc::model::{Model, ModelConfig, TaskFamily};
use fewdoc::objectives::{relation_probability, ContrastiveVariant};
use fewdoc::representation::query_pair_representation;
use fewdoc::synthetic::{synthetic_corpus, SyntheticConfig};
use fewdoc::trainer::{train, Checkpoint, DevSet, TrainConfig, TrainSetup};
use fewdoc::Error;

fn toy() -> ToyEncoderConfig {
    ToyEncoderConfig {
        vocab_size: 256,
        hidden: 16,
        layers: 1,
        heads: 2,
        ffn: 32,
        max_len: 128,
        piece_chars: 4,
    }
}

fn model_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(TaskFamily::InDomain);
    cfg.toy = toy();
    cfg.seed = seed;
    cfg
}

fn corpus() -> Corpus {
    synthetic_corpus(&SyntheticConfig {
        documents: 12,
        relations: 4,
        min_entities: 3,
        max_entities: 5,
        max_triples: 3,
        seed: 11,
    })
    .unwrap()
}

fn split() -> RelationSplit {
    RelationSplit::new(vec!["R0", "R1", "R2"], vec!["R3"], vec![]).unwrap()
}

fn episodes(corpus: &Corpus, n_docs: usize, count: usize) -> Vec<Episode> {
    let cfg = EpisodeConfig {
        n_docs,
        seed: 5,
        max_target_relations: usize::MAX,
        source_split: SourceSplit::Train,
    };
    sample_episodes(corpus, &split(), &cfg, count).unwrap()
}

#[test]
fn predictions_match_a_brute_force_scan() {
    let corpus = corpus();
    let model = Model::new(model_config(1)).unwrap();
    let projection = model.projection.values(&model.params);
    for e in episodes(&corpus, 1, 20).iter().chain(&episodes(&corpus, 3, 10)) {
        let set = model.prototype_set(&corpus, e).unwrap();
        let enc = model.encode(&corpus, &e.query_doc_id).unwrap();
        let mut expected = BTreeSet::new();
        for (h, t) in ordered_pairs(enc.marked.entity_count) {
            let q = query_pair_representation(&enc, h, t, &projection).unwrap();
            for r in &e.target_relations {
                if relation_probability(&q, &set.relation_prototypes[r], &set.nota_prototypes) > 0.5 {
                    expected.insert(Triple::new(h, r.clone(), t));
                }
            }
        }
        let got = predict_episode(&model, &corpus, e).unwrap().triples;
        assert_eq!(got, expected);
        let targets = e.target_set();
        assert!(got.iter().all(|t| t.head != t.tail && targets.contains(t.relation.as_str())));
    }
}

#[test]
fn nota_prototypes_mix_a_selected_instance() {
    let corpus = corpus();
    let model = Model::new(model_config(2)).unwrap();
    let bank = model.bank_values();
    let mut mixed = 0;
    for e in episodes(&corpus, 1, 20) {
        let set = model.prototype_set(&corpus, &e).unwrap();
        assert_eq!(set.nota_prototypes.len(), bank.len());
        assert_eq!(set.relation_prototypes.len(), e.target_relations.len());
        if set.selected_nota.iter().any(Option::is_some) {
            mixed += 1;
            assert_ne!(set.nota_prototypes[0], bank.vector(0));
        }
    }
    assert!(mixed > 0);
}

#[test]
fn ablations_change_the_loss_terms() {
    let corpus = corpus();
    let eps = episodes(&corpus, 3, 5);
    let base = Model::new(model_config(3)).unwrap();

    let mut off = model_config(3);
    off.contrastive = ContrastiveVariant::Off;
    off.hyper.lambda = 0.0;
    let off = Model::new(off).unwrap();

    let mut scl = model_config(3);
    scl.contrastive = ContrastiveVariant::Scl;
    let scl = Model::new(scl).unwrap();

    let mut no_ibpc = model_config(3);
    no_ibpc.disable_ibpc = true;
    let no_ibpc = Model::new(no_ibpc).unwrap();

    let mut differs = false;
    for e in &eps {
        let (b, _) = base.loss_and_gradients(&corpus, e).unwrap();
        let (o, _) = off.loss_and_gradients(&corpus, e).unwrap();
        let (s, _) = scl.loss_and_gradients(&corpus, e).unwrap();
        let (n, _) = no_ibpc.loss_and_gradients(&corpus, e).unwrap();
        assert_eq!(o.rcl, 0.0);
        assert_eq!(o.total, o.bce);
        assert_eq!(o.bce, b.bce);
        assert_eq!(s.bce, b.bce);
        assert!(s.rcl <= b.rcl + 1e-12, "unit weights never exceed the relation weights");
        assert_eq!(b.total, b.bce + 0.1 * b.rcl);
        differs |= n.bce != b.bce;
    }
    assert!(differs, "the pair path changes support representations");
}

#[test]
fn tnpg_guard_holds_during_training() {
    let corpus = corpus();
    let mut cfg = model_config(4);
    cfg.disable_tnpg = true;
    let mut model = Model::new(cfg).unwrap();
    let bank_before = model.bank_values();
    let tc = TrainConfig {
        learning_rate: 1e-3,
        total_episodes: 8,
        episodes_per_batch: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let setup = TrainSetup {
        corpus: &corpus,
        split: &split(),
        dev: None,
        checkpoint_dir: None,
        resume: None,
    };
    train(&mut model, setup, &tc, |_| {}).unwrap();
    assert_ne!(model.bank_values(), bank_before, "the bank is still trained");
    for e in episodes(&corpus, 1, 10) {
        let set = model.prototype_set(&corpus, &e).unwrap();
        for (i, p) in set.nota_prototypes.iter().enumerate() {
            assert_eq!(p, &model.bank_values().vector(i));
        }
    }
}

fn run_config(total: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        total_episodes: total,
        episodes_per_batch: 2,
        eval_interval: 3,
        patience: 100,
        dev_episodes: 10,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoints_round_trip_and_resume_deterministically() {
    let corpus = corpus();
    let split = split();
    let dev = episodes(&corpus, 1, 10);
    let dir = tempfile::tempdir().unwrap();
    let tc = run_config(24);

    let mut full = Model::new(model_config(6)).unwrap();
    let setup = TrainSetup {
        corpus: &corpus,
        split: &split,
        dev: Some(DevSet {
            corpus: &corpus,
            episodes: &dev,
        }),
        checkpoint_dir: Some(dir.path()),
        resume: None,
    };
    let (best, report) = train(&mut full, setup, &tc, |_| {}).unwrap();
    assert_eq!(report.steps, 12);
    assert_eq!(best.meta.best_step, report.best_step);
    assert_eq!(full.params.to_archive(), best.params);

    let latest = Checkpoint::latest(dir.path()).unwrap().unwrap();
    assert!(latest.ends_with("step-12"));
    for step in [3, 6, 9, 12] {
        let ck = Checkpoint::load(&dir.path().join(format!("step-{step}"))).unwrap();
        assert_eq!(ck.meta.step, step);
        assert_eq!(ck.meta.next_episode, (step * 2) as u64);
    }

    // resume from step 6 and replay steps 6..12
    let mid = Checkpoint::load(&dir.path().join("step-6")).unwrap();
    let restored = mid.restore_model().unwrap();
    assert_eq!(restored.params.to_archive(), mid.params);
    let resume_dir = tempfile::tempdir().unwrap();
    for step in [3, 6] {
        let ck = Checkpoint::load(&dir.path().join(format!("step-{step}"))).unwrap();
        ck.save(resume_dir.path()).unwrap();
    }
    let mut resumed = Model::new(model_config(6)).unwrap();
    let setup = TrainSetup {
        corpus: &corpus,
        split: &split,
        dev: Some(DevSet {
            corpus: &corpus,
            episodes: &dev,
        }),
        checkpoint_dir: Some(resume_dir.path()),
        resume: Some(mid),
    };
    let (best_resumed, resumed_report) = train(&mut resumed, setup, &tc, |_| {}).unwrap();
    let tail: Vec<u64> = report.trace[6..].iter().map(|r| r.loss.to_bits()).collect();
    let replay: Vec<u64> = resumed_report.trace.iter().map(|r| r.loss.to_bits()).collect();
    assert_eq!(tail, replay);
    assert_eq!(best_resumed.params, best.params);
    assert_eq!(resumed_report.best_dev_f1, report.best_dev_f1);
    for step in [9, 12] {
        let a = Checkpoint::load(&dir.path().join(format!("step-{step}"))).unwrap();
        let b = Checkpoint::load(&resume_dir.path().join(format!("step-{step}"))).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.optimizer, b.optimizer);
        assert_eq!(a.meta, b.meta);
    }
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let corpus = corpus();
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(model_config(7)).unwrap();
    let setup = TrainSetup {
        corpus: &corpus,
        split: &split(),
        dev: None,
        checkpoint_dir: Some(dir.path()),
        resume: None,
    };
    let (ck, _) = train(&mut model, setup, &run_config(4), |_| {}).unwrap();
    let step_dir = dir.path().join(format!("step-{}", ck.meta.step));
    let meta_path = step_dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).unwrap();
    std::fs::write(&meta_path, text.replace("\"learning_rate\":0.002", "\"learning_rate\":0.003")).unwrap();
    assert!(matches!(Checkpoint::load(&step_dir), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::load(&dir.path().join("missing")).is_err());

    let mut other = model_config(8);
    other.hyper.alpha = 0.5;
    let mut model = Model::new(other).unwrap();
    let setup = TrainSetup {
        corpus: &corpus,
        split: &split(),
        dev: None,
        checkpoint_dir: None,
        resume: Some(ck),
    };
    assert!(matches!(train(&mut model, setup, &run_config(4), |_| {}), Err(Error::Checkpoint(_))));
}

#[test]
fn training_is_reproducible_with_parallel_batches() {
    let corpus = corpus();
    let run = || {
        let mut model = Model::new(model_config(10)).unwrap();
        let setup = TrainSetup {
            corpus: &corpus,
            split: &split(),
            dev: None,
            checkpoint_dir: None,
            resume: None,
        };
        let tc = TrainConfig {
            episodes_per_batch: 4,
            ..run_config(16)
        };
        let (ck, report) = train(&mut model, setup, &tc, |_| {}).unwrap();
        (ck.params, report.trace.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn embedding_dump_round_trips() {
    let corpus = corpus();
    let model = Model::new(model_config(12)).unwrap();
    let eps = episodes(&corpus, 3, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tsv");
    let rows = dump_support_embeddings(&model, &corpus, &eps, None, &path).unwrap();
    let parsed = parse_embedding_dump(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(parsed.len(), rows);

    let mut expected = Vec::new();
    for (i, e) in eps.iter().enumerate() {
        let (instances, set) = model.support_instances(&corpus, e).unwrap();
        let counts = e.support_counts();
        assert_eq!(instances.len(), counts.values().sum::<usize>());
        for inst in instances {
            expected.push((i, inst.provenance.relation.unwrap(), false, inst.s));
        }
        for (r, p) in set.relation_prototypes {
            expected.push((i, r, true, p));
        }
    }
    assert_eq!(parsed.len(), expected.len());
    for (row, (i, r, proto, values)) in parsed.iter().zip(expected) {
        assert_eq!((row.episode, &row.relation, row.prototype), (i, &r, proto));
        assert_eq!(row.values.len(), 2 * model.hidden_size());
        assert!(row.values.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    let capped = dump_support_embeddings(&model, &corpus, &eps, Some(1), &path).unwrap();
    let parsed = parse_embedding_dump(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(parsed.len(), capped);
    let per_episode: usize = eps.iter().map(|e| 2 * e.target_relations.len()).sum();
    assert_eq!(capped, per_episode);

    let empty = dump_support_embeddings(&model, &corpus, &[], None, &path).unwrap();
    assert_eq!(empty, 0);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("episode\trelation\tkind\tv0"));
}

#[test]
fn parallel_prediction_matches_sequential() {
    let corpus = corpus();
    let model = Model::new(model_config(13)).unwrap();
    let eps = episodes(&corpus, 1, 12);
    let parallel = predict_episodes(&model, &corpus, &eps).unwrap();
    let sequential: Vec<_> = eps.iter().map(|e| predict_episode(&model, &corpus, e).unwrap()).collect();
    assert_eq!(parallel, sequential);
}
