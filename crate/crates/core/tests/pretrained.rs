//! Kept in its own test binary: it sets the model directory variable.

use fewdoc::encoding::{ToyEncoderConfig, ToyProvider};
use fewdoc::model::{EncoderArchive, EncoderSpec, Model, ModelConfig, TaskFamily, MODEL_DIR_ENV};
use fewdoc::params::ParamStore;
use fewdoc::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn pretrained_archives_are_loaded_from_the_model_directory() {
    let cfg = ToyEncoderConfig {
        vocab_size: 128,
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 16,
        max_len: 64,
        piece_chars: 3,
    };
    let mut store = ParamStore::new();
    ToyProvider::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(77));
    let archive = EncoderArchive {
        config: cfg.clone(),
        params: store.to_archive(),
    };
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), serde_json::to_string(&archive).unwrap()).unwrap();
    std::env::set_var(MODEL_DIR_ENV, dir.path());

    let mut mc = ModelConfig::new(TaskFamily::CrossDomain);
    mc.encoder = EncoderSpec::Pretrained("tiny".into());
    let model = Model::new(mc.clone()).unwrap();
    assert_eq!(model.hidden_size(), 8);
    for (name, record) in &archive.params.0 {
        let id = model.params.find(name).unwrap();
        assert_eq!(model.params.value(id), &record.to_matrix().unwrap(), "{name}");
    }
    assert_eq!(model.bank_values().vectors.dim(), (20, 16));

    mc.encoder = EncoderSpec::Pretrained("absent".into());
    assert!(matches!(Model::new(mc), Err(Error::Io { .. })));
}
