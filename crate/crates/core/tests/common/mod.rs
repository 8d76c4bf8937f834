#![allow(dead_code)]

use ned_core::kb::{load_kb, popularity_counts, KbPaths, LoadOptions, StructuredKB};
use ned_core::syncorpus::{generate_all, GenParams, SynCorpus};
use ned_core::trainer::TrainConfig;
use tempfile::TempDir;

/// Small generated KB and corpus; 25 sentences gives 20 training sentences.
pub fn fixture(n_sentences: usize, seed: u64) -> (TempDir, StructuredKB, SynCorpus) {
    let dir = tempfile::tempdir().unwrap();
    let params = GenParams {
        n_entities: 15,
        n_types: 6,
        n_relations: 5,
        n_sentences,
        k_ambiguity: 3,
        seed,
        ..GenParams::default()
    };
    let (_, syn) = generate_all(&params, dir.path()).unwrap();
    let mut kb = load_kb(&KbPaths::in_dir(&dir.path().join("kb")), &LoadOptions::default()).unwrap();
    kb.set_popularity(popularity_counts(&syn.train, &kb).unwrap());
    (dir, kb, syn)
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs: 10,
        batch_size: 4,
        hidden: 16,
        d_entity: 8,
        d_type: 8,
        d_relation: 8,
        d_coarse: 8,
        ff_dim: 16,
        candidates: 3,
        heads: 2,
        ..TrainConfig::default()
    }
}
