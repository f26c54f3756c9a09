//! Fixtures shared by the criterion benches.

use mealkit_core::corpus::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};
use mealkit_core::stage1::{StageOneConfig, StageOneModel};
use mealkit_core::stage2::{StageTwoConfig, StageTwoModel};

pub const MODEL_DIM: usize = 64;

pub fn corpus(n: usize) -> SyntheticCorpus {
    generate_synthetic_corpus(&SynthConfig { n_recipes: n, seed: 11, ..Default::default() }).expect("synthetic corpus")
}

pub fn models(c: &SyntheticCorpus) -> (StageOneModel, StageTwoModel) {
    (
        StageOneModel::new(StageOneConfig { model_dim: MODEL_DIM, ..Default::default() }, c.vocabulary.clone()),
        StageTwoModel::new(StageTwoConfig { model_dim: MODEL_DIM, ..Default::default() }, c.vocabulary.clone()),
    )
}
