//! Training loops for both stages, data splits and loss curves.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Recipe, Vocabulary, MAX_INGREDIENTS, MAX_MAIN};
use crate::error::{ModelError, Result};
use crate::stage1::{StageOneConfig, StageOneModel};
use crate::stage2::{
    stage2_loss, unit_class_weights, StageTwoConfig, StageTwoModel, StageTwoTargets, TargetScales, DEFAULT_LAMBDA,
};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: [f64; 5],
    pub seed: u64,
    pub max_ingredients: usize,
    pub max_main: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub classifier_hidden: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Probability of replacing the dish token with BOS during stage-one
    /// teacher forcing.
    pub dish_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-3,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            max_ingredients: MAX_INGREDIENTS,
            max_main: MAX_MAIN,
            model_dim: 64,
            n_heads: 4,
            n_layers: 2,
            classifier_hidden: 64,
            val_fraction: 0.1,
            test_fraction: 0.1,
            patience: 10,
            dish_dropout: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn stage_one(&self, channels: usize) -> StageOneConfig {
        StageOneConfig {
            model_dim: self.model_dim,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            channels,
            classifier_hidden: self.classifier_hidden,
            max_ingredients: self.max_ingredients,
            max_main: self.max_main,
            top_k: 5,
            seed: self.seed,
        }
    }

    pub fn stage_two(&self, channels: usize, scales: TargetScales) -> StageTwoConfig {
        StageTwoConfig {
            model_dim: self.model_dim,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            channels,
            max_ingredients: self.max_ingredients,
            seed: self.seed.wrapping_add(1),
            scales,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic split by `sha256(seed ‖ id)`.
pub fn split_of(id: &str, seed: u64, val_fraction: f64, test_fraction: f64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    let u = u64::from_le_bytes(d[..8].try_into().expect("digest")) as f64 / (u64::MAX as f64 + 1.0);
    if u < test_fraction {
        Split::Test
    } else if u < test_fraction + val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Recipe>,
    pub val: Vec<Recipe>,
    pub test: Vec<Recipe>,
}

pub fn split_corpus(recipes: &[Recipe], config: &TrainConfig) -> Splits {
    let mut s = Splits::default();
    for r in recipes {
        match split_of(&r.id, config.seed, config.val_fraction, config.test_fraction) {
            Split::Train => s.train.push(r.clone()),
            Split::Val => s.val.push(r.clone()),
            Split::Test => s.test.push(r.clone()),
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Per-term training losses (stage two only).
    pub train_terms: Vec<f64>,
    /// Validation loss (stage one) or total-calorie MAE (stage two).
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn check_finite(loss: f64, store: &ParamStore, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() || !store.grads_finite() {
        log::error!("non-finite loss {loss} at epoch {epoch}, step {step}");
        return Err(ModelError::DivergedLoss { epoch, step });
    }
    Ok(())
}

fn scale_grads(store: &mut ParamStore, s: f64) {
    for p in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
    }
}

/// Shared minibatch loop: `example` records one loss on a fresh graph and
/// returns the graph's gradients already accumulated into the store.
pub(crate) fn run_epochs<M, L, V>(
    model: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore,
    n_train: usize,
    config: &TrainConfig,
    mut example_loss: L,
    mut validate: V,
) -> Result<(Vec<EpochLog>, usize, Option<M>)>
where
    M: Clone,
    L: FnMut(&mut M, usize, &mut ChaCha8Rng, usize, usize) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&M) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut adam = AdamState::new(store_of(model), config.adam());
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, M)> = None;
    let batch = config.batch_size.max(1);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut term_sums: Vec<f64> = Vec::new();
        for (step, chunk) in order.chunks(batch).enumerate() {
            store_of(model).zero_grad();
            for &i in chunk {
                let (l, terms) = example_loss(model, i, &mut rng, epoch, step)?;
                loss_sum += l;
                if term_sums.len() < terms.len() {
                    term_sums.resize(terms.len(), 0.0);
                }
                term_sums.iter_mut().zip(&terms).for_each(|(s, t)| *s += t);
            }
            let store = store_of(model);
            scale_grads(store, 1.0 / chunk.len() as f64);
            check_finite(loss_sum, store, epoch, step)?;
            adam.step(store);
        }
        let val_metric = validate(model)?;
        let n = n_train.max(1) as f64;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            train_terms: term_sums.iter().map(|s| s / n).collect(),
            val_metric,
        };
        log::info!("epoch {epoch}: train {:.5} val {:.5}", log.train_loss, log.val_metric);
        curve.push(log);
        let improved = best.as_ref().is_none_or(|b| val_metric < b.0);
        if improved && val_metric.is_finite() {
            best = Some((val_metric, epoch, model.clone()));
        } else if config.patience > 0 {
            if let Some((_, be, _)) = &best {
                if epoch - be >= config.patience {
                    log::info!("early stop at epoch {epoch}, best {be}");
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((_, e, m)) => (curve, e, Some(m)),
        None => (curve, 0, None),
    })
}

/// Mean teacher-forced loss (sequence + dish) over `recipes` with the dish
/// token given.
pub fn stage1_eval_loss(model: &StageOneModel, recipes: &[Recipe]) -> Result<f64> {
    if recipes.is_empty() {
        return Err(ModelError::EmptySplit("val"));
    }
    let mut total = 0.0;
    for r in recipes {
        let mut g = Graph::with_params(&model.store);
        let (l, _, _) = model.training_loss(&mut g, r, true)?;
        total += g.value(l).item();
    }
    Ok(total / recipes.len() as f64)
}

/// Trains stage one; validation is the teacher-forced loss. With an empty
/// validation set the training loss selects the checkpoint.
pub fn train_stage1(train: &[Recipe], val: &[Recipe], vocab: &Vocabulary, config: &TrainConfig) -> Result<Trained<StageOneModel>> {
    let first = train.first().ok_or(ModelError::EmptySplit("train"))?;
    let mut model = StageOneModel::new(config.stage_one(first.features.channels()), vocab.clone());
    let dropout = config.dish_dropout;
    let val_set = if val.is_empty() { train } else { val };
    let (curve, best_epoch, best) = run_epochs(
        &mut model,
        |m| &mut m.store,
        train.len(),
        config,
        |m, i, rng, _, _| {
            let with_dish = !(dropout > 0.0 && rng.gen::<f64>() < dropout);
            let grads = {
                let mut g = Graph::with_params(&m.store);
                let (l, s, d) = m.training_loss(&mut g, &train[i], with_dish)?;
                let grads = g.backward(l)?;
                (grads, g.value(l).item(), s, d)
            };
            grads.0.accumulate_into(&mut m.store);
            Ok((grads.1, vec![grads.2, grads.3]))
        },
        |m| stage1_eval_loss(m, val_set),
    )?;
    Ok(Trained { model: best.unwrap_or(model), curve, best_epoch })
}

/// Mean absolute total-calorie error on ground-truth ingredient lists.
pub fn stage2_total_mae(model: &StageTwoModel, recipes: &[Recipe]) -> Result<f64> {
    if recipes.is_empty() {
        return Err(ModelError::EmptySplit("val"));
    }
    let mut s = 0.0;
    for r in recipes {
        let out = model.estimate(&model.recipe_inputs(r)?)?;
        s += (out.total - r.total_kcal).abs();
    }
    Ok(s / recipes.len() as f64)
}

/// Trains stage two with the weighted five-term loss; validation is the
/// total-calorie MAE.
pub fn train_stage2(train: &[Recipe], val: &[Recipe], vocab: &Vocabulary, config: &TrainConfig) -> Result<Trained<StageTwoModel>> {
    let first = train.first().ok_or(ModelError::EmptySplit("train"))?;
    let scales = TargetScales::from_recipes(train)?;
    let weights = unit_class_weights(train).or_else(|e| match e {
        ModelError::UnseenUnit(u) => {
            log::warn!("unit {u} absent from training data; its class weight is set to 0");
            let mut counts = [0usize; crate::stage2::N_UNITS];
            train.iter().flat_map(|r| &r.lines).for_each(|l| counts[l.unit.index()] += 1);
            let total: usize = counts.iter().sum();
            Ok(counts.map(|c| if c == 0 { 0.0 } else { total as f64 / (crate::stage2::N_UNITS * c) as f64 }))
        }
        e => Err(e),
    })?;
    let mut model = StageTwoModel::new(config.stage_two(first.features.channels(), scales), vocab.clone());
    let targets: Vec<StageTwoTargets> = train.iter().map(StageTwoTargets::from_recipe).collect();
    let inputs = train.iter().map(|r| model.recipe_inputs(r)).collect::<Result<Vec<_>>>()?;
    let lambda = config.lambda;
    let val_set = if val.is_empty() { train } else { val };
    let (curve, best_epoch, best) = run_epochs(
        &mut model,
        |m| &mut m.store,
        train.len(),
        config,
        |m, i, _, _, _| {
            let (grads, l, terms) = {
                let mut g = Graph::with_params(&m.store);
                let vars = m.forward(&mut g, &inputs[i])?;
                let (l, terms) = stage2_loss(&mut g, &vars, &targets[i], &m.config.scales, &lambda, &weights)?;
                (g.backward(l)?, g.value(l).item(), terms)
            };
            grads.accumulate_into(&mut m.store);
            Ok((l, terms.to_vec()))
        },
        |m| stage2_total_mae(m, val_set),
    )?;
    Ok(Trained { model: best.unwrap_or(model), curve, best_epoch })
}

/// Trailing-window moving average.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    fn corpus(n: usize) -> crate::corpus::SyntheticCorpus {
        generate_synthetic_corpus(&SynthConfig { n_recipes: n, n_dishes: 3, vocab_size: 30, channels: 8, grid: 2, ..Default::default() })
            .unwrap()
    }

    fn small() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 4, model_dim: 8, n_heads: 2, n_layers: 1, classifier_hidden: 8, ..Default::default() }
    }

    #[test]
    fn splits_are_disjoint_and_stable() {
        let c = corpus(200);
        let cfg = TrainConfig::default();
        let s = split_corpus(&c.recipes, &cfg);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 200);
        let ids = |v: &[Recipe]| v.iter().map(|r| r.id.clone()).collect::<std::collections::HashSet<_>>();
        assert!(ids(&s.train).is_disjoint(&ids(&s.test)));
        assert!(ids(&s.val).is_disjoint(&ids(&s.test)));
        assert!(ids(&s.train).is_disjoint(&ids(&s.val)));
        let again = split_corpus(&c.recipes, &cfg);
        assert_eq!(ids(&again.test), ids(&s.test));
        assert!(!s.test.is_empty() && !s.val.is_empty());
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let c = corpus(16);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, patience: 0, ..small() };
        let init1 = StageOneModel::new(cfg.stage_one(8), c.vocabulary.clone());
        let t1 = train_stage1(&c.recipes, &[], &c.vocabulary, &cfg).unwrap();
        for (a, b) in init1.store.iter().zip(t1.model.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        let scales = TargetScales::from_recipes(&c.recipes).unwrap();
        let init2 = StageTwoModel::new(cfg.stage_two(8, scales), c.vocabulary.clone());
        let t2 = train_stage2(&c.recipes, &[], &c.vocabulary, &cfg).unwrap();
        for (a, b) in init2.store.iter().zip(t2.model.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let c = corpus(24);
        let cfg = small();
        let a = train_stage2(&c.recipes, &[], &c.vocabulary, &cfg).unwrap();
        let b = train_stage2(&c.recipes, &[], &c.vocabulary, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        let a = train_stage1(&c.recipes, &[], &c.vocabulary, &cfg).unwrap();
        let b = train_stage1(&c.recipes, &[], &c.vocabulary, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
