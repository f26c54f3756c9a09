//! Calorie baselines: per-ingredient and per-dish priors, and a
//! per-ingredient MLP that sees no other ingredient.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMap, NutritionTable, Recipe, Unit, Vocabulary};
use crate::error::{ModelError, Result};
use crate::eval::{mae, mae_pct};
use crate::stage1::argmax;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::train::{run_epochs, TrainConfig};
use crate::transformer::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub n: usize,
    pub mae: f64,
    pub mae_pct: f64,
}

impl BaselineScores {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self { n: pairs.len(), mae: mae(pairs), mae_pct: mae_pct(pairs) }
    }
}

/// One baseline scored on ground-truth inputs and, when available, on
/// generated ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub name: String,
    pub ground_truth: BaselineScores,
    pub generated: Option<BaselineScores>,
}

/// Training-split mean kcal of each ingredient occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngredientPrior {
    pub means: BTreeMap<String, f64>,
    /// Mean over all ingredient occurrences; used for unseen ingredients.
    pub global: f64,
}

impl IngredientPrior {
    pub fn fit(train: &[Recipe]) -> Result<Self> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let (mut s, mut n) = (0.0, 0usize);
        for r in train {
            for (l, k) in r.lines.iter().zip(&r.per_ingredient_kcal) {
                let e = acc.entry(l.ingredient.clone()).or_default();
                e.0 += k;
                e.1 += 1;
                s += k;
                n += 1;
            }
        }
        if n == 0 {
            return Err(ModelError::EmptySplit("train"));
        }
        Ok(Self { means: acc.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect(), global: s / n as f64 })
    }

    pub fn ingredient(&self, name: &str) -> f64 {
        self.means.get(name).copied().unwrap_or(self.global)
    }

    pub fn estimate<S: AsRef<str>>(&self, ingredients: &[S]) -> f64 {
        ingredients.iter().map(|i| self.ingredient(i.as_ref())).sum()
    }
}

/// Training-split mean recipe kcal of each dish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DishPrior {
    pub means: BTreeMap<String, f64>,
    pub global: f64,
}

impl DishPrior {
    pub fn fit(train: &[Recipe]) -> Result<Self> {
        if train.is_empty() {
            return Err(ModelError::EmptySplit("train"));
        }
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut s = 0.0;
        for r in train {
            let e = acc.entry(r.dish.clone()).or_default();
            e.0 += r.total_kcal;
            e.1 += 1;
            s += r.total_kcal;
        }
        Ok(Self { means: acc.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect(), global: s / train.len() as f64 })
    }

    pub fn estimate(&self, dish: &str) -> f64 {
        self.means.get(dish).copied().unwrap_or(self.global)
    }
}

/// Sum of per-ingredient training means; `generated` holds one ingredient
/// list per test recipe.
pub fn baseline_prior_imean(train: &[Recipe], test: &[Recipe], generated: Option<&[Vec<String>]>) -> Result<BaselineReport> {
    if test.is_empty() {
        return Err(ModelError::EmptySplit("test"));
    }
    let prior = IngredientPrior::fit(train)?;
    let gt: Vec<(f64, f64)> = test
        .iter()
        .map(|r| (prior.estimate(&r.ingredients().collect::<Vec<_>>()), r.total_kcal))
        .collect();
    let generated = generated.map(|g| {
        let pairs: Vec<(f64, f64)> = g.iter().zip(test).map(|(ings, r)| (prior.estimate(ings), r.total_kcal)).collect();
        BaselineScores::from_pairs(&pairs)
    });
    Ok(BaselineReport { name: "P_imean".into(), ground_truth: BaselineScores::from_pairs(&gt), generated })
}

/// Per-dish training mean; `predicted` holds one classifier dish per test
/// recipe.
pub fn baseline_prior_dish(train: &[Recipe], test: &[Recipe], predicted: Option<&[String]>) -> Result<BaselineReport> {
    if test.is_empty() {
        return Err(ModelError::EmptySplit("test"));
    }
    let prior = DishPrior::fit(train)?;
    let gt: Vec<(f64, f64)> = test.iter().map(|r| (prior.estimate(&r.dish), r.total_kcal)).collect();
    let generated = predicted.map(|p| {
        let pairs: Vec<(f64, f64)> = p.iter().zip(test).map(|(d, r)| (prior.estimate(d), r.total_kcal)).collect();
        BaselineScores::from_pairs(&pairs)
    });
    Ok(BaselineReport { name: "P_dish".into(), ground_truth: BaselineScores::from_pairs(&gt), generated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NnVariant {
    /// Regresses each ingredient's kcal.
    Calories,
    /// Predicts each ingredient's unit and portion, converted through the
    /// nutrition table.
    Upc,
}

impl NnVariant {
    pub fn name(self) -> &'static str {
        match self {
            NnVariant::Calories => "NN_calories",
            NnVariant::Upc => "NN_upc",
        }
    }
}

/// `Linear → ReLU → Linear` over `embedding(ingredient) ⊕ mean-pooled
/// features`, applied to each ingredient independently.
#[derive(Debug, Clone)]
pub struct NnBaseline {
    pub variant: NnVariant,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    embedding: ParamId,
    hidden: Linear,
    out: Linear,
    kcal_scale: f64,
    portion_scale: f64,
}

impl NnBaseline {
    pub fn new(variant: NnVariant, vocab: Vocabulary, channels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add_normal("nn.emb", vocab.n_ingredients().max(1), dim, (1.0 / dim as f64).sqrt(), &mut rng);
        let hidden = Linear::new(&mut store, "nn.hidden", dim + channels, 2 * dim, true, &mut rng);
        let outputs = match variant {
            NnVariant::Calories => 1,
            NnVariant::Upc => Unit::COUNT + 1,
        };
        let out = Linear::new(&mut store, "nn.out", 2 * dim, outputs, true, &mut rng);
        Self { variant, vocab, store, embedding, hidden, out, kcal_scale: 1.0, portion_scale: 1.0 }
    }

    fn rows(&self, g: &mut Graph<'_>, ingredients: &[&str], features: &FeatureMap) -> Result<Var> {
        let slots = ingredients
            .iter()
            .map(|i| self.vocab.ingredient_slot(i).ok_or_else(|| ModelError::UnknownToken(i.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let table = g.param(self.embedding);
        let e = g.embedding(table, &slots)?;
        let pooled = features.mean_pooled();
        let f: Vec<Vec<f64>> = (0..slots.len()).map(|_| pooled.clone()).collect();
        let f = g.constant(Tensor::from_rows(&f)?);
        let x = g.concat_cols(&[e, f])?;
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        Ok(self.out.forward(g, h)?)
    }

    fn loss(&self, g: &mut Graph<'_>, recipe: &Recipe) -> Result<Var> {
        let ings: Vec<&str> = recipe.ingredients().collect();
        let y = self.rows(g, &ings, &recipe.features)?;
        match self.variant {
            NnVariant::Calories => {
                let t = g.constant(Tensor::column_vector(recipe.per_ingredient_kcal.iter().map(|k| k / self.kcal_scale).collect()));
                let d = g.sub(y, t)?;
                let sq = g.mul(d, d)?;
                Ok(g.mean(sq)?)
            }
            NnVariant::Upc => {
                let logits = g.slice_cols(y, 0, Unit::COUNT)?;
                let portion = g.slice_cols(y, Unit::COUNT, 1)?;
                let lsm = g.log_softmax(logits)?;
                let idx: Vec<usize> = recipe.lines.iter().map(|l| l.unit.index()).collect();
                let picked = g.gather_cols(lsm, &idx)?;
                let ce = g.mean(picked)?;
                let ce = g.scale(ce, -1.0)?;
                let t = g.constant(Tensor::column_vector(recipe.lines.iter().map(|l| l.portion / self.portion_scale).collect()));
                let d = g.sub(portion, t)?;
                let sq = g.mul(d, d)?;
                let mse = g.mean(sq)?;
                Ok(g.add(ce, mse)?)
            }
        }
    }

    /// Per-ingredient kcal estimates. For the unit/portion variant a missing
    /// table entry falls back to `fallback` for that ingredient.
    pub fn per_ingredient<S: AsRef<str>>(
        &self,
        ingredients: &[S],
        features: &FeatureMap,
        table: &NutritionTable,
        fallback: &IngredientPrior,
    ) -> Result<Vec<f64>> {
        let ings: Vec<&str> = ingredients.iter().map(AsRef::as_ref).collect();
        let mut g = Graph::with_params(&self.store);
        let y = self.rows(&mut g, &ings, features)?;
        let y = g.value(y);
        Ok(match self.variant {
            NnVariant::Calories => y.data().iter().map(|v| v * self.kcal_scale).collect(),
            NnVariant::Upc => ings
                .iter()
                .enumerate()
                .map(|(r, ing)| {
                    let row = y.row(r);
                    let unit = Unit::from_index(argmax(&row[..Unit::COUNT])).expect("unit index");
                    let portion = (row[Unit::COUNT] * self.portion_scale).max(0.0);
                    table.kcal_per_unit(ing, unit).map_or_else(|| fallback.ingredient(ing), |k| k * portion)
                })
                .collect(),
        })
    }

    pub fn estimate<S: AsRef<str>>(
        &self,
        ingredients: &[S],
        features: &FeatureMap,
        table: &NutritionTable,
        fallback: &IngredientPrior,
    ) -> Result<f64> {
        Ok(self.per_ingredient(ingredients, features, table, fallback)?.iter().sum())
    }
}

/// Trains one MLP variant on `train` (validated on `val`, or on `train` when
/// empty) and scores it on `test`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_nn(
    variant: NnVariant,
    train: &[Recipe],
    val: &[Recipe],
    test: &[Recipe],
    vocab: &Vocabulary,
    table: &NutritionTable,
    config: &TrainConfig,
    generated: Option<&[Vec<String>]>,
) -> Result<(NnBaseline, BaselineReport)> {
    let first = train.first().ok_or(ModelError::EmptySplit("train"))?;
    if test.is_empty() {
        return Err(ModelError::EmptySplit("test"));
    }
    let prior = IngredientPrior::fit(train)?;
    let scales = crate::stage2::TargetScales::from_recipes(train)?;
    let mut model = NnBaseline::new(variant, vocab.clone(), first.features.channels(), config.model_dim, config.seed.wrapping_add(7));
    model.kcal_scale = scales.item_kcal;
    model.portion_scale = scales.portion;
    let val_set = if val.is_empty() { train } else { val };
    let score = |m: &NnBaseline, rs: &[Recipe]| -> Result<Vec<(f64, f64)>> {
        rs.iter()
            .map(|r| Ok((m.estimate(&r.ingredients().collect::<Vec<_>>(), &r.features, table, &prior)?, r.total_kcal)))
            .collect()
    };
    let (_, _, best) = run_epochs(
        &mut model,
        |m| &mut m.store,
        train.len(),
        config,
        |m, i, _, _, _| {
            let (grads, l) = {
                let mut g = Graph::with_params(&m.store);
                let l = m.loss(&mut g, &train[i])?;
                (g.backward(l)?, g.value(l).item())
            };
            grads.accumulate_into(&mut m.store);
            Ok((l, Vec::new()))
        },
        |m| Ok(mae(&score(m, val_set)?)),
    )?;
    let model = best.unwrap_or(model);
    let gt = score(&model, test)?;
    let generated = match generated {
        Some(g) => Some(BaselineScores::from_pairs(
            &g.iter()
                .zip(test)
                .map(|(ings, r)| Ok((model.estimate(ings, &r.features, table, &prior)?, r.total_kcal)))
                .collect::<Result<Vec<_>>>()?,
        )),
        None => None,
    };
    let report = BaselineReport { name: variant.name().into(), ground_truth: BaselineScores::from_pairs(&gt), generated };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    fn corpus() -> crate::corpus::SyntheticCorpus {
        generate_synthetic_corpus(&SynthConfig { n_recipes: 20, n_dishes: 2, vocab_size: 30, channels: 4, grid: 2, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn single_recipe_priors_are_exact() {
        let c = corpus();
        let one = &c.recipes[..1];
        let r = baseline_prior_imean(one, one, None).unwrap();
        assert!(r.ground_truth.mae < 1e-9);
        let d = baseline_prior_dish(one, one, None).unwrap();
        assert!(d.ground_truth.mae < 1e-9);
    }

    #[test]
    fn unseen_inputs_use_global_means() {
        let c = corpus();
        let p = IngredientPrior::fit(&c.recipes).unwrap();
        assert_eq!(p.ingredient("not-an-ingredient"), p.global);
        let d = DishPrior::fit(&c.recipes).unwrap();
        assert_eq!(d.estimate("no-such-dish"), d.global);
    }

    #[test]
    fn one_dish_predicts_global_mean() {
        let c = corpus();
        let mut rs = c.recipes.clone();
        rs.iter_mut().for_each(|r| r.dish = "only".into());
        let d = DishPrior::fit(&rs).unwrap();
        assert!((d.estimate("only") - d.global).abs() < 1e-9);
    }

    #[test]
    fn nn_memorises_duplicated_recipe() {
        let c = corpus();
        let rs: Vec<Recipe> = std::iter::repeat_n(c.recipes[0].clone(), 8).collect();
        let cfg = TrainConfig { epochs: 200, batch_size: 8, model_dim: 8, learning_rate: 1e-2, patience: 0, ..Default::default() };
        for v in [NnVariant::Calories, NnVariant::Upc] {
            let (_, rep) = baseline_nn(v, &rs, &[], &rs[..1], &c.vocabulary, &c.table, &cfg, None).unwrap();
            assert!(rep.ground_truth.mae_pct < 0.05, "{v:?}: {rep:?}");
        }
    }
}
