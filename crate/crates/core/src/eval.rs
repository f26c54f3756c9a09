//! Held-out metrics for both stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Recipe, Unit};
use crate::error::{ModelError, Result};
use crate::stage1::{iou, GenerationState, IngredientPrediction, Phase, StageOneModel};
use crate::stage2::StageTwoModel;

/// IoU of generated against ground-truth ingredient sets.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IouScores {
    pub main: f64,
    pub optional: f64,
    pub all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Metrics {
    pub n_recipes: usize,
    pub dish_accuracy: f64,
    /// Accuracy of always predicting the most frequent training dish.
    pub majority_dish_accuracy: f64,
    /// Conditioning on the ground-truth dish token.
    pub given_dish: IouScores,
    /// Conditioning on BOS.
    pub no_dish: IouScores,
    /// Conditioning on the classifier's dish.
    pub predicted_dish: IouScores,
    /// Accuracy of main step `t` given the ground-truth mains before it.
    pub step_accuracy_revised: Vec<f64>,
    /// Accuracy of main step `t` given the model's own earlier mains.
    pub step_accuracy_free: Vec<f64>,
    /// Recipes with at least `t` ground-truth mains.
    pub step_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Metrics {
    pub n_recipes: usize,
    pub mae: f64,
    pub mae_pct: f64,
    pub unit_accuracy: f64,
    pub per_unit_mae: BTreeMap<Unit, f64>,
    /// Portion MAE of predicting the training mean portion of each unit.
    pub per_unit_prior_mae: BTreeMap<Unit, f64>,
    pub per_unit_count: BTreeMap<Unit, usize>,
    /// Mean `|Σ o_c − total| / |total|`.
    pub item_sum_discrepancy: f64,
}

/// Table-shaped report over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_recipes: usize,
    pub iou_main: f64,
    pub iou_optional: f64,
    pub iou_all: f64,
    pub mae: f64,
    pub mae_pct: f64,
    pub unit_accuracy: f64,
    pub per_unit_mae: BTreeMap<Unit, f64>,
    /// Total-calorie errors when stage two sees generated ingredients.
    pub mae_generated: f64,
    pub mae_pct_generated: f64,
    pub stage1: Stage1Metrics,
    pub stage2: Stage2Metrics,
}

/// Mean absolute error over `(prediction, truth)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / pairs.len() as f64
}

/// Mean relative absolute error over pairs with positive truth, as a
/// fraction.
pub fn mae_pct(pairs: &[(f64, f64)]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for &(p, t) in pairs {
        if t > 0.0 {
            s += (p - t).abs() / t;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

fn iou_for(state: &GenerationState, recipe: &Recipe) -> IouScores {
    let all: Vec<&str> = recipe.ingredients().collect();
    IouScores {
        main: iou(&state.mains, &recipe.main_ingredients()),
        optional: iou(&state.optionals, &recipe.optional_ingredients()),
        all: iou(&state.accepted(), &all),
    }
}

fn mean_scores(v: &[IouScores]) -> IouScores {
    let n = v.len().max(1) as f64;
    IouScores {
        main: v.iter().map(|s| s.main).sum::<f64>() / n,
        optional: v.iter().map(|s| s.optional).sum::<f64>() / n,
        all: v.iter().map(|s| s.all).sum::<f64>() / n,
    }
}

fn main_hit(p: &IngredientPrediction, remaining: &[&str]) -> bool {
    !p.is_eos && remaining.contains(&p.token.as_str())
}

pub fn evaluate_stage1(model: &StageOneModel, train: &[Recipe], test: &[Recipe]) -> Result<Stage1Metrics> {
    if test.is_empty() {
        return Err(ModelError::EmptySplit("test"));
    }
    let mut dish_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in train {
        *dish_counts.entry(r.dish.as_str()).or_default() += 1;
    }
    let majority = dish_counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(d, _)| *d);
    let steps = model.config.max_main;
    let mut revised = vec![0usize; steps];
    let mut free = vec![0usize; steps];
    let mut counts = vec![0usize; steps];
    let (mut dish_hits, mut majority_hits) = (0, 0);
    let (mut given, mut none, mut predicted) = (Vec::new(), Vec::new(), Vec::new());
    for r in test {
        let (dish, _) = model.classify_dish(&r.features)?;
        dish_hits += usize::from(dish == r.dish);
        majority_hits += usize::from(majority == Some(r.dish.as_str()));
        let g = model.generate(&r.features, Some(&r.dish))?;
        given.push(iou_for(&g, r));
        none.push(iou_for(&model.generate(&r.features, None)?, r));
        predicted.push(iou_for(&model.generate(&r.features, Some(&dish))?, r));

        let gt: Vec<&str> = r.main_ingredients().into_iter().take(steps).collect();
        for t in 0..gt.len() {
            counts[t] += 1;
            let mut state = GenerationState::for_model(model, Some(r.dish.clone()));
            state.mains = gt[..t].iter().map(|s| s.to_string()).collect();
            let p = model.next_ingredient(&state, &r.features)?;
            revised[t] += usize::from(main_hit(&p, &gt[t..]));
        }
        let mut state = GenerationState::for_model(model, Some(r.dish.clone()));
        for slot in free.iter_mut().take(gt.len()) {
            if state.phase != Phase::Main {
                break;
            }
            let remaining: Vec<&str> = gt.iter().copied().filter(|g| !state.mains.iter().any(|m| m == g)).collect();
            let p = model.step(&mut state, &r.features)?;
            *slot += usize::from(main_hit(&p, &remaining));
        }
    }
    Ok(Stage1Metrics {
        n_recipes: test.len(),
        dish_accuracy: ratio(dish_hits, test.len()),
        majority_dish_accuracy: ratio(majority_hits, test.len()),
        given_dish: mean_scores(&given),
        no_dish: mean_scores(&none),
        predicted_dish: mean_scores(&predicted),
        step_accuracy_revised: revised.iter().zip(&counts).map(|(&h, &n)| ratio(h, n)).collect(),
        step_accuracy_free: free.iter().zip(&counts).map(|(&h, &n)| ratio(h, n)).collect(),
        step_counts: counts,
    })
}

/// Training-split mean portion of each unit.
pub fn unit_portion_priors(train: &[Recipe]) -> BTreeMap<Unit, f64> {
    let mut acc: BTreeMap<Unit, (f64, usize)> = BTreeMap::new();
    for l in train.iter().flat_map(|r| &r.lines) {
        let e = acc.entry(l.unit).or_default();
        e.0 += l.portion;
        e.1 += 1;
    }
    acc.into_iter().map(|(u, (s, n))| (u, s / n as f64)).collect()
}

pub fn evaluate_stage2(model: &StageTwoModel, train: &[Recipe], test: &[Recipe]) -> Result<Stage2Metrics> {
    if test.is_empty() {
        return Err(ModelError::EmptySplit("test"));
    }
    let priors = unit_portion_priors(train);
    let global_prior = {
        let (s, n) = train.iter().flat_map(|r| &r.lines).fold((0.0, 0usize), |(s, n), l| (s + l.portion, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let mut totals = Vec::with_capacity(test.len());
    let (mut unit_hits, mut lines) = (0usize, 0usize);
    let mut err: BTreeMap<Unit, (f64, f64, usize)> = BTreeMap::new();
    let mut discrepancy = 0.0;
    for r in test {
        let out = model.estimate(&model.recipe_inputs(r)?)?;
        totals.push((out.total, r.total_kcal));
        let item_sum: f64 = out.o_c.iter().map(|x| x.max(0.0)).sum();
        discrepancy += (item_sum - out.total).abs() / out.total.abs().max(1e-9);
        for ((l, u), p) in r.lines.iter().zip(out.units()).zip(&out.o_p) {
            lines += 1;
            unit_hits += usize::from(u == l.unit);
            let prior = priors.get(&l.unit).copied().unwrap_or(global_prior);
            let e = err.entry(l.unit).or_default();
            e.0 += (p.max(0.0) - l.portion).abs();
            e.1 += (prior - l.portion).abs();
            e.2 += 1;
        }
    }
    Ok(Stage2Metrics {
        n_recipes: test.len(),
        mae: mae(&totals),
        mae_pct: mae_pct(&totals),
        unit_accuracy: ratio(unit_hits, lines),
        per_unit_mae: err.iter().map(|(u, e)| (*u, e.0 / e.2 as f64)).collect(),
        per_unit_prior_mae: err.iter().map(|(u, e)| (*u, e.1 / e.2 as f64)).collect(),
        per_unit_count: err.iter().map(|(u, e)| (*u, e.2)).collect(),
        item_sum_discrepancy: discrepancy / test.len() as f64,
    })
}

/// Stage-two total-calorie pairs on ingredients generated by stage one with
/// the classifier's dish.
pub fn generated_totals(s1: &StageOneModel, s2: &StageTwoModel, test: &[Recipe]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(test.len());
    for r in test {
        let (dish, _) = s1.classify_dish(&r.features)?;
        let state = s1.generate(&r.features, Some(&dish))?;
        let est = s2.estimate(&s2.inputs(&state.accepted(), &r.features, None)?)?;
        out.push((est.total, r.total_kcal));
    }
    Ok(out)
}

pub fn evaluate(s1: &StageOneModel, s2: &StageTwoModel, train: &[Recipe], test: &[Recipe]) -> Result<MetricReport> {
    let m1 = evaluate_stage1(s1, train, test)?;
    let m2 = evaluate_stage2(s2, train, test)?;
    let generated = generated_totals(s1, s2, test)?;
    Ok(MetricReport {
        n_recipes: test.len(),
        iou_main: m1.given_dish.main,
        iou_optional: m1.given_dish.optional,
        iou_all: m1.given_dish.all,
        mae: m2.mae,
        mae_pct: m2.mae_pct,
        unit_accuracy: m2.unit_accuracy,
        per_unit_mae: m2.per_unit_mae.clone(),
        mae_generated: mae(&generated),
        mae_pct_generated: mae_pct(&generated),
        stage1: m1,
        stage2: m2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_helpers() {
        let pairs = [(110.0, 100.0), (50.0, 100.0), (3.0, 0.0)];
        assert!((mae(&pairs) - (10.0 + 50.0 + 3.0) / 3.0).abs() < 1e-12);
        assert!((mae_pct(&pairs) - 0.3).abs() < 1e-12);
        assert_eq!(mae(&[]), 0.0);
    }

    #[test]
    fn perfect_generation_scores_one() {
        let s = GenerationState {
            dish: None,
            mains: vec!["a".into()],
            optionals: vec![],
            phase: Phase::Done,
            confidences: vec![],
            max_main: 5,
            max_total: 10,
        };
        assert_eq!(iou(&s.mains, &["a"]), 1.0);
        assert_eq!(iou(&s.optionals, &[] as &[&str]), 1.0);
    }
}
