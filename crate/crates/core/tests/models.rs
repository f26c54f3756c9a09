use mealkit_core::baselines::{baseline_prior_dish, baseline_prior_imean};
use mealkit_core::corpus::{generate_synthetic_corpus, Recipe, SynthConfig, SyntheticCorpus, Unit};
use mealkit_core::mealkit::{parse_kit_json, render_kit, rescale, KitFormat, KitItem, MealKit};
use mealkit_core::stage1::{GenerationState, Phase, StageOneConfig, StageOneModel};
use mealkit_core::stage2::{unit_class_weights, StageTwoConfig, StageTwoModel, N_UNITS};
use mealkit_core::tensor::gradcheck::{check_inputs, random_projection};
use mealkit_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

fn corpus() -> &'static SyntheticCorpus {
    static C: OnceLock<SyntheticCorpus> = OnceLock::new();
    C.get_or_init(|| {
        generate_synthetic_corpus(&SynthConfig { n_recipes: 60, channels: 8, grid: 2, seed: 3, ..Default::default() }).unwrap()
    })
}

fn stage1(seed: u64) -> StageOneModel {
    let c = corpus();
    let cfg = StageOneConfig { model_dim: 16, n_heads: 2, n_layers: 1, channels: 8, classifier_hidden: 16, seed, ..Default::default() };
    StageOneModel::new(cfg, c.vocabulary.clone())
}

fn stage2(seed: u64) -> StageTwoModel {
    let c = corpus();
    let cfg = StageTwoConfig { model_dim: 16, n_heads: 2, n_layers: 1, channels: 8, seed, ..Default::default() };
    StageTwoModel::new(cfg, c.vocabulary.clone())
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_match_differences(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [uniform(&mut rng, n, k), uniform(&mut rng, k, m), uniform(&mut rng, 1, m)];
        let report = check_inputs(&inputs, 1e-5, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.layer_norm(h, 1e-5)?;
            let h = g.softmax(h)?;
            random_projection(g, h, seed)
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report.worst);
    }

    #[test]
    fn stage2_outputs_follow_permutations(seed in any::<u64>()) {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = stage2(seed % 7);
        let r = &c.recipes[rng.gen_range(0..c.recipes.len())];
        let names: Vec<&str> = r.ingredients().collect();
        let mut perm: Vec<usize> = (0..names.len()).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<&str> = perm.iter().map(|&i| names[i]).collect();
        let a = model.estimate(&model.inputs(&names, &r.features, None).unwrap()).unwrap();
        let b = model.estimate(&model.inputs(&permuted, &r.features, None).unwrap()).unwrap();
        let gather = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        prop_assert!(max_diff(&gather(&a.o_c), &b.o_c) < 1e-9);
        prop_assert!(max_diff(&gather(&a.o_p), &b.o_p) < 1e-9);
        prop_assert!(max_diff(&gather(&a.o_a), &b.o_a) < 1e-9);
        prop_assert!((a.total - b.total).abs() < 1e-9 * a.total.abs().max(1.0));
    }

    #[test]
    fn stage2_ignores_padding(seed in any::<u64>(), extra in 1usize..6) {
        let c = corpus();
        let model = stage2(seed % 5);
        let r = &c.recipes[(seed as usize) % c.recipes.len()];
        let names: Vec<&str> = r.ingredients().collect();
        let rows = (names.len() + extra).min(model.config.max_ingredients);
        let plain = model.estimate(&model.inputs(&names, &r.features, None).unwrap()).unwrap();
        let padded = model.estimate(&model.inputs(&names, &r.features, Some(rows)).unwrap()).unwrap();
        prop_assert!(max_diff(&plain.o_c, &padded.o_c) < 1e-12);
        prop_assert!(max_diff(&plain.o_p, &padded.o_p) < 1e-12);
        prop_assert!((plain.total - padded.total).abs() < 1e-12);
    }

    #[test]
    fn generation_is_unique_and_bounded(seed in 0u64..50, with_dish in any::<bool>()) {
        let c = corpus();
        let model = stage1(seed);
        let r = &c.recipes[seed as usize % c.recipes.len()];
        let dish = with_dish.then_some(r.dish.as_str());
        let s = model.generate(&r.features, dish).unwrap();
        let all = s.accepted();
        prop_assert_eq!(all.iter().collect::<BTreeSet<_>>().len(), all.len());
        prop_assert!(s.mains.len() <= model.config.max_main);
        prop_assert!(all.len() <= model.config.max_ingredients);
        prop_assert!(all.iter().all(|t| c.vocabulary.contains_ingredient(t)));
        prop_assert_eq!(s.phase, Phase::Done);
        prop_assert_eq!(s.confidences.len(), all.len());
    }

    #[test]
    fn rescale_is_exact_and_composes(
        portions in prop::collection::vec(0.0f64..10.0, 1..8),
        s1 in 0.1f64..20.0,
        s2 in 0.1f64..20.0,
    ) {
        let items: Vec<KitItem> = portions.iter().enumerate().map(|(i, &p)| KitItem {
            ingredient: format!("item{i}"),
            portion: p,
            unit: Unit::ALL[i % N_UNITS],
            unit_confidence: 0.5,
            kcal: 40.0 * p,
            table_kcal: Some(40.0 * p),
            portion_clamped: false,
        }).collect();
        let kit = MealKit::from_items("dish", items, 1.0).unwrap();
        let a = rescale(&kit, s1).unwrap();
        for (x, y) in kit.items.iter().zip(&a.items) {
            prop_assert!((y.portion - x.portion * s1).abs() <= 1e-12 * (1.0 + x.portion * s1));
            prop_assert!((y.kcal - x.kcal * s1).abs() <= 1e-12 * (1.0 + x.kcal * s1));
            prop_assert_eq!(y.unit, x.unit);
        }
        let back = rescale(&rescale(&a, s2).unwrap(), 1.0).unwrap();
        for (x, y) in kit.items.iter().zip(&back.items) {
            prop_assert!((y.portion - x.portion).abs() <= 1e-9 * (1.0 + x.portion));
        }
        let parsed = parse_kit_json(&render_kit(&a, KitFormat::Json).unwrap()).unwrap();
        prop_assert_eq!(parsed, a);
    }
}

#[test]
fn unit_weights_match_hand_count() {
    let c = corpus();
    let mut counts = BTreeMap::new();
    let mut total = 0usize;
    for r in &c.recipes {
        for l in &r.lines {
            *counts.entry(l.unit).or_insert(0usize) += 1;
            total += 1;
        }
    }
    let w = unit_class_weights(&c.recipes).unwrap();
    for u in Unit::ALL {
        let want = total as f64 / (N_UNITS as f64 * counts[&u] as f64);
        assert!((w[u.index()] - want).abs() < 1e-12, "{u}: {} vs {want}", w[u.index()]);
    }
    let weighted: f64 = Unit::ALL.iter().map(|u| w[u.index()] * counts[u] as f64).sum();
    assert!((weighted / total as f64 - 1.0).abs() < 1e-12);
}

fn brute_mean<F: Fn(&Recipe) -> Vec<(String, f64)>>(train: &[Recipe], key: &str, f: F) -> Option<f64> {
    let hits: Vec<f64> = train.iter().flat_map(&f).filter(|(k, _)| k == key).map(|(_, v)| v).collect();
    (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
}

#[test]
fn prior_baselines_match_brute_force() {
    let c = corpus();
    let (train, test) = c.recipes.split_at(40);
    let occ = |r: &Recipe| r.lines.iter().zip(&r.per_ingredient_kcal).map(|(l, k)| (l.ingredient.clone(), *k)).collect();
    let global_occ = {
        let all: Vec<f64> = train.iter().flat_map(|r| r.per_ingredient_kcal.clone()).collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    let global_dish = train.iter().map(|r| r.total_kcal).sum::<f64>() / train.len() as f64;
    let mut imean_err = 0.0;
    let mut dish_err = 0.0;
    for r in test {
        let est: f64 = r.ingredients().map(|i| brute_mean(train, i, occ).unwrap_or(global_occ)).sum();
        imean_err += (est - r.total_kcal).abs();
        let d = brute_mean(train, &r.dish, |t: &Recipe| vec![(t.dish.clone(), t.total_kcal)]).unwrap_or(global_dish);
        dish_err += (d - r.total_kcal).abs();
    }
    let n = test.len() as f64;
    let imean = baseline_prior_imean(train, test, None).unwrap();
    let dish = baseline_prior_dish(train, test, None).unwrap();
    assert!((imean.ground_truth.mae - imean_err / n).abs() < 1e-9);
    assert!((dish.ground_truth.mae - dish_err / n).abs() < 1e-9);
    assert_eq!(imean.ground_truth.n, test.len());
}

#[test]
fn stepping_matches_generate() {
    let c = corpus();
    let model = stage1(2);
    let r = &c.recipes[0];
    let full = model.generate(&r.features, Some(&r.dish)).unwrap();
    let mut s = GenerationState::for_model(&model, Some(r.dish.clone()));
    while !s.is_done() {
        model.step(&mut s, &r.features).unwrap();
    }
    assert_eq!(s.accepted(), full.accepted());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let a = g.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let s = g.softmax(a).unwrap();
    for r in 0..2 {
        assert!((g.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
