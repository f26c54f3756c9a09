use std::collections::{BTreeMap, HashSet};

use mealkit_core::corpus::io::{read_corpus, write_corpus};
use mealkit_core::corpus::synth::PORTION_TRUNCATION;
use mealkit_core::corpus::{
    cluster_dishes, filter_corpus, generate_synthetic_corpus, ingest_corpus, parse_ingredient_line, render_line,
    ClusterConfig, FeatureMap, FilterConfig, NutritionTable, RawRecipe, SynonymMap, SynthConfig, Unit,
};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

/// Adjusted Rand index from the contingency table.
fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&n| c2(n)).sum();
    let sa: f64 = ra.values().map(|&n| c2(n)).sum();
    let sb: f64 = rb.values().map(|&n| c2(n)).sum();
    let expected = sa * sb / c2(a.len() as u64);
    let max = (sa + sb) / 2.0;
    (index - expected) / (max - expected)
}

#[test]
fn ari_oracle_sanity() {
    assert!((adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 7, 7]) - 1.0).abs() < 1e-12);
    assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
}

#[test]
fn clustering_recovers_templates() {
    let c = generate_synthetic_corpus(&SynthConfig { seed: 11, n_recipes: 5000, ..Default::default() }).unwrap();
    let labels = cluster_dishes(&c.recipes, &ClusterConfig { k: 32, seed: 1, ..Default::default() }).unwrap();
    let truth: Vec<usize> = c.recipes.iter().map(|r| c.vocabulary.dish_slot(&r.dish).unwrap()).collect();
    let ari = adjusted_rand_index(&labels, &truth);
    assert!(ari >= 0.9, "ARI {ari}");
    let again = cluster_dishes(&c.recipes, &ClusterConfig { k: 32, seed: 1, ..Default::default() }).unwrap();
    assert_eq!(labels, again);
}

#[test]
fn injected_outliers_are_exactly_the_dropped_recipes() {
    let cfg = SynthConfig { seed: 5, n_recipes: 10_000, outlier_fraction: 0.01, channels: 4, grid: 2, ..Default::default() };
    let c = generate_synthetic_corpus(&cfg).unwrap();
    let cfg = FilterConfig { coverage: 1.0, ..Default::default() };
    let (_, _, report) = filter_corpus(c.recipes.clone(), &cfg).unwrap();
    let dropped: HashSet<&str> = report.outlier_ids.iter().map(String::as_str).collect();
    let injected = c.outlier_set();
    let missed: Vec<_> = injected.difference(&dropped).collect();
    let wrong: Vec<_> = dropped.difference(&injected).collect();
    assert!(missed.is_empty() && wrong.is_empty(), "missed {missed:?} wrongly dropped {wrong:?}");
}

fn golden_table() -> NutritionTable {
    let countable = [
        "cabbage", "carrot", "onion", "egg", "zucchini", "eggplant", "capsicum", "tomato", "potato", "green onion",
        "cloves", "lemon", "ginger",
    ];
    let other = [
        "oil", "flour", "milk", "salt", "sugar", "nutmeg", "honey", "butter", "vanilla extract", "cheddar",
        "ground beef", "chicken breast", "mozzarella", "soy sauce", "cumin", "black pepper", "tomato paste",
        "heavy cream", "chickpea", "shrimp", "tomato ketchup", "rice", "stock", "yogurt", "baking powder", "water",
        "jam", "bacon", "pasta", "spinach", "oats",
    ];
    let mut t = NutritionTable::new();
    for i in countable {
        for u in Unit::ALL {
            t.insert(i, u, 1.0);
        }
    }
    for i in other {
        for u in Unit::ALL.into_iter().filter(|&u| u != Unit::Count) {
            t.insert(i, u, 1.0);
        }
    }
    t
}

#[test]
fn golden_parser_corpus_is_exact() {
    let table = golden_table();
    let synonyms = SynonymMap::builtin();
    let text = include_str!("data/golden_lines.tsv");
    let mut n = 0;
    for row in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = row.split('\t').collect();
        let want_portion: f64 = f[2].parse().unwrap();
        let want_unit: Unit = f[3].parse().unwrap();
        let got = parse_ingredient_line(f[0], &table, &synonyms).unwrap_or_else(|e| panic!("{:?}: {e}", f[0]));
        assert_eq!(
            (got.ingredient.as_str(), got.portion, got.unit),
            (f[1], want_portion, want_unit),
            "line {:?}",
            f[0]
        );
        n += 1;
    }
    assert!(n >= 50, "golden corpus has {n} lines");
}

#[test]
fn synthetic_lines_round_trip_through_text() {
    let c = generate_synthetic_corpus(&SynthConfig { seed: 2, n_recipes: 1000, channels: 4, grid: 2, ..Default::default() })
        .unwrap();
    let synonyms = SynonymMap::builtin();
    for line in c.recipes.iter().flat_map(|r| &r.lines) {
        let a = parse_ingredient_line(&line.raw_text, &c.table, &synonyms).unwrap();
        assert_eq!((&a.ingredient, a.portion, a.unit), (&line.ingredient, line.portion, line.unit));
        let b = parse_ingredient_line(&render_line(&a, &c.table), &c.table, &synonyms).unwrap();
        assert_eq!((&a.ingredient, a.portion, a.unit), (&b.ingredient, b.portion, b.unit));
    }
}

#[test]
fn recipe_totals_match_direct_table_sum() {
    let c = generate_synthetic_corpus(&SynthConfig { seed: 8, n_recipes: 500, channels: 4, grid: 2, ..Default::default() })
        .unwrap();
    for r in &c.recipes {
        let mut total = 0.0;
        for (line, &k) in r.lines.iter().zip(&r.per_ingredient_kcal) {
            let direct = line.portion * c.table.kcal_per_unit(&line.ingredient, line.unit).unwrap();
            assert_eq!(direct, k);
            total += direct;
        }
        assert_eq!(total, r.total_kcal);
    }
}

/// Mean of exp(mu + sigma Z) with Z standard normal truncated to |Z| <= c.
fn truncated_lognormal_mean(mu: f64, sigma: f64, c: f64) -> f64 {
    let n = Normal::standard();
    (mu + sigma * sigma / 2.0).exp() * (n.cdf(c - sigma) - n.cdf(-c - sigma)) / (n.cdf(c) - n.cdf(-c))
}

#[test]
fn per_unit_portion_means_match_templates() {
    let cfg = SynthConfig { seed: 4, n_recipes: 5000, channels: 4, grid: 2, ..Default::default() };
    let c = generate_synthetic_corpus(&cfg).unwrap();
    let mut weight = BTreeMap::<Unit, f64>::new();
    let mut moment = BTreeMap::<Unit, f64>::new();
    for t in &c.templates {
        let mut incl: Vec<(&str, f64)> = vec![(t.signature.as_str(), 1.0)];
        for (j, pool) in t.main_pools.iter().enumerate() {
            let p_reach: f64 = t.main_count_probs[j..].iter().sum();
            incl.extend(pool.iter().map(|i| (i.as_str(), p_reach / pool.len() as f64)));
        }
        incl.extend(t.optionals.iter().map(|(i, p)| (i.as_str(), *p)));
        for (name, p) in incl {
            let ctx = &t.contexts[name];
            *weight.entry(ctx.unit).or_default() += p;
            *moment.entry(ctx.unit).or_default() +=
                p * truncated_lognormal_mean(ctx.log_median, ctx.log_sigma, PORTION_TRUNCATION);
        }
    }
    for u in Unit::ALL {
        let xs: Vec<f64> =
            c.recipes.iter().flat_map(|r| &r.lines).filter(|l| l.unit == u).map(|l| l.portion).collect();
        if xs.len() < 30 {
            continue;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let expected = moment[&u] / weight[&u];
        let se = sd / n.sqrt();
        assert!((mean - expected).abs() <= 3.0 * se, "{u}: mean {mean} expected {expected} se {se}");
    }
}

#[test]
fn ingest_recovers_synthetic_corpus() {
    let c = generate_synthetic_corpus(&SynthConfig { seed: 6, n_recipes: 800, n_dishes: 8, channels: 4, grid: 2, ..Default::default() })
        .unwrap();
    let raw: Vec<RawRecipe> = c
        .recipes
        .iter()
        .enumerate()
        .map(|(i, r)| RawRecipe {
            id: r.id.clone(),
            title: r.title.clone(),
            lines: r.lines.iter().map(|l| l.raw_text.clone()).chain(if i == 0 { Some("a pinch of love".into()) } else { None }).collect(),
            features_ref: i,
        })
        .collect();
    let features: Vec<FeatureMap> = c.recipes.iter().map(|r| r.features.clone()).collect();
    let (recipes, vocab, report) = ingest_corpus(
        &raw,
        &features,
        &c.table,
        &SynonymMap::builtin(),
        &FilterConfig { coverage: 1.0, ..Default::default() },
        &ClusterConfig { k: 8, seed: 0, ..Default::default() },
    )
    .unwrap();
    assert_eq!(report.dropped_parse.get("unparsable_quantity"), Some(&1));
    assert_eq!(recipes.len(), c.recipes.len() - 1);
    assert_eq!(vocab.n_dishes(), 8);
    let by_id: BTreeMap<&str, _> = c.recipes.iter().map(|r| (r.id.as_str(), r)).collect();
    let (mut agree, mut total) = (0usize, 0usize);
    for r in &recipes {
        let orig = by_id[r.id.as_str()];
        assert!((r.total_kcal - orig.total_kcal).abs() < 1e-9 * orig.total_kcal.max(1.0));
        let sig = &c.template(&orig.dish).unwrap().signature;
        total += 1;
        agree += usize::from(r.lines[0].ingredient == *sig && r.lines[0].main);
    }
    assert!(agree as f64 / total as f64 > 0.95, "{agree}/{total}");
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &recipes, &c.table, &vocab).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    for (a, b) in back.recipes.iter().zip(&recipes) {
        assert_eq!(a.lines, b.lines);
        assert_eq!(a.features, b.features);
        assert_eq!((&a.id, &a.title, &a.dish), (&b.id, &b.title, &b.dish));
        assert_eq!(a.per_ingredient_kcal, b.per_ingredient_kcal);
        assert_eq!(a.total_kcal, b.total_kcal);
    }
}

fn zipf_corpus(seed: u64, n: usize) -> Vec<mealkit_core::corpus::Recipe> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut t = NutritionTable::new();
    for i in 0..40 {
        t.insert(format!("i{i}"), Unit::Cup, 10.0);
    }
    (0..n)
        .map(|k| {
            let m = rng.gen_range(1..6);
            let mut names = Vec::new();
            while names.len() < m {
                let z: f64 = rng.gen();
                let name = format!("i{}", ((40.0f64).powf(z * z) as usize).min(39));
                if !names.contains(&name) {
                    names.push(name);
                }
            }
            let lines = names
                .into_iter()
                .map(|i| mealkit_core::corpus::IngredientLine {
                    raw_text: String::new(),
                    ingredient: i,
                    portion: rng.gen_range(0.5..2.0),
                    unit: Unit::Cup,
                    main: false,
                })
                .collect();
            mealkit_core::corpus::Recipe::new(format!("r{k}"), String::new(), String::new(), lines, FeatureMap::zeros(1, 1), &t)
                .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coverage_is_met_and_monotone(seed in 0u64..1000, lo in 0.5f64..0.9, step in 0.0f64..0.1) {
        let corpus = zipf_corpus(seed, 300);
        let cfg = |c| FilterConfig { coverage: c, portion_outlier_z: 1e6, ..Default::default() };
        let (_, v_lo, r_lo) = filter_corpus(corpus.clone(), &cfg(lo)).unwrap();
        let (_, v_hi, r_hi) = filter_corpus(corpus, &cfg(lo + step)).unwrap();
        prop_assert!(r_lo.coverage() >= lo);
        prop_assert!(r_hi.coverage() >= lo + step);
        prop_assert!(v_hi.n_ingredients() >= v_lo.n_ingredients());
        for i in v_lo.ingredients() {
            prop_assert!(v_hi.contains_ingredient(i));
        }
    }

    #[test]
    fn rendered_lines_reparse(idx in 0usize..60, cents in 1u32..100_000, unit in 0usize..6) {
        let c = generate_synthetic_corpus(&SynthConfig { seed: 1, n_recipes: 1, channels: 1, grid: 1, vocab_size: 60, ..Default::default() }).unwrap();
        let name = c.vocabulary.ingredients()[idx].clone();
        let unit = Unit::from_index(unit).unwrap();
        prop_assume!(c.table.kcal_per_unit(&name, unit).is_some());
        let line = mealkit_core::corpus::IngredientLine { raw_text: String::new(), ingredient: name, portion: cents as f64 / 100.0, unit, main: false };
        let back = parse_ingredient_line(&render_line(&line, &c.table), &c.table, &SynonymMap::builtin()).unwrap();
        prop_assert_eq!((back.ingredient, back.portion, back.unit), (line.ingredient, line.portion, line.unit));
    }
}
