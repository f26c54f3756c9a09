//! Seeded synthetic corpus built from dish templates.
//!
//! Each dish has a signature ingredient, a sequence of main-ingredient slots
//! whose candidate pools grow with the slot index, and a few optional
//! ingredients with their own inclusion probabilities. Portions are
//! log-normal per (dish, ingredient) context and truncated at three standard
//! deviations. Feature maps are a low-rank mix of per-ingredient channel and
//! spatial patterns scaled by ingredient mass, plus a dish pattern and noise.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{render_line, CorpusError, FeatureMap, IngredientLine, NutritionTable, Recipe, Result, Unit, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_recipes: usize,
    pub n_dishes: usize,
    pub vocab_size: usize,
    pub channels: usize,
    pub grid: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    /// Amplitude of the per-dish feature pattern.
    pub dish_weight: f64,
    /// Log-scale standard deviation of portions within a context.
    pub portion_sigma: f64,
    /// Fraction of recipes that get one portion multiplied by `outlier_factor`.
    pub outlier_fraction: f64,
    pub outlier_factor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_recipes: 5000,
            n_dishes: 32,
            vocab_size: 120,
            channels: 64,
            grid: 4,
            noise: 0.5,
            dish_weight: 0.5,
            portion_sigma: 0.25,
            outlier_fraction: 0.0,
            outlier_factor: 100.0,
        }
    }
}

/// Truncation of the portion distribution, in standard deviations.
pub const PORTION_TRUNCATION: f64 = 3.0;

/// Portion distribution of one ingredient inside one dish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortionContext {
    pub unit: Unit,
    pub log_median: f64,
    pub log_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DishTemplate {
    pub dish: String,
    pub signature: String,
    /// Candidate pools for main slots after the signature.
    pub main_pools: Vec<Vec<String>>,
    /// `main_count_probs[j]` is the probability of `j + 2` mains.
    pub main_count_probs: Vec<f64>,
    pub optionals: Vec<(String, f64)>,
    pub contexts: BTreeMap<String, PortionContext>,
}

impl DishTemplate {
    pub fn max_mains(&self) -> usize {
        self.main_pools.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct IngredientSpec {
    base: Unit,
    grams_per_count: f64,
    grams_per_cup: f64,
    kcal_per_gram: f64,
    base_median: f64,
}

impl IngredientSpec {
    fn grams(&self, unit: Unit) -> f64 {
        match unit {
            Unit::Pound => 453.592,
            Unit::Ounce => 28.3495,
            Unit::Cup => self.grams_per_cup,
            Unit::Tblsp => self.grams_per_cup / 16.0,
            Unit::Tsp => self.grams_per_cup / 48.0,
            Unit::Count => self.grams_per_count,
        }
    }

    fn countable(&self) -> bool {
        self.base == Unit::Count
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub recipes: Vec<Recipe>,
    pub table: NutritionTable,
    pub vocabulary: Vocabulary,
    pub templates: Vec<DishTemplate>,
    /// Recipes whose portions were corrupted by outlier injection.
    pub outlier_ids: Vec<String>,
    pub config: SynthConfig,
}

const PRODUCE: &[&str] = &[
    "carrot", "onion", "potato", "tomato", "garlic", "lemon", "lime", "apple", "banana", "zucchini", "eggplant",
    "capsicum", "cucumber", "avocado", "mushroom", "leek", "shallot", "jalapeno", "orange", "pear", "peach", "egg",
    "celery", "sweet potato", "beet", "turnip", "radish", "corn", "green onion", "chili", "mango", "fig", "plum",
    "apricot", "tortilla",
];
const MEAT: &[&str] = &[
    "ground beef", "chicken breast", "chicken thigh", "pork shoulder", "pork chop", "lamb", "beef steak", "salmon",
    "cod", "shrimp", "turkey", "sausage", "bacon", "ham", "tofu", "duck", "veal", "tuna", "mussels", "crab",
];
const CUPS: &[&str] = &[
    "milk", "heavy cream", "yogurt", "flour", "sugar", "rice", "oats", "stock", "chickpea", "lentils", "black beans",
    "quinoa", "pasta", "breadcrumbs", "spinach", "kale", "lettuce", "cabbage", "peas", "broccoli", "cauliflower",
    "tomato sauce", "coconut milk", "orange juice", "brown sugar", "cornmeal", "couscous", "noodles", "walnuts",
    "raisins", "blueberries", "strawberries", "cilantro", "parsley", "basil",
];
const SPOONS: &[&str] = &[
    "oil", "butter", "soy sauce", "honey", "mayonnaise", "mustard", "tomato ketchup", "vinegar", "maple syrup",
    "peanut butter", "tomato paste", "lemon juice", "sesame oil", "fish sauce", "hot sauce", "jam", "cocoa powder",
    "cornstarch", "capers", "pesto",
];
const SPICES: &[&str] = &[
    "salt", "black pepper", "cumin", "paprika", "oregano", "thyme", "cinnamon", "nutmeg", "chili powder",
    "baking powder", "baking soda", "vanilla extract", "ginger", "turmeric", "curry powder", "garam masala",
    "rosemary", "sesame seeds", "red pepper flakes", "yeast",
];
const OUNCES: &[&str] = &[
    "cheddar", "mozzarella", "parmesan", "feta", "cream cheese", "goat cheese", "dark chocolate", "pecans",
    "pine nuts", "cashews", "ricotta", "gruyere", "pancetta", "prosciutto",
];

/// Dish names used for the first 32 templates.
pub const DISH_NAMES: [&str; 32] = [
    "omelette", "pancakes", "pizza", "lasagna", "risotto", "curry", "stir fry", "tacos", "burrito",
    "chili con carne", "minestrone", "beef stew", "caesar salad", "burger", "quiche", "paella", "fried rice",
    "pad thai", "ramen", "gnocchi", "moussaka", "shepherds pie", "frittata", "casserole", "smoothie", "muffins",
    "brownies", "banana bread", "granola", "hummus", "ratatouille", "goulash",
];

const ADJECTIVES: &[&str] = &[
    "easy", "classic", "homemade", "quick", "simple", "best", "healthy", "spicy", "creamy", "rustic", "weeknight",
    "family",
];

fn catalog() -> Vec<(String, Unit)> {
    let groups: [(&[&str], Unit); 6] = [
        (PRODUCE, Unit::Count),
        (MEAT, Unit::Pound),
        (CUPS, Unit::Cup),
        (SPOONS, Unit::Tblsp),
        (SPICES, Unit::Tsp),
        (OUNCES, Unit::Ounce),
    ];
    groups
        .iter()
        .flat_map(|(names, u)| names.iter().map(move |n| (n.to_string(), *u)))
        .collect()
}

fn spec_for(base: Unit, rng: &mut ChaCha8Rng) -> IngredientSpec {
    let (kcal_lo, kcal_hi, median) = match base {
        Unit::Count => (0.2, 1.6, 2.0),
        Unit::Pound => (1.0, 3.0, 1.0),
        Unit::Cup => (0.2, 4.0, 1.0),
        Unit::Tblsp => (1.0, 8.0, 2.0),
        Unit::Tsp => (0.0, 3.5, 1.0),
        Unit::Ounce => (2.5, 5.5, 4.0),
    };
    IngredientSpec {
        base,
        grams_per_count: rng.gen_range(40.0..250.0),
        grams_per_cup: rng.gen_range(90.0..250.0),
        kcal_per_gram: rng.gen_range(kcal_lo..kcal_hi),
        base_median: median * (rng.gen_range(-0.5..0.5f64)).exp(),
    }
}

fn alternates(spec: &IngredientSpec) -> &'static [Unit] {
    match spec.base {
        Unit::Count => &[Unit::Cup, Unit::Ounce],
        Unit::Pound => &[Unit::Ounce],
        Unit::Cup => &[Unit::Tblsp, Unit::Ounce],
        Unit::Tblsp => &[Unit::Tsp, Unit::Cup],
        Unit::Tsp => &[Unit::Tblsp],
        Unit::Ounce => &[Unit::Cup, Unit::Pound],
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn truncated_gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z = gauss(rng);
        if z.abs() <= PORTION_TRUNCATION {
            return z;
        }
    }
}

fn round_portion(p: f64) -> f64 {
    ((p * 100.0).round() / 100.0).max(0.01)
}

fn validate(c: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(CorpusError::InvalidParameter(m.to_string()));
    if c.n_dishes == 0 {
        return bad("n_dishes must be at least 1");
    }
    if c.vocab_size < c.n_dishes || c.vocab_size < 2 {
        return bad("vocab_size must be at least n_dishes and at least 2");
    }
    if c.channels == 0 || c.grid == 0 {
        return bad("feature dimensions must be positive");
    }
    if c.noise < 0.0 || c.portion_sigma < 0.0 || !(0.0..=1.0).contains(&c.outlier_fraction) || c.outlier_factor <= 0.0 {
        return bad("noise, sigma, outlier fraction and factor must be in range");
    }
    Ok(())
}

struct FeatureBasis {
    channel: Vec<Vec<f64>>,
    spatial: Vec<Vec<f64>>,
    dish: Vec<Vec<f64>>,
}

fn feature_basis(n_ingredients: usize, n_dishes: usize, channels: usize, grid: usize, rng: &mut ChaCha8Rng) -> FeatureBasis {
    let channel = (0..n_ingredients).map(|_| (0..channels).map(|_| gauss(rng)).collect()).collect();
    let spatial = (0..n_ingredients)
        .map(|_| {
            let cx = rng.gen_range(0.0..grid as f64);
            let cy = rng.gen_range(0.0..grid as f64);
            let r: f64 = rng.gen_range(0.8..1.6) * (grid as f64 / 4.0).max(0.25);
            let mut blob: Vec<f64> = (0..grid * grid)
                .map(|p| {
                    let (i, j) = ((p / grid) as f64 + 0.5, (p % grid) as f64 + 0.5);
                    (-((i - cx).powi(2) + (j - cy).powi(2)) / (2.0 * r * r)).exp()
                })
                .collect();
            let m = blob.iter().copied().fold(0.0, f64::max);
            blob.iter_mut().for_each(|v| *v /= m);
            blob
        })
        .collect();
    let dish = (0..n_dishes).map(|_| (0..channels).map(|_| gauss(rng)).collect()).collect();
    FeatureBasis { channel, spatial, dish }
}

/// Generates a deterministic corpus for `config`.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut pool = catalog();
    pool.shuffle(&mut rng);
    let bases = [Unit::Count, Unit::Pound, Unit::Cup, Unit::Tblsp, Unit::Tsp, Unit::Ounce];
    while pool.len() < config.vocab_size {
        let i = pool.len();
        pool.push((format!("ingredient {i}"), bases[rng.gen_range(0..bases.len())]));
    }
    pool.truncate(config.vocab_size);
    let specs: Vec<IngredientSpec> = pool.iter().map(|(_, u)| spec_for(*u, &mut rng)).collect();
    let names: Vec<String> = pool.into_iter().map(|(n, _)| n).collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let mut table = NutritionTable::new();
    for (name, spec) in names.iter().zip(&specs) {
        for u in Unit::ALL {
            if u != Unit::Count || spec.countable() {
                table.insert(name.clone(), u, spec.grams(u) * spec.kcal_per_gram);
            }
        }
    }

    let dish_names: Vec<String> = (0..config.n_dishes)
        .map(|d| DISH_NAMES.get(d).map_or_else(|| format!("dish {d}"), |s| s.to_string()))
        .collect();

    let mut signatures: Vec<usize> = (0..names.len()).collect();
    signatures.shuffle(&mut rng);
    let mut templates = Vec::with_capacity(config.n_dishes);
    for (d, dish) in dish_names.iter().enumerate() {
        let sig = signatures[d];
        let mut rest: Vec<usize> = (0..names.len()).filter(|&i| i != sig).collect();
        rest.shuffle(&mut rng);
        let mut cursor = 0;
        let mut main_pools = Vec::new();
        for slot in 2..=5usize {
            let take = slot.min(rest.len().saturating_sub(cursor));
            if take == 0 {
                break;
            }
            main_pools.push(rest[cursor..cursor + take].iter().map(|&i| names[i].clone()).collect::<Vec<_>>());
            cursor += take;
        }
        let n_opt = 5.min(rest.len() - cursor);
        let optionals: Vec<(String, f64)> =
            rest[cursor..cursor + n_opt].iter().map(|&i| (names[i].clone(), rng.gen_range(0.2..0.6))).collect();
        let weights = [0.15, 0.35, 0.30, 0.20];
        let raw = &weights[..main_pools.len()];
        let z: f64 = raw.iter().sum();
        let main_count_probs = raw.iter().map(|w| w / z).collect();

        let mut contexts = BTreeMap::new();
        let members = std::iter::once(names[sig].clone())
            .chain(main_pools.iter().flatten().cloned())
            .chain(optionals.iter().map(|o| o.0.clone()));
        for name in members {
            let spec = &specs[index[name.as_str()]];
            let unit = if rng.gen_bool(0.25) {
                let alts = alternates(spec);
                alts[rng.gen_range(0..alts.len())]
            } else {
                spec.base
            };
            let mass = spec.base_median * spec.grams(spec.base);
            contexts.insert(
                name,
                PortionContext { unit, log_median: (mass / spec.grams(unit)).ln(), log_sigma: config.portion_sigma },
            );
        }
        templates.push(DishTemplate {
            dish: dish.clone(),
            signature: names[sig].clone(),
            main_pools,
            main_count_probs,
            optionals,
            contexts,
        });
    }

    let basis = feature_basis(names.len(), config.n_dishes, config.channels, config.grid, &mut rng);

    let mut recipes = Vec::with_capacity(config.n_recipes);
    for r in 0..config.n_recipes {
        let d = rng.gen_range(0..config.n_dishes);
        let t = &templates[d];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut n_main = t.max_mains();
        for (j, p) in t.main_count_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                n_main = j + 2;
                break;
            }
        }
        let mut chosen: Vec<(String, bool)> = vec![(t.signature.clone(), true)];
        for pool in &t.main_pools[..n_main - 1] {
            chosen.push((pool[rng.gen_range(0..pool.len())].clone(), true));
        }
        for (name, p) in &t.optionals {
            if rng.gen_bool(*p) {
                chosen.push((name.clone(), false));
            }
        }
        let lines: Vec<IngredientLine> = chosen
            .into_iter()
            .map(|(name, main)| {
                let ctx = &t.contexts[&name];
                let portion = round_portion((ctx.log_median + ctx.log_sigma * truncated_gauss(&mut rng)).exp());
                let mut line = IngredientLine { raw_text: String::new(), ingredient: name, portion, unit: ctx.unit, main };
                line.raw_text = render_line(&line, &table);
                line
            })
            .collect();
        let features = render_features(&lines, d, &specs, &index, &basis, config, &mut rng);
        let title = make_title(&t.dish, &t.signature, &mut rng);
        recipes.push(Recipe::new(format!("syn{}-{r:05}", config.seed), title, t.dish.clone(), lines, features, &table)?);
    }

    let mut outlier_ids = Vec::new();
    let n_out = (config.outlier_fraction * config.n_recipes as f64).round() as usize;
    if n_out > 0 {
        let mut picks: Vec<usize> = (0..recipes.len()).collect();
        picks.shuffle(&mut rng);
        let mut picks = picks[..n_out].to_vec();
        picks.sort_unstable();
        for r in picks {
            let recipe = &mut recipes[r];
            let li = rng.gen_range(0..recipe.lines.len());
            let line = &mut recipe.lines[li];
            line.portion = round_portion(line.portion * config.outlier_factor);
            line.raw_text = render_line(line, &table);
            recipe.refresh_calories(&table)?;
            outlier_ids.push(recipe.id.clone());
        }
    }

    let mut sorted_names = names.clone();
    sorted_names.sort();
    let vocabulary = Vocabulary::new(sorted_names, dish_names)?;
    Ok(SyntheticCorpus { recipes, table, vocabulary, templates, outlier_ids, config: config.clone() })
}

fn make_title(dish: &str, signature: &str, rng: &mut ChaCha8Rng) -> String {
    let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
    if rng.gen_bool(0.5) {
        format!("{adj} {dish} with {signature}")
    } else {
        format!("{adj} {dish}")
    }
}

fn render_features(
    lines: &[IngredientLine],
    dish: usize,
    specs: &[IngredientSpec],
    index: &BTreeMap<&str, usize>,
    basis: &FeatureBasis,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> FeatureMap {
    let (m, s) = (config.channels, config.grid * config.grid);
    let mut values = vec![0.0f64; m * s];
    for l in lines {
        let i = index[l.ingredient.as_str()];
        let amp = (l.portion * specs[i].grams(l.unit) / 100.0).sqrt();
        for c in 0..m {
            let a = amp * basis.channel[i][c];
            for p in 0..s {
                values[c * s + p] += a * basis.spatial[i][p];
            }
        }
    }
    for c in 0..m {
        let b = config.dish_weight * basis.dish[dish][c];
        for p in 0..s {
            values[c * s + p] += b;
        }
    }
    if config.noise > 0.0 {
        for v in values.iter_mut() {
            *v += config.noise * gauss(rng);
        }
    }
    FeatureMap::new(config.channels, config.grid, values.into_iter().map(|v| v as f32).collect())
        .expect("generated features are finite")
}

impl SyntheticCorpus {
    /// Dish template by name.
    pub fn template(&self, dish: &str) -> Option<&DishTemplate> {
        self.templates.iter().find(|t| t.dish == dish)
    }

    pub fn outlier_set(&self) -> HashSet<&str> {
        self.outlier_ids.iter().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { seed, n_recipes: 200, n_dishes: 6, vocab_size: 60, channels: 8, grid: 2, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_corpus(&small(3)).unwrap();
        let b = generate_synthetic_corpus(&small(3)).unwrap();
        let c = generate_synthetic_corpus(&small(4)).unwrap();
        assert_eq!(a.recipes, b.recipes);
        assert_eq!(a.table, b.table);
        assert_ne!(a.recipes, c.recipes);
    }

    #[test]
    fn recipes_respect_bounds_and_bookkeeping() {
        let c = generate_synthetic_corpus(&small(1)).unwrap();
        for r in &c.recipes {
            assert!((2..=10).contains(&r.lines.len()));
            let sum: f64 = r.per_ingredient_kcal.iter().sum();
            assert!((sum - r.total_kcal).abs() <= 1e-6 * r.total_kcal.max(1.0));
            assert!(r.lines.iter().all(|l| l.portion > 0.0));
            assert!(r.lines[0].main && r.lines[0].ingredient == c.template(&r.dish).unwrap().signature);
            let names: HashSet<_> = r.ingredients().collect();
            assert_eq!(names.len(), r.lines.len());
            assert!(r.ingredients().all(|i| c.vocabulary.contains_ingredient(i)));
        }
    }

    #[test]
    fn zero_noise_identical_compositions_match() {
        let cfg = SynthConfig { noise: 0.0, portion_sigma: 0.0, n_recipes: 100, n_dishes: 1, vocab_size: 8, ..small(9) };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let key = |r: &Recipe| {
            let mut k: Vec<String> = r.lines.iter().map(|l| format!("{}|{}|{}", l.ingredient, l.portion, l.unit)).collect();
            k.sort();
            k
        };
        let mut seen: BTreeMap<_, &Recipe> = BTreeMap::new();
        let mut pairs = 0;
        for r in &c.recipes {
            if let Some(prev) = seen.insert(key(r), r) {
                assert_eq!(prev.features, r.features);
                pairs += 1;
            }
        }
        assert!(pairs > 10);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_synthetic_corpus(&SynthConfig { n_dishes: 0, ..small(0) }).is_err());
        assert!(generate_synthetic_corpus(&SynthConfig { vocab_size: 3, n_dishes: 4, ..small(0) }).is_err());
    }

    #[test]
    fn outliers_are_scaled() {
        let cfg = SynthConfig { outlier_fraction: 0.05, ..small(2) };
        let clean = generate_synthetic_corpus(&SynthConfig { outlier_fraction: 0.0, ..cfg.clone() }).unwrap();
        let dirty = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(dirty.outlier_ids.len(), 10);
        let bad = dirty.outlier_set();
        for (a, b) in clean.recipes.iter().zip(&dirty.recipes) {
            assert_eq!(a == b, !bad.contains(b.id.as_str()));
        }
    }
}
