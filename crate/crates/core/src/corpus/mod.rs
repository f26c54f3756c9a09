//! Recipe corpora: domain types, ingredient-line parsing, filtering, dish
//! clustering, the synthetic generator and on-disk formats.

mod cluster;
mod filter;
pub mod io;
mod parse;
pub mod synth;

pub use cluster::{bag_vectors, cluster_dishes, name_clusters, ClusterConfig};
pub use filter::{filter_corpus, mark_main_ingredients, FilterConfig, FilterReport};
pub use io::{Corpus, RawRecipe};
pub use parse::{parse_ingredient_line, parse_quantity, render_line, SynonymMap};
pub use synth::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Default maximum number of ingredients per recipe.
pub const MAX_INGREDIENTS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("no leading quantity in {0:?}")]
    UnparsableQuantity(String),
    #[error("unit word {0:?} is not one of the six units")]
    UnknownUnit(String),
    #[error("unknown ingredient {0:?}")]
    UnknownIngredient(String),
    #[error("no nutrition entry for ({ingredient}, {unit})")]
    MissingNutritionEntry { ingredient: String, unit: Unit },
    #[error("every recipe was filtered out")]
    EmptyCorpus,
    #[error("cannot form {k} clusters from {n} recipes")]
    InvalidK { k: usize, n: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed corpus: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// The closed set of measurement units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Pound,
    Ounce,
    Cup,
    Count,
    Tblsp,
    Tsp,
}

impl Unit {
    pub const ALL: [Unit; 6] = [Unit::Pound, Unit::Ounce, Unit::Cup, Unit::Count, Unit::Tblsp, Unit::Tsp];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Unit> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Pound => "pound",
            Unit::Ounce => "ounce",
            Unit::Cup => "cup",
            Unit::Count => "count",
            Unit::Tblsp => "tblsp",
            Unit::Tsp => "tsp",
        }
    }

    /// Word used when rendering a quantity; `None` for bare counts.
    pub fn display_word(self, plural: bool) -> Option<&'static str> {
        Some(match (self, plural) {
            (Unit::Count, _) => return None,
            (Unit::Pound, false) => "pound",
            (Unit::Pound, true) => "pounds",
            (Unit::Ounce, false) => "ounce",
            (Unit::Ounce, true) => "ounces",
            (Unit::Cup, false) => "cup",
            (Unit::Cup, true) => "cups",
            (Unit::Tblsp, _) => "tblsp",
            (Unit::Tsp, _) => "tsp",
        })
    }

    pub fn is_volume(self) -> bool {
        matches!(self, Unit::Cup | Unit::Tblsp | Unit::Tsp)
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Unit {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Unit::ALL
            .into_iter()
            .find(|u| u.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownUnit(s.to_string()))
    }
}

/// One parsed `(ingredient, portion, unit)` tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngredientLine {
    #[serde(rename = "text")]
    pub raw_text: String,
    pub ingredient: String,
    pub portion: f64,
    pub unit: Unit,
    /// Whether the ingredient is one of the recipe's main ingredients.
    #[serde(default)]
    pub main: bool,
}

/// Image feature map of shape `M × n × n`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    grid: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, grid: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || grid == 0 || values.len() != channels * grid * grid {
            return Err(CorpusError::Format(format!(
                "feature map {channels}x{grid}x{grid} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::Format("non-finite feature value".into()));
        }
        Ok(Self { channels, grid, values })
    }

    pub fn zeros(channels: usize, grid: usize) -> Self {
        Self { channels, grid, values: vec![0.0; channels * grid * grid] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn positions_count(&self) -> usize {
        self.grid * self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Value at channel `c`, spatial `(i, j)`.
    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.values[(c * self.grid + i) * self.grid + j]
    }

    /// `n² × M` matrix; row `i·n + j` holds the channel vector at `(i, j)`.
    pub fn positions(&self) -> Tensor {
        let s = self.positions_count();
        let mut data = vec![0.0; s * self.channels];
        for c in 0..self.channels {
            for p in 0..s {
                data[p * self.channels + c] = self.values[c * s + p] as f64;
            }
        }
        Tensor::matrix(s, self.channels, data)
    }

    /// Mean over spatial positions, one value per channel.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let s = self.positions_count();
        self.values
            .chunks(s)
            .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / s as f64)
            .collect()
    }
}

/// A recipe with parsed ingredient lines and derived calories.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub id: String,
    pub title: String,
    /// Dish-class token; empty until clustering has assigned one.
    pub dish: String,
    pub lines: Vec<IngredientLine>,
    pub features: FeatureMap,
    pub total_kcal: f64,
    pub per_ingredient_kcal: Vec<f64>,
}

impl Recipe {
    /// Builds a recipe and derives its calories from `table`.
    pub fn new(
        id: String,
        title: String,
        dish: String,
        lines: Vec<IngredientLine>,
        features: FeatureMap,
        table: &NutritionTable,
    ) -> Result<Self> {
        let per_ingredient_kcal = lines.iter().map(|l| compute_calories(l, table)).collect::<Result<Vec<_>>>()?;
        let total_kcal = per_ingredient_kcal.iter().sum();
        Ok(Self { id, title, dish, lines, features, total_kcal, per_ingredient_kcal })
    }

    pub fn ingredients(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().map(|l| l.ingredient.as_str())
    }

    pub fn main_ingredients(&self) -> Vec<&str> {
        self.lines.iter().filter(|l| l.main).map(|l| l.ingredient.as_str()).collect()
    }

    pub fn optional_ingredients(&self) -> Vec<&str> {
        self.lines.iter().filter(|l| !l.main).map(|l| l.ingredient.as_str()).collect()
    }

    /// Recomputes calories after lines changed.
    pub fn refresh_calories(&mut self, table: &NutritionTable) -> Result<()> {
        self.per_ingredient_kcal = self.lines.iter().map(|l| compute_calories(l, table)).collect::<Result<Vec<_>>>()?;
        self.total_kcal = self.per_ingredient_kcal.iter().sum();
        Ok(())
    }
}

/// `portion × kcal-per-unit`.
pub fn compute_calories(line: &IngredientLine, table: &NutritionTable) -> Result<f64> {
    table
        .kcal_per_unit(&line.ingredient, line.unit)
        .map(|k| line.portion * k)
        .ok_or_else(|| CorpusError::MissingNutritionEntry { ingredient: line.ingredient.clone(), unit: line.unit })
}

/// kcal per one unit of an ingredient, keyed by `(ingredient, unit)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NutritionTable {
    entries: BTreeMap<(String, Unit), f64>,
}

impl NutritionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ingredient: impl Into<String>, unit: Unit, kcal: f64) {
        self.entries.insert((ingredient.into(), unit), kcal);
    }

    pub fn kcal_per_unit(&self, ingredient: &str, unit: Unit) -> Option<f64> {
        // BTreeMap<(String, Unit)> cannot be probed with (&str, Unit) without allocating
        self.entries.get(&(ingredient.to_string(), unit)).copied()
    }

    pub fn contains_ingredient(&self, ingredient: &str) -> bool {
        self.entries
            .range((ingredient.to_string(), Unit::Pound)..=(ingredient.to_string(), Unit::Tsp))
            .next()
            .is_some()
    }

    pub fn is_countable(&self, ingredient: &str) -> bool {
        self.kcal_per_unit(ingredient, Unit::Count).is_some()
    }

    pub fn ingredients(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(i, _)| i.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Unit, f64)> {
        self.entries.iter().map(|((i, u), k)| (i.as_str(), *u, *k))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const BOS: &str = "<bos>";
pub const SPECIALS: [&str; 3] = [PAD, EOS, BOS];

/// Token ↔ index maps. Layout: specials, then dishes, then ingredients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    ingredients: Vec<String>,
    dishes: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(ingredients: Vec<String>, dishes: Vec<String>) -> Result<Self> {
        let mut v = Self { ingredients, dishes, index: HashMap::new() };
        v.rebuild_index()?;
        Ok(v)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(self.dishes.iter().cloned())
            .chain(self.ingredients.iter().cloned())
            .collect();
        for (i, t) in tokens.into_iter().enumerate() {
            if self.index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(())
    }

    /// Restores the lookup index after deserialisation.
    pub fn reindexed(mut self) -> Result<Self> {
        self.rebuild_index()?;
        Ok(self)
    }

    pub fn with_dishes(&self, dishes: Vec<String>) -> Result<Self> {
        Self::new(self.ingredients.clone(), dishes)
    }

    pub fn size(&self) -> usize {
        SPECIALS.len() + self.dishes.len() + self.ingredients.len()
    }

    pub fn n_ingredients(&self) -> usize {
        self.ingredients.len()
    }

    pub fn n_dishes(&self) -> usize {
        self.dishes.len()
    }

    pub fn ingredients(&self) -> &[String] {
        &self.ingredients
    }

    pub fn dishes(&self) -> &[String] {
        &self.dishes
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn eos_id(&self) -> usize {
        1
    }

    pub fn bos_id(&self) -> usize {
        2
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        let d0 = SPECIALS.len();
        let i0 = d0 + self.dishes.len();
        if index < d0 {
            Some(SPECIALS[index])
        } else if index < i0 {
            Some(&self.dishes[index - d0])
        } else {
            self.ingredients.get(index - i0).map(String::as_str)
        }
    }

    pub fn first_ingredient_id(&self) -> usize {
        SPECIALS.len() + self.dishes.len()
    }

    pub fn is_ingredient_id(&self, index: usize) -> bool {
        index >= self.first_ingredient_id() && index < self.size()
    }

    pub fn is_dish_id(&self, index: usize) -> bool {
        index >= SPECIALS.len() && index < self.first_ingredient_id()
    }

    /// Token index of an ingredient.
    pub fn ingredient_id(&self, name: &str) -> Option<usize> {
        self.index_of(name).filter(|&i| self.is_ingredient_id(i))
    }

    /// Token index of a dish.
    pub fn dish_id(&self, name: &str) -> Option<usize> {
        self.index_of(name).filter(|&i| self.is_dish_id(i))
    }

    /// Position of an ingredient within the ingredient list (`0..N_i`).
    pub fn ingredient_slot(&self, name: &str) -> Option<usize> {
        self.ingredient_id(name).map(|i| i - self.first_ingredient_id())
    }

    /// Position of a dish within the dish list (`0..N_d`).
    pub fn dish_slot(&self, name: &str) -> Option<usize> {
        self.dish_id(name).map(|i| i - SPECIALS.len())
    }

    pub fn contains_ingredient(&self, name: &str) -> bool {
        self.ingredient_id(name).is_some()
    }
}

/// Main-ingredient share threshold used when ingesting unlabeled corpora.
pub const MAIN_SHARE: f64 = 0.5;
/// Upper bound on main ingredients per recipe.
pub const MAX_MAIN: usize = 5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub raw_recipes: usize,
    /// Recipes dropped because a line failed to parse, keyed by error kind.
    pub dropped_parse: BTreeMap<String, usize>,
    pub filter: FilterReport,
    pub clusters: usize,
}

/// Parses raw recipes, filters them, clusters dish labels and marks mains.
///
/// Recipes with any unparsable line are dropped whole.
pub fn ingest_corpus(
    raw: &[RawRecipe],
    features: &[FeatureMap],
    table: &NutritionTable,
    synonyms: &SynonymMap,
    filter: &FilterConfig,
    cluster: &ClusterConfig,
) -> Result<(Vec<Recipe>, Vocabulary, IngestReport)> {
    let mut report = IngestReport { raw_recipes: raw.len(), ..Default::default() };
    let mut parsed = Vec::with_capacity(raw.len());
    'recipes: for r in raw {
        let fm = features
            .get(r.features_ref)
            .ok_or_else(|| CorpusError::Format(format!("recipe {}: features_ref {} out of range", r.id, r.features_ref)))?;
        let mut lines = Vec::with_capacity(r.lines.len());
        for text in &r.lines {
            match parse_ingredient_line(text, table, synonyms) {
                Ok(l) => lines.push(l),
                Err(e) => {
                    let kind = match e {
                        CorpusError::UnparsableQuantity(_) => "unparsable_quantity",
                        CorpusError::UnknownUnit(_) => "unknown_unit",
                        CorpusError::UnknownIngredient(_) => "unknown_ingredient",
                        other => return Err(other),
                    };
                    *report.dropped_parse.entry(kind.to_string()).or_default() += 1;
                    continue 'recipes;
                }
            }
        }
        parsed.push(Recipe::new(r.id.clone(), r.title.clone(), String::new(), lines, fm.clone(), table)?);
    }
    let (mut recipes, vocabulary, filter_report) = filter_corpus(parsed, filter)?;
    report.filter = filter_report;
    let k = cluster.k.min(recipes.len());
    let labels = cluster_dishes(&recipes, &ClusterConfig { k, ..*cluster })?;
    let names: Vec<String> = name_clusters(&recipes, &labels, k)
        .into_iter()
        .map(|n| if vocabulary.contains_ingredient(&n) { format!("{n} dish") } else { n })
        .collect();
    for (r, &l) in recipes.iter_mut().zip(&labels) {
        r.dish = names[l].clone();
    }
    report.clusters = k;
    mark_main_ingredients(&mut recipes, MAX_MAIN, MAIN_SHARE);
    let mut dishes = names;
    dishes.sort();
    let vocabulary = vocabulary.with_dishes(dishes)?;
    Ok((recipes, vocabulary, report))
}
