use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::{CorpusError, Recipe, Result, Unit, Vocabulary, MAX_INGREDIENTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Fraction of ingredient occurrences the vocabulary must cover.
    pub coverage: f64,
    /// Threshold on the per-(ingredient, unit) z-score of log-portions.
    pub portion_outlier_z: f64,
    pub min_ingredients: usize,
    pub max_ingredients: usize,
    /// Groups smaller than this are not outlier-tested.
    pub min_group_size: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { coverage: 0.95, portion_outlier_z: 4.0, min_ingredients: 2, max_ingredients: MAX_INGREDIENTS, min_group_size: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_recipes: usize,
    pub dropped_size: usize,
    pub dropped_oov: usize,
    pub dropped_outlier: usize,
    pub duplicate_lines: usize,
    pub total_occurrences: usize,
    pub covered_occurrences: usize,
    pub dropped_ids: Vec<String>,
    pub outlier_ids: Vec<String>,
}

impl FilterReport {
    /// Occurrences covered by the vocabulary over all occurrences counted.
    pub fn coverage(&self) -> f64 {
        if self.total_occurrences == 0 {
            return 0.0;
        }
        self.covered_occurrences as f64 / self.total_occurrences as f64
    }
}

/// Size filter, frequency-coverage vocabulary, OOV removal and log-portion
/// outlier removal, in that order.
///
/// Occurrences are counted after the size filter. The returned vocabulary
/// carries the distinct non-empty dish labels of the surviving recipes.
pub fn filter_corpus(recipes: Vec<Recipe>, config: &FilterConfig) -> Result<(Vec<Recipe>, Vocabulary, FilterReport)> {
    if !(0.0..=1.0).contains(&config.coverage) || config.portion_outlier_z <= 0.0 {
        return Err(CorpusError::InvalidParameter(format!(
            "coverage {} / z {}",
            config.coverage, config.portion_outlier_z
        )));
    }
    let mut report = FilterReport { input_recipes: recipes.len(), ..Default::default() };

    let mut kept = Vec::with_capacity(recipes.len());
    for mut r in recipes {
        let mut seen = HashSet::new();
        let before = r.lines.len();
        let mut keep_idx = Vec::with_capacity(before);
        for (i, l) in r.lines.iter().enumerate() {
            if seen.insert(l.ingredient.clone()) {
                keep_idx.push(i);
            }
        }
        if keep_idx.len() != before {
            report.duplicate_lines += before - keep_idx.len();
            r.lines = keep_idx.iter().map(|&i| r.lines[i].clone()).collect();
            r.per_ingredient_kcal = keep_idx.iter().map(|&i| r.per_ingredient_kcal[i]).collect();
            r.total_kcal = r.per_ingredient_kcal.iter().sum();
        }
        if r.lines.len() < config.min_ingredients || r.lines.len() > config.max_ingredients {
            report.dropped_size += 1;
            report.dropped_ids.push(r.id);
        } else {
            kept.push(r);
        }
    }

    let vocab = coverage_vocabulary(&kept, config.coverage, &mut report);
    let (kept, oov): (Vec<_>, Vec<_>) =
        kept.into_iter().partition(|r| r.lines.iter().all(|l| vocab.contains(l.ingredient.as_str())));
    report.dropped_oov = oov.len();
    report.dropped_ids.extend(oov.into_iter().map(|r| r.id));

    let outliers = portion_outliers(&kept, config);
    let (kept, dropped): (Vec<_>, Vec<_>) = kept.into_iter().partition(|r| !outliers.contains(r.id.as_str()));
    report.dropped_outlier = dropped.len();
    report.outlier_ids = dropped.iter().map(|r| r.id.clone()).collect();
    report.dropped_ids.extend(dropped.into_iter().map(|r| r.id));

    if kept.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let ingredients: BTreeSet<&str> = kept.iter().flat_map(|r| r.ingredients()).collect();
    let dishes: BTreeSet<&str> = kept.iter().map(|r| r.dish.as_str()).filter(|d| !d.is_empty()).collect();
    let vocabulary = Vocabulary::new(
        ingredients.into_iter().map(String::from).collect(),
        dishes.into_iter().map(String::from).collect(),
    )?;
    Ok((kept, vocabulary, report))
}

/// Smallest most-frequent-first ingredient set covering `coverage` of the
/// occurrences; ties are broken by name.
fn coverage_vocabulary(recipes: &[Recipe], coverage: f64, report: &mut FilterReport) -> HashSet<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for l in recipes.iter().flat_map(|r| &r.lines) {
        *counts.entry(l.ingredient.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let total: usize = ranked.iter().map(|x| x.1).sum();
    report.total_occurrences = total;
    let mut covered = 0usize;
    let mut vocab = HashSet::new();
    for (name, c) in ranked {
        if covered as f64 >= coverage * total as f64 {
            break;
        }
        covered += c;
        vocab.insert(name.to_string());
    }
    report.covered_occurrences = covered;
    vocab
}

/// Equivalent standard-normal score of a leave-one-out predictive t
/// statistic with `k` reference values.
fn predictive_z(x: f64, mean: f64, sd: f64, k: usize) -> f64 {
    let t = (x - mean).abs() / (sd.max(1e-9) * (1.0 + 1.0 / k as f64).sqrt());
    let dof = (k - 1) as f64;
    let p = StudentsT::new(0.0, 1.0, dof).expect("dof > 0").sf(t);
    if p <= 0.0 {
        return f64::INFINITY;
    }
    -Normal::standard().inverse_cdf(p)
}

/// Ids of recipes with a line whose log-portion is more than `z` standard
/// scores from the other lines of its (ingredient, unit) group. Small groups
/// are scored through the predictive t distribution so the threshold keeps
/// its normal-tail meaning. The worst line of a group is removed and the
/// group re-scored until nothing exceeds the threshold.
fn portion_outliers(recipes: &[Recipe], config: &FilterConfig) -> HashSet<String> {
    let mut groups: BTreeMap<(&str, Unit), Vec<(f64, usize)>> = BTreeMap::new();
    for (ri, r) in recipes.iter().enumerate() {
        for l in &r.lines {
            groups.entry((l.ingredient.as_str(), l.unit)).or_default().push((l.portion.ln(), ri));
        }
    }
    let mut flagged = HashSet::new();
    for mut members in groups.into_values() {
        loop {
            let n = members.len();
            if n < config.min_group_size.max(4) {
                break;
            }
            let sum: f64 = members.iter().map(|m| m.0).sum();
            let sum_sq: f64 = members.iter().map(|m| m.0 * m.0).sum();
            let k = n - 1;
            let mut worst = (0.0f64, usize::MAX);
            for (i, &(x, _)) in members.iter().enumerate() {
                let kf = k as f64;
                let mean = (sum - x) / kf;
                let var = ((sum_sq - x * x) / kf - mean * mean).max(0.0) * kf / (kf - 1.0);
                let z = predictive_z(x, mean, var.sqrt(), k);
                if z > worst.0 {
                    worst = (z, i);
                }
            }
            if worst.0 <= config.portion_outlier_z {
                break;
            }
            let (_, ri) = members.swap_remove(worst.1);
            flagged.insert(recipes[ri].id.clone());
        }
    }
    flagged
}

/// Marks main ingredients from within-dish frequency.
///
/// An ingredient is main for a dish when it occurs in at least
/// `min_share` of the dish's recipes; at most `max_main` per recipe (most
/// frequent first), and at least one. Lines are reordered mains first,
/// each group by descending dish frequency.
pub fn mark_main_ingredients(recipes: &mut [Recipe], max_main: usize, min_share: f64) {
    let mut per_dish: HashMap<String, (usize, HashMap<String, usize>)> = HashMap::new();
    for r in recipes.iter() {
        let e = per_dish.entry(r.dish.clone()).or_default();
        e.0 += 1;
        for l in &r.lines {
            *e.1.entry(l.ingredient.clone()).or_default() += 1;
        }
    }
    for r in recipes.iter_mut() {
        let (n, freq) = &per_dish[&r.dish];
        let share = |name: &str| freq.get(name).copied().unwrap_or(0) as f64 / *n as f64;
        let mut order: Vec<usize> = (0..r.lines.len()).collect();
        order.sort_by(|&a, &b| {
            share(&r.lines[b].ingredient)
                .total_cmp(&share(&r.lines[a].ingredient))
                .then_with(|| r.lines[a].ingredient.cmp(&r.lines[b].ingredient))
        });
        let lines: Vec<_> = order.iter().map(|&i| r.lines[i].clone()).collect();
        let kcal: Vec<_> = order.iter().map(|&i| r.per_ingredient_kcal[i]).collect();
        r.lines = lines;
        r.total_kcal = kcal.iter().sum();
        r.per_ingredient_kcal = kcal;
        for (rank, l) in r.lines.iter_mut().enumerate() {
            l.main = rank == 0 || (rank < max_main && share(&l.ingredient) >= min_share);
        }
    }
}
