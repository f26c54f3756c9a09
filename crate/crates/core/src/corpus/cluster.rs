use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Recipe, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k: 32, seed: 0, restarts: 10, max_iter: 100 }
    }
}

const STOPWORDS: &[&str] = &["with", "and", "the", "of", "in", "for", "on", "my"];

fn title_tokens(title: &str) -> impl Iterator<Item = String> + '_ {
    title
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.len() > 1)
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Ingredient-bag ⊕ title-bag vectors, each half L2-normalised.
pub fn bag_vectors(recipes: &[Recipe]) -> Vec<Vec<f64>> {
    let ingredients: BTreeSet<&str> = recipes.iter().flat_map(|r| r.ingredients()).collect();
    let ing_index: BTreeMap<&str, usize> = ingredients.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    let words: BTreeSet<String> = recipes.iter().flat_map(|r| title_tokens(&r.title)).collect();
    let word_index: BTreeMap<String, usize> = words.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    let (ni, nw) = (ing_index.len(), word_index.len());
    recipes
        .iter()
        .map(|r| {
            let mut a = vec![0.0; ni];
            for i in r.ingredients() {
                a[ing_index[i]] = 1.0;
            }
            let mut b = vec![0.0; nw];
            for w in title_tokens(&r.title) {
                b[word_index[&w]] = 1.0;
            }
            normalize(&mut a);
            normalize(&mut b);
            a.extend(b);
            a
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                target -= di;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(points[next].clone());
        let c = centers.last().unwrap();
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, c));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> (Vec<usize>, f64) {
    let dim = points[0].len();
    let k = centers.len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let best = (0..k)
                .map(|c| (dist2(p, &centers[c]), c))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centers[labels[a]]).total_cmp(&dist2(&points[b], &centers[labels[b]]))
                    })
                    .unwrap();
                centers[c] = points[far].clone();
                labels[far] = c;
                changed = true;
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = labels.iter().zip(points).map(|(&l, p)| dist2(p, &centers[l])).sum();
    (labels, inertia)
}

/// k-means++ with restarts over [`bag_vectors`]; returns one label in
/// `0..k` per recipe, deterministic for a fixed seed.
pub fn cluster_dishes(recipes: &[Recipe], config: &ClusterConfig) -> Result<Vec<usize>> {
    let n = recipes.len();
    if config.k == 0 || config.k > n {
        return Err(CorpusError::InvalidK { k: config.k, n });
    }
    let points = bag_vectors(recipes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..config.restarts.max(1) {
        let init = kmeans_pp_init(&points, config.k, &mut rng);
        let run = lloyd(&points, init, config.max_iter);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    Ok(best.unwrap().0)
}

/// Names each cluster by its most frequent title word not already taken.
pub fn name_clusters(recipes: &[Recipe], labels: &[usize], k: usize) -> Vec<String> {
    let mut counts = vec![BTreeMap::<String, usize>::new(); k];
    for (r, &l) in recipes.iter().zip(labels) {
        for w in title_tokens(&r.title).collect::<BTreeSet<_>>() {
            *counts[l].entry(w).or_default() += 1;
        }
    }
    let mut taken = BTreeSet::new();
    (0..k)
        .map(|c| {
            let mut ranked: Vec<_> = counts[c].iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
            let name = ranked
                .into_iter()
                .map(|(w, _)| w.clone())
                .find(|w| !taken.contains(w))
                .unwrap_or_else(|| format!("dish_{c:02}"));
            taken.insert(name.clone());
            name
        })
        .collect()
}
