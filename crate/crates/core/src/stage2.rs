//! Two-stream per-ingredient calorie, unit and portion network with a
//! total-calorie head.
//!
//! The calorie stream decodes the full ingredient embeddings against its own
//! feature projection. The second stream decodes half-width embeddings into
//! unit embeddings `E_u`, then feeds `concat(I_u, E_u)` to the portion and
//! alignment decoders. No positional encoding is used, so ingredient order is
//! immaterial. Regression outputs live in units of [`TargetScales`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMap, Recipe, Unit, Vocabulary, MAX_INGREDIENTS};
use crate::error::{ModelError, Result};
use crate::stage1::argmax;
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::transformer::{AttentionReduce, DecoderConfig, DecoderStack, FeatureProjection, Linear};

pub const N_UNITS: usize = Unit::COUNT;
pub const DEFAULT_LAMBDA: [f64; 5] = [1.0, 1.0, 1.0, 0.1, 1.0];

/// Divisors that bring regression targets to order one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScales {
    pub item_kcal: f64,
    pub portion: f64,
    pub total_kcal: f64,
}

impl Default for TargetScales {
    fn default() -> Self {
        Self { item_kcal: 1.0, portion: 1.0, total_kcal: 1.0 }
    }
}

impl TargetScales {
    /// Mean per-ingredient kcal, mean portion and mean recipe kcal.
    pub fn from_recipes(recipes: &[Recipe]) -> Result<Self> {
        let lines: usize = recipes.iter().map(|r| r.lines.len()).sum();
        if lines == 0 {
            return Err(ModelError::EmptySplit("train"));
        }
        let item = recipes.iter().flat_map(|r| &r.per_ingredient_kcal).sum::<f64>() / lines as f64;
        let portion = recipes.iter().flat_map(|r| &r.lines).map(|l| l.portion).sum::<f64>() / lines as f64;
        let total = recipes.iter().map(|r| r.total_kcal).sum::<f64>() / recipes.len() as f64;
        let pos = |x: f64| if x > 0.0 && x.is_finite() { x } else { 1.0 };
        Ok(Self { item_kcal: pos(item), portion: pos(portion), total_kcal: pos(total) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTwoConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub channels: usize,
    pub max_ingredients: usize,
    pub seed: u64,
    pub scales: TargetScales,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            n_heads: 4,
            n_layers: 2,
            channels: 64,
            max_ingredients: MAX_INGREDIENTS,
            seed: 0,
            scales: TargetScales::default(),
        }
    }
}

/// Ingredient slots (padded at the tail) and the image features.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTwoInputs {
    pub ingredients: Vec<String>,
    /// Ingredient-list indices, one per row including padding.
    pub slots: Vec<usize>,
    /// `true` marks a padded row.
    pub pad: Vec<bool>,
    pub features: FeatureMap,
}

impl StageTwoInputs {
    pub fn n_real(&self) -> usize {
        self.ingredients.len()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Per-ingredient targets in natural units, ordered like the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoTargets {
    pub item_kcal: Vec<f64>,
    pub units: Vec<Unit>,
    pub portions: Vec<f64>,
    pub total_kcal: f64,
}

impl StageTwoTargets {
    pub fn from_recipe(recipe: &Recipe) -> Self {
        Self {
            item_kcal: recipe.per_ingredient_kcal.clone(),
            units: recipe.lines.iter().map(|l| l.unit).collect(),
            portions: recipe.lines.iter().map(|l| l.portion).collect(),
            total_kcal: recipe.total_kcal,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Graph handles of one forward pass; all rows including padding.
#[derive(Debug, Clone, Copy)]
pub struct StageTwoVars {
    pub o_c: Var,
    pub unit_logits: Var,
    pub unit_probs: Var,
    pub o_p: Var,
    pub o_a: Var,
    pub total: Var,
}

/// Forward results in natural units for the unpadded rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoOutput {
    pub ingredients: Vec<String>,
    pub o_c: Vec<f64>,
    pub unit_probs: Vec<[f64; N_UNITS]>,
    pub o_p: Vec<f64>,
    pub o_a: Vec<f64>,
    pub total: f64,
}

impl StageTwoOutput {
    pub fn units(&self) -> Vec<Unit> {
        self.unit_probs.iter().map(|p| Unit::from_index(argmax(p)).expect("unit index")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct StageTwoModel {
    pub config: StageTwoConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    embedding: ParamId,
    to_half: Linear,
    feat_c: FeatureProjection,
    feat_u: FeatureProjection,
    feat_p: FeatureProjection,
    feat_a: FeatureProjection,
    dec_c: DecoderStack,
    dec_u: DecoderStack,
    dec_p: DecoderStack,
    dec_a: DecoderStack,
    head_c: Linear,
    head_u: Linear,
    head_p: Linear,
    head_a: Linear,
    reduce_c: AttentionReduce,
    reduce_a: AttentionReduce,
    p_cal: Linear,
    p_align: Linear,
    head_total: Linear,
}

#[derive(Serialize, Deserialize)]
struct StageTwoMeta {
    config: StageTwoConfig,
    vocab: Vocabulary,
}

pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const STAGE2_META: &str = "stage2.json";

impl StageTwoModel {
    pub fn new(config: StageTwoConfig, vocab: Vocabulary) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let e = config.model_dim;
        let h = e / 2;
        let (l, nh) = (config.n_layers, config.n_heads);
        let embedding = s.add_normal("s2.emb", vocab.n_ingredients().max(1), e, (1.0 / e as f64).sqrt(), &mut rng);
        let to_half = Linear::new(&mut s, "s2.half", e, h, true, &mut rng);
        let m = config.channels;
        let feat_c = FeatureProjection::new(&mut s, "s2.fc", m, e, &mut rng);
        let feat_u = FeatureProjection::new(&mut s, "s2.fu", m, h, &mut rng);
        let feat_p = FeatureProjection::new(&mut s, "s2.fp", m, e, &mut rng);
        let feat_a = FeatureProjection::new(&mut s, "s2.fa", m, e, &mut rng);
        let full = DecoderConfig::with_dims(e, nh, l, false);
        let half = DecoderConfig::with_dims(h, nh, l, false);
        let dec_c = DecoderStack::new(&mut s, "s2.dc", full, &mut rng);
        let dec_u = DecoderStack::new(&mut s, "s2.du", half, &mut rng);
        let dec_p = DecoderStack::new(&mut s, "s2.dp", full, &mut rng);
        let dec_a = DecoderStack::new(&mut s, "s2.da", full, &mut rng);
        let head_c = Linear::new(&mut s, "s2.oc", e, 1, true, &mut rng);
        let head_u = Linear::new(&mut s, "s2.ou", h, N_UNITS, true, &mut rng);
        let head_p = Linear::new(&mut s, "s2.op", e, 1, true, &mut rng);
        let head_a = Linear::new(&mut s, "s2.oa", e, 1, true, &mut rng);
        let reduce_c = AttentionReduce::new(&mut s, "s2.rc", e, &mut rng);
        let reduce_a = AttentionReduce::new(&mut s, "s2.ra", e, &mut rng);
        let p_cal = Linear::new(&mut s, "s2.pcal", e, h, true, &mut rng);
        let p_align = Linear::new(&mut s, "s2.palign", e, h, true, &mut rng);
        let head_total = Linear::new(&mut s, "s2.total", 2 * h, 1, true, &mut rng);
        Self {
            config,
            vocab,
            store: s,
            embedding,
            to_half,
            feat_c,
            feat_u,
            feat_p,
            feat_a,
            dec_c,
            dec_u,
            dec_p,
            dec_a,
            head_c,
            head_u,
            head_p,
            head_a,
            reduce_c,
            reduce_a,
            p_cal,
            p_align,
            head_total,
        }
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embedding
    }

    /// Inputs for `ingredients`, padded with slot 0 up to `pad_to` rows.
    pub fn inputs<S: AsRef<str>>(&self, ingredients: &[S], features: &FeatureMap, pad_to: Option<usize>) -> Result<StageTwoInputs> {
        if ingredients.is_empty() {
            return Err(ModelError::EmptyIngredients);
        }
        let n = ingredients.len();
        let rows = pad_to.unwrap_or(n).max(n);
        if rows > self.config.max_ingredients {
            return Err(ModelError::TargetMisalignment(format!("{rows} rows exceed maximum {}", self.config.max_ingredients)));
        }
        let mut slots = Vec::with_capacity(rows);
        let mut names = Vec::with_capacity(n);
        for i in ingredients {
            let i = i.as_ref();
            let id = self.vocab.ingredient_slot(i).ok_or_else(|| ModelError::UnknownToken(i.to_string()))?;
            if names.iter().any(|x| x == i) {
                return Err(ModelError::DuplicateIngredient(i.to_string()));
            }
            slots.push(id);
            names.push(i.to_string());
        }
        slots.resize(rows, 0);
        let pad = (0..rows).map(|r| r >= n).collect();
        Ok(StageTwoInputs { ingredients: names, slots, pad, features: features.clone() })
    }

    pub fn recipe_inputs(&self, recipe: &Recipe) -> Result<StageTwoInputs> {
        self.inputs(&recipe.ingredients().collect::<Vec<_>>(), &recipe.features, None)
    }

    /// Full forward from the token embeddings of `inputs`.
    pub fn forward(&self, g: &mut Graph<'_>, inputs: &StageTwoInputs) -> Result<StageTwoVars> {
        let table = g.param(self.embedding);
        let i_full = g.embedding(table, &inputs.slots)?;
        self.forward_embedded(g, i_full, &inputs.pad, &inputs.features)
    }

    /// Forward from an explicit `rows × e` embedding matrix.
    pub fn forward_embedded(&self, g: &mut Graph<'_>, i_full: Var, pad: &[bool], features: &FeatureMap) -> Result<StageTwoVars> {
        if pad.iter().all(|&p| p) {
            return Err(ModelError::AllMasked);
        }
        let mask = if pad.iter().any(|&p| p) { Some(pad) } else { None };
        let i_u = self.to_half.forward(g, i_full)?;
        let f_c = self.feat_c.forward(g, features)?;
        let f_u = self.feat_u.forward(g, features)?;
        let f_p = self.feat_p.forward(g, features)?;
        let f_a = self.feat_a.forward(g, features)?;
        let e_c = self.dec_c.forward(g, i_full, f_c, mask)?;
        let e_u = self.dec_u.forward(g, i_u, f_u, mask)?;
        let i_p = g.concat_cols(&[i_u, e_u])?;
        let e_p = self.dec_p.forward(g, i_p, f_p, mask)?;
        let e_a = self.dec_a.forward(g, i_p, f_a, mask)?;
        let o_c = self.head_c.forward(g, e_c)?;
        let unit_logits = self.head_u.forward(g, e_u)?;
        let unit_probs = g.softmax(unit_logits)?;
        let o_p = self.head_p.forward(g, e_p)?;
        let o_a = self.head_a.forward(g, e_a)?;
        let r_c = self.reduce_c.forward(g, e_c, mask)?;
        let r_a = self.reduce_a.forward(g, e_a, mask)?;
        let p_c = self.p_cal.forward(g, r_c)?;
        let p_a = self.p_align.forward(g, r_a)?;
        let cat = g.concat_cols(&[p_c, p_a])?;
        let total = self.head_total.forward(g, cat)?;
        Ok(StageTwoVars { o_c, unit_logits, unit_probs, o_p, o_a, total })
    }

    /// Reads the unpadded rows of a forward pass back in natural units.
    pub fn output(&self, g: &Graph<'_>, vars: &StageTwoVars, inputs: &StageTwoInputs) -> StageTwoOutput {
        let n = inputs.n_real();
        let sc = self.config.scales;
        let col = |v: Var, s: f64| g.value(v).data()[..n].iter().map(|x| x * s).collect::<Vec<f64>>();
        let probs = g.value(vars.unit_probs);
        StageTwoOutput {
            ingredients: inputs.ingredients.clone(),
            o_c: col(vars.o_c, sc.item_kcal),
            unit_probs: (0..n).map(|r| probs.row(r).try_into().expect("unit row")).collect(),
            o_p: col(vars.o_p, sc.portion),
            o_a: col(vars.o_a, sc.item_kcal),
            total: g.value(vars.total).item() * sc.total_kcal,
        }
    }

    pub fn estimate(&self, inputs: &StageTwoInputs) -> Result<StageTwoOutput> {
        let mut g = Graph::with_params(&self.store);
        let vars = self.forward(&mut g, inputs)?;
        Ok(self.output(&g, &vars, inputs))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.store, dir.join(STAGE2_CHECKPOINT))?;
        let meta = StageTwoMeta { config: self.config, vocab: self.vocab.clone() };
        std::fs::write(dir.join(STAGE2_META), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: StageTwoMeta = serde_json::from_slice(&std::fs::read(dir.join(STAGE2_META))?)?;
        let mut model = Self::new(meta.config, meta.vocab.reindexed()?);
        load_checkpoint(&mut model.store, dir.join(STAGE2_CHECKPOINT))?;
        Ok(model)
    }
}

/// Inverse-frequency unit weights `total / (N_units · count_u)`.
pub fn unit_class_weights(recipes: &[Recipe]) -> Result<[f64; N_UNITS]> {
    let mut counts = [0usize; N_UNITS];
    for l in recipes.iter().flat_map(|r| &r.lines) {
        counts[l.unit.index()] += 1;
    }
    let total: usize = counts.iter().sum();
    let mut w = [0.0; N_UNITS];
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(ModelError::UnseenUnit(Unit::from_index(i).expect("unit index")));
        }
        w[i] = total as f64 / (N_UNITS * c) as f64;
    }
    Ok(w)
}

/// `Σ λ_i L_i` and the five unweighted terms. Only the first
/// `targets.len()` rows (the unpadded ones) enter the losses.
pub fn stage2_loss(
    g: &mut Graph<'_>,
    vars: &StageTwoVars,
    targets: &StageTwoTargets,
    scales: &TargetScales,
    lambda: &[f64; 5],
    unit_weights: &[f64; N_UNITS],
) -> Result<(Var, [f64; 5])> {
    let n = targets.len();
    let rows = g.value(vars.o_c).rows();
    if n == 0 || n > rows || targets.item_kcal.len() != n || targets.portions.len() != n {
        return Err(ModelError::TargetMisalignment(format!(
            "{} kcal, {} units, {} portions for {rows} rows",
            targets.item_kcal.len(),
            n,
            targets.portions.len()
        )));
    }
    let scaled = |v: &[f64], s: f64| Tensor::column_vector(v.iter().map(|x| x / s).collect());
    let kcal_t = scaled(&targets.item_kcal, scales.item_kcal);
    let l1 = mse(g, vars.o_c, n, kcal_t.clone())?;
    let l2 = weighted_ce(g, vars.unit_logits, &targets.units, unit_weights)?;
    let l3 = mse(g, vars.o_p, n, scaled(&targets.portions, scales.portion))?;
    let l4 = mse(g, vars.o_a, n, kcal_t)?;
    let l5 = mse(g, vars.total, 1, Tensor::scalar(targets.total_kcal / scales.total_kcal).reshape(vec![1, 1])?)?;
    let terms = [l1, l2, l3, l4, l5];
    let mut total = g.scale(terms[0], lambda[0])?;
    for (t, &lam) in terms.iter().zip(lambda).skip(1) {
        let s = g.scale(*t, lam)?;
        total = g.add(total, s)?;
    }
    let values = terms.map(|t| g.value(t).item());
    Ok((total, values))
}

fn mse(g: &mut Graph<'_>, pred: Var, n: usize, target: Tensor) -> Result<Var> {
    let rows = g.value(pred).rows();
    let p = if rows == n { pred } else { g.slice_rows(pred, 0, n)? };
    let t = g.constant(target);
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq)?)
}

/// `Σ w_y · (−log p_y) / Σ w_y` over the first `units.len()` rows.
fn weighted_ce(g: &mut Graph<'_>, logits: Var, units: &[Unit], weights: &[f64; N_UNITS]) -> Result<Var> {
    let n = units.len();
    let rows = g.value(logits).rows();
    let x = if rows == n { logits } else { g.slice_rows(logits, 0, n)? };
    let lsm = g.log_softmax(x)?;
    let idx: Vec<usize> = units.iter().map(|u| u.index()).collect();
    let picked = g.gather_cols(lsm, &idx)?;
    let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
    let wsum: f64 = w.iter().sum();
    let wt = g.constant(Tensor::column_vector(w));
    let weighted = g.mul(picked, wt)?;
    let s = g.sum(weighted)?;
    Ok(g.scale(s, -1.0 / wsum)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    fn tiny() -> (StageTwoModel, Vec<Recipe>) {
        let c = generate_synthetic_corpus(&SynthConfig {
            n_recipes: 12,
            n_dishes: 3,
            vocab_size: 30,
            channels: 8,
            grid: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = StageTwoConfig {
            model_dim: 8,
            n_heads: 2,
            n_layers: 1,
            channels: 8,
            scales: TargetScales::from_recipes(&c.recipes).unwrap(),
            ..Default::default()
        };
        (StageTwoModel::new(cfg, c.vocabulary.clone()), c.recipes)
    }

    #[test]
    fn unit_rows_are_stochastic() {
        let (m, rs) = tiny();
        let out = m.estimate(&m.recipe_inputs(&rs[0]).unwrap()).unwrap();
        assert_eq!(out.o_c.len(), rs[0].lines.len());
        for p in &out.unit_probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(out.total.is_finite());
    }

    #[test]
    fn zero_heads_give_biases() {
        let (mut m, rs) = tiny();
        for (name, b) in [("s2.oc", 0.5), ("s2.ou", 0.0), ("s2.op", -1.0), ("s2.oa", 2.0)] {
            let w = m.store.value(m.store.find(&format!("{name}.w")).unwrap()).shape().to_vec();
            let bs = m.store.value(m.store.find(&format!("{name}.b")).unwrap()).shape().to_vec();
            m.store.set_value(&format!("{name}.w"), Tensor::zeros(&w)).unwrap();
            m.store.set_value(&format!("{name}.b"), Tensor::filled(&bs, b)).unwrap();
        }
        let out = m.estimate(&m.recipe_inputs(&rs[1]).unwrap()).unwrap();
        let sc = m.config.scales;
        assert!(out.o_c.iter().all(|&x| (x - 0.5 * sc.item_kcal).abs() < 1e-9));
        assert!(out.o_p.iter().all(|&x| (x + sc.portion).abs() < 1e-9));
        assert!(out.o_a.iter().all(|&x| (x - 2.0 * sc.item_kcal).abs() < 1e-9));
        for p in &out.unit_probs {
            assert!(p.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-12));
        }
    }

    #[test]
    fn weights_average_to_one() {
        let (_, rs) = tiny();
        let w = unit_class_weights(&rs);
        match w {
            Ok(w) => {
                let mut counts = [0.0; N_UNITS];
                rs.iter().flat_map(|r| &r.lines).for_each(|l| counts[l.unit.index()] += 1.0);
                let total: f64 = counts.iter().sum();
                let avg: f64 = w.iter().zip(&counts).map(|(w, c)| w * c).sum::<f64>() / total;
                assert!((avg - 1.0).abs() < 1e-12);
            }
            Err(e) => assert!(matches!(e, ModelError::UnseenUnit(_))),
        }
    }

    #[test]
    fn bad_inputs() {
        let (m, rs) = tiny();
        let f = &rs[0].features;
        assert!(matches!(m.inputs::<&str>(&[], f, None), Err(ModelError::EmptyIngredients)));
        let a = rs[0].lines[0].ingredient.as_str();
        assert!(matches!(m.inputs(&[a, a], f, None), Err(ModelError::DuplicateIngredient(_))));
        assert!(matches!(m.inputs(&["zzz"], f, None), Err(ModelError::UnknownToken(_))));
        let mut g = Graph::with_params(&m.store);
        let inp = m.inputs(&[a], f, Some(3)).unwrap();
        let vars = m.forward(&mut g, &inp).unwrap();
        let t = StageTwoTargets { item_kcal: vec![1.0, 2.0], units: vec![Unit::Cup], portions: vec![1.0], total_kcal: 1.0 };
        let r = stage2_loss(&mut g, &vars, &t, &m.config.scales, &DEFAULT_LAMBDA, &[1.0; 6]);
        assert!(matches!(r, Err(ModelError::TargetMisalignment(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let (m, rs) = tiny();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = StageTwoModel::load(dir.path()).unwrap();
        let inp = m.recipe_inputs(&rs[2]).unwrap();
        let (a, b) = (m.estimate(&inp).unwrap(), back.estimate(&inp).unwrap());
        assert!((a.total - b.total).abs() < 1e-4 * a.total.abs().max(1.0));
    }
}
