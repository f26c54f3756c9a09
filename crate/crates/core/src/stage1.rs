//! Dish classification and autoregressive main/optional ingredient
//! generation with user corrections.
//!
//! The decoder input is `[D] + mains` during the main phase and
//! `[D] + mains + [EOS] + optionals` during the optional phase, where `D` is
//! the dish token or BOS when no dish is given. Outputs are logits over the
//! whole vocabulary with dish tokens, PAD, BOS and already-accepted
//! ingredients masked out.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMap, Recipe, Vocabulary, MAX_INGREDIENTS, MAX_MAIN};
use crate::error::{ModelError, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::transformer::{DecoderConfig, DecoderStack, FeatureProjection, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOneConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub channels: usize,
    pub classifier_hidden: usize,
    pub max_ingredients: usize,
    pub max_main: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            n_heads: 4,
            n_layers: 2,
            channels: 64,
            classifier_hidden: 64,
            max_ingredients: MAX_INGREDIENTS,
            max_main: MAX_MAIN,
            top_k: 5,
            seed: 0,
        }
    }
}

impl StageOneConfig {
    /// Longest decoder input: the dish token, every ingredient and the
    /// phase separator.
    pub fn max_len(&self) -> usize {
        self.max_ingredients + 2
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig::with_dims(self.model_dim, self.n_heads, self.n_layers, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    Optional,
    Done,
}

/// One greedy decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngredientPrediction {
    /// Ingredient token, or the EOS token.
    pub token: String,
    pub is_eos: bool,
    pub confidence: f64,
    /// Highest-probability candidates, best first.
    pub alternatives: Vec<(String, f64)>,
    /// Probabilities over the ingredient list followed by EOS.
    pub distribution: Vec<f64>,
}

/// Accepted ingredients so far and the current phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationState {
    /// Conditioning dish token; `None` conditions on BOS.
    pub dish: Option<String>,
    pub mains: Vec<String>,
    pub optionals: Vec<String>,
    pub phase: Phase,
    /// Distribution recorded at each accepted ingredient, in order.
    pub confidences: Vec<Vec<f64>>,
    pub max_main: usize,
    pub max_total: usize,
}

impl GenerationState {
    pub fn new(dish: Option<String>, max_main: usize, max_total: usize) -> Self {
        Self { dish, mains: Vec::new(), optionals: Vec::new(), phase: Phase::Main, confidences: Vec::new(), max_main, max_total }
    }

    pub fn for_model(model: &StageOneModel, dish: Option<String>) -> Self {
        Self::new(dish, model.config.max_main, model.config.max_ingredients)
    }

    pub fn len(&self) -> usize {
        self.mains.len() + self.optionals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mains followed by optionals.
    pub fn accepted(&self) -> Vec<String> {
        self.mains.iter().chain(&self.optionals).cloned().collect()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.mains.iter().chain(&self.optionals).any(|t| t == token)
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn settle_phase(&mut self) {
        if self.phase == Phase::Main && self.mains.len() >= self.max_main {
            self.phase = Phase::Optional;
        }
        if self.len() >= self.max_total {
            self.phase = Phase::Done;
        }
    }

    /// Applies a prediction: EOS advances the phase, anything else is
    /// appended to the current phase.
    pub fn accept(&mut self, prediction: &IngredientPrediction) -> Result<()> {
        if self.is_done() {
            return Err(ModelError::StateFull);
        }
        if prediction.is_eos {
            self.phase = match self.phase {
                Phase::Main => Phase::Optional,
                _ => Phase::Done,
            };
        } else {
            if self.contains(&prediction.token) {
                return Err(ModelError::DuplicateIngredient(prediction.token.clone()));
            }
            match self.phase {
                Phase::Main => self.mains.push(prediction.token.clone()),
                _ => self.optionals.push(prediction.token.clone()),
            }
            self.confidences.push(prediction.distribution.clone());
        }
        self.settle_phase();
        Ok(())
    }
}

/// Replaces the accepted ingredient at `step` (an index into mains followed
/// by optionals) and drops everything after it.
pub fn apply_correction(state: &GenerationState, step: usize, corrected: &str, vocab: &Vocabulary) -> Result<GenerationState> {
    let accepted = state.accepted();
    if step >= accepted.len() {
        return Err(ModelError::BadIndex { index: step, len: accepted.len() });
    }
    if !vocab.contains_ingredient(corrected) {
        return Err(ModelError::UnknownToken(corrected.to_string()));
    }
    if accepted[step] == corrected {
        return Ok(state.clone());
    }
    if accepted[..step].iter().any(|t| t == corrected) {
        return Err(ModelError::DuplicateIngredient(corrected.to_string()));
    }
    let mut next = state.clone();
    next.confidences.truncate(step + 1);
    if step < state.mains.len() {
        next.mains.truncate(step + 1);
        next.mains[step] = corrected.to_string();
        next.optionals.clear();
        next.phase = Phase::Main;
    } else {
        let j = step - state.mains.len();
        next.optionals.truncate(j + 1);
        next.optionals[j] = corrected.to_string();
        next.phase = Phase::Optional;
    }
    next.settle_phase();
    Ok(next)
}

/// Stage-one weights with their vocabulary and configuration.
#[derive(Debug, Clone)]
pub struct StageOneModel {
    pub config: StageOneConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    token_emb: ParamId,
    pos_emb: ParamId,
    features: FeatureProjection,
    decoder: DecoderStack,
    out: Linear,
    cls_hidden: Linear,
    cls_out: Linear,
}

#[derive(Serialize, Deserialize)]
struct StageOneMeta {
    config: StageOneConfig,
    vocab: Vocabulary,
}

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE1_META: &str = "stage1.json";

/// Teacher-forcing sequence for one recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSequence {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl StageOneModel {
    pub fn new(config: StageOneConfig, vocab: Vocabulary) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let e = config.model_dim;
        let std = (1.0 / e as f64).sqrt();
        let token_emb = store.add_normal("s1.tok", vocab.size(), e, std, &mut rng);
        let pos_emb = store.add_normal("s1.pos", config.max_len(), e, std, &mut rng);
        let features = FeatureProjection::new(&mut store, "s1.feat", config.channels, e, &mut rng);
        let decoder = DecoderStack::new(&mut store, "s1.dec", config.decoder(), &mut rng);
        let out = Linear::new(&mut store, "s1.out", e, vocab.size(), true, &mut rng);
        let cls_hidden = Linear::new(&mut store, "s1.cls1", config.channels, config.classifier_hidden, true, &mut rng);
        let cls_out = Linear::new(&mut store, "s1.cls2", config.classifier_hidden, vocab.n_dishes().max(1), true, &mut rng);
        Self { config, vocab, store, token_emb, pos_emb, features, decoder, out, cls_hidden, cls_out }
    }

    fn token_id(&self, token: &str) -> Result<usize> {
        self.vocab.ingredient_id(token).ok_or_else(|| ModelError::UnknownToken(token.to_string()))
    }

    fn first_token(&self, dish: Option<&str>) -> Result<usize> {
        match dish {
            None => Ok(self.vocab.bos_id()),
            Some(d) => self.vocab.dish_id(d).ok_or_else(|| ModelError::UnknownToken(d.to_string())),
        }
    }

    /// Decoder input for a generation state.
    pub fn state_tokens(&self, state: &GenerationState) -> Result<Vec<usize>> {
        let mut t = vec![self.first_token(state.dish.as_deref())?];
        for m in &state.mains {
            t.push(self.token_id(m)?);
        }
        if state.phase != Phase::Main {
            t.push(self.vocab.eos_id());
            for o in &state.optionals {
                t.push(self.token_id(o)?);
            }
        }
        Ok(t)
    }

    /// Input/target token sequences for teacher forcing.
    pub fn teacher_sequence(&self, recipe: &Recipe, with_dish: bool) -> Result<TeacherSequence> {
        let mains: Vec<&str> = recipe.main_ingredients().into_iter().take(self.config.max_main).collect();
        let optionals: Vec<&str> = recipe
            .optional_ingredients()
            .into_iter()
            .take(self.config.max_ingredients.saturating_sub(mains.len()))
            .collect();
        let eos = self.vocab.eos_id();
        let mut inputs = vec![self.first_token(with_dish.then_some(recipe.dish.as_str()))?];
        let mut targets = Vec::new();
        for m in &mains {
            let id = self.token_id(m)?;
            inputs.push(id);
            targets.push(id);
        }
        inputs.push(eos);
        targets.push(eos);
        for o in &optionals {
            let id = self.token_id(o)?;
            inputs.push(id);
            targets.push(id);
        }
        targets.push(eos);
        inputs.truncate(targets.len());
        Ok(TeacherSequence { inputs, targets })
    }

    /// Flat `L × N` blocked-output mask for a token sequence: position `t`
    /// blocks dish tokens, PAD, BOS and every ingredient in `tokens[..=t]`,
    /// and blocks EOS at the very first position.
    pub fn output_mask(&self, tokens: &[usize]) -> Vec<bool> {
        let n = self.vocab.size();
        let mut base = vec![false; n];
        base[self.vocab.pad_id()] = true;
        base[self.vocab.bos_id()] = true;
        for (i, b) in base.iter_mut().enumerate() {
            if self.vocab.is_dish_id(i) {
                *b = true;
            }
        }
        let mut mask = Vec::with_capacity(tokens.len() * n);
        let mut row = base;
        for (t, &tok) in tokens.iter().enumerate() {
            if self.vocab.is_ingredient_id(tok) {
                row[tok] = true;
            }
            let start = mask.len();
            mask.extend_from_slice(&row);
            if t == 0 {
                mask[start + self.vocab.eos_id()] = true;
            }
        }
        mask
    }

    /// Decoder output logits (`L × N`, unmasked) for a token sequence.
    pub fn sequence_logits(&self, g: &mut Graph<'_>, tokens: &[usize], features: &FeatureMap) -> Result<Var> {
        if tokens.is_empty() || tokens.len() > self.config.max_len() {
            return Err(ModelError::TargetMisalignment(format!("sequence length {}", tokens.len())));
        }
        let tok = g.param(self.token_emb);
        let pos = g.param(self.pos_emb);
        let x = g.embedding(tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = g.embedding(pos, &positions)?;
        let x = g.add(x, p)?;
        let f = self.features.forward(g, features)?;
        let h = self.decoder.forward(g, x, f, None)?;
        Ok(self.out.forward(g, h)?)
    }

    /// Dish logits, `1 × N_d`.
    pub fn dish_logits(&self, g: &mut Graph<'_>, features: &FeatureMap) -> Result<Var> {
        let pooled = g.constant(Tensor::row_vector(features.mean_pooled()));
        let h = self.cls_hidden.forward(g, pooled)?;
        let h = g.relu(h)?;
        Ok(self.cls_out.forward(g, h)?)
    }

    /// Most likely dish and the probabilities over all dishes.
    pub fn classify_dish(&self, features: &FeatureMap) -> Result<(String, Vec<f64>)> {
        let mut g = Graph::with_params(&self.store);
        let logits = self.dish_logits(&mut g, features)?;
        let p = g.softmax(logits)?;
        let probs = g.value(p).data().to_vec();
        let best = argmax(&probs);
        let dish = self.vocab.dishes().get(best).cloned().ok_or(ModelError::Metadata("no dishes".into()))?;
        Ok((dish, probs))
    }

    /// Greedy prediction for the next position of `state`.
    pub fn next_ingredient(&self, state: &GenerationState, features: &FeatureMap) -> Result<IngredientPrediction> {
        if state.is_done() || state.len() >= state.max_total.min(self.config.max_ingredients) {
            return Err(ModelError::StateFull);
        }
        let tokens = self.state_tokens(state)?;
        let mut g = Graph::with_params(&self.store);
        let logits = self.sequence_logits(&mut g, &tokens, features)?;
        let n = self.vocab.size();
        let last = tokens.len() - 1;
        let row = g.slice_rows(logits, last, 1)?;
        let mut mask = self.output_mask(&tokens)[last * n..].to_vec();
        if state.phase == Phase::Main && state.mains.is_empty() {
            mask[self.vocab.eos_id()] = true;
        }
        let masked = g.masked_fill(row, &mask)?;
        let probs = g.softmax(masked)?;
        Ok(self.prediction_from(g.value(probs).data()))
    }

    fn prediction_from(&self, probs: &[f64]) -> IngredientPrediction {
        let first = self.vocab.first_ingredient_id();
        let eos = self.vocab.eos_id();
        let mut distribution: Vec<f64> = probs[first..].to_vec();
        distribution.push(probs[eos]);
        let best = argmax(&distribution);
        let name = |i: usize| {
            if i == distribution.len() - 1 {
                self.vocab.token(eos).unwrap().to_string()
            } else {
                self.vocab.ingredients()[i].clone()
            }
        };
        let mut order: Vec<usize> = (0..distribution.len()).collect();
        order.sort_by(|&a, &b| distribution[b].total_cmp(&distribution[a]).then(a.cmp(&b)));
        let alternatives = order
            .into_iter()
            .take(self.config.top_k)
            .filter(|&i| distribution[i] > 0.0)
            .map(|i| (name(i), distribution[i]))
            .collect();
        IngredientPrediction {
            token: name(best),
            is_eos: best == distribution.len() - 1,
            confidence: distribution[best],
            alternatives,
            distribution,
        }
    }

    /// Predicts and accepts one step.
    pub fn step(&self, state: &mut GenerationState, features: &FeatureMap) -> Result<IngredientPrediction> {
        let p = self.next_ingredient(state, features)?;
        state.accept(&p)?;
        Ok(p)
    }

    /// Runs the main phase to completion.
    pub fn generate_main(&self, state: &mut GenerationState, features: &FeatureMap) -> Result<()> {
        while state.phase == Phase::Main {
            self.step(state, features)?;
        }
        Ok(())
    }

    /// Runs the optional phase to completion and returns mains followed by
    /// optionals.
    pub fn generate_optional(&self, state: &mut GenerationState, features: &FeatureMap) -> Result<Vec<String>> {
        while state.phase == Phase::Optional {
            self.step(state, features)?;
        }
        Ok(state.accepted())
    }

    /// Full generation from an empty state.
    pub fn generate(&self, features: &FeatureMap, dish: Option<&str>) -> Result<GenerationState> {
        let mut state = GenerationState::for_model(self, dish.map(str::to_string));
        self.generate_main(&mut state, features)?;
        self.generate_optional(&mut state, features)?;
        Ok(state)
    }

    /// Teacher-forced sequence loss plus dish classification loss. Returns
    /// the scalar loss and the two components.
    pub fn training_loss(&self, g: &mut Graph<'_>, recipe: &Recipe, with_dish: bool) -> Result<(Var, f64, f64)> {
        let seq = self.teacher_sequence(recipe, with_dish)?;
        let logits = self.sequence_logits(g, &seq.inputs, &recipe.features)?;
        let mask = self.output_mask(&seq.inputs);
        let masked = g.masked_fill(logits, &mask)?;
        let lsm = g.log_softmax(masked)?;
        let picked = g.gather_cols(lsm, &seq.targets)?;
        let seq_loss = g.mean(picked)?;
        let seq_loss = g.scale(seq_loss, -1.0)?;

        let dish = self
            .vocab
            .dish_slot(&recipe.dish)
            .ok_or_else(|| ModelError::UnknownToken(recipe.dish.clone()))?;
        let dl = self.dish_logits(g, &recipe.features)?;
        let dl = g.log_softmax(dl)?;
        let dp = g.gather_cols(dl, &[dish])?;
        let dish_loss = g.scale(dp, -1.0)?;
        let total = g.add(seq_loss, dish_loss)?;
        let (s, d) = (g.value(seq_loss).item(), g.value(dish_loss).item());
        Ok((total, s, d))
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.store, dir.join(STAGE1_CHECKPOINT))?;
        let meta = StageOneMeta { config: self.config, vocab: self.vocab.clone() };
        std::fs::write(dir.join(STAGE1_META), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: StageOneMeta = serde_json::from_slice(&std::fs::read(dir.join(STAGE1_META))?)?;
        let mut model = Self::new(meta.config, meta.vocab.reindexed()?);
        load_checkpoint(&mut model.store, dir.join(STAGE1_CHECKPOINT))?;
        Ok(model)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Intersection over union of two token sets; two empty sets give 1.
pub fn iou<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let b: BTreeSet<&str> = b.iter().map(AsRef::as_ref).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    fn tiny() -> (StageOneModel, crate::corpus::SyntheticCorpus) {
        let c = generate_synthetic_corpus(&SynthConfig {
            n_recipes: 20,
            n_dishes: 3,
            vocab_size: 30,
            channels: 8,
            grid: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = StageOneConfig { model_dim: 8, n_heads: 2, n_layers: 1, channels: 8, classifier_hidden: 8, ..Default::default() };
        (StageOneModel::new(cfg, c.vocabulary.clone()), c)
    }

    #[test]
    fn iou_basics() {
        assert_eq!(iou(&["a", "b"], &["b", "c"]), 1.0 / 3.0);
        assert_eq!(iou(&["a"], &["a"]), 1.0);
        assert_eq!(iou(&["a"], &[] as &[&str]), 0.0);
    }

    #[test]
    fn eos_in_main_switches_phase() {
        let mut s = GenerationState::new(Some("x".into()), 5, 10);
        let eos = IngredientPrediction {
            token: "<eos>".into(),
            is_eos: true,
            confidence: 1.0,
            alternatives: vec![],
            distribution: vec![],
        };
        s.accept(&eos).unwrap();
        assert_eq!(s.phase, Phase::Optional);
        assert!(s.is_empty());
        s.accept(&eos).unwrap();
        assert!(s.is_done());
        assert!(matches!(s.accept(&eos), Err(ModelError::StateFull)));
    }

    #[test]
    fn teacher_sequence_layout() {
        let (m, c) = tiny();
        let r = &c.recipes[0];
        let seq = m.teacher_sequence(r, true).unwrap();
        let n_main = r.main_ingredients().len();
        assert_eq!(seq.inputs.len(), seq.targets.len());
        assert_eq!(seq.inputs[0], m.vocab.dish_id(&r.dish).unwrap());
        assert_eq!(seq.inputs[n_main + 1], m.vocab.eos_id());
        assert_eq!(seq.targets[n_main], m.vocab.eos_id());
        assert_eq!(*seq.targets.last().unwrap(), m.vocab.eos_id());
        assert_eq!(&seq.inputs[1..], &seq.targets[..seq.targets.len() - 1]);
        let nodish = m.teacher_sequence(r, false).unwrap();
        assert_eq!(nodish.inputs[0], m.vocab.bos_id());
    }

    #[test]
    fn generation_is_unique_and_bounded() {
        let (m, c) = tiny();
        for r in &c.recipes {
            let s = m.generate(&r.features, Some(&r.dish)).unwrap();
            let acc = s.accepted();
            let set: std::collections::HashSet<_> = acc.iter().collect();
            assert_eq!(set.len(), acc.len());
            assert!(acc.len() <= 10 && !s.mains.is_empty() && s.mains.len() <= 5);
            assert!(acc.iter().all(|t| m.vocab.contains_ingredient(t)));
            for d in &s.confidences {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn corrections() {
        let (m, c) = tiny();
        let r = &c.recipes[0];
        let s = m.generate(&r.features, Some(&r.dish)).unwrap();
        let same = apply_correction(&s, 0, &s.mains[0], &m.vocab).unwrap();
        assert_eq!(same, s);
        assert!(matches!(apply_correction(&s, 99, "egg", &m.vocab), Err(ModelError::BadIndex { .. })));
        assert!(matches!(apply_correction(&s, 0, "nope", &m.vocab), Err(ModelError::UnknownToken(_))));
        let other = m.vocab.ingredients().iter().find(|t| !s.contains(t)).unwrap().clone();
        let fixed = apply_correction(&s, 0, &other, &m.vocab).unwrap();
        assert_eq!(fixed.mains, vec![other]);
        assert!(fixed.optionals.is_empty());
        assert_eq!(fixed.phase, Phase::Main);
        if s.len() > 1 {
            let dup = s.accepted()[0].clone();
            assert!(matches!(apply_correction(&s, 1, &dup, &m.vocab), Err(ModelError::DuplicateIngredient(_))));
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let (mut m, c) = tiny();
        for name in ["s1.cls2.w", "s1.cls2.b"] {
            let id = m.store.find(name).unwrap();
            let shape = m.store.value(id).shape().to_vec();
            m.store.set_value(name, Tensor::zeros(&shape)).unwrap();
        }
        let (_, p) = m.classify_dish(&c.recipes[0].features).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
