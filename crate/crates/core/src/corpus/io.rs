//! On-disk corpus layout.
//!
//! A corpus directory holds `recipes.jsonl`, `features.bin`,
//! `nutrition.csv` and `vocab.json`. The feature sidecar is a header of three
//! little-endian `u32` (M, n, count) followed by `count` blocks of `M·n·n`
//! little-endian `f32`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, FeatureMap, IngredientLine, NutritionTable, Recipe, Result, Unit, Vocabulary};

pub const RECIPES_FILE: &str = "recipes.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
pub const NUTRITION_FILE: &str = "nutrition.csv";
pub const VOCAB_FILE: &str = "vocab.json";

/// A loaded corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub recipes: Vec<Recipe>,
    pub table: NutritionTable,
    pub vocabulary: Vocabulary,
}

impl Corpus {
    pub fn recipe(&self, id: &str) -> Option<&Recipe> {
        self.recipes.iter().find(|r| r.id == id)
    }

    pub fn features_ref(&self, id: &str) -> Option<usize> {
        self.recipes.iter().position(|r| r.id == id)
    }
}

#[derive(Serialize, Deserialize)]
struct RecipeRecord {
    id: String,
    title: String,
    dish: String,
    lines: Vec<IngredientLine>,
    features_ref: usize,
    total_kcal: f64,
}

/// A recipe before parsing: raw ingredient lines plus a feature block index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecipe {
    pub id: String,
    pub title: String,
    pub lines: Vec<String>,
    pub features_ref: usize,
}

pub fn write_features<W: Write>(mut w: W, maps: &[&FeatureMap]) -> Result<()> {
    let (m, n) = maps.first().map_or((0, 0), |f| (f.channels(), f.grid()));
    for v in [m, n, maps.len()] {
        w.write_all(&u32::try_from(v).map_err(|_| CorpusError::Format("feature header overflow".into()))?.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(m * n * n * 4);
    for f in maps {
        if f.channels() != m || f.grid() != n {
            return Err(CorpusError::Format("feature maps differ in shape".into()));
        }
        buf.clear();
        for v in f.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<Vec<FeatureMap>> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header).map_err(|_| CorpusError::Format("truncated feature header".into()))?;
    let word = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (m, n, count) = (word(0), word(1), word(2));
    let block = m * n * n;
    let mut bytes = vec![0u8; block * 4];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut bytes).map_err(|_| CorpusError::Format(format!("truncated feature block {i}")))?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(FeatureMap::new(m, n, values)?);
    }
    Ok(out)
}

pub fn write_nutrition<W: Write>(w: W, table: &NutritionTable) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["ingredient", "unit", "kcal"])?;
    for (i, u, k) in table.iter() {
        wr.write_record([i, u.as_str(), &k.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct NutritionRow {
    ingredient: String,
    unit: String,
    kcal: f64,
}

pub fn read_nutrition<R: Read>(r: R) -> Result<NutritionTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut table = NutritionTable::new();
    for row in rdr.deserialize() {
        let row: NutritionRow = row?;
        if !row.kcal.is_finite() || row.kcal < 0.0 {
            return Err(CorpusError::Format(format!("kcal {} for {}", row.kcal, row.ingredient)));
        }
        table.insert(row.ingredient, row.unit.parse::<Unit>()?, row.kcal);
    }
    Ok(table)
}

pub fn read_nutrition_path(path: &Path) -> Result<NutritionTable> {
    read_nutrition(File::open(path)?)
}

/// Writes the four corpus files into `dir`, creating it if needed.
pub fn write_corpus(dir: &Path, recipes: &[Recipe], table: &NutritionTable, vocabulary: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(RECIPES_FILE))?);
    for (i, r) in recipes.iter().enumerate() {
        let rec = RecipeRecord {
            id: r.id.clone(),
            title: r.title.clone(),
            dish: r.dish.clone(),
            lines: r.lines.clone(),
            features_ref: i,
            total_kcal: r.total_kcal,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let maps: Vec<&FeatureMap> = recipes.iter().map(|r| &r.features).collect();
    let mut fw = BufWriter::new(File::create(dir.join(FEATURES_FILE))?);
    write_features(&mut fw, &maps)?;
    fw.flush()?;
    write_nutrition(File::create(dir.join(NUTRITION_FILE))?, table)?;
    std::fs::write(dir.join(VOCAB_FILE), serde_json::to_vec_pretty(vocabulary)?)?;
    Ok(())
}

/// Loads a corpus directory; calories are re-derived and checked against
/// the recorded totals.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let table = read_nutrition_path(&dir.join(NUTRITION_FILE))?;
    let features = read_features(BufReader::new(File::open(dir.join(FEATURES_FILE))?))?;
    let vocabulary: Vocabulary = serde_json::from_slice::<Vocabulary>(&std::fs::read(dir.join(VOCAB_FILE))?)?.reindexed()?;
    let mut recipes = Vec::new();
    for (ln, line) in BufReader::new(File::open(dir.join(RECIPES_FILE))?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecipeRecord = serde_json::from_str(&line)?;
        let fm = features
            .get(rec.features_ref)
            .ok_or_else(|| CorpusError::Format(format!("line {}: features_ref {} out of range", ln + 1, rec.features_ref)))?
            .clone();
        let recipe = Recipe::new(rec.id, rec.title, rec.dish, rec.lines, fm, &table)?;
        if (recipe.total_kcal - rec.total_kcal).abs() > 1e-6 * rec.total_kcal.abs().max(1.0) {
            return Err(CorpusError::Format(format!(
                "recipe {}: total_kcal {} disagrees with derived {}",
                recipe.id, rec.total_kcal, recipe.total_kcal
            )));
        }
        recipes.push(recipe);
    }
    Ok(Corpus { recipes, table, vocabulary })
}

pub fn read_raw_recipes(path: &Path) -> Result<Vec<RawRecipe>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_raw_recipes(path: &Path, recipes: &[RawRecipe]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in recipes {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    #[test]
    fn corpus_round_trips() {
        let cfg = SynthConfig { n_recipes: 30, n_dishes: 3, vocab_size: 30, channels: 4, grid: 2, ..Default::default() };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c.recipes, &c.table, &c.vocabulary).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.table, c.table);
        assert_eq!(back.vocabulary, c.vocabulary);
        assert_eq!(back.recipes.len(), c.recipes.len());
        for (a, b) in back.recipes.iter().zip(&c.recipes) {
            assert_eq!(a.lines, b.lines);
            assert_eq!(a.features, b.features);
            assert!((a.total_kcal - b.total_kcal).abs() < 1e-9 * b.total_kcal.max(1.0));
        }
    }

    #[test]
    fn truncated_sidecar_is_rejected() {
        let fm = FeatureMap::zeros(2, 2);
        let mut buf = Vec::new();
        write_features(&mut buf, &[&fm, &fm]).unwrap();
        assert_eq!(buf.len(), 12 + 2 * 8 * 4);
        assert_eq!(read_features(&buf[..]).unwrap().len(), 2);
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_features(&buf[..]), Err(CorpusError::Format(_))));
    }
}
