use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use super::{CorpusError, IngredientLine, NutritionTable, Result, Unit};

/// Alias tables for unit words and ingredient names.
///
/// Unit aliases are matched case-sensitively first (so `T` and `t` can mean
/// different units) and then lowercased.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymMap {
    units: HashMap<String, Unit>,
    ingredients: HashMap<String, String>,
}

#[derive(Deserialize)]
struct SynonymRow {
    kind: String,
    alias: String,
    canonical: String,
}

impl SynonymMap {
    pub fn new() -> Self {
        let mut m = Self::default();
        for u in Unit::ALL {
            m.units.insert(u.as_str().to_string(), u);
        }
        m
    }

    /// The synonym file shipped with the repository.
    pub fn builtin() -> Self {
        Self::from_csv_reader(include_str!("../../data/synonyms.csv").as_bytes())
            .expect("shipped synonyms.csv is valid")
    }

    pub fn insert_unit(&mut self, alias: impl Into<String>, unit: Unit) {
        self.units.insert(alias.into(), unit);
    }

    pub fn insert_ingredient(&mut self, alias: impl Into<String>, canonical: impl Into<String>) {
        self.ingredients.insert(alias.into().to_lowercase(), canonical.into());
    }

    /// Reads `kind,alias,canonical` rows where kind is `unit` or `ingredient`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut m = Self::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        for row in rdr.deserialize() {
            let row: SynonymRow = row?;
            match row.kind.as_str() {
                "unit" => {
                    let unit = row.canonical.parse::<Unit>()?;
                    m.insert_unit(row.alias, unit);
                }
                "ingredient" => m.insert_ingredient(row.alias, row.canonical),
                other => return Err(CorpusError::Format(format!("unknown synonym kind {other:?}"))),
            }
        }
        Ok(m)
    }

    /// Adds every alias in `other`, overriding existing ones.
    pub fn merge(&mut self, other: SynonymMap) {
        self.units.extend(other.units);
        self.ingredients.extend(other.ingredients);
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn unit(&self, word: &str) -> Option<Unit> {
        let word = word.strip_suffix('.').unwrap_or(word);
        self.units.get(word).or_else(|| self.units.get(&word.to_lowercase())).copied()
    }

    pub fn ingredient<'a>(&'a self, name: &'a str) -> &'a str {
        self.ingredients.get(name).map_or(name, String::as_str)
    }
}

fn vulgar(c: char) -> Option<f64> {
    Some(match c {
        '½' => 0.5,
        '⅓' => 1.0 / 3.0,
        '⅔' => 2.0 / 3.0,
        '¼' => 0.25,
        '¾' => 0.75,
        '⅕' => 0.2,
        '⅖' => 0.4,
        '⅗' => 0.6,
        '⅘' => 0.8,
        '⅙' => 1.0 / 6.0,
        '⅚' => 5.0 / 6.0,
        '⅛' => 0.125,
        '⅜' => 0.375,
        '⅝' => 0.625,
        '⅞' => 0.875,
        _ => return None,
    })
}

/// One numeric word: `3`, `2.25`, `.5`, `3/4`, `½` or `1½`.
fn number_word(w: &str) -> Option<f64> {
    if let Some((a, b)) = w.split_once('/') {
        let (a, b) = (a.parse::<u32>().ok()?, b.parse::<u32>().ok()?);
        return (b != 0).then(|| a as f64 / b as f64);
    }
    let mut chars = w.chars();
    if let Some(last) = chars.next_back() {
        if let Some(frac) = vulgar(last) {
            let head = chars.as_str();
            return if head.is_empty() { Some(frac) } else { head.parse::<u32>().ok().map(|i| i as f64 + frac) };
        }
    }
    if !w.bytes().all(|b| b.is_ascii_digit() || b == b'.') || w.bytes().filter(|&b| b == b'.').count() > 1 {
        return None;
    }
    w.parse::<f64>().ok()
}

/// Parses a leading quantity and returns it with the remaining text.
///
/// Accepts integers, decimals, fractions, vulgar fractions and mixed numbers
/// such as `1 1/2` or `1 ½`.
pub fn parse_quantity(text: &str) -> Option<(f64, &str)> {
    let text = text.trim_start();
    let (first, rest) = split_word(text);
    let mut value = number_word(first)?;
    let is_integer = first.bytes().all(|b| b.is_ascii_digit());
    let mut rest = rest;
    if is_integer {
        let (second, after) = split_word(rest);
        let frac = if second.contains('/') {
            number_word(second).filter(|f| *f < 1.0)
        } else {
            second.chars().next().and_then(vulgar).filter(|_| second.chars().count() == 1)
        };
        if let Some(f) = frac {
            value += f;
            rest = after;
        }
    }
    value.is_finite().then_some((value, rest))
}

fn split_word(s: &str) -> (&str, &str) {
    let s = s.trim_start();
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim_start()),
        None => (s, ""),
    }
}

fn clean_name(s: &str) -> String {
    let s = s.split(',').next().unwrap_or("");
    let mut out = String::with_capacity(s.len());
    let mut depth = 0usize;
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn resolve_ingredient(name: &str, table: &NutritionTable, synonyms: &SynonymMap) -> Option<String> {
    let mut candidates = vec![name.to_string()];
    if let Some(s) = name.strip_suffix("es") {
        candidates.push(s.to_string());
    }
    if let Some(s) = name.strip_suffix('s') {
        candidates.push(s.to_string());
    }
    candidates
        .into_iter()
        .map(|c| synonyms.ingredient(&c).to_string())
        .find(|c| table.contains_ingredient(c))
}

/// Parses `"<quantity> [unit] [of] <ingredient>"` into a normalised line.
pub fn parse_ingredient_line(text: &str, table: &NutritionTable, synonyms: &SynonymMap) -> Result<IngredientLine> {
    let trimmed = text.trim();
    let (portion, rest) = parse_quantity(trimmed).ok_or_else(|| CorpusError::UnparsableQuantity(text.to_string()))?;
    if portion <= 0.0 {
        return Err(CorpusError::UnparsableQuantity(text.to_string()));
    }
    let (word, after) = split_word(rest);
    let line = |ingredient: String, unit: Unit| IngredientLine {
        raw_text: text.to_string(),
        ingredient,
        portion,
        unit,
        main: false,
    };

    if let Some(unit) = synonyms.unit(word) {
        let (maybe_of, tail) = split_word(after);
        let name_text = if maybe_of.eq_ignore_ascii_case("of") { tail } else { after };
        let name = clean_name(name_text);
        return resolve_ingredient(&name, table, synonyms)
            .map(|i| line(i, unit))
            .ok_or(CorpusError::UnknownIngredient(name));
    }

    let name = clean_name(rest);
    if let Some(ingredient) = resolve_ingredient(&name, table, synonyms) {
        return if table.is_countable(&ingredient) {
            Ok(line(ingredient, Unit::Count))
        } else {
            Err(CorpusError::UnknownUnit(String::new()))
        };
    }
    // "<n> <unit-word> <known ingredient>" with a unit outside the six
    let (maybe_of, tail) = split_word(after);
    let tail_name = clean_name(if maybe_of.eq_ignore_ascii_case("of") { tail } else { after });
    if !word.is_empty() && resolve_ingredient(&tail_name, table, synonyms).is_some() {
        return Err(CorpusError::UnknownUnit(word.to_string()));
    }
    Err(CorpusError::UnknownIngredient(name))
}

/// Canonical text for a line; re-parsing it gives back the same tuple.
pub fn render_line(line: &IngredientLine, table: &NutritionTable) -> String {
    if line.unit == Unit::Count && table.is_countable(&line.ingredient) {
        format!("{} {}", line.portion, line.ingredient)
    } else {
        format!("{} {} {}", line.portion, line.unit.as_str(), line.ingredient)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (NutritionTable, SynonymMap) {
        let mut t = NutritionTable::new();
        for (i, countable) in [("cabbage", true), ("carrot", true), ("oil", false), ("tomato paste", false), ("egg", true)] {
            for u in Unit::ALL {
                if u != Unit::Count || countable {
                    t.insert(i, u, 10.0);
                }
            }
        }
        (t, SynonymMap::builtin())
    }

    fn tuple(l: &IngredientLine) -> (&str, f64, Unit) {
        (&l.ingredient, l.portion, l.unit)
    }

    #[test]
    fn documented_examples() {
        let (t, s) = fixture();
        let p = |x| parse_ingredient_line(x, &t, &s).unwrap();
        assert_eq!(tuple(&p("1.5 pounds cabbage")), ("cabbage", 1.5, Unit::Pound));
        assert_eq!(tuple(&p("1 carrot")), ("carrot", 1.0, Unit::Count));
        assert_eq!(tuple(&p("1 spoon of oil")), ("oil", 1.0, Unit::Tblsp));
    }

    #[test]
    fn quantities() {
        assert_eq!(parse_quantity("1 1/2 cups").unwrap().0, 1.5);
        assert_eq!(parse_quantity("3/4 cup").unwrap(), (0.75, "cup"));
        assert_eq!(parse_quantity("½ tsp").unwrap().0, 0.5);
        assert_eq!(parse_quantity("2½ tsp").unwrap().0, 2.5);
        assert_eq!(parse_quantity("2 ½ tsp").unwrap().0, 2.5);
        assert_eq!(parse_quantity(".25 cup").unwrap().0, 0.25);
        assert_eq!(parse_quantity("2 3 eggs").unwrap(), (2.0, "3 eggs"));
        assert!(parse_quantity("some salt").is_none());
        assert!(parse_quantity("1/0 cup").is_none());
        assert!(parse_quantity("1.2.3 cup").is_none());
    }

    #[test]
    fn errors() {
        let (t, s) = fixture();
        let e = |x| parse_ingredient_line(x, &t, &s).unwrap_err();
        assert!(matches!(e("a pinch of oil"), CorpusError::UnparsableQuantity(_)));
        assert!(matches!(e("3 grams oil"), CorpusError::UnknownUnit(w) if w == "grams"));
        assert!(matches!(e("2 oil"), CorpusError::UnknownUnit(_)));
        assert!(matches!(e("2 cups saffron"), CorpusError::UnknownIngredient(n) if n == "saffron"));
        assert!(matches!(e("0 cups oil"), CorpusError::UnparsableQuantity(_)));
    }

    #[test]
    fn case_sensitive_spoon_abbreviations() {
        let (t, s) = fixture();
        assert_eq!(parse_ingredient_line("1 T oil", &t, &s).unwrap().unit, Unit::Tblsp);
        assert_eq!(parse_ingredient_line("1 t oil", &t, &s).unwrap().unit, Unit::Tsp);
        assert_eq!(parse_ingredient_line("2 Tbsp. tomato paste", &t, &s).unwrap().unit, Unit::Tblsp);
    }

    #[test]
    fn render_round_trips() {
        let (t, s) = fixture();
        for text in ["1.5 pounds cabbage", "3 eggs", "2 cups carrot", "0.125 tsp oil", "1 1/2 T tomato paste"] {
            let a = parse_ingredient_line(text, &t, &s).unwrap();
            let b = parse_ingredient_line(&render_line(&a, &t), &t, &s).unwrap();
            assert_eq!(tuple(&a), tuple(&b), "{text}");
        }
    }
}
