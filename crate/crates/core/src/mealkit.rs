//! Meal kits: per-ingredient quantities and calories built from stage-two
//! outputs, exact serving rescaling and rendering.

use serde::{Deserialize, Serialize};

use crate::corpus::{NutritionTable, Unit};
use crate::error::{ModelError, Result};
use crate::stage2::StageTwoOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KitItem {
    pub ingredient: String,
    pub portion: f64,
    pub unit: Unit,
    pub unit_confidence: f64,
    pub kcal: f64,
    /// `portion × kcal/unit` from the nutrition table, when it has the pair.
    pub table_kcal: Option<f64>,
    /// The network's portion was negative and was clamped to zero.
    pub portion_clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealKit {
    pub dish: String,
    pub items: Vec<KitItem>,
    pub servings: f64,
    /// Total-calorie head output, or the item sum for hand-built kits.
    pub total_kcal: f64,
    pub item_kcal_sum: f64,
}

impl MealKit {
    /// A kit whose total is the sum of its items.
    pub fn from_items(dish: impl Into<String>, items: Vec<KitItem>, servings: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(ModelError::EmptyIngredients);
        }
        check_servings(servings)?;
        let sum = items.iter().map(|i| i.kcal).sum();
        Ok(Self { dish: dish.into(), items, servings, total_kcal: sum, item_kcal_sum: sum })
    }

    /// Relative gap between the item sum and the reported total.
    pub fn discrepancy(&self) -> f64 {
        (self.item_kcal_sum - self.total_kcal).abs() / self.total_kcal.abs().max(f64::MIN_POSITIVE)
    }

    pub fn has_warnings(&self) -> bool {
        self.items.iter().any(|i| i.portion_clamped)
    }
}

fn check_servings(servings: f64) -> Result<()> {
    if servings > 0.0 && servings.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonpositiveServings(servings))
    }
}

/// One serving: argmax unit, portion clamped at zero, item kcal clamped at
/// zero, total from the network head.
pub fn build_kit(dish: &str, output: &StageTwoOutput, table: &NutritionTable) -> Result<MealKit> {
    if output.ingredients.is_empty() {
        return Err(ModelError::EmptyIngredients);
    }
    let n = output.ingredients.len();
    if [output.o_c.len(), output.o_p.len(), output.unit_probs.len()].iter().any(|&l| l != n) {
        return Err(ModelError::TargetMisalignment(format!("outputs do not match {n} ingredients")));
    }
    let units = output.units();
    let items: Vec<KitItem> = (0..n)
        .map(|i| {
            let ingredient = output.ingredients[i].clone();
            let unit = units[i];
            let portion = output.o_p[i].max(0.0);
            KitItem {
                table_kcal: table.kcal_per_unit(&ingredient, unit).map(|k| k * portion),
                ingredient,
                portion,
                unit,
                unit_confidence: output.unit_probs[i][unit.index()],
                kcal: output.o_c[i].max(0.0),
                portion_clamped: output.o_p[i] < 0.0,
            }
        })
        .collect();
    let item_kcal_sum = items.iter().map(|i| i.kcal).sum();
    Ok(MealKit { dish: dish.to_string(), items, servings: 1.0, total_kcal: output.total, item_kcal_sum })
}

/// Scales every quantity and calorie value by `servings / kit.servings`.
pub fn rescale(kit: &MealKit, servings: f64) -> Result<MealKit> {
    check_servings(servings)?;
    if servings == kit.servings {
        return Ok(kit.clone());
    }
    let f = servings / kit.servings;
    Ok(MealKit {
        dish: kit.dish.clone(),
        items: kit
            .items
            .iter()
            .map(|i| KitItem {
                portion: i.portion * f,
                kcal: i.kcal * f,
                table_kcal: i.table_kcal.map(|k| k * f),
                ..i.clone()
            })
            .collect(),
        servings,
        total_kcal: kit.total_kcal * f,
        item_kcal_sum: kit.item_kcal_sum * f,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KitFormat {
    Json,
    Text,
}

impl std::str::FromStr for KitFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "json" => Ok(KitFormat::Json),
            "text" => Ok(KitFormat::Text),
            other => Err(format!("unknown kit format {other:?}")),
        }
    }
}

/// Nearest eighth as `"w n/d"`, with the fraction reduced.
pub fn format_eighths(x: f64) -> String {
    let eighths = (x.max(0.0) * 8.0).round() as u64;
    let (whole, rem) = (eighths / 8, eighths % 8);
    if rem == 0 {
        return whole.to_string();
    }
    let g = gcd(rem, 8);
    let frac = format!("{}/{}", rem / g, 8 / g);
    if whole == 0 {
        frac
    } else {
        format!("{whole} {frac}")
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Display quantity: eighths for cup/tblsp/tsp, whole numbers for count and
/// one decimal for pound/ounce.
pub fn format_portion(portion: f64, unit: Unit) -> String {
    let p = portion.max(0.0);
    match unit {
        Unit::Cup | Unit::Tblsp | Unit::Tsp => format_eighths(p),
        Unit::Count => format!("{}", p.round() as u64),
        Unit::Pound | Unit::Ounce => format!("{:.1}", p),
    }
}

/// `"1 carrot"`, `"1 3/8 cup flour"`.
pub fn format_quantity(portion: f64, unit: Unit, ingredient: &str) -> String {
    let q = format_portion(portion, unit);
    match unit {
        Unit::Count => format!("{q} {ingredient}"),
        _ => format!("{q} {} {ingredient}", unit.as_str()),
    }
}

pub fn render_kit(kit: &MealKit, format: KitFormat) -> Result<Vec<u8>> {
    match format {
        KitFormat::Json => Ok(serde_json::to_vec_pretty(kit)?),
        KitFormat::Text => {
            let mut out = format!("{} (serves {})\n", kit.dish, kit.servings);
            for i in &kit.items {
                let flag = if i.portion_clamped { " [portion clamped]" } else { "" };
                out.push_str(&format!("{} ({:.0} kcal){flag}\n", format_quantity(i.portion, i.unit, &i.ingredient), i.kcal));
            }
            out.push_str(&format!("total: {:.0} kcal (items: {:.0} kcal)\n", kit.total_kcal, kit.item_kcal_sum));
            Ok(out.into_bytes())
        }
    }
}

pub fn parse_kit_json(bytes: &[u8]) -> Result<MealKit> {
    Ok(serde_json::from_slice(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(name: &str, portion: f64, unit: Unit, kcal: f64) -> KitItem {
        KitItem {
            ingredient: name.into(),
            portion,
            unit,
            unit_confidence: 1.0,
            kcal,
            table_kcal: None,
            portion_clamped: false,
        }
    }

    #[test]
    fn quantities() {
        assert_eq!(format_quantity(1.0, Unit::Count, "carrot"), "1 carrot");
        assert_eq!(format_quantity(1.3333, Unit::Cup, "flour"), "1 3/8 cup flour");
        assert_eq!(format_quantity(1.5, Unit::Pound, "cabbage"), "1.5 pound cabbage");
        assert_eq!(format_eighths(0.5), "1/2");
        assert_eq!(format_eighths(2.0), "2");
        assert_eq!(format_eighths(0.74), "3/4");
        assert_eq!(format_eighths(0.01), "0");
    }

    #[test]
    fn build_clamps_and_flags() {
        let out = StageTwoOutput {
            ingredients: vec!["carrot".into(), "oil".into()],
            o_c: vec![30.0, -5.0],
            unit_probs: vec![[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.1, 0.0, 0.9, 0.0]],
            o_p: vec![2.0, -0.5],
            o_a: vec![0.0, 0.0],
            total: 40.0,
        };
        let mut table = NutritionTable::new();
        table.insert("carrot", Unit::Count, 25.0);
        let kit = build_kit("salad", &out, &table).unwrap();
        assert_eq!(kit.items.len(), 2);
        assert_eq!(kit.items[0].unit, Unit::Count);
        assert_eq!(kit.items[0].table_kcal, Some(50.0));
        assert_eq!(kit.items[1].unit, Unit::Tblsp);
        assert_eq!(kit.items[1].portion, 0.0);
        assert_eq!(kit.items[1].kcal, 0.0);
        assert!(kit.items[1].portion_clamped && kit.has_warnings());
        assert_eq!(kit.total_kcal, 40.0);
        assert_eq!(kit.item_kcal_sum, 30.0);
        let text = String::from_utf8(render_kit(&kit, KitFormat::Text).unwrap()).unwrap();
        assert!(text.contains("2 carrot (30 kcal)"));
        assert!(text.contains("[portion clamped]"));
    }

    #[test]
    fn servings_must_be_positive() {
        let kit = MealKit::from_items("x", vec![item("egg", 2.0, Unit::Count, 140.0)], 1.0).unwrap();
        assert!((kit.total_kcal - 140.0).abs() < 1e-12);
        for s in [0.0, -1.0, f64::NAN] {
            assert!(matches!(rescale(&kit, s), Err(ModelError::NonpositiveServings(_))));
        }
        assert_eq!(rescale(&kit, 1.0).unwrap(), kit);
        assert!(matches!(MealKit::from_items("x", vec![], 1.0), Err(ModelError::EmptyIngredients)));
    }
}
