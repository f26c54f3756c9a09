use std::fs::File;
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mealkit_core::baselines::{baseline_nn, baseline_prior_dish, baseline_prior_imean, NnVariant};
use mealkit_core::corpus::io::{read_corpus, read_features, read_nutrition_path, read_raw_recipes, write_corpus};
use mealkit_core::corpus::{
    generate_synthetic_corpus, ingest_corpus, ClusterConfig, Corpus, FeatureMap, FilterConfig, SynonymMap, SynthConfig,
};
use mealkit_core::eval::evaluate;
use mealkit_core::mealkit::{build_kit, render_kit, rescale, KitFormat};
use mealkit_core::stage1::StageOneModel;
use mealkit_core::stage2::StageTwoModel;
use mealkit_core::train::{split_corpus, train_stage1, train_stage2, TrainConfig};
use mealkit_service::{AppState, Models, DEFAULT_PORT, PORT_ENV, STORE_ENV};

#[derive(Parser)]
#[command(name = "mealkit", version, about = "Recipe ingredient prediction and calorie estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Corpus directory the feature blocks are read from.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding both stage checkpoints.
    #[arg(long, default_value = "checkpoints")]
    checkpoints: PathBuf,
    /// Recipe whose feature block is used.
    #[arg(long)]
    recipe_id: String,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and cluster raw recipes into a corpus directory.
    Ingest {
        /// JSON-lines raw recipes.
        #[arg(long)]
        recipes: PathBuf,
        /// Feature sidecar referenced by `features_ref`.
        #[arg(long)]
        features: PathBuf,
        /// Nutrition table CSV (ingredient,unit,kcal_per_unit).
        #[arg(long)]
        nutrition: PathBuf,
        /// Extra synonym CSV merged over the built-in map.
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long, default_value_t = FilterConfig::default().coverage)]
        coverage: f64,
        #[arg(long, default_value_t = ClusterConfig::default().k)]
        dishes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one or both stages.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
        /// JSON file with training options; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
    },
    /// Score both stages and the baselines on the test split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "checkpoints")]
        checkpoints: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also train and score the two per-ingredient MLP baselines.
        #[arg(long)]
        nn_baselines: bool,
        /// Where to write the JSON report; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classify the dish and generate ingredients for one recipe's image.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        /// Condition on this dish instead of the classifier's.
        #[arg(long)]
        dish: Option<String>,
        /// Condition on no dish at all.
        #[arg(long, conflicts_with = "dish")]
        no_dish: bool,
    },
    /// Estimate calories, units and portions for given ingredients.
    Estimate {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated ingredient list.
        #[arg(long, value_delimiter = ',', required = true)]
        ingredients: Vec<String>,
    },
    /// Build a meal kit for given ingredients.
    Kit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        ingredients: Vec<String>,
        #[arg(long)]
        dish: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        servings: f64,
        #[arg(long, default_value = "text")]
        format: KitFormat,
    },
    /// Run the HTTP session service.
    Serve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "checkpoints")]
        checkpoints: PathBuf,
        #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, env = STORE_ENV, default_value = "sessions")]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

fn train_config(path: Option<&Path>, epochs: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => serde_json::from_reader(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))?,
        None => TrainConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, bytes)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(&bytes)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn recipe_features<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a FeatureMap> {
    Ok(&corpus.recipe(id).with_context(|| format!("no recipe {id:?} in corpus"))?.features)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { recipes, features, nutrition, synonyms, coverage, dishes, out } => {
            let raw = read_raw_recipes(&recipes)?;
            let maps = read_features(BufReader::new(File::open(&features)?))?;
            let table = read_nutrition_path(&nutrition)?;
            let mut syn = SynonymMap::builtin();
            if let Some(p) = synonyms {
                syn.merge(SynonymMap::from_csv_path(&p)?);
            }
            let filter = FilterConfig { coverage, ..Default::default() };
            let cluster = ClusterConfig { k: dishes, ..Default::default() };
            let (recipes, vocab, report) = ingest_corpus(&raw, &maps, &table, &syn, &filter, &cluster)?;
            write_corpus(&out, &recipes, &table, &vocab)?;
            write_json(None, &serde_json::to_value(&report)?)?;
        }
        Command::Synth { n, seed, out } => {
            let c = generate_synthetic_corpus(&SynthConfig { n_recipes: n, seed, ..Default::default() })?;
            write_corpus(&out, &c.recipes, &c.table, &c.vocabulary)?;
            log::info!("wrote {} recipes to {}", c.recipes.len(), out.display());
        }
        Command::Train { corpus, stage, config, epochs, out } => {
            let cfg = train_config(config.as_deref(), epochs)?;
            let c = load_corpus(&corpus)?;
            let sp = split_corpus(&c.recipes, &cfg);
            log::info!("split: {} train, {} val, {} test", sp.train.len(), sp.val.len(), sp.test.len());
            let mut curves = serde_json::Map::new();
            if matches!(stage, Stage::Two | Stage::All) {
                let t = train_stage2(&sp.train, &sp.val, &c.vocabulary, &cfg)?;
                t.model.save(&out)?;
                curves.insert("stage2".into(), serde_json::json!({ "best_epoch": t.best_epoch, "curve": t.curve }));
            }
            if matches!(stage, Stage::One | Stage::All) {
                let t = train_stage1(&sp.train, &sp.val, &c.vocabulary, &cfg)?;
                t.model.save(&out)?;
                curves.insert("stage1".into(), serde_json::json!({ "best_epoch": t.best_epoch, "curve": t.curve }));
            }
            std::fs::write(out.join("train_config.json"), serde_json::to_vec_pretty(&cfg)?)?;
            write_json(Some(&out.join("curves.json")), &curves.into())?;
        }
        Command::Eval { corpus, checkpoints, config, nn_baselines, report } => {
            let cfg = train_config(config.as_deref(), None)?;
            let c = load_corpus(&corpus)?;
            let sp = split_corpus(&c.recipes, &cfg);
            let s1 = StageOneModel::load(&checkpoints)?;
            let s2 = StageTwoModel::load(&checkpoints)?;
            let metrics = evaluate(&s1, &s2, &sp.train, &sp.test)?;
            let mut dishes = Vec::with_capacity(sp.test.len());
            let mut generated = Vec::with_capacity(sp.test.len());
            for r in &sp.test {
                let (dish, _) = s1.classify_dish(&r.features)?;
                generated.push(s1.generate(&r.features, Some(&dish))?.accepted());
                dishes.push(dish);
            }
            let mut baselines = vec![
                baseline_prior_imean(&sp.train, &sp.test, Some(&generated))?,
                baseline_prior_dish(&sp.train, &sp.test, Some(&dishes))?,
            ];
            if nn_baselines {
                for v in [NnVariant::Calories, NnVariant::Upc] {
                    let (_, rep) = baseline_nn(v, &sp.train, &sp.val, &sp.test, &c.vocabulary, &c.table, &cfg, Some(&generated))?;
                    baselines.push(rep);
                }
            }
            write_json(report.as_deref(), &serde_json::json!({ "metrics": metrics, "baselines": baselines }))?;
        }
        Command::Predict { model, dish, no_dish } => {
            let c = load_corpus(&model.corpus)?;
            let s1 = StageOneModel::load(&model.checkpoints)?;
            let features = recipe_features(&c, &model.recipe_id)?;
            let (predicted, probs) = s1.classify_dish(features)?;
            let dish = if no_dish { None } else { Some(dish.unwrap_or_else(|| predicted.clone())) };
            let state = s1.generate(features, dish.as_deref())?;
            let top = probs.iter().cloned().fold(0.0, f64::max);
            write_json(
                None,
                &serde_json::json!({
                    "predicted_dish": predicted,
                    "dish_probability": top,
                    "conditioned_on": dish,
                    "mains": state.mains,
                    "optionals": state.optionals,
                }),
            )?;
        }
        Command::Estimate { model, ingredients } => {
            let c = load_corpus(&model.corpus)?;
            let s2 = StageTwoModel::load(&model.checkpoints)?;
            let features = recipe_features(&c, &model.recipe_id)?;
            let out = s2.estimate(&s2.inputs(&ingredients, features, None)?)?;
            write_json(None, &serde_json::to_value(&out)?)?;
        }
        Command::Kit { model, ingredients, dish, servings, format } => {
            let c = load_corpus(&model.corpus)?;
            let s2 = StageTwoModel::load(&model.checkpoints)?;
            let recipe = c.recipe(&model.recipe_id).with_context(|| format!("no recipe {:?}", model.recipe_id))?;
            let out = s2.estimate(&s2.inputs(&ingredients, &recipe.features, None)?)?;
            let dish = dish.unwrap_or_else(|| recipe.dish.clone());
            let kit = rescale(&build_kit(&dish, &out, &c.table)?, servings)?;
            std::io::stdout().lock().write_all(&render_kit(&kit, format)?)?;
        }
        Command::Serve { corpus, checkpoints, port, store, host } => {
            let models = Models::load(&checkpoints, &corpus)?;
            let state = AppState::new(Arc::new(models), &store)?;
            if !state.quarantined.is_empty() {
                log::warn!("quarantined sessions: {:?}", state.quarantined);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(mealkit_service::serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn stage_and_format_parse() {
        let cli = Cli::try_parse_from(["mealkit", "train", "--corpus", "c", "--stage", "2"]).unwrap();
        assert!(matches!(cli.command, Command::Train { stage: Stage::Two, .. }));
        let cli = Cli::try_parse_from([
            "mealkit", "kit", "--corpus", "c", "--recipe-id", "r", "--ingredients", "egg,flour", "--format", "json",
        ])
        .unwrap();
        match cli.command {
            Command::Kit { ingredients, format, .. } => {
                assert_eq!(ingredients, ["egg", "flour"]);
                assert_eq!(format, KitFormat::Json);
            }
            _ => panic!("expected kit"),
        }
        if let Err(e) = train_config(None, Some(3)).map(|c| c.epochs) {
            panic!("{e}");
        }
    }
}
