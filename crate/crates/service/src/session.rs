//! Session state and the events that build it.
//!
//! Events carry the outcomes of model calls, so replaying a log rebuilds a
//! session without running inference again.

use mealkit_core::corpus::Vocabulary;
use mealkit_core::mealkit::MealKit;
use mealkit_core::stage1::{apply_correction, GenerationState, IngredientPrediction};
use mealkit_core::stage2::StageTwoOutput;
use mealkit_core::ModelError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DishAlternative {
    pub dish: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        recipe_id: Option<String>,
        features_ref: usize,
        dish: String,
        dish_alternatives: Vec<DishAlternative>,
        max_main: usize,
        max_total: usize,
        at: u64,
    },
    DishSet {
        dish: String,
        at: u64,
    },
    Predicted {
        prediction: IngredientPrediction,
        at: u64,
    },
    Corrected {
        step: usize,
        token: String,
        at: u64,
    },
    Estimated {
        output: StageTwoOutput,
        kit: MealKit,
        at: u64,
    },
}

impl Event {
    pub fn at(&self) -> u64 {
        match self {
            Event::Created { at, .. }
            | Event::DishSet { at, .. }
            | Event::Predicted { at, .. }
            | Event::Corrected { at, .. }
            | Event::Estimated { at, .. } => *at,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("log does not start with a creation event")]
    MissingCreate,
    #[error("second creation event at revision {0}")]
    DuplicateCreate(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub recipe_id: Option<String>,
    pub features_ref: usize,
    pub dish: String,
    pub dish_alternatives: Vec<DishAlternative>,
    pub state: GenerationState,
    pub estimate: Option<StageTwoOutput>,
    pub kit: Option<MealKit>,
    pub created_at: u64,
    pub updated_at: u64,
    /// Number of events applied.
    pub revision: u64,
}

impl Session {
    pub fn from_created(event: &Event) -> Result<Self, ReplayError> {
        match event {
            Event::Created { session_id, recipe_id, features_ref, dish, dish_alternatives, max_main, max_total, at } => {
                Ok(Self {
                    id: session_id.clone(),
                    recipe_id: recipe_id.clone(),
                    features_ref: *features_ref,
                    dish: dish.clone(),
                    dish_alternatives: dish_alternatives.clone(),
                    state: GenerationState::new(Some(dish.clone()), *max_main, *max_total),
                    estimate: None,
                    kit: None,
                    created_at: *at,
                    updated_at: *at,
                    revision: 1,
                })
            }
            _ => Err(ReplayError::MissingCreate),
        }
    }

    /// Applies a non-creation event, validating it against the state.
    pub fn apply(&mut self, event: &Event, vocab: &Vocabulary) -> Result<(), ReplayError> {
        match event {
            Event::Created { .. } => return Err(ReplayError::DuplicateCreate(self.revision)),
            Event::DishSet { dish, .. } => {
                if vocab.dish_id(dish).is_none() {
                    return Err(ModelError::UnknownToken(dish.clone()).into());
                }
                self.dish = dish.clone();
                self.state = GenerationState::new(Some(dish.clone()), self.state.max_main, self.state.max_total);
                self.estimate = None;
                self.kit = None;
            }
            Event::Predicted { prediction, .. } => {
                self.state.accept(prediction)?;
                self.estimate = None;
                self.kit = None;
            }
            Event::Corrected { step, token, .. } => {
                self.state = apply_correction(&self.state, *step, token, vocab)?;
                self.estimate = None;
                self.kit = None;
            }
            Event::Estimated { output, kit, .. } => {
                self.estimate = Some(output.clone());
                self.kit = Some(kit.clone());
            }
        }
        self.revision += 1;
        self.updated_at = event.at();
        Ok(())
    }

    /// Rebuilds a session from its full event list.
    pub fn replay(events: &[Event], vocab: &Vocabulary) -> Result<Self, ReplayError> {
        let (first, rest) = events.split_first().ok_or(ReplayError::MissingCreate)?;
        let mut s = Self::from_created(first)?;
        for e in rest {
            s.apply(e, vocab)?;
        }
        Ok(s)
    }

    /// Hex sha256 of the serialized session.
    pub fn state_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("session serializes")))
    }
}
