#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mealkit_core::corpus::io::Corpus;
use mealkit_core::corpus::{generate_synthetic_corpus, SynthConfig};
use mealkit_core::stage1::StageOneModel;
use mealkit_core::stage2::{StageTwoModel, TargetScales};
use mealkit_core::train::TrainConfig;
use mealkit_service::Models;
use serde_json::Value;
use tower::ServiceExt;

/// Untrained models over a small synthetic corpus.
pub fn test_models(seed: u64) -> Arc<Models> {
    let c = generate_synthetic_corpus(&SynthConfig { seed, n_recipes: 40, channels: 8, grid: 2, ..Default::default() })
        .unwrap();
    let cfg = TrainConfig { model_dim: 16, n_heads: 2, n_layers: 1, classifier_hidden: 16, seed, ..Default::default() };
    let stage1 = StageOneModel::new(cfg.stage_one(8), c.vocabulary.clone());
    let scales = TargetScales::from_recipes(&c.recipes).unwrap();
    let stage2 = StageTwoModel::new(cfg.stage_two(8, scales), c.vocabulary.clone());
    Arc::new(Models { stage1, stage2, corpus: Corpus { recipes: c.recipes, table: c.table, vocabulary: c.vocabulary } })
}

pub async fn send_raw(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let body = body.map_or_else(Body::empty, |v| Body::from(serde_json::to_vec(&v).unwrap()));
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(body).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

pub async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send_raw(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

pub fn strings(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect()
}
