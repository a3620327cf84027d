//! Glue between the graph, the embedding store, the retriever and training.

use crate::embedding::EmbeddingStore;
use crate::error::Result;
use crate::kg::{KnowledgeGraph, QuerySample};
use crate::metrics::{query_row, RetrievalReport};
use crate::retriever::{top_k, Retriever, RetrieverConfig, ScorePack, ViewIndex};
use crate::train::{self, Example, TrainConfig, TrainOutcome};

/// Trainable examples for `queries`. Queries without gold triples inside the
/// candidate radius are skipped.
pub fn build_examples(
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    cfg: &RetrieverConfig,
    queries: &[&QuerySample],
    w_pos: f64,
) -> Result<Vec<Example>> {
    cfg.check_store(store)?;
    let index = ViewIndex::new(store, g);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        if !q.is_trainable() {
            continue;
        }
        let inputs = index.prepare(g, cfg, q)?;
        if !inputs.sub.triples.iter().any(|t| q.gold_triples.contains(t)) {
            log::warn!("query {}: no gold triple within {} steps, skipped", q.id, cfg.max_step);
            continue;
        }
        out.push(Example::new(inputs, q, w_pos)?);
    }
    Ok(out)
}

/// Initialises a retriever and trains it on `train_q`, monitoring `dev_q`.
pub fn fit(
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    rcfg: &RetrieverConfig,
    tcfg: &TrainConfig,
    train_q: &[&QuerySample],
    dev_q: &[&QuerySample],
) -> Result<TrainOutcome> {
    let train_set = build_examples(g, store, rcfg, train_q, tcfg.w_pos)?;
    let dev_set = build_examples(g, store, rcfg, dev_q, tcfg.w_pos)?;
    let model = Retriever::init(rcfg.clone(), tcfg.seed)?;
    train::train(model, &train_set, &dev_set, tcfg)
}

/// Scores every query; queries with no candidates yield `None`.
pub fn score_queries(
    model: &Retriever,
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    queries: &[&QuerySample],
) -> Result<Vec<Option<ScorePack>>> {
    model.config.check_store(store)?;
    let index = ViewIndex::new(store, g);
    queries
        .iter()
        .map(|q| {
            let inputs = index.prepare(g, &model.config, q)?;
            if inputs.is_empty() {
                return Ok(None);
            }
            model.score(&inputs).map(Some)
        })
        .collect()
}

pub fn retrieval_report(
    g: &KnowledgeGraph,
    queries: &[&QuerySample],
    packs: &[Option<ScorePack>],
    k: usize,
) -> RetrievalReport {
    let rows = queries
        .iter()
        .zip(packs)
        .map(|(q, p)| {
            let retrieved = p.as_ref().map(|p| top_k(p, k)).unwrap_or_default();
            query_row(g, q, &retrieved)
        })
        .collect();
    RetrievalReport::from_rows(k, rows)
}
