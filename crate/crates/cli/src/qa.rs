//! Reader evaluation: retrieved triples to prompts, prompts to answers,
//! answers to QA scores.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use parallax_core::kg::{KnowledgeGraph, QuerySample};
use parallax_core::metrics::{qa_metrics, QaReport};
use parallax_core::retriever::{top_k, ScorePack};
use parallax_gateway::{answer_all, build_prompt, Client, Decoding, EndpointConfig, PromptTemplate, Transcript};

pub struct QaOptions {
    pub endpoint: EndpointConfig,
    pub k: usize,
    pub template: PromptTemplate,
    pub decoding: Decoding,
    pub budget: Option<usize>,
}

pub struct QaRun {
    pub report: QaReport,
    pub transcripts: Vec<Transcript>,
    pub failed_requests: usize,
    pub parse_failures: usize,
    pub truncated_triples: usize,
}

pub fn gold_labels(g: &KnowledgeGraph, queries: &[&QuerySample]) -> BTreeMap<String, Vec<String>> {
    queries
        .iter()
        .map(|q| (q.id.clone(), q.answers.iter().map(|&a| g.entity_label(a).to_owned()).collect()))
        .collect()
}

/// Asks the reader about every query using its top-k triples. Requests that
/// fail after retries count as empty predictions.
pub fn run_qa(g: &KnowledgeGraph, queries: &[&QuerySample], packs: &[Option<ScorePack>], opts: &QaOptions) -> Result<QaRun> {
    let mut items = Vec::with_capacity(queries.len());
    let mut truncated = 0;
    for (q, pack) in queries.iter().zip(packs) {
        let triples: Vec<[String; 3]> = pack
            .as_ref()
            .map(|p| top_k(p, opts.k).into_iter().map(|t| g.triple_labels(t).map(str::to_owned)).collect())
            .unwrap_or_default();
        let bundle = build_prompt(&q.question, &triples, &opts.template, opts.decoding, opts.budget, true)?;
        truncated += bundle.truncated;
        items.push((q.id.clone(), bundle));
    }
    let client = Client::new(opts.endpoint.clone())?;
    let results = answer_all(&client, &items);
    let mut predictions = BTreeMap::new();
    let mut transcripts = Vec::with_capacity(items.len());
    let (mut failed, mut unparsed) = (0, 0);
    for ((id, bundle), r) in items.iter().zip(results) {
        let prompt = format!("{}\n\n{}", bundle.system, bundle.user);
        match r {
            Ok(out) => {
                unparsed += out.parse_failed as usize;
                predictions.insert(id.clone(), out.answers.clone());
                transcripts.push(Transcript { query_id: id.clone(), prompt, response: out.response, answers: out.answers });
            }
            Err(e) => {
                log::error!("{id}: {e}");
                failed += 1;
                transcripts.push(Transcript { query_id: id.clone(), prompt, response: String::new(), answers: Vec::new() });
            }
        }
    }
    let report = qa_metrics(&predictions, &gold_labels(g, queries));
    Ok(QaRun { report, transcripts, failed_requests: failed, parse_failures: unparsed, truncated_triples: truncated })
}

pub fn write_transcripts(run: &QaRun, path: &Path) -> Result<()> {
    Transcript::write_jsonl(&run.transcripts, path)?;
    Ok(())
}
