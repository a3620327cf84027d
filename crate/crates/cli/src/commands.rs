//! One function per subcommand.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use parallax_core::embedding::{entity_key, query_key, relation_key, EmbeddingStore};
use parallax_core::headlab::{self, DddConfig, ProbeConfig, RunLog};
use parallax_core::kg::{annotate_gold, load_queries, save_queries, KnowledgeGraph, QuerySample};
use parallax_core::pipeline;
use parallax_core::retriever::{retrieval_record, Ablation, Retriever, RetrieverConfig, ScorePack, ViewIndex};
use parallax_core::synth::{generate, SynthSpec};
use parallax_core::train::{history_csv, TrainConfig, TrainOutcome};
use parallax_gateway::{Decoding, EndpointConfig, Failure, MockMode, MockServer, PromptTemplate};
use serde::Serialize;
use serde_json::json;

use crate::data::{Dataset, SplitArg};
use crate::manifest::{RunManifest, Stopwatch};
use crate::qa::{run_qa, write_transcripts, QaOptions};
use crate::{
    config_error, AblateArgs, AnalyzeArgs, BetaSweepArgs, CliError, DddArgs, EvalArgs, GenSynthArgs, IngestArgs,
    MockModeArg, ModelArgs, QaArgs, RetrieveArgs, ServeMockArgs, TrainArgs, EXIT_DATA,
};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn finish(mut manifest: RunManifest, outputs: &[&Path], out: &Path, clock: &Stopwatch) -> Result<()> {
    for p in outputs {
        manifest.output(p)?;
    }
    manifest.timings = clock.timings();
    manifest.write(out)?;
    Ok(())
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let mut spec = if Path::new(&a.spec).is_file() {
        let text = clock.io(|| fs::read_to_string(&a.spec)).with_context(|| format!("reading {}", a.spec))?;
        serde_json::from_str::<SynthSpec>(&text).map_err(|e| config_error(format!("spec {}: {e}", a.spec)))?
    } else {
        SynthSpec::preset(&a.spec)?
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_queries {
        spec.n_queries = n;
    }
    spec.validate()?;
    let bench = generate(&spec)?;
    create_dir(&a.out)?;
    let [graph, queries, emb] = Dataset::files(&a.out);
    let gold = a.out.join("gold_manifest.json");
    clock.io(|| -> Result<()> {
        bench.graph.save(&graph)?;
        save_queries(&queries, &bench.graph, &bench.queries)?;
        bench.store.write(&emb)?;
        bench.manifest.save(&gold)?;
        Ok(())
    })?;
    let manifest = RunManifest::new("gen-synth", serde_json::to_value(&spec)?, Some(spec.seed));
    finish(manifest, &[&graph, &queries, &emb, &gold], &a.out, &clock)?;
    log::info!(
        "{} entities, {} triples, {} queries written to {}",
        bench.graph.num_entities(),
        bench.graph.num_triples(),
        bench.queries.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct IngestReport {
    entities: usize,
    relations: usize,
    triples: usize,
    duplicate_lines: usize,
    queries: usize,
    trainable: usize,
    unreachable: usize,
    hops: BTreeMap<usize, usize>,
    missing_embeddings: Option<usize>,
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let (g, load) = clock.io(|| KnowledgeGraph::load(&a.graph))?;
    let mut queries = clock.io(|| load_queries(&a.queries, &g))?;
    annotate_gold(&g, &mut queries, a.traversal.into());
    let mut hops = BTreeMap::new();
    for q in &queries {
        if let Some(h) = q.hop {
            *hops.entry(h).or_insert(0) += 1;
        }
    }
    let store = match &a.embeddings {
        Some(p) => Some(clock.io(|| EmbeddingStore::read(p))?),
        None => None,
    };
    let missing = store.as_ref().map(|s| {
        let keys = g
            .entity_labels()
            .iter()
            .map(|l| entity_key(l))
            .chain(g.relation_labels().iter().map(|l| relation_key(l)))
            .chain(queries.iter().map(|q| query_key(&q.id)));
        keys.filter(|k| s.index_of(k).is_none()).count()
    });
    let report = IngestReport {
        entities: g.num_entities(),
        relations: g.num_relations(),
        triples: g.num_triples(),
        duplicate_lines: load.duplicates,
        queries: queries.len(),
        trainable: queries.iter().filter(|q| q.is_trainable()).count(),
        unreachable: queries.iter().filter(|q| q.hop.is_none()).count(),
        hops,
        missing_embeddings: missing,
    };
    if let Some(m) = missing.filter(|&m| m > 0) {
        return Err(CliError { code: EXIT_DATA, message: format!("{m} graph or query items have no embedding") }.into());
    }
    create_dir(&a.out)?;
    let [graph_out, queries_out, emb_out] = Dataset::files(&a.out);
    let report_path = a.out.join("ingest_report.json");
    let mut outputs = vec![graph_out.clone(), queries_out.clone(), report_path.clone()];
    clock.io(|| -> Result<()> {
        g.save(&graph_out)?;
        save_queries(&queries_out, &g, &queries)?;
        write_json(&report_path, &report)?;
        if let Some(s) = &store {
            s.write(&emb_out)?;
        }
        Ok(())
    })?;
    if store.is_some() {
        outputs.push(emb_out);
    }
    let mut manifest = RunManifest::new("ingest", serde_json::to_value(a)?, None);
    manifest.input(&a.graph)?;
    manifest.input(&a.queries)?;
    if let Some(p) = &a.embeddings {
        manifest.input(p)?;
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    finish(manifest, &refs, &a.out, &clock)
}

/// Retriever and training configuration after defaults, config file and flags.
pub fn effective_configs(store: &EmbeddingStore, ablation: Ablation, m: &ModelArgs) -> Result<(RetrieverConfig, TrainConfig)> {
    let mut r = RetrieverConfig::for_store(store);
    if let Some(b) = m.beta {
        r.dde.beta = b;
    }
    if let Some(h) = &m.hidden {
        r.hidden = h.clone();
    }
    if let Some(s) = m.max_step {
        r.max_step = s;
    }
    let r = r.ablate(ablation)?;
    r.validate()?;
    let mut t = TrainConfig::default();
    if let Some(p) = &m.config {
        t = TrainConfig::load(p)?;
    }
    for kv in &m.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        t.set(k.trim(), v.trim()).map_err(config_error)?;
    }
    if let Some(s) = m.seed {
        t.seed = s;
    }
    if let Some(e) = m.epochs {
        t.max_epochs = e;
        t.patience = t.patience.min(e);
        t.warmup_epochs = t.warmup_epochs.min(e.saturating_sub(1) as f64);
    }
    if let Some(lr) = m.lr {
        t.peak_lr = lr;
        t.min_lr = t.min_lr.min(lr);
    }
    t.validate()?;
    Ok((r, t))
}

fn fit(ds: &Dataset, r: &RetrieverConfig, t: &TrainConfig) -> Result<TrainOutcome> {
    let train = ds.split(SplitArg::Train);
    let dev = ds.split(SplitArg::Dev);
    if train.is_empty() {
        return Err(CliError { code: EXIT_DATA, message: "no training queries".into() }.into());
    }
    Ok(pipeline::fit(&ds.graph, &ds.store, r, t, &train, &dev)?)
}

fn dataset_inputs(manifest: &mut RunManifest, dir: &Path) -> Result<()> {
    for p in Dataset::files(dir) {
        manifest.input(&p)?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let ds = clock.io(|| Dataset::load(&a.data, a.model.traversal.into()))?;
    let (rcfg, tcfg) = effective_configs(&ds.store, a.ablation.into(), &a.model)?;
    let outcome = fit(&ds, &rcfg, &tcfg)?;
    create_dir(&a.out)?;
    let model = a.out.join("model.pxck");
    let history = a.out.join("history.csv");
    let train_cfg = a.out.join("train_config.txt");
    let retr_cfg = a.out.join("retriever_config.json");
    clock.io(|| -> Result<()> {
        outcome.model.save(&model)?;
        write_text(&history, &history_csv(&outcome.history))?;
        write_text(&train_cfg, &tcfg.to_kv())?;
        write_json(&retr_cfg, &rcfg)
    })?;
    let config = json!({ "ablation": a.ablation, "retriever": rcfg, "train": tcfg });
    let mut manifest = RunManifest::new("train", config, Some(tcfg.seed));
    dataset_inputs(&mut manifest, &a.data)?;
    log::info!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    finish(manifest, &[&model, &history, &train_cfg, &retr_cfg], &a.out, &clock)
}

fn load_model(path: &Path, clock: &mut Stopwatch) -> Result<Retriever> {
    Ok(clock.io(|| Retriever::load(path)).with_context(|| format!("loading model {}", path.display()))?)
}

pub fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let ds = clock.io(|| Dataset::load(&a.data, a.traversal.into()))?;
    let model = load_model(&a.model, &mut clock)?;
    model.config.check_store(&ds.store)?;
    let queries = ds.split(a.split);
    let index = ViewIndex::new(&ds.store, &ds.graph);
    let t = Instant::now();
    let mut packs = Vec::with_capacity(queries.len());
    for q in &queries {
        let inputs = index.prepare(&ds.graph, &model.config, q)?;
        packs.push(if inputs.is_empty() { None } else { Some(model.score(&inputs)?) });
    }
    let retrieval_ms = t.elapsed().as_secs_f64() * 1e3;
    create_dir(&a.out)?;
    let out_path = a.out.join("retrieval.jsonl");
    let trace_path = a.out.join("psr_trace.jsonl");
    clock.io(|| -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(&out_path)?);
        for (q, p) in queries.iter().zip(&packs) {
            let rec = match p {
                Some(p) => retrieval_record(&ds.graph, p, a.k),
                None => parallax_core::retriever::RetrievalRecord {
                    query_id: q.id.clone(),
                    triples: Vec::new(),
                    scores: Vec::new(),
                    gate: Vec::new(),
                },
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        w.flush()?;
        if a.psr_trace {
            let mut w = std::io::BufWriter::new(fs::File::create(&trace_path)?);
            for p in packs.iter().flatten() {
                writeln!(w, "{}", json!({ "query_id": p.query_id, "entries": p.psr.entries }))?;
            }
            w.flush()?;
        }
        Ok(())
    })?;
    let config = json!({ "k": a.k, "split": a.split, "model": a.model.display().to_string() });
    let mut manifest = RunManifest::new("retrieve", config, None);
    dataset_inputs(&mut manifest, &a.data)?;
    manifest.input(&a.model)?;
    manifest.link_parent(&a.model)?;
    let mut outs = vec![out_path.as_path()];
    if a.psr_trace {
        outs.push(trace_path.as_path());
    }
    log::info!("retrieval {retrieval_ms:.1} ms for {} queries (excluding I/O)", queries.len());
    finish(manifest, &outs, &a.out, &clock)
}

fn qa_options(qa: &QaArgs) -> Result<Option<QaOptions>> {
    let Some(url) = &qa.endpoint else { return Ok(None) };
    let template = match &qa.template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::grounded(),
    };
    Ok(Some(QaOptions {
        endpoint: EndpointConfig {
            base_url: url.clone(),
            model: qa.llm_model.clone(),
            token_env: qa.token_env.clone(),
            timeout_ms: qa.timeout_ms,
            qps: qa.qps,
            concurrency: qa.concurrency,
            ..EndpointConfig::default()
        },
        k: qa.qa_k,
        template,
        decoding: Decoding::default(),
        budget: qa.budget,
    }))
}

fn score(ds: &Dataset, model: &Retriever, queries: &[&QuerySample]) -> Result<Vec<Option<ScorePack>>> {
    Ok(pipeline::score_queries(model, &ds.graph, &ds.store, queries)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let ds = clock.io(|| Dataset::load(&a.data, a.traversal.into()))?;
    let model = load_model(&a.model, &mut clock)?;
    let queries = ds.split(a.split);
    let t = Instant::now();
    let packs = score(&ds, &model, &queries)?;
    let retrieval_ms = t.elapsed().as_secs_f64() * 1e3;
    let report = pipeline::retrieval_report(&ds.graph, &queries, &packs, a.k);
    let log = RunLog::build(&ds.graph, &queries, &packs, a.k);
    let qa = match qa_options(&a.qa)? {
        Some(opts) => Some(run_qa(&ds.graph, &queries, &packs, &opts)?),
        None => None,
    };
    create_dir(&a.out)?;
    let csv_path = a.out.join("retrieval_report.csv");
    let json_path = a.out.join("retrieval_report.json");
    let log_path = a.out.join("run_log.jsonl");
    let qa_path = a.out.join("qa_report.json");
    let tr_path = a.out.join("transcripts.jsonl");
    clock.io(|| -> Result<()> {
        write_text(&csv_path, &report.to_csv())?;
        write_json(&json_path, &report)?;
        log.save(&log_path)?;
        if let Some(q) = &qa {
            write_json(
                &qa_path,
                &json!({
                    "report": q.report,
                    "failed_requests": q.failed_requests,
                    "parse_failures": q.parse_failures,
                    "truncated_triples": q.truncated_triples,
                }),
            )?;
            write_transcripts(q, &tr_path)?;
        }
        Ok(())
    })?;
    let config = json!({ "k": a.k, "split": a.split, "model": a.model.display().to_string(), "qa": a.qa });
    let mut manifest = RunManifest::new("eval", config, None);
    dataset_inputs(&mut manifest, &a.data)?;
    manifest.input(&a.model)?;
    manifest.link_parent(&a.model)?;
    let mut outs = vec![csv_path.as_path(), json_path.as_path(), log_path.as_path()];
    if qa.is_some() {
        outs.push(&qa_path);
        outs.push(&tr_path);
    }
    let all = report.overall();
    log::info!(
        "recall@{}: answers {:.4}, paths {:.4}; retrieval {retrieval_ms:.1} ms",
        a.k,
        all.r_ans.unwrap_or(f64::NAN),
        all.r_sp.unwrap_or(f64::NAN)
    );
    if let Some(q) = &qa {
        log::info!("QA macro-F1 {:.4}, hit {:.4}", q.report.macro_f1, q.report.hit);
    }
    finish(manifest, &outs, &a.out, &clock)
}

pub fn analyze_heads(a: &AnalyzeArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let log = clock.io(|| RunLog::load(&a.run_log))?;
    let table = headlab::head_metrics(&log)?;
    let top = table.top_heads(a.top);
    let data = headlab::probe_features(&log);
    let cfg = ProbeConfig { folds: a.folds, seed: a.seed, ..ProbeConfig::default() };
    let probe = match headlab::linear_probe(&data, &cfg) {
        Ok(p) => Some((p, headlab::linear_probe(&data.shuffled_labels(a.seed), &cfg)?)),
        Err(e) => {
            log::warn!("probe skipped: {e}");
            None
        }
    };
    create_dir(&a.out)?;
    let heat = a.out.join("heatmap.csv");
    let metrics = a.out.join("head_metrics.json");
    let probe_path = a.out.join("probe.json");
    clock.io(|| -> Result<()> {
        write_text(&heat, &table.heatmap_csv(&top))?;
        write_json(&metrics, &json!({ "table": table, "top_heads": top, "others": table.others(&top) }))?;
        if let Some((p, shuffled)) = &probe {
            write_json(&probe_path, &json!({ "probe": p, "shuffled_labels": shuffled }))?;
        }
        Ok(())
    })?;
    let mut manifest = RunManifest::new("analyze-heads", serde_json::to_value(a)?, Some(a.seed));
    manifest.input(&a.run_log)?;
    let mut outs = vec![heat.as_path(), metrics.as_path()];
    if probe.is_some() {
        outs.push(&probe_path);
    }
    finish(manifest, &outs, &a.out, &clock)
}

pub fn ddd(a: &DddArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let log = clock.io(|| RunLog::load(&a.run_log))?;
    let specialists = match (&a.specialists, &a.select_from) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => headlab::select_specialists(&clock.io(|| RunLog::load(p))?, a.n_specialists)?,
        (None, None) => return Err(config_error("give --specialists or --select-from")),
    };
    let cfg = DddConfig { n_random_draws: a.draws, n_boot: a.boot, metric: a.metric.parse()?, seed: a.seed };
    let result = headlab::ddd(&log, &specialists, &cfg)?;
    create_dir(&a.out)?;
    let path = a.out.join("ddd.json");
    clock.io(|| result.save(&path))?;
    let mut manifest = RunManifest::new("ddd", serde_json::to_value(a)?, Some(a.seed));
    manifest.input(&a.run_log)?;
    if let Some(p) = &a.select_from {
        manifest.input(p)?;
    }
    log::info!("DDD {:.4} [{:.4}, {:.4}], p = {:.4}", result.ddd, result.ci_low, result.ci_high, result.p_value);
    finish(manifest, &[&path], &a.out, &clock)
}

/// One row of the ablation and β-sweep tables.
#[derive(Debug, Clone, Serialize)]
pub struct VariantRow {
    pub variant: String,
    pub beta: f64,
    pub r_ans_1: Option<f64>,
    pub r_ans_2: Option<f64>,
    pub r_ans_3plus: Option<f64>,
    pub r_ans_all: Option<f64>,
    pub r_sp_all: Option<f64>,
    pub macro_f1: Option<f64>,
    pub hit: Option<f64>,
    pub mean_head_overlap: Option<f64>,
    pub best_epoch: usize,
    pub train_seconds: f64,
}

fn mean_final_overlap(packs: &[Option<ScorePack>]) -> Option<f64> {
    let v: Vec<f64> = packs
        .iter()
        .flatten()
        .filter_map(|p| p.psr.last_layer().and_then(|l| p.psr.mean_pairwise_overlap(l)))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn run_variant(
    ds: &Dataset,
    name: &str,
    rcfg: &RetrieverConfig,
    tcfg: &TrainConfig,
    k: usize,
    qa: Option<&QaOptions>,
    out: &Path,
    clock: &mut Stopwatch,
) -> Result<VariantRow> {
    let t = Instant::now();
    let outcome = fit(ds, rcfg, tcfg)?;
    let train_seconds = t.elapsed().as_secs_f64();
    let test = ds.split(SplitArg::Test);
    let packs = score(ds, &outcome.model, &test)?;
    let report = pipeline::retrieval_report(&ds.graph, &test, &packs, k);
    let qa_run = match qa {
        Some(o) => Some(run_qa(&ds.graph, &test, &packs, o)?),
        None => None,
    };
    let dir = out.join(name);
    create_dir(&dir)?;
    clock.io(|| -> Result<()> {
        outcome.model.save(dir.join("model.pxck"))?;
        write_text(&dir.join("history.csv"), &history_csv(&outcome.history))?;
        if let Some(q) = &qa_run {
            write_transcripts(q, &dir.join("transcripts.jsonl"))?;
        }
        Ok(())
    })?;
    let bucket = |b: &str| report.bucket(b).and_then(|s| s.r_ans);
    Ok(VariantRow {
        variant: name.to_owned(),
        beta: rcfg.dde.beta,
        r_ans_1: bucket("1"),
        r_ans_2: bucket("2"),
        r_ans_3plus: bucket(">=3"),
        r_ans_all: report.overall().r_ans,
        r_sp_all: report.overall().r_sp,
        macro_f1: qa_run.as_ref().map(|q| q.report.macro_f1),
        hit: qa_run.as_ref().map(|q| q.report.hit),
        mean_head_overlap: mean_final_overlap(&packs),
        best_epoch: outcome.best_epoch,
        train_seconds,
    })
}

fn write_rows(path: &Path, rows: &[VariantRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let ds = clock.io(|| Dataset::load(&a.data, a.model.traversal.into()))?;
    let qa = qa_options(&a.qa)?;
    let mut rows = Vec::new();
    let mut configs = BTreeMap::new();
    let mut seed = None;
    for mode in Ablation::ALL {
        let (rcfg, tcfg) = effective_configs(&ds.store, mode, &a.model)?;
        seed = Some(tcfg.seed);
        rows.push(run_variant(&ds, mode.as_str(), &rcfg, &tcfg, a.k, qa.as_ref(), &a.out, &mut clock)?);
        configs.insert(mode.as_str(), json!({ "retriever": rcfg, "train": tcfg }));
    }
    let path = a.out.join("ablation.csv");
    clock.io(|| write_rows(&path, &rows))?;
    let mut manifest = RunManifest::new("ablate", json!({ "k": a.k, "variants": configs, "qa": a.qa }), seed);
    dataset_inputs(&mut manifest, &a.data)?;
    finish(manifest, &[&path], &a.out, &clock)
}

pub fn beta_sweep(a: &BetaSweepArgs) -> Result<()> {
    let mut clock = Stopwatch::new();
    let ds = clock.io(|| Dataset::load(&a.data, a.model.traversal.into()))?;
    let qa = qa_options(&a.qa)?;
    if a.values.is_empty() {
        return Err(config_error("--values is empty"));
    }
    let mut rows = Vec::new();
    let mut seed = None;
    for &beta in &a.values {
        let model = ModelArgs { beta: Some(beta), ..a.model.clone() };
        let (rcfg, tcfg) = effective_configs(&ds.store, Ablation::Full, &model)?;
        seed = Some(tcfg.seed);
        rows.push(run_variant(&ds, &format!("beta_{beta}"), &rcfg, &tcfg, a.k, qa.as_ref(), &a.out, &mut clock)?);
    }
    let path = a.out.join("beta_sweep.csv");
    clock.io(|| write_rows(&path, &rows))?;
    let mut manifest = RunManifest::new("beta-sweep", serde_json::to_value(a)?, seed);
    dataset_inputs(&mut manifest, &a.data)?;
    finish(manifest, &[&path], &a.out, &clock)
}

pub fn serve_mock(a: &ServeMockArgs) -> Result<()> {
    let mode = match a.mode {
        MockModeArg::Garbage => MockMode::Garbage,
        MockModeArg::NoMarker => MockMode::NoMarker,
        MockModeArg::EchoGold => {
            let dir = a.data.as_ref().ok_or_else(|| config_error("echo-gold needs --data"))?;
            let (g, _) = KnowledgeGraph::load(Dataset::graph_path(dir))?;
            let queries = load_queries(Dataset::queries_path(dir), &g)?;
            MockMode::EchoGold(gold_by_question(&g, &queries))
        }
    };
    let server = MockServer::start(&format!("127.0.0.1:{}", a.port), mode, a.fail_first, Failure::Status(a.fail_status))?;
    println!("{}", server.base_url());
    server.wait();
    Ok(())
}

/// Gold answer labels keyed by question text.
pub fn gold_by_question(g: &KnowledgeGraph, queries: &[QuerySample]) -> HashMap<String, Vec<String>> {
    let mut out: HashMap<String, Vec<String>> = HashMap::new();
    for q in queries {
        let entry = out.entry(q.question.trim().to_owned()).or_default();
        for &a in &q.answers {
            let label = g.entity_label(a).to_owned();
            if !entry.contains(&label) {
                entry.push(label);
            }
        }
    }
    out
}

