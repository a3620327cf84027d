//! Per-head triple scoring, query-conditioned gating and top-K selection.
//!
//! For every candidate triple and head `k` the feature row is
//! `[q_k, e_head,k, r_k, e_tail,k, dde_k(head), dde_k(tail)]`. One MLP shared
//! by all heads maps each row to a score, giving `Z` (candidates × heads).
//! The gate mixes the columns: `s = Z·softmax(W_g q)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dde::{self, Aggregators, DdeConfig, HeadMaps, PsrTrace};
use crate::embedding::{entity_key, query_key, relation_key, EmbeddingStore};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, QuerySample, Subgraph, TripleId};
use crate::params::{rng_stream, uniform_init, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax, Mat};

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_MAX_STEP: usize = 3;

/// Where the per-head views come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// True head views from the store.
    #[default]
    MultiView,
    /// Contiguous slices of the global vector.
    SplitVector,
    /// The whole global vector as a single head.
    SingleVector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    SplitVector,
    SingleVector,
    NoPsr,
    NoGating,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::SplitVector,
        Ablation::SingleVector,
        Ablation::NoPsr,
        Ablation::NoGating,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::SplitVector => "split_vector",
            Ablation::SingleVector => "single_vector",
            Ablation::NoPsr => "no_psr",
            Ablation::NoGating => "no_gating",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub num_heads: usize,
    pub view_dim: usize,
    pub global_dim: usize,
    pub view_mode: ViewMode,
    pub gate: GateMode,
    pub dde: DdeConfig,
    pub hidden: Vec<usize>,
    pub max_step: usize,
}

impl RetrieverConfig {
    /// Full multi-view model matching the geometry of `store`.
    pub fn for_store(store: &EmbeddingStore) -> Self {
        Self {
            num_heads: store.num_heads(),
            view_dim: store.head_dim(),
            global_dim: store.global_dim(),
            view_mode: ViewMode::MultiView,
            gate: GateMode::Learned,
            dde: DdeConfig::default(),
            hidden: vec![64, 64],
            max_step: DEFAULT_MAX_STEP,
        }
    }

    /// Derives an ablated configuration from a full one.
    pub fn ablate(&self, mode: Ablation) -> Result<Self> {
        let mut c = self.clone();
        match mode {
            Ablation::Full => {}
            Ablation::NoPsr => c.dde.beta = 0.0,
            Ablation::NoGating => c.gate = GateMode::Uniform,
            Ablation::SplitVector => {
                if self.global_dim == 0 || self.global_dim % self.num_heads != 0 {
                    return Err(Error::Config(format!(
                        "split_vector needs a global width divisible by H (d={}, H={})",
                        self.global_dim, self.num_heads
                    )));
                }
                c.view_mode = ViewMode::SplitVector;
                c.view_dim = self.global_dim / self.num_heads;
            }
            Ablation::SingleVector => {
                if self.global_dim == 0 {
                    return Err(Error::Config("single_vector needs global vectors".into()));
                }
                c.view_mode = ViewMode::SingleVector;
                c.num_heads = 1;
                c.view_dim = self.global_dim;
            }
        }
        Ok(c)
    }

    pub fn feature_width(&self) -> usize {
        4 * self.view_dim + 2 * self.dde.num_layers() * self.dde.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.view_dim == 0 {
            return Err(Error::Config("head count and view width must be positive".into()));
        }
        if self.dde.width == 0 || self.max_step == 0 {
            return Err(Error::Config("structural width and max_step must be positive".into()));
        }
        if !(self.dde.beta >= 0.0 && self.dde.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be a finite non-negative number, got {}", self.dde.beta)));
        }
        if self.global_dim == 0 && self.gate == GateMode::Learned && self.num_heads > 1 {
            return Err(Error::Config("a learned gate needs global query vectors".into()));
        }
        Ok(())
    }

    pub fn check_store(&self, store: &EmbeddingStore) -> Result<()> {
        let ok = match self.view_mode {
            ViewMode::MultiView => store.num_heads() == self.num_heads && store.head_dim() == self.view_dim,
            ViewMode::SplitVector => store.global_dim() == self.num_heads * self.view_dim,
            ViewMode::SingleVector => store.global_dim() == self.view_dim && self.num_heads == 1,
        };
        if !ok || store.global_dim() != self.global_dim {
            return Err(Error::Config(format!(
                "embedding store geometry (H={}, d_h={}, d={}) does not fit the retriever configuration",
                store.num_heads(),
                store.head_dim(),
                store.global_dim()
            )));
        }
        Ok(())
    }
}

/// Indices of each parameter group inside the [`ParamSet`].
#[derive(Clone, Debug)]
struct Layout {
    dde: Vec<HeadMaps<usize>>,
    mlp: Vec<(usize, usize)>,
    gate: usize,
}

impl Layout {
    fn names(cfg: &RetrieverConfig) -> Vec<(String, usize, usize)> {
        let w = cfg.dde.width;
        let mut out = Vec::new();
        for k in 0..cfg.num_heads {
            out.push((format!("dde.{k}.init"), 2, w));
            for l in 1..cfg.dde.num_layers() {
                out.push((format!("dde.{k}.layer{l}"), w, w));
            }
        }
        let mut fan_in = cfg.feature_width();
        for (i, &h) in cfg.hidden.iter().chain(std::iter::once(&1)).enumerate() {
            out.push((format!("mlp.{i}.weight"), fan_in, h));
            out.push((format!("mlp.{i}.bias"), 1, h));
            fan_in = h;
        }
        out.push(("gate.weight".to_owned(), cfg.global_dim, cfg.num_heads));
        out
    }

    fn resolve(cfg: &RetrieverConfig, params: &ParamSet) -> Result<Self> {
        let expected = Self::names(cfg);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter blocks, configuration needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (i, (name, rows, cols)) in expected.iter().enumerate() {
            let m = params.get(i);
            if params.name(i) != name || m.rows != *rows || m.cols != *cols {
                return Err(Error::Format(format!(
                    "parameter {i} is {}:{}x{}, expected {name}:{rows}x{cols}",
                    params.name(i),
                    m.rows,
                    m.cols
                )));
            }
        }
        let per_head = cfg.dde.num_layers();
        let dde = (0..cfg.num_heads)
            .map(|k| HeadMaps {
                init: k * per_head,
                layers: (1..per_head).map(|l| k * per_head + l).collect(),
            })
            .collect();
        let base = cfg.num_heads * per_head;
        let mlp = (0..=cfg.hidden.len()).map(|i| (base + 2 * i, base + 2 * i + 1)).collect();
        let gate = base + 2 * (cfg.hidden.len() + 1);
        Ok(Self { dde, mlp, gate })
    }
}

/// Everything one query needs for a forward pass.
#[derive(Clone, Debug)]
pub struct QueryInputs {
    pub query_id: String,
    pub sub: Subgraph,
    pub aggs: Aggregators,
    /// Per head, rows `[q_k, e_head, r, e_tail]` for each candidate.
    pub views: Vec<Mat>,
    /// 1×d global query vector (empty when the store has none).
    pub q_global: Mat,
    heads: Arc<[usize]>,
    tails: Arc<[usize]>,
}

impl QueryInputs {
    pub fn len(&self) -> usize {
        self.sub.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub.is_empty()
    }
}

/// Maps graph ids to rows of an embedding store.
pub struct ViewIndex<'a> {
    store: &'a EmbeddingStore,
    entity_rows: Vec<Option<usize>>,
    relation_rows: Vec<Option<usize>>,
}

impl<'a> ViewIndex<'a> {
    pub fn new(store: &'a EmbeddingStore, g: &KnowledgeGraph) -> Self {
        Self {
            store,
            entity_rows: g.entity_labels().iter().map(|l| store.index_of(&entity_key(l))).collect(),
            relation_rows: g.relation_labels().iter().map(|l| store.index_of(&relation_key(l))).collect(),
        }
    }

    pub fn store(&self) -> &EmbeddingStore {
        self.store
    }

    fn view(&self, row: usize, head: usize, cfg: &RetrieverConfig) -> &[f32] {
        match cfg.view_mode {
            ViewMode::MultiView => self.store.head_view(row, head),
            ViewMode::SplitVector => {
                let g = self.store.global_view(row).expect("checked global width");
                &g[head * cfg.view_dim..(head + 1) * cfg.view_dim]
            }
            ViewMode::SingleVector => self.store.global_view(row).expect("checked global width"),
        }
    }

    /// Builds the candidate subgraph and feature blocks of one query.
    pub fn prepare(&self, g: &KnowledgeGraph, cfg: &RetrieverConfig, q: &QuerySample) -> Result<QueryInputs> {
        let sub = Subgraph::extract(g, &q.topic_entities, cfg.max_step);
        self.prepare_subgraph(g, cfg, q, sub)
    }

    pub fn prepare_subgraph(
        &self,
        g: &KnowledgeGraph,
        cfg: &RetrieverConfig,
        q: &QuerySample,
        sub: Subgraph,
    ) -> Result<QueryInputs> {
        let qrow = self
            .store
            .index_of(&query_key(&q.id))
            .ok_or_else(|| Error::Invalid(format!("no embedding for query {:?}", q.id)))?;
        let entity_row = |e: u32| {
            self.entity_rows[e as usize]
                .ok_or_else(|| Error::Invalid(format!("no embedding for entity {:?}", g.entity_label(e))))
        };
        let dv = cfg.view_dim;
        let mut views = Vec::with_capacity(cfg.num_heads);
        for k in 0..cfg.num_heads {
            let mut m = Mat::zeros(sub.len(), 4 * dv);
            let qv = self.view(qrow, k, cfg);
            for (i, &tid) in sub.triples.iter().enumerate() {
                let tr = g.triple(tid);
                let rrow = self.relation_rows[tr.relation as usize].ok_or_else(|| {
                    Error::Invalid(format!("no embedding for relation {:?}", g.relation_label(tr.relation)))
                })?;
                let parts = [
                    qv,
                    self.view(entity_row(tr.head)?, k, cfg),
                    self.view(rrow, k, cfg),
                    self.view(entity_row(tr.tail)?, k, cfg),
                ];
                let row = m.row_mut(i);
                for (p, part) in parts.iter().enumerate() {
                    for (o, &v) in row[p * dv..(p + 1) * dv].iter_mut().zip(part.iter()) {
                        *o = f64::from(v);
                    }
                }
            }
            views.push(m);
        }
        let q_global = match self.store.global_view(qrow) {
            Some(gv) => Mat::row_vector(gv.iter().map(|&v| f64::from(v)).collect()),
            None => Mat::zeros(1, 0),
        };
        let aggs = Aggregators::for_subgraph(&sub);
        let heads: Arc<[usize]> = sub.heads.clone().into();
        let tails: Arc<[usize]> = sub.tails.clone().into();
        Ok(QueryInputs {
            query_id: q.id.clone(),
            sub,
            aggs,
            views,
            q_global,
            heads,
            tails,
        })
    }
}

/// Nodes of one forward pass.
pub struct ForwardVars {
    pub z: Var,
    pub alpha: Var,
    pub s: Var,
    pub p: Var,
    pub psr: PsrTrace,
}

/// Scores of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePack {
    pub query_id: String,
    pub triples: Vec<TripleId>,
    pub steps: Vec<usize>,
    /// candidates × heads
    pub z: Mat,
    pub alpha: Vec<f64>,
    pub s: Vec<f64>,
    pub p: Vec<f64>,
    pub psr: PsrTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retriever {
    pub config: RetrieverConfig,
    pub params: ParamSet,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.mlp == other.mlp && self.gate == other.gate
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PXCK";
const CHECKPOINT_VERSION: u32 = 1;

impl Retriever {
    /// Fresh parameters, uniform in ±1/√fan_in. Each head's structural maps
    /// draw from their own RNG stream.
    pub fn init(config: RetrieverConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let w = config.dde.width;
        for k in 0..config.num_heads {
            let mut rng = rng_stream(seed, 1 + k as u64);
            params.push(format!("dde.{k}.init"), uniform_init(&mut rng, 2, w, 2));
            for l in 1..config.dde.num_layers() {
                params.push(format!("dde.{k}.layer{l}"), uniform_init(&mut rng, w, w, w));
            }
        }
        let mut rng = rng_stream(seed, 0);
        let mut fan_in = config.feature_width();
        for (i, &h) in config.hidden.iter().chain(std::iter::once(&1)).enumerate() {
            params.push(format!("mlp.{i}.weight"), uniform_init(&mut rng, fan_in, h, fan_in));
            params.push(format!("mlp.{i}.bias"), uniform_init(&mut rng, 1, h, fan_in));
            fan_in = h;
        }
        let mut rng = rng_stream(seed, u64::MAX);
        params.push(
            "gate.weight",
            uniform_init(&mut rng, config.global_dim, config.num_heads, config.global_dim),
        );
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: RetrieverConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn gate_index(&self) -> usize {
        self.layout.gate
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.mats().iter().map(|m| tape.leaf(m.clone())).collect()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inp: &QueryInputs) -> ForwardVars {
        let cfg = &self.config;
        let h = cfg.num_heads;
        let n = inp.len();
        let x0 = tape.leaf(dde::init_features(inp.sub.num_nodes(), &inp.sub.topics));
        let maps: Vec<HeadMaps<Var>> = self
            .layout
            .dde
            .iter()
            .map(|m| HeadMaps {
                init: vars[m.init],
                layers: m.layers.iter().map(|&i| vars[i]).collect(),
            })
            .collect();
        let (states, psr) = dde::run_dde_on_tape(tape, x0, &inp.aggs, &maps, &cfg.dde);

        let mut blocks = Vec::with_capacity(h);
        for (k, layers) in states.iter().enumerate() {
            let node_feats = tape.concat_cols(layers);
            let at_head = tape.gather_rows(node_feats, inp.heads.clone());
            let at_tail = tape.gather_rows(node_feats, inp.tails.clone());
            let views = tape.leaf(inp.views[k].clone());
            blocks.push(tape.concat_cols(&[views, at_head, at_tail]));
        }
        let mut act = tape.vstack(&blocks);
        let last = self.layout.mlp.len() - 1;
        for (i, &(w, b)) in self.layout.mlp.iter().enumerate() {
            let lin = tape.matmul(act, vars[w]);
            act = tape.add_row(lin, vars[b]);
            if i < last {
                act = tape.silu(act);
            }
        }
        let by_head = tape.reshape(act, h, n);
        let z = tape.transpose(by_head);

        let alpha = if h == 1 {
            tape.leaf(Mat::scalar(1.0))
        } else {
            match cfg.gate {
                GateMode::Learned => {
                    let q = tape.leaf(inp.q_global.clone());
                    let logits = tape.matmul(q, vars[self.layout.gate]);
                    tape.softmax(logits)
                }
                GateMode::Uniform => tape.leaf(Mat::from_vec(1, h, vec![1.0 / h as f64; h])),
            }
        };
        let alpha_col = tape.transpose(alpha);
        let s = tape.matmul(z, alpha_col);
        let p = tape.softmax(s);
        ForwardVars { z, alpha, s, p, psr }
    }

    pub fn score(&self, inp: &QueryInputs) -> Result<ScorePack> {
        if inp.is_empty() {
            return Err(Error::Invalid(format!("query {:?} has no candidate triples", inp.query_id)));
        }
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let f = self.forward(&mut tape, &vars, inp);
        Ok(ScorePack {
            query_id: inp.query_id.clone(),
            triples: inp.sub.triples.clone(),
            steps: inp.sub.steps.clone(),
            z: tape.value(f.z).clone(),
            alpha: tape.value(f.alpha).data.clone(),
            s: tape.value(f.s).data.clone(),
            p: tape.value(f.p).data.clone(),
            psr: f.psr,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        self.params.write_to(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a retriever checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let cfg_bytes = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let config: RetrieverConfig =
            serde_json::from_slice(cfg_bytes).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut pos = 12 + len;
        let params = ParamSet::read_from(bytes, &mut pos)?;
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Self::from_parts(config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `softmax(q·W_g)`; rejects non-finite inputs.
pub fn gate(q: &[f64], w: &Mat) -> Result<Vec<f64>> {
    if q.len() != w.rows {
        return Err(Error::Invalid(format!("query width {} does not match gate rows {}", q.len(), w.rows)));
    }
    if !q.iter().all(|v| v.is_finite()) || !w.is_finite() {
        return Err(Error::Invalid("non-finite gate input".into()));
    }
    let logits = Mat::row_vector(q.to_vec()).matmul(w);
    Ok(softmax(&logits.data))
}

/// `s = Z·α`
pub fn mix_scores(z: &Mat, alpha: &[f64]) -> Vec<f64> {
    assert_eq!(z.cols, alpha.len());
    (0..z.rows)
        .map(|r| z.row(r).iter().zip(alpha).map(|(a, b)| a * b).sum())
        .collect()
}

/// Positions of the `k` highest scores; ties go to the smaller triple id.
pub fn top_k_positions(scores: &[f64], ids: &[TripleId], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b]));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
}

pub fn top_k(pack: &ScorePack, k: usize) -> Vec<TripleId> {
    top_k_positions(&pack.s, &pack.triples, k)
        .into_iter()
        .map(|i| pack.triples[i])
        .collect()
}

/// Line of the retrieval output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query_id: String,
    pub triples: Vec<[String; 3]>,
    pub scores: Vec<f64>,
    pub gate: Vec<f64>,
}

pub fn retrieval_record(g: &KnowledgeGraph, pack: &ScorePack, k: usize) -> RetrievalRecord {
    let pos = top_k_positions(&pack.s, &pack.triples, k);
    RetrievalRecord {
        query_id: pack.query_id.clone(),
        triples: pos
            .iter()
            .map(|&i| g.triple_labels(pack.triples[i]).map(str::to_owned))
            .collect(),
        scores: pos.iter().map(|&i| pack.s[i]).collect(),
        gate: pack.alpha.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_examples() {
        let w = Mat::zeros(3, 4);
        assert_eq!(gate(&[1.0, -2.0, 0.5], &w).unwrap(), vec![0.25; 4]);
        let w = Mat::from_vec(1, 2, vec![2.0, 0.0]);
        let a = gate(&[1.0], &w).unwrap();
        assert!((a[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((a[1] - 0.119_202_922_022_117_6).abs() < 1e-12);
        assert!(gate(&[f64::NAN], &w).is_err());
    }

    #[test]
    fn top_k_ties_and_short_lists() {
        let ids = [5, 3, 9, 1];
        assert_eq!(top_k_positions(&[0.0; 4], &ids, 2), vec![3, 1]);
        assert_eq!(top_k_positions(&[0.1, 0.9, 0.5, 0.2], &ids, 10), vec![1, 2, 3, 0]);
    }

    #[test]
    fn ablation_configs() {
        let base = RetrieverConfig {
            num_heads: 4,
            view_dim: 8,
            global_dim: 16,
            view_mode: ViewMode::MultiView,
            gate: GateMode::Learned,
            dde: DdeConfig::default(),
            hidden: vec![8, 8],
            max_step: 3,
        };
        let split = base.ablate(Ablation::SplitVector).unwrap();
        assert_eq!((split.num_heads, split.view_dim), (4, 4));
        let single = base.ablate(Ablation::SingleVector).unwrap();
        assert_eq!((single.num_heads, single.view_dim), (1, 16));
        assert_eq!(base.ablate(Ablation::NoPsr).unwrap().dde.beta, 0.0);
        assert_eq!(base.ablate(Ablation::NoGating).unwrap().gate, GateMode::Uniform);
        assert!("bogus".parse::<Ablation>().is_err());
        assert_eq!("no_psr".parse::<Ablation>().unwrap(), Ablation::NoPsr);
    }

    #[test]
    fn mix_scores_cancels() {
        let z = Mat::from_vec(2, 2, vec![1.5, -1.5, -0.3, 0.3]);
        let s = mix_scores(&z, &[0.5, 0.5]);
        assert_eq!(s, vec![0.0, 0.0]);
        assert_eq!(softmax(&s), vec![0.5, 0.5]);
    }
}
