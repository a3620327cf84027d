//! Directional distance encoding with pairwise similarity regulation.
//!
//! Topic indicators are pushed through the candidate subgraph by mean
//! aggregation over in-neighbours, first along the edges and then against
//! them. Every head owns its projection matrices. After each layer the heads
//! are compared through their node-intensity vectors and each head is scaled
//! by `exp(-β·r_k)`, where `r_k` is its summed overlap with the others.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Subgraph;
use crate::tape::{MeanAggregator, Tape, Var};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdeConfig {
    pub forward_layers: usize,
    pub reverse_layers: usize,
    pub beta: f64,
    /// Structural feature width per head.
    pub width: usize,
}

impl Default for DdeConfig {
    fn default() -> Self {
        Self {
            forward_layers: 2,
            reverse_layers: 2,
            beta: 0.5,
            width: 2,
        }
    }
}

impl DdeConfig {
    /// Number of stored layers, including layer 0.
    pub fn num_layers(&self) -> usize {
        1 + self.forward_layers + self.reverse_layers
    }

    pub fn direction(&self, layer: usize) -> Direction {
        if layer <= self.forward_layers {
            Direction::Forward
        } else {
            Direction::Reverse
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

/// `X₀`: column 0 flags topic nodes, column 1 flags the rest.
pub fn init_features(num_nodes: usize, topics: &[usize]) -> Mat {
    let mut x = Mat::zeros(num_nodes, 2);
    for v in 0..num_nodes {
        x.set(v, 1, 1.0);
    }
    for &t in topics {
        x.set(t, 0, 1.0);
        x.set(t, 1, 0.0);
    }
    x
}

/// In-neighbour aggregators for both directions of a subgraph.
#[derive(Clone, Debug)]
pub struct Aggregators {
    pub forward: Arc<MeanAggregator>,
    pub reverse: Arc<MeanAggregator>,
}

impl Aggregators {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut fwd = vec![Vec::new(); num_nodes];
        let mut rev = vec![Vec::new(); num_nodes];
        for &(h, t) in edges {
            fwd[t].push(h);
            rev[h].push(t);
        }
        Self {
            forward: Arc::new(MeanAggregator { sources: fwd }),
            reverse: Arc::new(MeanAggregator { sources: rev }),
        }
    }

    pub fn for_subgraph(sub: &Subgraph) -> Self {
        Self::new(sub.num_nodes(), &sub.edges())
    }

    fn get(&self, d: Direction) -> Arc<MeanAggregator> {
        match d {
            Direction::Forward => self.forward.clone(),
            Direction::Reverse => self.reverse.clone(),
        }
    }
}

/// L2-normalised row sums of a head's node features; zero stays zero.
pub fn node_intensity(h: &Mat) -> Vec<f64> {
    let sums: Vec<f64> = (0..h.rows).map(|r| h.row(r).iter().sum()).collect();
    let norm = sums.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        sums.into_iter().map(|v| v / norm).collect()
    } else {
        sums
    }
}

/// `r_k = Σ_{j≠k} ⟨s_k, s_j⟩`
pub fn redundancy(summaries: &[Vec<f64>]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..summaries.len())
        .map(|k| {
            (0..summaries.len())
                .filter(|&j| j != k)
                .map(|j| dot(&summaries[k], &summaries[j]))
                .sum()
        })
        .collect()
}

pub fn psr_coefficients(summaries: &[Vec<f64>], beta: f64) -> Vec<f64> {
    redundancy(summaries).into_iter().map(|r| (-beta * r).exp()).collect()
}

/// Learned maps of one head: `init` is 2×w, each layer map is w×w.
#[derive(Clone, Debug)]
pub struct HeadMaps<T> {
    pub init: T,
    pub layers: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsrEntry {
    pub layer: usize,
    pub direction: Direction,
    pub head: usize,
    pub summary: Vec<f64>,
    pub redundancy: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PsrTrace {
    pub entries: Vec<PsrEntry>,
}

impl PsrTrace {
    pub fn at_layer(&self, layer: usize) -> impl Iterator<Item = &PsrEntry> {
        self.entries.iter().filter(move |e| e.layer == layer)
    }

    pub fn last_layer(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.layer).max()
    }

    /// Mean of `⟨s_i, s_j⟩` over head pairs at `layer`.
    pub fn mean_pairwise_overlap(&self, layer: usize) -> Option<f64> {
        let s: Vec<&Vec<f64>> = self.at_layer(layer).map(|e| &e.summary).collect();
        if s.len() < 2 {
            return None;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += s[i].iter().zip(s[j]).map(|(a, b)| a * b).sum::<f64>();
                pairs += 1;
            }
        }
        Some(total / pairs as f64)
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_jsonl(&mut f).map_err(|e| Error::io(path, e))
    }
}

/// One message-passing layer for all heads followed by PSR scaling.
/// Returns the scaled states and the trace entries for this layer.
pub fn propagate(
    tape: &mut Tape,
    states: &[Var],
    maps: &[Var],
    agg: Arc<MeanAggregator>,
    beta: f64,
    layer: usize,
    direction: Direction,
) -> (Vec<Var>, Vec<PsrEntry>) {
    let pre: Vec<Var> = states
        .iter()
        .zip(maps)
        .map(|(&h, &w)| {
            let a = tape.aggregate(h, agg.clone());
            let lin = tape.matmul(a, w);
            tape.silu(lin)
        })
        .collect();
    let summaries: Vec<Var> = pre
        .iter()
        .map(|&h| {
            let rs = tape.row_sum(h);
            tape.l2_normalize(rs)
        })
        .collect();

    let mut out = Vec::with_capacity(pre.len());
    let mut trace = Vec::with_capacity(pre.len());
    for k in 0..pre.len() {
        let summary = tape.value(summaries[k]).data.clone();
        if pre.len() == 1 {
            out.push(pre[k]);
            trace.push(PsrEntry { layer, direction, head: k, summary, redundancy: 0.0, alpha: 1.0 });
            continue;
        }
        let dots: Vec<Var> = (0..pre.len())
            .filter(|&j| j != k)
            .map(|j| tape.dot(summaries[k], summaries[j]))
            .collect();
        let r = tape.sum(&dots);
        let neg = tape.scale(r, -beta);
        let alpha = tape.exp(neg);
        out.push(tape.scale_by(pre[k], alpha));
        trace.push(PsrEntry {
            layer,
            direction,
            head: k,
            summary,
            redundancy: tape.scalar(r),
            alpha: tape.scalar(alpha),
        });
    }
    (out, trace)
}

/// Runs every layer on the tape. `states[k][ℓ]` is head k at layer ℓ.
pub fn run_dde_on_tape(
    tape: &mut Tape,
    x0: Var,
    aggs: &Aggregators,
    maps: &[HeadMaps<Var>],
    cfg: &DdeConfig,
) -> (Vec<Vec<Var>>, PsrTrace) {
    let mut states: Vec<Vec<Var>> = maps.iter().map(|m| vec![tape.matmul(x0, m.init)]).collect();
    let mut trace = PsrTrace::default();
    for layer in 1..cfg.num_layers() {
        let direction = cfg.direction(layer);
        let current: Vec<Var> = states.iter().map(|s| *s.last().expect("layer 0 present")).collect();
        let layer_maps: Vec<Var> = maps.iter().map(|m| m.layers[layer - 1]).collect();
        let (next, entries) = propagate(tape, &current, &layer_maps, aggs.get(direction), cfg.beta, layer, direction);
        for (s, n) in states.iter_mut().zip(next) {
            s.push(n);
        }
        trace.entries.extend(entries);
    }
    (states, trace)
}

/// Per-head node features for every layer, `layers[k][ℓ]` of shape |V|×w.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadStates {
    pub layers: Vec<Vec<Mat>>,
}

/// Convenience wrapper evaluating the encoder without keeping the tape.
pub fn run_dde(sub: &Subgraph, maps: &[HeadMaps<Mat>], cfg: &DdeConfig) -> (HeadStates, PsrTrace) {
    let aggs = Aggregators::for_subgraph(sub);
    run_dde_raw(sub.num_nodes(), &sub.topics, &aggs, maps, cfg)
}

pub fn run_dde_raw(
    num_nodes: usize,
    topics: &[usize],
    aggs: &Aggregators,
    maps: &[HeadMaps<Mat>],
    cfg: &DdeConfig,
) -> (HeadStates, PsrTrace) {
    let mut tape = Tape::new();
    let x0 = tape.leaf(init_features(num_nodes, topics));
    let vars: Vec<HeadMaps<Var>> = maps
        .iter()
        .map(|m| HeadMaps {
            init: tape.leaf(m.init.clone()),
            layers: m.layers.iter().map(|l| tape.leaf(l.clone())).collect(),
        })
        .collect();
    let (states, trace) = run_dde_on_tape(&mut tape, x0, aggs, &vars, cfg);
    let layers = states
        .iter()
        .map(|s| s.iter().map(|&v| tape.value(v).clone()).collect())
        .collect();
    (HeadStates { layers }, trace)
}
