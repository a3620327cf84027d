//! Synthetic multi-hop question answering tasks with planted head
//! specialisation.
//!
//! Every query lives in its own tree-shaped component: a planted path of the
//! sampled hop length from the topic entity to the answer, plus distractor
//! branches hanging off every path node. Because the component is a tree, the
//! planted path is the unique shortest topic→answer path.
//!
//! Embeddings are drawn so that the head assigned to a step sees, in its query
//! view, the relation planted at that step. Heads that are not active on a
//! query see a decoy relation instead, and some distractor edges carry exactly
//! that decoy.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{entity_key, query_key, relation_key, EmbeddingStore, MultiViewEmbedding};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, QuerySample, RelationId, Traversal, Triple};
use crate::params::rng_stream;

/// Step a head is tuned to; `None` marks a generalist that follows every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAffinity {
    pub group: String,
    pub step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_queries: usize,
    /// Upper bound on generated entities.
    pub n_entities: usize,
    pub relation_groups: BTreeMap<String, usize>,
    pub hop_distribution: BTreeMap<usize, f64>,
    /// Distractor children of the topic entity.
    pub distractor_branching: usize,
    /// Children of every other node above `max_step`, counting the next path
    /// node, so depth alone does not reveal the path.
    pub distractor_fanout: usize,
    pub max_step: usize,
    pub noise_sigma: f64,
    pub head_affinity: Vec<HeadAffinity>,
    pub head_dim: usize,
    /// Strength of the fixed random map that mixes heads inside the global vector.
    pub mixing: f64,
    /// Weight of the per-head direction added to a query's global vector for
    /// each head active on it.
    pub gate_signal: f64,
    /// Probability that a distractor edge carries the decoy relation of an
    /// inactive head of that step.
    pub decoy_rate: f64,
    /// Probability that a distractor edge carries a relation planted at a
    /// different step of the same query.
    pub lure_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Ten heads: eight step-1 heads with their own groups, one step-2 head
    /// and one step-3 head.
    pub fn planted() -> Self {
        let mut groups = BTreeMap::new();
        let mut heads = Vec::new();
        for k in 0..10 {
            groups.insert(format!("g{k}"), 3);
            let step = match k {
                8 => 2,
                9 => 3,
                _ => 1,
            };
            heads.push(HeadAffinity { group: format!("g{k}"), step: Some(step) });
        }
        groups.insert("filler".into(), 8);
        Self {
            n_queries: 1000,
            n_entities: 1_000_000,
            relation_groups: groups,
            hop_distribution: BTreeMap::from([(1, 0.4), (2, 0.3), (3, 0.3)]),
            distractor_branching: 5,
            distractor_fanout: 2,
            max_step: 3,
            noise_sigma: 0.3,
            head_affinity: heads,
            head_dim: 8,
            mixing: 1.0,
            gate_signal: 1.0,
            decoy_rate: 0.3,
            lure_rate: 0.1,
            seed: 0,
        }
    }

    /// Ten interchangeable generalist heads over one shared relation group.
    pub fn null() -> Self {
        let mut s = Self::planted();
        s.relation_groups = BTreeMap::from([("all".into(), 30), ("filler".into(), 8)]);
        s.head_affinity = vec![HeadAffinity { group: "all".into(), step: None }; 10];
        s
    }

    /// Named presets accepted by the command line.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "planted" => Ok(Self::planted()),
            "null" => Ok(Self::null()),
            _ => Err(Error::Config(format!("unknown synthetic spec preset {name:?}"))),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.head_affinity.len()
    }

    pub fn global_dim(&self) -> usize {
        self.num_heads() * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let total: f64 = self.hop_distribution.values().sum();
        if (total - 1.0).abs() > 1e-9 || self.hop_distribution.values().any(|&p| p < 0.0) {
            return bad(format!("hop_distribution must be a probability vector (sums to {total})"));
        }
        if self.head_affinity.is_empty() || self.head_dim == 0 {
            return bad("at least one head of positive width is required".into());
        }
        if self.max_step == 0 {
            return bad("max_step must be at least 1".into());
        }
        for (k, a) in self.head_affinity.iter().enumerate() {
            match self.relation_groups.get(&a.group) {
                None => return bad(format!("head {k} references unknown relation group {:?}", a.group)),
                Some(0) => return bad(format!("relation group {:?} is empty", a.group)),
                Some(_) => {}
            }
        }
        for (&hop, &p) in &self.hop_distribution {
            if p == 0.0 {
                continue;
            }
            if hop == 0 || hop > self.max_step {
                return bad(format!("hop {hop} outside 1..={}", self.max_step));
            }
            for t in 1..=hop {
                if self.heads_for_step(t).is_empty() {
                    return bad(format!("no head is assigned to step {t}"));
                }
            }
        }
        for r in [self.noise_sigma, self.mixing, self.gate_signal] {
            if !(r >= 0.0 && r.is_finite()) {
                return bad("noise, mixing and gate signal must be finite and non-negative".into());
            }
        }
        if !(0.0..=1.0).contains(&self.decoy_rate)
            || !(0.0..=1.0).contains(&self.lure_rate)
            || self.decoy_rate + self.lure_rate > 1.0
        {
            return bad("decoy_rate and lure_rate must be probabilities summing to at most 1".into());
        }
        Ok(())
    }

    pub fn heads_for_step(&self, step: usize) -> Vec<usize> {
        self.head_affinity
            .iter()
            .enumerate()
            .filter(|(_, a)| a.step.is_none_or(|s| s == step))
            .map(|(k, _)| k)
            .collect()
    }

    fn component_size(&self, hop: usize) -> usize {
        // nodes below a distractor first reached at depth d
        let subtree = |d: usize| -> usize {
            let mut total = 0;
            let mut width = 1;
            for _ in d..=self.max_step {
                total += width;
                width *= self.distractor_fanout;
            }
            total
        };
        let mut n = hop + 1 + subtree(hop) - 1;
        n += self.distractor_branching * subtree(1);
        for d in 1..hop {
            n += self.distractor_fanout.saturating_sub(1) * subtree(d + 1);
        }
        n
    }
}

/// Everything planted for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub id: String,
    pub hop: usize,
    /// Planted relation per step.
    pub relations: Vec<RelationId>,
    /// Head intended to handle each step.
    pub intended_heads: Vec<usize>,
    /// Decoy relation seen by each head that is inactive on this query.
    pub decoys: BTreeMap<usize, RelationId>,
    pub path: Vec<EntityId>,
    pub split: Split,
}

impl QueryPlan {
    pub fn active_heads(&self) -> BTreeSet<usize> {
        self.intended_heads.iter().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// 70/10/20 split by FNV-1a hash of the query id.
pub fn split_of(id: &str) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    match h % 100 {
        0..70 => Split::Train,
        70..80 => Split::Dev,
        _ => Split::Test,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub hop: usize,
    pub split: Split,
    pub path: Vec<[String; 3]>,
    pub intended_heads: Vec<usize>,
    pub decoys: BTreeMap<usize, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub queries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug)]
pub struct SynthBench {
    pub graph: KnowledgeGraph,
    pub queries: Vec<QuerySample>,
    pub plans: Vec<QueryPlan>,
    pub store: EmbeddingStore,
    pub manifest: Manifest,
}

impl SynthBench {
    pub fn split(&self, which: Split) -> Vec<usize> {
        (0..self.plans.len()).filter(|&i| self.plans[i].split == which).collect()
    }
}

struct Relations {
    by_group: BTreeMap<String, Vec<RelationId>>,
    all: Vec<RelationId>,
    /// `by_step[t]`: relations of the groups planted at step `t` plus the
    /// groups no head owns. Distractors draw from these, so a relation's group
    /// says nothing about whether it is on the path.
    by_step: Vec<Vec<RelationId>>,
}

fn intern_relations(g: &mut KnowledgeGraph, spec: &SynthSpec) -> Relations {
    let mut by_group = BTreeMap::new();
    let mut all = Vec::new();
    for (name, &count) in &spec.relation_groups {
        let ids: Vec<RelationId> = (0..count).map(|j| g.intern_relation(&format!("{name}_{j}"))).collect();
        all.extend_from_slice(&ids);
        by_group.insert(name.clone(), ids);
    }
    let owned: BTreeSet<&str> = spec.head_affinity.iter().map(|a| a.group.as_str()).collect();
    let by_step = (0..=spec.max_step)
        .map(|t| {
            let mut groups: BTreeSet<&str> = spec.heads_for_step(t).iter().map(|&k| spec.head_affinity[k].group.as_str()).collect();
            groups.extend(by_group.keys().map(String::as_str).filter(|g| !owned.contains(g)));
            groups.iter().flat_map(|g| by_group[*g].iter().copied()).collect()
        })
        .collect();
    Relations { by_group, all, by_step }
}

fn sample_hop(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 1;
    for (&hop, &p) in &spec.hop_distribution {
        if p == 0.0 {
            continue;
        }
        acc += p;
        last = hop;
        if u < acc {
            return hop;
        }
    }
    last
}

/// Builds graph, queries, embeddings and manifest from `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthBench> {
    spec.validate()?;
    let mut rng = rng_stream(spec.seed, 1);
    let mut g = KnowledgeGraph::new();
    let rels = intern_relations(&mut g, spec);

    let mut hops = Vec::with_capacity(spec.n_queries);
    let mut needed = 0usize;
    for _ in 0..spec.n_queries {
        let h = sample_hop(spec, &mut rng);
        needed += spec.component_size(h);
        hops.push(h);
    }
    if needed > spec.n_entities {
        return Err(Error::Config(format!(
            "spec infeasible: {needed} entities needed, budget is {}",
            spec.n_entities
        )));
    }

    let mut plans = Vec::with_capacity(spec.n_queries);
    let mut queries = Vec::with_capacity(spec.n_queries);
    for (qi, &hop) in hops.iter().enumerate() {
        let id = format!("q{qi:05}");
        let mut intended = Vec::with_capacity(hop);
        let mut relations = Vec::with_capacity(hop);
        for t in 1..=hop {
            let k = *spec.heads_for_step(t).choose(&mut rng).expect("validated");
            let group = &rels.by_group[&spec.head_affinity[k].group];
            let candidates: Vec<RelationId> = group.iter().copied().filter(|r| !relations.contains(r)).collect();
            let pool = if candidates.is_empty() { group.clone() } else { candidates };
            relations.push(*pool.choose(&mut rng).expect("group nonempty"));
            intended.push(k);
        }
        let active: BTreeSet<usize> = intended.iter().copied().collect();
        let mut decoys = BTreeMap::new();
        for (k, a) in spec.head_affinity.iter().enumerate() {
            if active.contains(&k) || a.step.is_none() {
                continue;
            }
            let group = &rels.by_group[&a.group];
            let pool: Vec<RelationId> = group.iter().copied().filter(|r| !relations.contains(r)).collect();
            if let Some(&d) = pool.choose(&mut rng) {
                decoys.insert(k, d);
            }
        }

        let mut counter = 0usize;
        let mut node = |g: &mut KnowledgeGraph| {
            counter += 1;
            g.intern_entity(&format!("{id}_n{}", counter - 1))
        };
        let path: Vec<EntityId> = (0..=hop).map(|_| node(&mut g)).collect();
        for t in 0..hop {
            g.add(Triple { head: path[t], relation: relations[t], tail: path[t + 1] });
        }

        let distractor_relation = |step: usize, rng: &mut ChaCha8Rng| -> RelationId {
            let u: f64 = rng.random();
            if u < spec.decoy_rate {
                let options: Vec<RelationId> = decoys
                    .iter()
                    .filter(|(k, _)| spec.head_affinity[**k].step == Some(step))
                    .map(|(_, &r)| r)
                    .collect();
                if let Some(&r) = options.choose(rng) {
                    return r;
                }
            } else if u < spec.decoy_rate + spec.lure_rate {
                let options: Vec<RelationId> = relations
                    .iter()
                    .enumerate()
                    .filter(|&(t, r)| t + 1 != step && Some(r) != relations.get(step - 1))
                    .map(|(_, &r)| r)
                    .collect();
                if let Some(&r) = options.choose(rng) {
                    return r;
                }
            }
            let planted = relations.get(step - 1);
            let pool: Vec<RelationId> = rels.by_step[step].iter().copied().filter(|r| Some(r) != planted).collect();
            let pool = if pool.is_empty() { &rels.all } else { &pool };
            loop {
                let r = *pool.choose(rng).expect("relations exist");
                if planted != Some(&r) {
                    return r;
                }
            }
        };

        // (node, depth) whose fan-out still has to be grown
        let mut stack: Vec<(EntityId, usize)> = Vec::new();
        for (d, &p) in path.iter().enumerate().take(hop) {
            let n = if d == 0 { spec.distractor_branching } else { spec.distractor_fanout.saturating_sub(1) };
            for _ in 0..n {
                stack.push((p, d));
            }
        }
        stack.reverse();
        let answer = path[hop];
        if hop < spec.max_step {
            for _ in 0..spec.distractor_fanout {
                stack.push((answer, hop));
            }
        }
        while let Some((parent, depth)) = stack.pop() {
            let child = node(&mut g);
            let r = distractor_relation(depth + 1, &mut rng);
            g.add(Triple { head: parent, relation: r, tail: child });
            if depth + 1 < spec.max_step {
                for _ in 0..spec.distractor_fanout {
                    stack.push((child, depth + 1));
                }
            }
        }

        let labels: Vec<String> = relations.iter().map(|&r| g.relation_label(r).to_owned()).collect();
        queries.push(QuerySample {
            id: id.clone(),
            question: format!("Starting from {}, follow {}. Which entity is reached?", g.entity_label(path[0]), labels.join(", then ")),
            topic_entities: vec![path[0]],
            answers: vec![answer],
            gold_triples: BTreeSet::new(),
            hop: None,
        });
        plans.push(QueryPlan {
            split: split_of(&id),
            id,
            hop,
            relations,
            intended_heads: intended,
            decoys,
            path,
        });
    }
    crate::kg::annotate_gold(&g, &mut queries, Traversal::Forward);

    let store = synth_embeddings(&g, &plans, spec)?;
    let manifest = Manifest {
        spec: spec.clone(),
        queries: plans
            .iter()
            .map(|p| ManifestEntry {
                id: p.id.clone(),
                hop: p.hop,
                split: p.split,
                path: (0..p.hop)
                    .map(|t| {
                        [
                            g.entity_label(p.path[t]).to_owned(),
                            g.relation_label(p.relations[t]).to_owned(),
                            g.entity_label(p.path[t + 1]).to_owned(),
                        ]
                    })
                    .collect(),
                intended_heads: p.intended_heads.clone(),
                decoys: p.decoys.iter().map(|(&k, &r)| (k, g.relation_label(r).to_owned())).collect(),
            })
            .collect(),
    };
    Ok(SynthBench {
        graph: g,
        queries,
        plans,
        store,
        manifest,
    })
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| sample_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noise(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let scale = sigma / (n as f64).sqrt();
    (0..n).map(|_| scale * sample_normal(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Fixed per-spec geometry shared by all items.
struct Geometry {
    /// `dirs[k][r]`: head k's direction for relation r.
    dirs: Vec<Vec<Vec<f64>>>,
    /// d×d mixing map, row-major.
    mix: Vec<f64>,
    /// Per-head gate directions in the global space.
    gate_dirs: Vec<Vec<f64>>,
}

impl Geometry {
    fn new(spec: &SynthSpec, num_relations: usize) -> Self {
        let h = spec.num_heads();
        let d = spec.global_dim();
        let mut rng = rng_stream(spec.seed, 2);
        let dirs = (0..h)
            .map(|_| (0..num_relations).map(|_| unit(&mut rng, spec.head_dim)).collect())
            .collect();
        let mut rng = rng_stream(spec.seed, 3);
        let s = 1.0 / (d as f64).sqrt();
        let mix = (0..d * d).map(|_| s * sample_normal(&mut rng)).collect();
        let gate_dirs = (0..h).map(|_| unit(&mut rng, d)).collect();
        Self { dirs, mix, gate_dirs }
    }

    fn global(&self, spec: &SynthSpec, heads: &[Vec<f64>]) -> Vec<f64> {
        let x: Vec<f64> = heads.iter().flatten().copied().collect();
        let d = x.len();
        let mut out = x.clone();
        if spec.mixing > 0.0 {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &self.mix[i * d..(i + 1) * d];
                *o += spec.mixing * row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }
}

fn to_item(heads: Vec<Vec<f64>>, global: Vec<f64>) -> MultiViewEmbedding {
    MultiViewEmbedding {
        heads: heads.into_iter().map(|h| h.into_iter().map(|v| v as f32).collect()).collect(),
        global: Some(global.into_iter().map(|v| v as f32).collect()),
    }
}

/// Embeddings for every entity, relation and query of a generated benchmark.
///
/// Relation view `k` is head k's fixed direction for that relation. Query view
/// `k` is the direction of the relation the head is responsible for on this
/// query (its planted relation, its decoy when inactive, or the normalised
/// sum of all planted relations for a generalist) plus Gaussian noise of norm
/// about `noise_sigma`. Entity views are pure noise.
pub fn synth_embeddings(g: &KnowledgeGraph, plans: &[QueryPlan], spec: &SynthSpec) -> Result<EmbeddingStore> {
    spec.validate()?;
    let h = spec.num_heads();
    let dh = spec.head_dim;
    let geo = Geometry::new(spec, g.num_relations());
    let mut store = EmbeddingStore::new(h, dh, spec.global_dim())?;

    for r in 0..g.num_relations() {
        let heads: Vec<Vec<f64>> = (0..h).map(|k| geo.dirs[k][r].clone()).collect();
        let global = geo.global(spec, &heads);
        store.push(relation_key(g.relation_label(r as RelationId)), &to_item(heads, global))?;
    }

    let mut rng = rng_stream(spec.seed, 4);
    for e in 0..g.num_entities() {
        let heads: Vec<Vec<f64>> = (0..h).map(|_| noise(&mut rng, dh, 1.0)).collect();
        let global = geo.global(spec, &heads);
        store.push(entity_key(g.entity_label(e as EntityId)), &to_item(heads, global))?;
    }

    let mut rng = rng_stream(spec.seed, 5);
    for plan in plans {
        let heads: Vec<Vec<f64>> = (0..h)
            .map(|k| {
                let mut base = vec![0.0; dh];
                if spec.head_affinity[k].step.is_none() {
                    for &r in &plan.relations {
                        base.iter_mut().zip(&geo.dirs[k][r as usize]).for_each(|(b, v)| *b += v);
                    }
                    normalize(&mut base);
                } else if let Some(t) = plan.intended_heads.iter().position(|&j| j == k) {
                    base.copy_from_slice(&geo.dirs[k][plan.relations[t] as usize]);
                } else if let Some(&d) = plan.decoys.get(&k) {
                    base.copy_from_slice(&geo.dirs[k][d as usize]);
                }
                let n = noise(&mut rng, dh, spec.noise_sigma);
                base.iter().zip(n).map(|(b, e)| b + e).collect()
            })
            .collect();
        let mut global = geo.global(spec, &heads);
        for k in plan.active_heads() {
            global.iter_mut().zip(&geo.gate_dirs[k]).for_each(|(gv, u)| *gv += spec.gate_signal * u);
        }
        store.push(query_key(&plan.id), &to_item(heads, global))?;
    }
    Ok(store)
}
