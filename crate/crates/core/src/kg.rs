//! Knowledge-graph storage, ingestion and weak-supervision extraction.
//!
//! Entities and relations get dense ids in first-occurrence order; triples are
//! deduplicated at load and indexed in both directions. The graph is immutable
//! once built and can be shared freely between readers.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;
pub type TripleId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Direction used when searching for shortest topic→answer paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Traversal {
    /// Follow edges head→tail only.
    #[default]
    Forward,
    /// Treat every edge as traversable both ways.
    Undirected,
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    triples: Vec<Triple>,
    fwd: Vec<Vec<(TripleId, EntityId)>>,
    rev: Vec<Vec<(TripleId, EntityId)>>,
    entity_ids: HashMap<String, EntityId>,
    relation_ids: HashMap<String, RelationId>,
    seen: HashSet<Triple>,
}

/// One line of the graph file.
#[derive(Debug, Serialize, Deserialize)]
struct TripleRecord<'a> {
    h: std::borrow::Cow<'a, str>,
    r: std::borrow::Cow<'a, str>,
    t: std::borrow::Cow<'a, str>,
}

/// Summary of a graph load.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub duplicates: usize,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_entity(&mut self, label: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(label) {
            return id;
        }
        let id = self.entity_labels.len() as EntityId;
        self.entity_labels.push(label.to_owned());
        self.entity_ids.insert(label.to_owned(), id);
        self.fwd.push(Vec::new());
        self.rev.push(Vec::new());
        id
    }

    pub fn intern_relation(&mut self, label: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(label) {
            return id;
        }
        let id = self.relation_labels.len() as RelationId;
        self.relation_labels.push(label.to_owned());
        self.relation_ids.insert(label.to_owned(), id);
        id
    }

    /// Adds a triple by label. Returns `None` when it is a duplicate.
    pub fn add_labeled(&mut self, h: &str, r: &str, t: &str) -> Option<TripleId> {
        let head = self.intern_entity(h);
        let relation = self.intern_relation(r);
        let tail = self.intern_entity(t);
        self.add(Triple { head, relation, tail })
    }

    pub fn add(&mut self, triple: Triple) -> Option<TripleId> {
        assert!((triple.head as usize) < self.entity_labels.len());
        assert!((triple.tail as usize) < self.entity_labels.len());
        assert!((triple.relation as usize) < self.relation_labels.len());
        if !self.seen.insert(triple) {
            return None;
        }
        let id = self.triples.len() as TripleId;
        self.triples.push(triple);
        self.fwd[triple.head as usize].push((id, triple.tail));
        self.rev[triple.tail as usize].push((id, triple.head));
        Some(id)
    }

    pub fn num_entities(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: TripleId) -> Triple {
        self.triples[id as usize]
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id as usize]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[id as usize]
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entity_labels
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_ids.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_ids.get(label).copied()
    }

    /// Outgoing `(triple, tail)` pairs of `e`.
    pub fn out_edges(&self, e: EntityId) -> &[(TripleId, EntityId)] {
        &self.fwd[e as usize]
    }

    /// Incoming `(triple, head)` pairs of `e`.
    pub fn in_edges(&self, e: EntityId) -> &[(TripleId, EntityId)] {
        &self.rev[e as usize]
    }

    /// `(h, r, t)` labels of a triple.
    pub fn triple_labels(&self, id: TripleId) -> [&str; 3] {
        let t = self.triple(id);
        [
            self.entity_label(t.head),
            self.relation_label(t.relation),
            self.entity_label(t.tail),
        ]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, LoadReport)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }

    pub fn read_from(reader: impl BufRead, path: &Path) -> Result<(Self, LoadReport)> {
        let mut g = Self::new();
        let mut report = LoadReport::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            report.lines += 1;
            let rec: TripleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if g.add_labeled(&rec.h, &rec.r, &rec.t).is_none() {
                report.duplicates += 1;
                log::warn!("{}:{}: duplicate triple dropped", path.display(), i + 1);
            }
        }
        Ok((g, report))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for id in 0..self.triples.len() {
            let [h, r, t] = self.triple_labels(id as TripleId);
            let rec = TripleRecord {
                h: h.into(),
                r: r.into(),
                t: t.into(),
            };
            let line = serde_json::to_string(&rec).expect("triple record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// BFS distances from `sources`; `None` for unreachable entities.
    pub fn distances(&self, sources: &[EntityId], traversal: Traversal, reverse: bool) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.num_entities()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s as usize].is_none() {
                dist[s as usize] = Some(0);
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            let d = dist[u as usize].unwrap();
            let mut visit = |v: EntityId| {
                if dist[v as usize].is_none() {
                    dist[v as usize] = Some(d + 1);
                    queue.push_back(v);
                }
            };
            let (primary, secondary) = if reverse { (&self.rev, &self.fwd) } else { (&self.fwd, &self.rev) };
            for &(_, v) in &primary[u as usize] {
                visit(v);
            }
            if traversal == Traversal::Undirected {
                for &(_, v) in &secondary[u as usize] {
                    visit(v);
                }
            }
        }
        dist
    }
}

/// A question with its topic entities and answers resolved to graph ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub id: String,
    pub question: String,
    pub topic_entities: Vec<EntityId>,
    pub answers: Vec<EntityId>,
    /// Triples on shortest topic→answer paths (filled by [`annotate_gold`]).
    #[serde(default)]
    pub gold_triples: BTreeSet<TripleId>,
    /// Shortest topic→answer path length, `None` when no answer is reachable.
    #[serde(default)]
    pub hop: Option<usize>,
}

impl QuerySample {
    pub fn is_trainable(&self) -> bool {
        !self.topic_entities.is_empty() && !self.gold_triples.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub question: String,
    pub topic_entities: Vec<String>,
    pub answers: Vec<String>,
}

/// Reads the line-delimited query file, resolving labels against `g`.
/// Unknown labels are dropped from the sample with a warning.
pub fn load_queries(path: impl AsRef<Path>, g: &KnowledgeGraph) -> Result<Vec<QuerySample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let resolve = |labels: &[String], what: &str| -> Vec<EntityId> {
            labels
                .iter()
                .filter_map(|l| {
                    let id = g.entity_id(l);
                    if id.is_none() {
                        log::warn!("query {}: unresolved {what} label {l:?} dropped", rec.id);
                    }
                    id
                })
                .collect()
        };
        let topic_entities = resolve(&rec.topic_entities, "topic");
        let answers = resolve(&rec.answers, "answer");
        out.push(QuerySample {
            id: rec.id.clone(),
            question: rec.question.clone(),
            topic_entities,
            answers,
            gold_triples: BTreeSet::new(),
            hop: None,
        });
    }
    Ok(out)
}

pub fn save_queries(path: impl AsRef<Path>, g: &KnowledgeGraph, queries: &[QuerySample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in queries {
        let rec = QueryRecord {
            id: q.id.clone(),
            question: q.question.clone(),
            topic_entities: q.topic_entities.iter().map(|&e| g.entity_label(e).to_owned()).collect(),
            answers: q.answers.iter().map(|&e| g.entity_label(e).to_owned()).collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("query serializes")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of shortest-path gold extraction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GoldPaths {
    pub triples: BTreeSet<TripleId>,
    pub hop: Option<usize>,
}

/// Union over (topic, answer) pairs of every triple on any shortest
/// topic→answer path. `hop` is the minimum path length over pairs.
pub fn gold_shortest_path_triples(
    g: &KnowledgeGraph,
    topics: &[EntityId],
    answers: &[EntityId],
    traversal: Traversal,
) -> GoldPaths {
    let mut out = GoldPaths::default();
    let answer_dists: Vec<(EntityId, Vec<Option<u32>>)> = answers
        .iter()
        .map(|&a| (a, g.distances(&[a], traversal, true)))
        .collect();
    for &t in topics {
        let from_topic = g.distances(&[t], traversal, false);
        for (a, to_answer) in &answer_dists {
            let Some(total) = from_topic[*a as usize] else { continue };
            if total == 0 {
                continue;
            }
            out.hop = Some(out.hop.map_or(total as usize, |h: usize| h.min(total as usize)));
            let on_path = |u: EntityId, v: EntityId| match (from_topic[u as usize], to_answer[v as usize]) {
                (Some(du), Some(dv)) => du + 1 + dv == total,
                _ => false,
            };
            for (u, du) in from_topic.iter().enumerate() {
                if !matches!(du, Some(d) if *d < total) {
                    continue;
                }
                let u = u as EntityId;
                for &(tid, v) in g.out_edges(u) {
                    if on_path(u, v) {
                        out.triples.insert(tid);
                    }
                }
                if traversal == Traversal::Undirected {
                    for &(tid, v) in g.in_edges(u) {
                        if on_path(u, v) {
                            out.triples.insert(tid);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fills `gold_triples` and `hop` on every sample.
pub fn annotate_gold(g: &KnowledgeGraph, queries: &mut [QuerySample], traversal: Traversal) {
    for q in queries {
        let gold = gold_shortest_path_triples(g, &q.topic_entities, &q.answers, traversal);
        q.gold_triples = gold.triples;
        q.hop = gold.hop;
    }
}

/// Triples grouped by BFS expansion depth from the topic set. Index 0 holds
/// step 1 (triples whose head is a topic entity).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepPartition {
    pub steps: Vec<Vec<TripleId>>,
}

impl StepPartition {
    pub fn step_of(&self) -> HashMap<TripleId, usize> {
        let mut m = HashMap::new();
        for (i, cell) in self.steps.iter().enumerate() {
            for &t in cell {
                m.insert(t, i + 1);
            }
        }
        m
    }

    pub fn all(&self) -> Vec<TripleId> {
        let mut v: Vec<TripleId> = self.steps.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }
}

pub fn bfs_step_partition(g: &KnowledgeGraph, topics: &[EntityId], max_step: usize) -> StepPartition {
    assert!(max_step >= 1, "max_step must be at least 1");
    let mut steps = vec![Vec::new(); max_step];
    let mut depth: HashMap<EntityId, usize> = HashMap::new();
    let mut frontier: Vec<EntityId> = Vec::new();
    for &t in topics {
        if depth.insert(t, 0).is_none() {
            frontier.push(t);
        }
    }
    for (d, cell) in steps.iter_mut().enumerate() {
        let mut next = Vec::new();
        for &u in &frontier {
            for &(tid, v) in g.out_edges(u) {
                cell.push(tid);
                if let std::collections::hash_map::Entry::Vacant(e) = depth.entry(v) {
                    e.insert(d + 1);
                    next.push(v);
                }
            }
        }
        cell.sort_unstable();
        frontier = next;
    }
    StepPartition { steps }
}

/// Candidate triples of a query with a local node numbering, the unit the
/// retriever and structural encoder operate on.
#[derive(Clone, Debug)]
pub struct Subgraph {
    /// Candidate triple ids, ascending.
    pub triples: Vec<TripleId>,
    /// BFS step (1-based) of each candidate.
    pub steps: Vec<usize>,
    /// Local → global entity ids.
    pub nodes: Vec<EntityId>,
    /// Local head / tail index per candidate.
    pub heads: Vec<usize>,
    pub tails: Vec<usize>,
    /// Local indices of topic entities.
    pub topics: Vec<usize>,
}

impl Subgraph {
    pub fn extract(g: &KnowledgeGraph, topics: &[EntityId], max_step: usize) -> Self {
        let partition = bfs_step_partition(g, topics, max_step);
        let step_of = partition.step_of();
        let triples = partition.all();
        Self::from_triples(g, topics, triples, |t| step_of[&t])
    }

    pub fn from_triples(
        g: &KnowledgeGraph,
        topics: &[EntityId],
        triples: Vec<TripleId>,
        step_of: impl Fn(TripleId) -> usize,
    ) -> Self {
        let mut index: HashMap<EntityId, usize> = HashMap::new();
        let mut nodes = Vec::new();
        let mut local = |e: EntityId, nodes: &mut Vec<EntityId>| {
            *index.entry(e).or_insert_with(|| {
                nodes.push(e);
                nodes.len() - 1
            })
        };
        let topics_local: Vec<usize> = topics.iter().map(|&t| local(t, &mut nodes)).collect();
        let mut heads = Vec::with_capacity(triples.len());
        let mut tails = Vec::with_capacity(triples.len());
        let mut steps = Vec::with_capacity(triples.len());
        for &tid in &triples {
            let tr = g.triple(tid);
            heads.push(local(tr.head, &mut nodes));
            tails.push(local(tr.tail, &mut nodes));
            steps.push(step_of(tid));
        }
        Self {
            triples,
            steps,
            nodes,
            heads,
            tails,
            topics: topics_local,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Local `(head, tail)` edge list.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.heads.iter().copied().zip(self.tails.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(edges: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for (h, r, t) in edges {
            g.add_labeled(h, r, t);
        }
        g
    }

    #[test]
    fn duplicate_lines_are_deduplicated() {
        let text = "{\"h\":\"A\",\"r\":\"r1\",\"t\":\"B\"}\n{\"h\":\"B\",\"r\":\"r2\",\"t\":\"C\"}\n{\"h\":\"A\",\"r\":\"r1\",\"t\":\"B\"}\n";
        let (g, report) = KnowledgeGraph::read_from(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!((g.num_entities(), g.num_relations(), g.num_triples()), (3, 2, 2));
        assert_eq!(report.duplicates, 1);
        assert_eq!(g.entity_label(0), "A");
        assert_eq!(g.entity_label(2), "C");
    }

    #[test]
    fn empty_file_is_empty_graph() {
        let (g, report) = KnowledgeGraph::read_from("".as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(g.num_triples(), 0);
        assert_eq!(g.num_entities(), 0);
        assert_eq!(report.lines, 0);
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\"h\":\"A\",\"r\":\"r\",\"t\":\"B\"}\nnot json\n";
        let err = KnowledgeGraph::read_from(text.as_bytes(), Path::new("g.jsonl")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chain_gold_path() {
        let g = graph(&[("A", "r", "B"), ("B", "r", "C"), ("A", "x", "D")]);
        let gold = gold_shortest_path_triples(&g, &[0], &[g.entity_id("C").unwrap()], Traversal::Forward);
        assert_eq!(gold.triples, BTreeSet::from([0, 1]));
        assert_eq!(gold.hop, Some(2));
    }

    #[test]
    fn diamond_keeps_both_shortest_paths() {
        let g = graph(&[("A", "r", "B"), ("B", "r", "D"), ("A", "r", "C"), ("C", "r", "D"), ("A", "r", "E"), ("E", "r", "F"), ("F", "r", "D")]);
        let d = g.entity_id("D").unwrap();
        let gold = gold_shortest_path_triples(&g, &[0], &[d], Traversal::Forward);
        assert_eq!(gold.triples, BTreeSet::from([0, 1, 2, 3]));
        assert_eq!(gold.hop, Some(2));
    }

    #[test]
    fn unreachable_answer_is_untrainable() {
        let g = graph(&[("A", "r", "B"), ("C", "r", "A")]);
        let gold = gold_shortest_path_triples(&g, &[0], &[g.entity_id("C").unwrap()], Traversal::Forward);
        assert!(gold.triples.is_empty());
        assert_eq!(gold.hop, None);
        // reachable once edges may be walked backwards
        let undirected = gold_shortest_path_triples(&g, &[0], &[g.entity_id("C").unwrap()], Traversal::Undirected);
        assert_eq!(undirected.triples, BTreeSet::from([1]));
        assert_eq!(undirected.hop, Some(1));
    }

    #[test]
    fn step_partition_follows_bfs_depth() {
        let g = graph(&[
            ("Obama", "born_in", "Honolulu"),
            ("Honolulu", "located_in", "Hawaii"),
            ("Hawaii", "part_of", "USA"),
            ("Obama", "spouse", "Michelle"),
        ]);
        let p = bfs_step_partition(&g, &[0], 3);
        assert_eq!(p.steps[0], vec![0, 3]);
        assert_eq!(p.steps[1], vec![1]);
        assert_eq!(p.steps[2], vec![2]);
        let p1 = bfs_step_partition(&g, &[0], 1);
        assert_eq!(p1.all(), vec![0, 3]);
    }

    #[test]
    fn topic_without_out_edges_has_empty_steps() {
        let g = graph(&[("A", "r", "B")]);
        let p = bfs_step_partition(&g, &[1], 3);
        assert!(p.steps.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn subgraph_local_numbering() {
        let g = graph(&[("A", "r", "B"), ("B", "r", "C"), ("X", "r", "A")]);
        let sg = Subgraph::extract(&g, &[0], 3);
        assert_eq!(sg.triples, vec![0, 1]);
        assert_eq!(sg.steps, vec![1, 2]);
        assert_eq!(sg.topics, vec![0]);
        assert_eq!(sg.nodes, vec![0, 1, 2]);
        assert_eq!(sg.edges(), vec![(0, 1), (1, 2)]);
    }
}
