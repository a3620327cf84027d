//! Retrieval recall with hop breakdown, and answer-level QA scores.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, QuerySample, TripleId};

/// `|retrieved ∩ gold| / |gold|`, `None` for an empty gold set.
pub fn recall_sp(retrieved: &BTreeSet<TripleId>, gold: &BTreeSet<TripleId>) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    Some(gold.intersection(retrieved).count() as f64 / gold.len() as f64)
}

/// Share of answers that occur as head or tail of some retrieved triple.
pub fn recall_ans(g: &KnowledgeGraph, retrieved: &[TripleId], answers: &[EntityId]) -> Option<f64> {
    let answers: BTreeSet<EntityId> = answers.iter().copied().collect();
    if answers.is_empty() {
        return None;
    }
    let mut seen = HashSet::new();
    for &t in retrieved {
        let tr = g.triple(t);
        seen.insert(tr.head);
        seen.insert(tr.tail);
    }
    Some(answers.iter().filter(|a| seen.contains(a)).count() as f64 / answers.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HopBucket {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = ">=3")]
    ThreePlus,
    #[serde(rename = "unreachable")]
    Unreachable,
}

impl HopBucket {
    pub fn of(hop: Option<usize>) -> Self {
        match hop {
            Some(1) => HopBucket::One,
            Some(2) => HopBucket::Two,
            Some(_) => HopBucket::ThreePlus,
            None => HopBucket::Unreachable,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HopBucket::One => "1",
            HopBucket::Two => "2",
            HopBucket::ThreePlus => ">=3",
            HopBucket::Unreachable => "unreachable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub hop: Option<usize>,
    pub r_sp: Option<f64>,
    pub r_ans: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub bucket: String,
    pub queries: usize,
    pub r_sp: Option<f64>,
    pub r_ans: Option<f64>,
    pub skipped_sp: usize,
    pub skipped_ans: usize,
}

impl BucketStats {
    fn from_rows<'a>(bucket: &str, rows: impl Iterator<Item = &'a QueryRow>) -> Self {
        let mut s = Self {
            bucket: bucket.to_owned(),
            queries: 0,
            r_sp: None,
            r_ans: None,
            skipped_sp: 0,
            skipped_ans: 0,
        };
        let (mut sp, mut n_sp, mut ans, mut n_ans) = (0.0, 0usize, 0.0, 0usize);
        for r in rows {
            s.queries += 1;
            match r.r_sp {
                Some(v) => {
                    sp += v;
                    n_sp += 1;
                }
                None => s.skipped_sp += 1,
            }
            match r.r_ans {
                Some(v) => {
                    ans += v;
                    n_ans += 1;
                }
                None => s.skipped_ans += 1,
            }
        }
        s.r_sp = (n_sp > 0).then(|| sp / n_sp as f64);
        s.r_ans = (n_ans > 0).then(|| ans / n_ans as f64);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    /// Buckets `1`, `2`, `>=3`, `unreachable` (when populated) and `all`.
    pub buckets: Vec<BucketStats>,
    pub rows: Vec<QueryRow>,
}

impl RetrievalReport {
    pub fn from_rows(k: usize, rows: Vec<QueryRow>) -> Self {
        let mut buckets = Vec::new();
        for b in [HopBucket::One, HopBucket::Two, HopBucket::ThreePlus, HopBucket::Unreachable] {
            let stats = BucketStats::from_rows(b.label(), rows.iter().filter(|r| HopBucket::of(r.hop) == b));
            if b != HopBucket::Unreachable || stats.queries > 0 {
                buckets.push(stats);
            }
        }
        buckets.push(BucketStats::from_rows("all", rows.iter()));
        Self { k, buckets, rows }
    }

    pub fn bucket(&self, name: &str) -> Option<&BucketStats> {
        self.buckets.iter().find(|b| b.bucket == name)
    }

    pub fn overall(&self) -> &BucketStats {
        self.buckets.last().expect("overall bucket present")
    }

    /// Mean answer recall over rows whose hop satisfies `keep`.
    pub fn mean_r_ans(&self, keep: impl Fn(Option<usize>) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| keep(r.hop)).filter_map(|r| r.r_ans).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let mut s = String::from("bucket,queries,r_sp,r_ans,skipped_sp,skipped_ans\n");
        for b in &self.buckets {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                b.bucket,
                b.queries,
                fmt(b.r_sp),
                fmt(b.r_ans),
                b.skipped_sp,
                b.skipped_ans
            );
        }
        s
    }
}

/// Scores one query's retrieved list against its gold annotations.
pub fn query_row(g: &KnowledgeGraph, q: &QuerySample, retrieved: &[TripleId]) -> QueryRow {
    let set: BTreeSet<TripleId> = retrieved.iter().copied().collect();
    QueryRow {
        query_id: q.id.clone(),
        hop: q.hop,
        r_sp: recall_sp(&set, &q.gold_triples),
        r_ans: recall_ans(g, retrieved, &q.answers),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub queries: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub hit: f64,
    pub hit_at_1: f64,
}

/// Case-folds and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn f1(tp: usize, n_pred: usize, n_gold: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gold as f64;
    2.0 * p * r / (p + r)
}

/// QA scores over the queries in `gold`; missing predictions count as empty.
/// Queries with an empty gold list are skipped.
pub fn qa_metrics(predictions: &BTreeMap<String, Vec<String>>, gold: &BTreeMap<String, Vec<String>>) -> QaReport {
    let (mut macro_sum, mut hits, mut hits1, mut n) = (0.0, 0usize, 0usize, 0usize);
    let (mut tp_all, mut pred_all, mut gold_all) = (0usize, 0usize, 0usize);
    for (id, answers) in gold {
        let g: BTreeSet<String> = answers.iter().map(|a| normalize_answer(a)).collect();
        if g.is_empty() {
            continue;
        }
        n += 1;
        let list: Vec<String> = predictions
            .get(id)
            .map(|p| p.iter().map(|a| normalize_answer(a)).filter(|a| !a.is_empty()).collect())
            .unwrap_or_default();
        let p: BTreeSet<String> = list.iter().cloned().collect();
        let tp = p.intersection(&g).count();
        macro_sum += f1(tp, p.len(), g.len());
        tp_all += tp;
        pred_all += p.len();
        gold_all += g.len();
        if tp > 0 {
            hits += 1;
        }
        if list.first().is_some_and(|a| g.contains(a)) {
            hits1 += 1;
        }
    }
    let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    QaReport {
        queries: n,
        macro_f1: mean(macro_sum),
        micro_f1: f1(tp_all, pred_all, gold_all),
        hit: mean(hits as f64),
        hit_at_1: mean(hits1 as f64),
    }
}
