//! Head specialisation analysis: per-step contribution, use and hit rates,
//! a linear probe decoding the step from head scores, and the triple
//! difference intervention that ablates specialist heads through the gate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, QuerySample};
use crate::params::rng_stream;
use crate::retriever::{mix_scores, top_k_positions, ScorePack};
use crate::tensor::{softmax, Mat};

/// Everything the analyses need about one scored query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub query_id: String,
    pub hop: Option<usize>,
    pub triples: Vec<u32>,
    pub steps: Vec<usize>,
    /// candidates × heads
    pub z: Mat,
    pub alpha: Vec<f64>,
    /// Candidates in the top-k selection.
    pub selected: Vec<bool>,
    pub gold: Vec<bool>,
    pub num_answers: usize,
    /// Answer indices touched by each candidate.
    pub covers: Vec<Vec<u32>>,
}

impl RunLogEntry {
    pub fn new(g: &KnowledgeGraph, q: &QuerySample, pack: &ScorePack, k: usize) -> Self {
        let mut selected = vec![false; pack.triples.len()];
        for i in top_k_positions(&pack.s, &pack.triples, k) {
            selected[i] = true;
        }
        let answers: BTreeSet<_> = q.answers.iter().copied().collect();
        let answer_pos: HashMap<_, u32> = answers.iter().enumerate().map(|(i, &a)| (a, i as u32)).collect();
        let covers = pack
            .triples
            .iter()
            .map(|&t| {
                let tr = g.triple(t);
                let mut c: Vec<u32> = [tr.head, tr.tail].iter().filter_map(|e| answer_pos.get(e).copied()).collect();
                c.dedup();
                c
            })
            .collect();
        Self {
            query_id: q.id.clone(),
            hop: q.hop,
            triples: pack.triples.clone(),
            steps: pack.steps.clone(),
            z: pack.z.clone(),
            alpha: pack.alpha.clone(),
            selected,
            gold: pack.triples.iter().map(|t| q.gold_triples.contains(t)).collect(),
            num_answers: answers.len(),
            covers,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.z.cols
    }

    /// Head with the strictly highest score for candidate `c`; ties go to the
    /// lower index.
    pub fn winner(&self, c: usize) -> usize {
        let row = self.z.row(c);
        let mut best = 0;
        for h in 1..row.len() {
            if row[h] > row[best] {
                best = h;
            }
        }
        best
    }

    /// Positions of the top-k candidates under gate weights `alpha`.
    pub fn select_with(&self, alpha: &[f64], k: usize) -> Vec<usize> {
        top_k_positions(&mix_scores(&self.z, alpha), &self.triples, k)
    }

    pub fn answer_recall(&self, positions: &[usize]) -> Option<f64> {
        if self.num_answers == 0 {
            return None;
        }
        let hit: BTreeSet<u32> = positions.iter().flat_map(|&p| self.covers[p].iter().copied()).collect();
        Some(hit.len() as f64 / self.num_answers as f64)
    }

    pub fn path_recall(&self, positions: &[usize]) -> Option<f64> {
        let total = self.gold.iter().filter(|&&g| g).count();
        if total == 0 {
            return None;
        }
        Some(positions.iter().filter(|&&p| self.gold[p]).count() as f64 / total as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub k: usize,
    pub entries: Vec<RunLogEntry>,
}

impl RunLog {
    pub fn build(g: &KnowledgeGraph, queries: &[&QuerySample], packs: &[Option<ScorePack>], k: usize) -> Self {
        let entries = queries
            .iter()
            .zip(packs)
            .filter_map(|(q, p)| p.as_ref().map(|p| RunLogEntry::new(g, q, p, k)))
            .collect();
        Self { k, entries }
    }

    pub fn num_heads(&self) -> Option<usize> {
        self.entries.first().map(RunLogEntry::num_heads)
    }

    /// JSON lines: a header with `k`, then one entry per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let io = |e: std::io::Error| Error::io(path, e);
        serde_json::to_writer(&mut w, &serde_json::json!({ "k": self.k })).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|e| Error::io(path, e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = RunLog::default();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |m: String| Error::Parse { path: path.to_owned(), line: i + 1, message: m };
            if i == 0 {
                let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
                log.k = v.get("k").and_then(|k| k.as_u64()).ok_or_else(|| parse("missing k in header".into()))? as usize;
            } else {
                log.entries.push(serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?);
            }
        }
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Samples with a gold triple at this step.
    pub samples: usize,
    pub contribution: Vec<Option<f64>>,
    pub use_rate: Vec<Option<f64>>,
    pub hit_rate: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OthersRow {
    pub step: usize,
    pub contribution: Option<f64>,
    pub use_rate: Option<f64>,
    pub hit_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetricsTable {
    pub num_heads: usize,
    pub steps: Vec<StepMetrics>,
    /// Contribution pooled over all steps.
    pub overall_contribution: Vec<Option<f64>>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Contribution, use rate and hit rate for every head at every populated step.
pub fn head_metrics(log: &RunLog) -> Result<HeadMetricsTable> {
    let h = log.num_heads().ok_or_else(|| Error::Invalid("run log is empty".into()))?;
    if let Some(e) = log.entries.iter().find(|e| e.num_heads() != h) {
        return Err(Error::Invalid(format!("query {} has {} heads, expected {h}", e.query_id, e.num_heads())));
    }
    #[derive(Default, Clone)]
    struct Acc {
        samples: usize,
        correct: usize,
        won_correct: Vec<usize>,
        won_selected: Vec<usize>,
        used: Vec<usize>,
    }
    let mut per_step: BTreeMap<usize, Acc> = BTreeMap::new();
    let (mut all_correct, mut all_won) = (0usize, vec![0usize; h]);
    for e in &log.entries {
        let winners: Vec<usize> = (0..e.triples.len()).map(|c| e.winner(c)).collect();
        let gold_steps: BTreeSet<usize> = (0..e.triples.len()).filter(|&c| e.gold[c]).map(|c| e.steps[c]).collect();
        for &t in &gold_steps {
            let acc = per_step.entry(t).or_insert_with(|| Acc {
                won_correct: vec![0; h],
                won_selected: vec![0; h],
                used: vec![0; h],
                ..Acc::default()
            });
            acc.samples += 1;
            let mut used = vec![false; h];
            for c in (0..e.triples.len()).filter(|&c| e.steps[c] == t && e.selected[c]) {
                let w = winners[c];
                used[w] = true;
                acc.won_selected[w] += 1;
                if e.gold[c] {
                    acc.correct += 1;
                    acc.won_correct[w] += 1;
                    all_correct += 1;
                    all_won[w] += 1;
                }
            }
            for (u, flag) in acc.used.iter_mut().zip(used) {
                *u += flag as usize;
            }
        }
    }
    let steps = per_step
        .into_iter()
        .map(|(step, a)| StepMetrics {
            step,
            samples: a.samples,
            contribution: a.won_correct.iter().map(|&n| ratio(n, a.correct)).collect(),
            use_rate: a.used.iter().map(|&n| ratio(n, a.samples)).collect(),
            hit_rate: (0..h).map(|i| ratio(a.won_correct[i], a.won_selected[i])).collect(),
        })
        .collect();
    Ok(HeadMetricsTable {
        num_heads: h,
        steps,
        overall_contribution: all_won.iter().map(|&n| ratio(n, all_correct)).collect(),
    })
}

impl HeadMetricsTable {
    pub fn step(&self, t: usize) -> Option<&StepMetrics> {
        self.steps.iter().find(|s| s.step == t)
    }

    /// The `n` heads with the largest overall contribution; ties go to the
    /// lower index.
    pub fn top_heads(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_heads).collect();
        let key = |h: usize| self.overall_contribution[h].unwrap_or(-1.0);
        order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
        order.truncate(n.min(self.num_heads));
        order
    }

    /// Head with the largest contribution at step `t`.
    pub fn argmax_contribution(&self, t: usize) -> Option<usize> {
        let s = self.step(t)?;
        let mut best: Option<(usize, f64)> = None;
        for (h, c) in s.contribution.iter().enumerate() {
            if let Some(c) = *c {
                if best.is_none_or(|(_, b)| c > b) {
                    best = Some((h, c));
                }
            }
        }
        best.map(|(h, _)| h)
    }

    /// Sum of contributions and mean use and hit rate over heads outside `top`.
    pub fn others(&self, top: &[usize]) -> Vec<OthersRow> {
        let rest: Vec<usize> = (0..self.num_heads).filter(|h| !top.contains(h)).collect();
        self.steps
            .iter()
            .map(|s| {
                let contribution = {
                    let v: Vec<f64> = rest.iter().filter_map(|&h| s.contribution[h]).collect();
                    (!v.is_empty()).then(|| v.iter().sum())
                };
                OthersRow {
                    step: s.step,
                    contribution,
                    use_rate: mean_defined(rest.iter().map(|&h| s.use_rate[h])),
                    hit_rate: mean_defined(rest.iter().map(|&h| s.hit_rate[h])),
                }
            })
            .collect()
    }

    /// Long-format heatmap data: one row per (head, step, metric). The heads in
    /// `top` are listed individually and the rest are folded into `Others`.
    pub fn heatmap_csv(&self, top: &[usize]) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let mut out = String::from("head,step,metric,value\n");
        for &h in top {
            for s in &self.steps {
                for (name, v) in [("contribution", s.contribution[h]), ("use_rate", s.use_rate[h]), ("hit_rate", s.hit_rate[h])] {
                    let _ = writeln!(out, "h{h},{},{name},{}", s.step, fmt(v));
                }
            }
        }
        if top.len() < self.num_heads {
            for o in self.others(top) {
                for (name, v) in [("contribution", o.contribution), ("use_rate", o.use_rate), ("hit_rate", o.hit_rate)] {
                    let _ = writeln!(out, "Others,{},{name},{}", o.step, fmt(v));
                }
            }
        }
        out
    }
}

/// Labelled feature rows for the probe; `groups` ties rows to their sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same rows with labels permuted across the whole set.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.labels.shuffle(&mut rng_stream(seed, 0x5_4F1E));
        out
    }
}

/// One row per (query, step): the mean head-score vector over that step's
/// candidates, labelled with the step.
pub fn probe_features(log: &RunLog) -> ProbeData {
    let mut data = ProbeData::default();
    for (qi, e) in log.entries.iter().enumerate() {
        let mut by_step: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for c in 0..e.triples.len() {
            let (sum, n) = by_step.entry(e.steps[c]).or_insert_with(|| (vec![0.0; e.num_heads()], 0));
            for (a, b) in sum.iter_mut().zip(e.z.row(c)) {
                *a += b;
            }
            *n += 1;
        }
        for (step, (sum, n)) in by_step {
            data.features.push(sum.into_iter().map(|v| v / n as f64).collect());
            data.labels.push(step);
            data.groups.push(qi);
        }
    }
    data
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub folds: usize,
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { folds: 5, l2: 1e-3, learning_rate: 0.5, iterations: 300, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: usize,
    pub support: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean held-out accuracy over the evaluated folds.
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub skipped_folds: usize,
    pub chance: f64,
    pub samples: usize,
    pub per_class: Vec<ClassReport>,
}

struct Softmax {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Softmax {
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .w
            .iter()
            .zip(&self.b)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        softmax(&logits)
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs(x);
        (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
    }

    /// Full-batch gradient descent on the mean cross-entropy plus `l2·|W|²/2`.
    fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let mut m = Softmax { w: vec![vec![0.0; d]; classes], b: vec![0.0; classes] };
        let n = x.len() as f64;
        for _ in 0..cfg.iterations {
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for (xi, &yi) in x.iter().zip(y) {
                let mut p = m.probs(xi);
                p[yi] -= 1.0;
                for c in 0..classes {
                    gb[c] += p[c];
                    for j in 0..d {
                        gw[c][j] += p[c] * xi[j];
                    }
                }
            }
            for c in 0..classes {
                m.b[c] -= cfg.learning_rate * gb[c] / n;
                for j in 0..d {
                    m.w[c][j] -= cfg.learning_rate * (gw[c][j] / n + cfg.l2 * m.w[c][j]);
                }
            }
        }
        m
    }
}

/// Column means and standard deviations; constant columns get unit scale.
fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 { v.sqrt() } else { 1.0 }
        })
        .collect();
    (mean, sd)
}

/// Multinomial logistic regression decoding the label, evaluated by k-fold
/// cross-validation where every group lands in exactly one fold.
pub fn linear_probe(data: &ProbeData, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let classes: Vec<usize> = data.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Invalid("linear probe needs at least two distinct labels".into()));
    }
    if cfg.folds < 2 {
        return Err(Error::Config("probe folds must be at least 2".into()));
    }
    let class_of: HashMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = data.labels.iter().map(|l| class_of[l]).collect();

    let mut groups: Vec<usize> = data.groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    groups.shuffle(&mut rng_stream(cfg.seed, 0xF01D));
    let fold_of: HashMap<usize, usize> = groups.iter().enumerate().map(|(i, &g)| (g, i % cfg.folds)).collect();

    let mut fold_acc = Vec::new();
    let mut skipped = 0;
    let mut confusion = vec![vec![0usize; classes.len()]; classes.len()];
    for fold in 0..cfg.folds {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| fold_of[&data.groups[i]] != fold);
        let train_classes: BTreeSet<usize> = train.iter().map(|&i| y[i]).collect();
        if test.is_empty() || train_classes.len() < 2 {
            log::warn!("probe fold {fold} skipped: degenerate split");
            skipped += 1;
            continue;
        }
        let (mean, sd) = standardizer(&train.iter().map(|&i| data.features[i].clone()).collect::<Vec<_>>());
        let scale = |i: usize| -> Vec<f64> {
            data.features[i].iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect()
        };
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| scale(i)).collect();
        let ys: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let model = Softmax::fit(&xs, &ys, classes.len(), cfg);
        let mut correct = 0;
        for &i in &test {
            let pred = model.predict(&scale(i));
            confusion[y[i]][pred] += 1;
            correct += (pred == y[i]) as usize;
        }
        fold_acc.push(correct as f64 / test.len() as f64);
    }
    if fold_acc.is_empty() {
        return Err(Error::Invalid("every probe fold was degenerate".into()));
    }
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(c, &label)| {
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|r| r[c]).sum();
            ClassReport {
                label,
                support,
                precision: ratio(confusion[c][c], predicted),
                recall: ratio(confusion[c][c], support),
            }
        })
        .collect();
    Ok(ProbeReport {
        accuracy: fold_acc.iter().sum::<f64>() / fold_acc.len() as f64,
        fold_accuracies: fold_acc,
        skipped_folds: skipped,
        chance: 1.0 / classes.len() as f64,
        samples: data.len(),
        per_class,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMetric {
    AnswerRecall,
    PathRecall,
}

impl std::str::FromStr for DeltaMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "answer_recall" => Ok(Self::AnswerRecall),
            "path_recall" => Ok(Self::PathRecall),
            _ => Err(Error::Config(format!("unknown metric {s:?}; expected answer_recall or path_recall"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DddConfig {
    pub n_random_draws: usize,
    pub n_boot: usize,
    pub metric: DeltaMetric,
    pub seed: u64,
}

impl Default for DddConfig {
    fn default() -> Self {
        Self { n_random_draws: 50, n_boot: 2000, metric: DeltaMetric::AnswerRecall, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DddResult {
    pub specialists: Vec<usize>,
    pub random_sets: Vec<Vec<usize>>,
    pub did_expert: f64,
    pub did_random: f64,
    pub ddd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// One-sided: small when the specialist ablation hurts long queries more
    /// than the random ablations do.
    pub p_value: f64,
    pub n_resamples: usize,
    pub n_long: usize,
    pub n_short: usize,
    pub k: usize,
    pub metric: DeltaMetric,
}

impl DddResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::io(path, e.into()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Gate weights with `heads` zeroed and the rest renormalised.
pub fn ablate_gate(alpha: &[f64], heads: &[usize]) -> Result<Vec<f64>> {
    let mut a = alpha.to_vec();
    for &h in heads {
        a[h] = 0.0;
    }
    let total: f64 = a.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("ablation removes all gate mass".into()));
    }
    Ok(a.into_iter().map(|v| v / total).collect())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn combinations(pool: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(pool: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..pool.len() {
            cur.push(pool[i]);
            rec(pool, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(pool, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Same-size head sets disjoint from `specialists`: all of them when there
/// are at most `n` such sets, otherwise `n` distinct random ones.
pub fn random_head_sets(num_heads: usize, specialists: &[usize], n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let k = specialists.len();
    let pool: Vec<usize> = (0..num_heads).filter(|h| !specialists.contains(h)).collect();
    if pool.len() < k {
        return Err(Error::Invalid(format!(
            "cannot draw {k} random heads from the {} non-specialist heads",
            pool.len()
        )));
    }
    if binomial(pool.len(), k) <= n as f64 {
        return Ok(combinations(&pool, k));
    }
    let mut rng = rng_stream(seed, 0xD4A3);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut set: Vec<usize> = index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        set.sort_unstable();
        if seen.insert(set.clone()) {
            out.push(set);
        }
    }
    Ok(out)
}

fn metric_of(e: &RunLogEntry, metric: DeltaMetric, positions: &[usize]) -> Option<f64> {
    match metric {
        DeltaMetric::AnswerRecall => e.answer_recall(positions),
        DeltaMetric::PathRecall => e.path_recall(positions),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Triple difference of the metric change on long (≥2 hop) versus short
/// (1 hop) queries when ablating `specialists` versus random head sets.
///
/// The bootstrap resamples long and short queries separately and keeps the
/// random sets fixed. The p-value is the randomised rank of the specialist
/// DID among the specialist and random DIDs.
pub fn ddd(log: &RunLog, specialists: &[usize], cfg: &DddConfig) -> Result<DddResult> {
    let h = log.num_heads().ok_or_else(|| Error::Invalid("run log is empty".into()))?;
    let spec: Vec<usize> = specialists.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if spec.len() >= h {
        return Err(Error::Invalid("specialist set must leave at least one head".into()));
    }
    if let Some(&bad) = spec.iter().find(|&&s| s >= h) {
        return Err(Error::Invalid(format!("specialist head {bad} out of range for {h} heads")));
    }
    let random_sets = random_head_sets(h, &spec, cfg.n_random_draws, cfg.seed)?;

    // Per query: [Δ under specialists, Δ under each random set].
    let mut long = Vec::new();
    let mut short = Vec::new();
    for e in &log.entries {
        let bucket = match e.hop {
            Some(1) => &mut short,
            Some(_) => &mut long,
            None => continue,
        };
        let Some(base) = metric_of(e, cfg.metric, &e.select_with(&e.alpha, log.k)) else { continue };
        let mut deltas = Vec::with_capacity(1 + random_sets.len());
        for set in std::iter::once(&spec).chain(&random_sets) {
            let a = ablate_gate(&e.alpha, set)?;
            let after = metric_of(e, cfg.metric, &e.select_with(&a, log.k)).unwrap_or(base);
            deltas.push(after - base);
        }
        bucket.push(deltas);
    }
    if long.is_empty() || short.is_empty() {
        return Err(Error::Invalid(format!(
            "need both short and long queries, got {} short and {} long",
            short.len(),
            long.len()
        )));
    }

    let m = 1 + random_sets.len();
    let dids = |li: &[usize], si: &[usize]| -> Vec<f64> {
        (0..m)
            .map(|j| {
                let l = li.iter().map(|&i| long[i][j]).sum::<f64>() / li.len() as f64;
                let s = si.iter().map(|&i| short[i][j]).sum::<f64>() / si.len() as f64;
                l - s
            })
            .collect()
    };
    let estimate = |d: &[f64]| if d.len() > 1 { d[0] - mean(&d[1..]) } else { 0.0 };

    let all_long: Vec<usize> = (0..long.len()).collect();
    let all_short: Vec<usize> = (0..short.len()).collect();
    let point = dids(&all_long, &all_short);
    let did_expert = point[0];
    let did_random = if m > 1 { mean(&point[1..]) } else { 0.0 };
    let est = estimate(&point);

    let mut boot: Vec<f64> = (0..cfg.n_boot)
        .map(|b| {
            let mut rng = rng_stream(cfg.seed, 0xB007_0000_0000 + b as u64);
            let li: Vec<usize> = (0..long.len()).map(|_| rng.random_range(0..long.len())).collect();
            let si: Vec<usize> = (0..short.len()).map(|_| rng.random_range(0..short.len())).collect();
            estimate(&dids(&li, &si))
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let (ci_low, ci_high) = if boot.is_empty() {
        (est, est)
    } else {
        (percentile(&boot, 0.025).min(est), percentile(&boot, 0.975).max(est))
    };

    let below = point[1..].iter().filter(|&&d| d < did_expert).count();
    let ties = point.iter().filter(|&&d| d == did_expert).count();
    let u: f64 = 1.0 - rng_stream(cfg.seed, 0x9E57).random::<f64>();
    let p_value = ((below as f64 + u * ties as f64) / m as f64).clamp(0.0, 1.0);

    Ok(DddResult {
        specialists: spec,
        random_sets,
        did_expert,
        did_random,
        ddd: est,
        ci_low,
        ci_high,
        p_value,
        n_resamples: cfg.n_boot,
        n_long: long.len(),
        n_short: short.len(),
        k: log.k,
        metric: cfg.metric,
    })
}

/// Top-`n` heads by pooled contribution on the long (≥2 hop) queries of `log`.
pub fn select_specialists(log: &RunLog, n: usize) -> Result<Vec<usize>> {
    let long = RunLog {
        k: log.k,
        entries: log.entries.iter().filter(|e| e.hop.is_some_and(|h| h >= 2)).cloned().collect(),
    };
    let table = head_metrics(&long)?;
    let mut top = table.top_heads(n);
    top.sort_unstable();
    Ok(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(z: Vec<Vec<f64>>, steps: Vec<usize>, selected: Vec<bool>, gold: Vec<bool>) -> RunLogEntry {
        let n = z.len();
        let h = z[0].len();
        RunLogEntry {
            query_id: "q".into(),
            hop: Some(1),
            triples: (0..n as u32).collect(),
            steps,
            z: Mat::from_vec(n, h, z.into_iter().flatten().collect()),
            alpha: vec![1.0 / h as f64; h],
            covers: gold.iter().map(|&g| if g { vec![0] } else { vec![] }).collect(),
            num_answers: 1,
            selected,
            gold,
        }
    }

    #[test]
    fn single_head_takes_all_contribution() {
        let e = entry(vec![vec![0.3], vec![0.1], vec![0.9]], vec![1, 1, 2], vec![true, true, true], vec![true, false, true]);
        let t = head_metrics(&RunLog { k: 3, entries: vec![e] }).unwrap();
        for s in &t.steps {
            assert_eq!(s.contribution, vec![Some(1.0)]);
        }
    }

    #[test]
    fn ties_go_to_lower_head() {
        let e = entry(vec![vec![0.5, 0.5], vec![0.1, 0.1]], vec![1, 1], vec![true, true], vec![true, true]);
        let t = head_metrics(&RunLog { k: 2, entries: vec![e] }).unwrap();
        let s = t.step(1).unwrap();
        assert_eq!(s.contribution, vec![Some(1.0), Some(0.0)]);
        assert_eq!(s.use_rate, vec![Some(1.0), Some(0.0)]);
        assert_eq!(s.hit_rate[1], None);
    }

    #[test]
    fn empty_ablation_gives_zero() {
        let mut entries = Vec::new();
        for (i, hop) in [1, 1, 2, 3].into_iter().enumerate() {
            let mut e = entry(vec![vec![0.2, 0.9], vec![0.7, 0.1]], vec![1, 2], vec![true, false], vec![true, true]);
            e.hop = Some(hop);
            e.query_id = format!("q{i}");
            entries.push(e);
        }
        let r = ddd(&RunLog { k: 1, entries }, &[], &DddConfig::default()).unwrap();
        assert_eq!((r.ddd, r.did_expert, r.did_random), (0.0, 0.0, 0.0));
        assert!(r.ci_low <= r.ddd && r.ddd <= r.ci_high);
    }

    #[test]
    fn gate_ablation_renormalises() {
        let a = ablate_gate(&[0.2, 0.3, 0.5], &[2]).unwrap();
        assert!((a[0] - 0.4).abs() < 1e-15 && (a[1] - 0.6).abs() < 1e-15 && a[2] == 0.0);
        assert!(ablate_gate(&[0.5, 0.5], &[0, 1]).is_err());
    }

    #[test]
    fn random_sets_enumerate_or_sample() {
        let all = random_head_sets(6, &[0, 1], 50, 0).unwrap();
        assert_eq!(all.len(), 6);
        assert!(all.iter().all(|s| s.len() == 2 && !s.contains(&0) && !s.contains(&1)));
        let some = random_head_sets(16, &[0, 1, 2, 3, 4], 50, 0).unwrap();
        let distinct: BTreeSet<_> = some.iter().cloned().collect();
        assert_eq!((some.len(), distinct.len()), (50, 50));
    }
}
