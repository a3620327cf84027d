//! Weighted listwise training with AdamW, warmup plus cosine decay, gradient
//! accumulation and early stopping on a dev split.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::QuerySample;
use crate::params::{rng_stream, ParamSet};
use crate::retriever::{top_k_positions, QueryInputs, Retriever};
use crate::tape::Tape;
use crate::tensor::Mat;

/// Binary labels over candidates and their reweighted simplex version.
#[derive(Clone, Debug, PartialEq)]
pub struct ListwiseTarget {
    pub y: Vec<bool>,
    pub y_weighted: Arc<[f64]>,
}

impl ListwiseTarget {
    pub fn new(y: Vec<bool>, w_pos: f64) -> Result<Self> {
        Self::with_weights(y, w_pos, 1.0)
    }

    /// `y_w[τ] = y[τ]·w_τ / Σ y·w`, with `w_τ = w_pos` on positives.
    pub fn with_weights(y: Vec<bool>, w_pos: f64, w_neg: f64) -> Result<Self> {
        let w: Vec<f64> = y.iter().map(|&b| if b { w_pos } else { w_neg }).collect();
        let total: f64 = y.iter().zip(&w).filter(|(b, _)| **b).map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::Invalid("listwise target has no positive entries".into()));
        }
        let y_weighted = y
            .iter()
            .zip(&w)
            .map(|(&b, &wi)| if b { wi / total } else { 0.0 })
            .collect();
        Ok(Self { y, y_weighted })
    }

    pub fn for_query(inputs: &QueryInputs, q: &QuerySample, w_pos: f64) -> Result<Self> {
        let y = inputs.sub.triples.iter().map(|t| q.gold_triples.contains(t)).collect();
        Self::new(y, w_pos)
    }
}

/// `−Σ y_w · ln(P + ε)`
pub fn listwise_loss(p: &[f64], target: &ListwiseTarget, eps: f64) -> Result<f64> {
    if p.len() != target.y_weighted.len() {
        return Err(Error::Invalid("prediction and target lengths differ".into()));
    }
    if !target.y.iter().any(|&b| b) {
        return Err(Error::Invalid("listwise target has no positive entries".into()));
    }
    Ok(-p
        .iter()
        .zip(target.y_weighted.iter())
        .filter(|(_, &w)| w != 0.0)
        .map(|(pv, w)| w * (pv + eps).ln())
        .sum::<f64>())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    DevLoss,
    DevRecall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub accumulation_steps: usize,
    pub w_pos: f64,
    pub eps: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub monitor: Monitor,
    /// K used when the monitor is dev recall.
    pub monitor_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 20,
            peak_lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 5.0,
            accumulation_steps: 2,
            w_pos: 10.0,
            eps: 1e-9,
            seed: 0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            monitor: Monitor::DevLoss,
            monitor_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience cannot exceed max_epochs");
        }
        if !(self.peak_lr >= self.min_lr && self.min_lr >= 0.0) {
            return bad("learning rates must satisfy peak_lr >= min_lr >= 0");
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps must be at least 1");
        }
        if !(self.w_pos > 0.0 && self.eps >= 0.0 && self.warmup_epochs >= 0.0) {
            return bad("eps and warmup_epochs must be non-negative and w_pos positive");
        }
        Ok(())
    }

    /// Flat `key = value` text, one key per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let monitor = match self.monitor {
            Monitor::DevLoss => "dev_loss",
            Monitor::DevRecall => "dev_recall",
        };
        for (k, v) in [
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("accumulation_steps", self.accumulation_steps.to_string()),
            ("w_pos", self.w_pos.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("monitor", monitor.to_string()),
            ("monitor_k", self.monitor_k.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "max_epochs" => self.max_epochs = p(key, value)?,
            "patience" => self.patience = p(key, value)?,
            "peak_lr" => self.peak_lr = p(key, value)?,
            "min_lr" => self.min_lr = p(key, value)?,
            "warmup_epochs" => self.warmup_epochs = p(key, value)?,
            "accumulation_steps" => self.accumulation_steps = p(key, value)?,
            "w_pos" => self.w_pos = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "adam_beta1" => self.adam_beta1 = p(key, value)?,
            "adam_beta2" => self.adam_beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "monitor_k" => self.monitor_k = p(key, value)?,
            "monitor" => {
                self.monitor = match value {
                    "dev_loss" => Monitor::DevLoss,
                    "dev_recall" => Monitor::DevRecall,
                    _ => return Err(format!("unknown monitor {value:?}")),
                }
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_kv(&text)?;
        Ok(cfg)
    }
}

/// Learning rate at a (possibly fractional) epoch: linear warmup from 0 to
/// `peak_lr`, then a half cosine reaching `min_lr` at the last epoch.
pub fn lr_schedule(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs;
    if epoch < warm {
        return cfg.peak_lr * epoch.max(0.0) / warm;
    }
    let last = (cfg.max_epochs.saturating_sub(1)) as f64;
    let span = last - warm;
    let t = if span > 0.0 { ((epoch - warm) / span).clamp(0.0, 1.0) } else { 1.0 };
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let zeros = || params.mats().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= lr * self.weight_decay * p.data[j];
                p.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One trainable query.
#[derive(Clone, Debug)]
pub struct Example {
    pub inputs: QueryInputs,
    pub target: ListwiseTarget,
    /// Local node indices of the answer entities inside the candidate subgraph.
    pub answer_nodes: Vec<usize>,
    pub num_answers: usize,
}

impl Example {
    pub fn new(inputs: QueryInputs, q: &QuerySample, w_pos: f64) -> Result<Self> {
        let target = ListwiseTarget::for_query(&inputs, q, w_pos)?;
        let answers: HashSet<u32> = q.answers.iter().copied().collect();
        let answer_nodes = inputs
            .sub
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, e)| answers.contains(e))
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            inputs,
            target,
            answer_nodes,
            num_answers: answers.len(),
        })
    }
}

/// Loss and parameter gradients of one example.
pub fn loss_and_grads(model: &Retriever, ex: &Example, eps: f64) -> (f64, Vec<Mat>) {
    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape);
    let f = model.forward(&mut tape, &vars, &ex.inputs);
    let loss = tape.weighted_nll(f.p, ex.target.y_weighted.clone(), eps);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss);
    let out = vars
        .iter()
        .zip(model.params.mats())
        .map(|(&v, m)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
        .collect();
    (value, out)
}

pub fn example_loss(model: &Retriever, ex: &Example, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape);
    let f = model.forward(&mut tape, &vars, &ex.inputs);
    let loss = tape.weighted_nll(f.p, ex.target.y_weighted.clone(), eps);
    tape.scalar(loss)
}

fn example_recall(model: &Retriever, ex: &Example, k: usize) -> f64 {
    if ex.num_answers == 0 {
        return 0.0;
    }
    let pack = match model.score(&ex.inputs) {
        Ok(p) => p,
        Err(_) => return 0.0,
    };
    let mut covered = HashSet::new();
    for i in top_k_positions(&pack.s, &pack.triples, k) {
        covered.insert(ex.inputs.sub.heads[i]);
        covered.insert(ex.inputs.sub.tails[i]);
    }
    ex.answer_nodes.iter().filter(|n| covered.contains(n)).count() as f64 / ex.num_answers as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Retriever,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,dev_loss,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.dev_loss, r.lr);
    }
    s
}

/// Trains `model` in place on `train`, monitoring `dev` (or `train` when
/// `dev` is empty). Returns the parameters of the best monitored epoch.
pub fn train(mut model: Retriever, train: &[Example], dev: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no trainable samples".into()));
    }
    let monitor_set = if dev.is_empty() { train } else { dev };
    let mut opt = AdamW::new(&model.params, cfg);
    let mut best: Option<(f64, ParamSet, usize)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let steps_per_epoch = train.len();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut rng = rng_stream(cfg.seed, 0x5EED_0000 + epoch as u64);
        order.shuffle(&mut rng);
        let mut acc: Option<Vec<Mat>> = None;
        let mut in_batch = 0usize;
        let mut total = 0.0;
        let mut lr = lr_schedule(epoch as f64, cfg);
        for (i, &idx) in order.iter().enumerate() {
            let (loss, grads) = loss_and_grads(&model, &train[idx], cfg.eps);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: global_step, loss });
            }
            total += loss;
            match &mut acc {
                Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                None => acc = Some(grads),
            }
            in_batch += 1;
            if in_batch == cfg.accumulation_steps || i + 1 == order.len() {
                let mut g = acc.take().expect("accumulated gradients");
                let scale = 1.0 / in_batch as f64;
                g.iter_mut().for_each(|m| m.scale_assign(scale));
                lr = lr_schedule(epoch as f64 + i as f64 / steps_per_epoch as f64, cfg);
                opt.step(&mut model.params, &g, lr);
                if !model.params.is_finite() {
                    return Err(Error::Diverged { epoch, step: global_step, loss: f64::NAN });
                }
                in_batch = 0;
                global_step += 1;
            }
        }
        let dev_loss = monitor_set.iter().map(|ex| example_loss(&model, ex, cfg.eps)).sum::<f64>()
            / monitor_set.len() as f64;
        if !dev_loss.is_finite() {
            return Err(Error::Diverged { epoch, step: global_step, loss: dev_loss });
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            dev_loss,
            lr,
        };
        log::debug!("epoch {epoch}: train {:.5} dev {:.5} lr {:.2e}", record.train_loss, dev_loss, lr);
        history.push(record);

        let score = match cfg.monitor {
            Monitor::DevLoss => dev_loss,
            Monitor::DevRecall => {
                -monitor_set.iter().map(|ex| example_recall(&model, ex, cfg.monitor_k)).sum::<f64>()
                    / monitor_set.len() as f64
            }
        };
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, model.params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central differences (step `h`).
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(model: &Retriever, ex: &Example, eps: f64, h: f64) -> GradCheckReport {
    let (_, analytic) = loss_and_grads(model, ex, eps);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for i in 0..model.params.len() {
        for j in 0..model.params.get(i).len() {
            let orig = model.params.get(i).data[j];
            probe.params.get_mut(i).data[j] = orig + h;
            let up = example_loss(&probe, ex, eps);
            probe.params.get_mut(i).data[j] = orig - h;
            let down = example_loss(&probe, ex, eps);
            probe.params.get_mut(i).data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{}[{j}]", model.params.name(i));
            }
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_candidate_example() {
        let t = ListwiseTarget::new(vec![true, false], 10.0).unwrap();
        assert_eq!(&*t.y_weighted, &[1.0, 0.0]);
        let loss = listwise_loss(&[0.5, 0.5], &t, 1e-9).unwrap();
        assert!((loss - 0.693_147_178_56).abs() < 1e-9);
    }

    #[test]
    fn two_positive_target() {
        let t = ListwiseTarget::new(vec![true, true, false], 10.0).unwrap();
        assert_eq!(&*t.y_weighted, &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn empty_target_rejected() {
        assert!(ListwiseTarget::new(vec![false, false], 10.0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0.0, &cfg), 0.0);
        assert!((lr_schedule(5.0, &cfg) - 1e-3).abs() < 1e-15);
        assert!((lr_schedule(99.0, &cfg) - 1e-5).abs() < 1e-15);
        let mid = lr_schedule(2.5, &cfg);
        assert!((mid - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let mut p = ParamSet::new();
        p.push("w", Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&p, &cfg);
        let before = p.get(0).clone();
        opt.step(&mut p, &[Mat::zeros(1, 3)], 0.1);
        for (a, b) in p.get(0).data.iter().zip(&before.data) {
            assert_eq!(*a, b - 0.1 * 0.01 * b);
        }
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig { seed: 9, peak_lr: 2e-3, monitor: Monitor::DevRecall, ..Default::default() };
        cfg.warmup_epochs = 1.5;
        let mut back = TrainConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.apply_kv("nonsense = 1").is_err());
        assert!(back.apply_kv("max_epochs 3").is_err());
    }
}
