//! Ranking and classification metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::graph::GlobalGraph;
use crate::model::{Model, NextBehavior};
use crate::par::Execution;
use crate::sessions::SessionExample;

pub const DEFAULT_K: usize = 20;

/// 1-based rank of `target`: one plus the number of items scored strictly
/// higher, plus equal-scored items with a smaller index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

/// `(hit, reciprocal rank)` at cutoff `k`; the reciprocal rank is 0 beyond `k`.
pub fn rank_metrics(scores: &[f64], target: usize, k: usize) -> (bool, f64) {
    from_rank(rank_of(scores, target), k)
}

fn from_rank(rank: usize, k: usize) -> (bool, f64) {
    if rank <= k {
        (true, 1.0 / rank as f64)
    } else {
        (false, 0.0)
    }
}

/// Per-class recall; `None` for classes without targets.
pub fn behavior_recall(predictions: &[usize], targets: &[usize], n_classes: usize) -> Result<Vec<Option<f64>>> {
    if predictions.len() != targets.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut hits = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        if t >= n_classes {
            return Err(Error::Invalid(format!("target class {t} out of {n_classes}")));
        }
        total[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&total)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub behavior: String,
    pub n_examples: usize,
    pub hr_at_k: Option<f64>,
    pub mrr_at_k: Option<f64>,
    pub hr_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub behavior: String,
    pub n_targets: usize,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub k: usize,
    pub n_examples: usize,
    pub overall: SliceMetrics,
    /// One slice per target behavior, in behavior-index order.
    pub per_behavior: Vec<SliceMetrics>,
    /// Next-behavior recall, task 2 only.
    pub behavior_recall: Option<Vec<RecallEntry>>,
}

/// What evaluation records per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub rank: usize,
    pub target_behavior: usize,
    pub predicted_behavior: Option<usize>,
}

fn slice(name: &str, ranks: impl Iterator<Item = usize>, k: usize) -> SliceMetrics {
    let (mut n, mut hits, mut rr, mut top1) = (0usize, 0usize, 0.0, 0usize);
    for rank in ranks {
        let (hit, r) = from_rank(rank, k);
        n += 1;
        hits += hit as usize;
        rr += r;
        top1 += (rank == 1) as usize;
    }
    let frac = |x: f64| (n > 0).then(|| x / n as f64);
    SliceMetrics {
        behavior: name.to_string(),
        n_examples: n,
        hr_at_k: frac(hits as f64),
        mrr_at_k: frac(rr),
        hr_at_1: frac(top1 as f64),
    }
}

impl MetricsReport {
    pub fn from_outcomes(outcomes: &[Outcome], behaviors: &[String], k: usize, task: Task) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Invalid("empty evaluation set".into()));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let overall = slice("all", outcomes.iter().map(|o| o.rank), k);
        let per_behavior = behaviors
            .iter()
            .enumerate()
            .map(|(b, name)| slice(name, outcomes.iter().filter(|o| o.target_behavior == b).map(|o| o.rank), k))
            .collect();
        let behavior_recall = if outcomes.iter().all(|o| o.predicted_behavior.is_some()) {
            let preds: Vec<usize> = outcomes.iter().filter_map(|o| o.predicted_behavior).collect();
            let targets: Vec<usize> = outcomes.iter().map(|o| o.target_behavior).collect();
            let recall = behavior_recall(&preds, &targets, behaviors.len())?;
            Some(
                behaviors
                    .iter()
                    .zip(recall)
                    .enumerate()
                    .map(|(b, (name, recall))| RecallEntry {
                        behavior: name.clone(),
                        n_targets: targets.iter().filter(|&&t| t == b).count(),
                        recall,
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(MetricsReport { task, k, n_examples: outcomes.len(), overall, per_behavior, behavior_recall })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn slice(&self, behavior: &str) -> Option<&SliceMetrics> {
        self.per_behavior.iter().find(|s| s.behavior == behavior)
    }

    pub fn recall_of(&self, behavior: &str) -> Option<f64> {
        self.behavior_recall.as_ref()?.iter().find(|r| r.behavior == behavior)?.recall
    }

    fn rows(&self) -> impl Iterator<Item = &SliceMetrics> {
        self.per_behavior.iter().chain(std::iter::once(&self.overall))
    }

    /// Aligned plain-text table, one row per behavior plus `all`.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let head = vec![
            "behavior".to_string(),
            "n".to_string(),
            format!("HR@{}", self.k),
            format!("MRR@{}", self.k),
            "HR@1".to_string(),
        ];
        let mut rows = vec![head];
        for s in self.rows() {
            rows.push(vec![
                s.behavior.clone(),
                s.n_examples.to_string(),
                fmt(s.hr_at_k),
                fmt(s.mrr_at_k),
                fmt(s.hr_at_1),
            ]);
        }
        let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let mut line = format!("{:<w$}", r[0], w = widths[0]);
            for c in 1..5 {
                let _ = write!(line, "  {:>w$}", r[c], w = widths[c]);
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        if let Some(recall) = &self.behavior_recall {
            out.push_str("\nnext-behavior recall\n");
            let w = recall.iter().map(|r| r.behavior.len()).max().unwrap_or(0);
            for r in recall {
                let _ = writeln!(out, "{:<w$}  {:>6}  (n={})", r.behavior, fmt(r.recall), r.n_targets);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut out = String::from("behavior,n_examples,hr_at_k,mrr_at_k,hr_at_1,recall\n");
        for s in self.rows() {
            let recall = self
                .behavior_recall
                .as_ref()
                .and_then(|rs| rs.iter().find(|r| r.behavior == s.behavior))
                .and_then(|r| r.recall);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.behavior,
                s.n_examples,
                f(s.hr_at_k),
                f(s.mrr_at_k),
                f(s.hr_at_1),
                f(recall)
            );
        }
        out
    }
}

/// Evaluates `model` on `examples`. Task 1 feeds the ground-truth next
/// behavior; task 2 feeds the predicted one and reports its recall.
pub fn evaluate(
    model: &Model,
    graph: &GlobalGraph,
    examples: &[SessionExample],
    task: Task,
    k: usize,
    exec: Execution,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let hg = model.global_representations(graph)?;
    let outcomes = exec
        .map(examples, |ex| -> Result<Outcome> {
            let next = match task {
                Task::Task1 => NextBehavior::Given(ex.target_behavior),
                Task::Task2 => NextBehavior::Predicted,
            };
            let p = model.predict(graph, &hg, &ex.prefix, next)?;
            if ex.target_item >= p.item_logits.len() {
                return Err(Error::Invalid(format!("target item {} out of range", ex.target_item)));
            }
            Ok(Outcome {
                rank: rank_of(&p.item_logits, ex.target_item),
                target_behavior: ex.target_behavior,
                predicted_behavior: (task == Task::Task2).then_some(p.chosen_behavior),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_outcomes(&outcomes, graph.behaviors(), k, task)
}

/// Scores every example with one fixed score vector, e.g. item popularity.
pub fn evaluate_fixed_scores(
    scores: &[f64],
    examples: &[SessionExample],
    behaviors: &[String],
    k: usize,
) -> Result<MetricsReport> {
    let outcomes: Vec<Outcome> = examples
        .iter()
        .map(|ex| {
            if ex.target_item >= scores.len() {
                return Err(Error::Invalid(format!("target item {} out of range", ex.target_item)));
            }
            Ok(Outcome { rank: rank_of(scores, ex.target_item), target_behavior: ex.target_behavior, predicted_behavior: None })
        })
        .collect::<Result<_>>()?;
    MetricsReport::from_outcomes(&outcomes, behaviors, k, Task::Task1)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Full sort with the index tie-break, then position lookup.
    fn sort_oracle(scores: &[f64], target: usize, k: usize) -> (bool, f64) {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let rank = order.iter().position(|&i| i == target).unwrap() + 1;
        if rank <= k { (true, 1.0 / rank as f64) } else { (false, 0.0) }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_metrics(&[0.1, 0.9, 0.3], 1, 20), (true, 1.0));
        let mut s: Vec<f64> = (0..30).map(|i| 100.0 - i as f64).collect();
        assert_eq!(rank_metrics(&s, 2, 20), (true, 1.0 / 3.0));
        assert_eq!(rank_metrics(&s, 20, 20), (false, 0.0));
        s[5] = s[4];
        assert_eq!(rank_of(&s, 5), 6);
        assert_eq!(rank_of(&s, 4), 5);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(behavior_recall(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), [Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(behavior_recall(&[0, 0, 0, 0], &[0, 1, 0, 1], 3).unwrap(), [Some(1.0), Some(0.0), None]);
        assert!(behavior_recall(&[0], &[0, 1], 2).is_err());
    }

    fn names() -> Vec<String> {
        vec!["click".into(), "purchase".into()]
    }

    #[test]
    fn report_slices_and_layouts() {
        let o = |rank, target_behavior| Outcome { rank, target_behavior, predicted_behavior: Some(0) };
        let outcomes = [o(1, 0), o(3, 0), o(25, 1), o(2, 0)];
        let r = MetricsReport::from_outcomes(&outcomes, &names(), 20, Task::Task2).unwrap();
        assert_eq!(r.overall.n_examples, 4);
        assert_eq!(r.overall.hr_at_k, Some(0.75));
        assert_eq!(r.slice("purchase").unwrap().hr_at_k, Some(0.0));
        assert_eq!(r.slice("click").unwrap().hr_at_1, Some(1.0 / 3.0));
        assert_eq!(r.recall_of("click"), Some(1.0));
        assert_eq!(r.recall_of("purchase"), Some(0.0));
        let table = r.to_table();
        assert!(table.lines().next().unwrap().starts_with("behavior"));
        assert!(table.contains("HR@20") && table.contains("all"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn absent_slices_and_empty_sets() {
        let o = Outcome { rank: 1, target_behavior: 0, predicted_behavior: None };
        let r = MetricsReport::from_outcomes(&[o], &names(), 20, Task::Task1).unwrap();
        assert_eq!(r.slice("purchase").unwrap().hr_at_k, None);
        assert!(r.behavior_recall.is_none());
        assert!(MetricsReport::from_outcomes(&[], &names(), 20, Task::Task1).is_err());
    }

    #[test]
    fn popularity_baseline() {
        let ex = |t, b| SessionExample { prefix: vec![(0, 0)], target_item: t, target_behavior: b };
        let scores = [5.0, 9.0, 1.0];
        let r = evaluate_fixed_scores(&scores, &[ex(1, 0), ex(2, 1)], &names(), 2).unwrap();
        assert_eq!(r.slice("click").unwrap().mrr_at_k, Some(1.0));
        assert_eq!(r.slice("purchase").unwrap().hr_at_k, Some(0.0));
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(
            scores in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0, 2.0, 3.5]), 1..50),
            t in any::<prop::sample::Index>(),
            k in 1usize..60,
        ) {
            let target = t.index(scores.len());
            let got = rank_metrics(&scores, target, k);
            prop_assert_eq!(got, sort_oracle(&scores, target, k));
            prop_assert!(got.1 <= got.0 as u8 as f64);
        }

        #[test]
        fn slices_pool_to_overall(ranks in prop::collection::vec((1usize..40, 0usize..3), 1..80)) {
            let outcomes: Vec<Outcome> = ranks
                .iter()
                .map(|&(rank, b)| Outcome { rank, target_behavior: b, predicted_behavior: None })
                .collect();
            let behaviors: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
            let r = MetricsReport::from_outcomes(&outcomes, &behaviors, 20, Task::Task1).unwrap();
            let n: usize = r.per_behavior.iter().map(|s| s.n_examples).sum();
            prop_assert_eq!(n, r.n_examples);
            let pooled: f64 = r.per_behavior.iter().filter_map(|s| s.hr_at_k.map(|h| h * s.n_examples as f64)).sum();
            prop_assert!((pooled / n as f64 - r.overall.hr_at_k.unwrap()).abs() < 1e-12);
            for s in r.per_behavior.iter().chain([&r.overall]) {
                if let (Some(h), Some(m)) = (s.hr_at_k, s.mrr_at_k) {
                    prop_assert!(0.0 <= m && m <= h && h <= 1.0);
                }
            }
        }
    }
}
