//! Classification metrics: ACC, ROC AUC, sensitivity, specificity and
//! confusion matrices, plus their CSV serializations.

use std::cmp::Ordering;
use std::io::Write;

use crate::data::Task;
use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Mann-Whitney U via midranks.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve points for thresholds at each distinct score (descending),
/// starting from `(0, 0)` at `+∞`.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<RocPoint> {
    let pos = labels.iter().filter(|&&l| l).count().max(1) as f64;
    let neg = labels.iter().filter(|&&l| !l).count().max(1) as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp / neg,
            tpr: tp / pos,
        });
    }
    points
}

/// `k × k` counts indexed `[truth][prediction]`.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task: Task,
    pub acc: f64,
    pub auc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub n: usize,
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics for one task from per-sample class probabilities.
///
/// Binary tasks score AUC on the class-1 probability and take class 1 as
/// positive. With more classes, AUC is the macro one-vs-rest mean, SEN is the
/// micro-averaged recall (equal to ACC) and SPE the macro mean of per-class
/// specificities.
pub fn task_metrics(task: Task, probs: &[Vec<f64>], truth: &[usize]) -> Result<TaskMetrics> {
    let k = task.num_classes();
    if probs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if probs.len() != truth.len() || probs.iter().any(|p| p.len() != k) || truth.iter().any(|&t| t >= k) {
        return Err(Error::shape("task metrics", format!("{} x {k} probabilities", truth.len()), probs.len()));
    }
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let confusion = confusion_matrix(truth, &pred, k);
    let n = truth.len();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let acc = correct as f64 / n as f64;
    let one_vs_rest = |c: usize| {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        roc_auc(&scores, &labels)
    };
    let specificity = |c: usize| {
        let negatives: usize = (0..k).filter(|&t| t != c).map(|t| confusion[t].iter().sum::<usize>()).sum();
        let false_pos: usize = (0..k).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        ratio(negatives - false_pos, negatives)
    };
    let (auc, sen, spe) = if k == 2 {
        let tp = confusion[1][1];
        (one_vs_rest(1), ratio(tp, confusion[1][0] + tp), specificity(1))
    } else {
        (mean_defined((0..k).map(one_vs_rest)), Some(acc), mean_defined((0..k).map(specificity)))
    };
    Ok(TaskMetrics {
        task,
        acc,
        auc,
        sen,
        spe,
        n,
        confusion,
    })
}

/// Metrics for all three tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
}

impl MetricsReport {
    pub fn get(&self, task: Task) -> &TaskMetrics {
        self.tasks.iter().find(|t| t.task == task).expect("all tasks present")
    }

    /// Mean AUC over tasks with a defined AUC.
    pub fn mean_auc(&self) -> Option<f64> {
        mean_defined(self.tasks.iter().map(|t| t.auc))
    }
}

/// Per-task evaluation input: class probabilities and true classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub task: Task,
    pub probs: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
}

pub fn compute_metrics(scores: &[TaskScores]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        tasks: scores
            .iter()
            .map(|s| task_metrics(s.task, &s.probs, &s.truth))
            .collect::<Result<_>>()?,
    })
}

/// Arithmetic mean over reports of each metric, confusion matrices summed.
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or(Error::Empty("reports to average"))?;
    let tasks = first
        .tasks
        .iter()
        .map(|t0| {
            let per: Vec<&TaskMetrics> = reports.iter().map(|r| r.get(t0.task)).collect();
            let k = t0.confusion.len();
            let mut confusion = vec![vec![0; k]; k];
            for t in &per {
                for (row, src) in confusion.iter_mut().zip(&t.confusion) {
                    for (a, b) in row.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            TaskMetrics {
                task: t0.task,
                acc: per.iter().map(|t| t.acc).sum::<f64>() / per.len() as f64,
                auc: mean_defined(per.iter().map(|t| t.auc)),
                sen: mean_defined(per.iter().map(|t| t.sen)),
                spe: mean_defined(per.iter().map(|t| t.spe)),
                n: per.iter().map(|t| t.n).sum::<usize>() / per.len(),
                confusion,
            }
        })
        .collect();
    Ok(MetricsReport { tasks })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub const METRICS_HEADER: &str = "split,task,acc,auc,spe,sen,n";

/// One CSV row per (split, task).
pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[(String, &MetricsReport)]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for (split, report) in rows {
        for t in &report.tasks {
            writeln!(out, "{}", metrics_row(split, t))?;
        }
    }
    Ok(())
}

pub fn metrics_row(split: &str, t: &TaskMetrics) -> String {
    format!(
        "{split},{},{:.6},{},{},{},{}",
        t.task.as_str(),
        t.acc,
        fmt_opt(t.auc),
        fmt_opt(t.spe),
        fmt_opt(t.sen),
        t.n
    )
}

/// ROC points for every task; multi-class tasks emit one curve per class,
/// named `task:class`.
pub fn write_roc_csv<W: Write>(out: &mut W, scores: &[TaskScores]) -> Result<()> {
    writeln!(out, "task,threshold,fpr,tpr")?;
    for s in scores {
        let k = s.task.num_classes();
        let classes: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
        for c in classes {
            let name = if k == 2 {
                s.task.as_str().to_string()
            } else {
                format!("{}:{c}", s.task.as_str())
            };
            let sc: Vec<f64> = s.probs.iter().map(|p| p[c]).collect();
            let lb: Vec<bool> = s.truth.iter().map(|&t| t == c).collect();
            for p in roc_points(&sc, &lb) {
                writeln!(out, "{name},{:.6},{:.6},{:.6}", p.threshold, p.fpr, p.tpr)?;
            }
        }
    }
    Ok(())
}

/// One block per task: a `# split task` line, then `truth,pred_0,...` rows.
pub fn write_confusion_csv<W: Write>(out: &mut W, rows: &[(String, &MetricsReport)]) -> Result<()> {
    for (split, report) in rows {
        for t in &report.tasks {
            writeln!(out, "# {split} {}", t.task.as_str())?;
            let header: Vec<String> = (0..t.confusion.len()).map(|c| format!("pred_{c}")).collect();
            writeln!(out, "truth,{}", header.join(","))?;
            for (c, row) in t.confusion.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{c},{}", cells.join(","))?;
            }
        }
    }
    Ok(())
}
