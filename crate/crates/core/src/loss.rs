//! Balanced softmax loss for long-tailed labels and its multi-task sum.

use crate::data::{LabelSet, Task};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax};
use crate::scalar::Scalar;

/// Per-task training label frequencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts {
    pub idh: [usize; 2],
    pub codel: [usize; 2],
    pub pathology: [usize; 3],
}

impl ClassCounts {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a LabelSet>) -> Self {
        let mut c = Self {
            idh: [0; 2],
            codel: [0; 2],
            pathology: [0; 3],
        };
        for l in labels {
            c.idh[l.class(Task::Idh)] += 1;
            c.codel[l.class(Task::Codel)] += 1;
            c.pathology[l.class(Task::Pathology)] += 1;
        }
        c
    }

    pub fn get(&self, task: Task) -> &[usize] {
        match task {
            Task::Idh => &self.idh,
            Task::Codel => &self.codel,
            Task::Pathology => &self.pathology,
        }
    }

    /// Log class frequencies for `task`. Zero counts are a configuration error
    /// unless `smoothing` adds one to every count.
    pub fn log_counts<S: Scalar>(&self, task: Task, smoothing: bool) -> Result<Vec<S>> {
        log_counts(self.get(task), smoothing).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", task.as_str())),
            other => other,
        })
    }
}

pub fn log_counts<S: Scalar>(counts: &[usize], smoothing: bool) -> Result<Vec<S>> {
    counts
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let n = n + smoothing as usize;
            if n == 0 {
                Err(Error::Config(format!(
                    "class {j} has no training samples; enable count smoothing"
                )))
            } else {
                Ok(S::of((n as f64).ln()))
            }
        })
        .collect()
}

/// `−log(n_y·e^{z_y} / Σ_j n_j·e^{z_j})` and its gradient with respect to `z`,
/// given `log_n = log n_j`.
pub fn balanced_softmax_loss<S: Scalar>(logits: &[S], label: usize, log_n: &[S]) -> Result<(S, Vec<S>)> {
    if logits.len() != log_n.len() || label >= logits.len() {
        return Err(Error::shape(
            "balanced softmax",
            format!("{} logits and a label below that", log_n.len()),
            format!("{} logits, label {label}", logits.len()),
        ));
    }
    let shifted: Vec<S> = logits.iter().zip(log_n).map(|(&z, &l)| z + l).collect();
    let loss = -log_softmax(&shifted)[label];
    let mut grad = softmax(&shifted);
    grad[label] -= S::one();
    Ok((loss, grad))
}

/// Per-task logits for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLogits<'a, S> {
    pub idh: &'a [S],
    pub codel: &'a [S],
    pub pathology: &'a [S],
}

impl<S> TaskLogits<'_, S> {
    pub fn get(&self, task: Task) -> &[S] {
        match task {
            Task::Idh => self.idh,
            Task::Codel => self.codel,
            Task::Pathology => self.pathology,
        }
    }
}

/// Precomputed log counts for all three tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct LogCounts<S> {
    pub idh: Vec<S>,
    pub codel: Vec<S>,
    pub pathology: Vec<S>,
}

impl<S: Scalar> LogCounts<S> {
    pub fn new(counts: &ClassCounts, smoothing: bool) -> Result<Self> {
        Ok(Self {
            idh: counts.log_counts(Task::Idh, smoothing)?,
            codel: counts.log_counts(Task::Codel, smoothing)?,
            pathology: counts.log_counts(Task::Pathology, smoothing)?,
        })
    }

    pub fn get(&self, task: Task) -> &[S] {
        match task {
            Task::Idh => &self.idh,
            Task::Codel => &self.codel,
            Task::Pathology => &self.pathology,
        }
    }
}

/// Unweighted sum of the three task losses, with per-task logit gradients in
/// [`Task::ALL`] order.
pub fn total_loss<S: Scalar>(
    logits: &TaskLogits<'_, S>,
    labels: &LabelSet,
    log_n: &LogCounts<S>,
) -> Result<(S, [Vec<S>; 3])> {
    let mut total = S::zero();
    let mut grads: [Vec<S>; 3] = Default::default();
    for (k, task) in Task::ALL.into_iter().enumerate() {
        let (l, g) = balanced_softmax_loss(logits.get(task), labels.class(task), log_n.get(task))?;
        total += l;
        grads[k] = g;
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Pathology;

    #[test]
    fn worked_values() {
        let ln = log_counts::<f64>(&[3, 1], false).unwrap();
        let (l, _) = balanced_softmax_loss(&[0.0, 0.0], 1, &ln).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let ln = log_counts::<f64>(&[1, 1], false).unwrap();
        let (l, _) = balanced_softmax_loss(&[0.0, 0.0], 0, &ln).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_count_needs_smoothing() {
        assert!(matches!(log_counts::<f64>(&[0, 4], false), Err(Error::Config(_))));
        let ln = log_counts::<f64>(&[0, 4], true).unwrap();
        assert_eq!(ln[0], 0.0);
        assert!((ln[1] - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_sum_of_logs() {
        let counts = ClassCounts {
            idh: [5, 5],
            codel: [5, 5],
            pathology: [5, 5, 5],
        };
        let ln = LogCounts::<f64>::new(&counts, false).unwrap();
        let logits = TaskLogits {
            idh: &[0.0, 0.0],
            codel: &[0.0, 0.0],
            pathology: &[0.0, 0.0, 0.0],
        };
        let (l, grads) = total_loss(&logits, &LabelSet::from_pathology(Pathology::Astrocytoma), &ln).unwrap();
        assert!((l - (2f64.ln() * 2.0 + 3f64.ln())).abs() < 1e-14);
        for g in grads {
            assert!(g.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn bad_label_is_shape_error() {
        assert!(balanced_softmax_loss(&[0.0, 0.0], 2, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn counts_from_labels() {
        let labels = [
            LabelSet::from_pathology(Pathology::Oligodendroglioma),
            LabelSet::from_pathology(Pathology::Glioblastoma),
            LabelSet::from_pathology(Pathology::Glioblastoma),
        ];
        let c = ClassCounts::from_labels(&labels);
        assert_eq!(c.idh, [2, 1]);
        assert_eq!(c.codel, [2, 1]);
        assert_eq!(c.pathology, [1, 0, 2]);
    }
}
