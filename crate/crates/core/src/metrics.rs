//! Confusion-matrix metrics: accuracy plus per-class, weighted and macro
//! precision / recall / F1.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{truth} true labels but {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("no samples to score")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted: Averages,
    pub macro_avg: Averages,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * (recall * precision) / (recall + precision)
    }
}

pub fn compute_metrics(
    truth: &[usize],
    predicted: &[usize],
    classes: usize,
) -> Result<MetricsReport, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&label) = truth.iter().chain(predicted).find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }

    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let total = truth.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();

    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted_c);
            let recall = ratio(tp, support);
            ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support,
            }
        })
        .collect();

    let weighted_mean = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / total as f64
    };
    let macro_mean =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;

    Ok(MetricsReport {
        accuracy: ratio(correct, total),
        weighted: Averages {
            precision: weighted_mean(|m| m.precision),
            recall: weighted_mean(|m| m.recall),
            f1: weighted_mean(|m| m.f1),
        },
        macro_avg: Averages {
            precision: macro_mean(|m| m.precision),
            recall: macro_mean(|m| m.recall),
            f1: macro_mean(|m| m.f1),
        },
        confusion,
        per_class,
    })
}

impl MetricsReport {
    pub fn sample_count(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// `key<TAB>value` lines, preceded by a `---` separator line.
    pub fn machine_block(&self) -> String {
        let mut out = String::from("---\n");
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('\t');
            out.push_str(&v);
            out.push('\n');
        };
        kv("samples", self.sample_count().to_string());
        kv("accuracy", format!("{:.6}", self.accuracy));
        kv(
            "weighted_precision",
            format!("{:.6}", self.weighted.precision),
        );
        kv("weighted_recall", format!("{:.6}", self.weighted.recall));
        kv("weighted_f1", format!("{:.6}", self.weighted.f1));
        kv(
            "macro_precision",
            format!("{:.6}", self.macro_avg.precision),
        );
        kv("macro_recall", format!("{:.6}", self.macro_avg.recall));
        kv("macro_f1", format!("{:.6}", self.macro_avg.f1));
        out
    }

    /// Human-readable table; `names` labels the classes when given.
    pub fn table(&self, names: Option<&[String]>) -> String {
        let label = |c: usize| {
            names
                .and_then(|n| n.get(c))
                .cloned()
                .unwrap_or_else(|| c.to_string())
        };
        let width = (0..self.per_class.len())
            .map(|c| label(c).len())
            .chain(["weighted avg".len()])
            .max()
            .unwrap_or(12);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}\n",
            "class", "precision", "recall", "f1", "support"
        );
        for (c, m) in self.per_class.iter().enumerate() {
            out += &format!(
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}\n",
                label(c),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        let n = self.sample_count();
        for (name, avg) in [
            ("macro avg", self.macro_avg),
            ("weighted avg", self.weighted),
        ] {
            out += &format!(
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}\n",
                name, avg.precision, avg.recall, avg.f1, n
            );
        }
        out += &format!("accuracy {:.4} ({n} samples)\n", self.accuracy);
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table(None))
    }
}
