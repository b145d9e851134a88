//! Classification metrics and evaluation reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, Block, Checkpoint, Scalar};

fn check_pairs(y: &[usize], other: usize) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Empty("labels"));
    }
    if y.len() != other {
        return Err(Error::Shape {
            context: "labels vs predictions",
            left: vec![y.len()],
            right: vec![other],
        });
    }
    Ok(())
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(y: &[usize], y_hat: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_pairs(y, y_hat.len())?;
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (index, (&t, &p)) in y.iter().zip(y_hat).enumerate() {
        for label in [t, p] {
            if label >= n_classes {
                return Err(Error::LabelOutOfRange { index, label, n_classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(y: &[usize], y_hat: &[usize]) -> Result<f64> {
    check_pairs(y, y_hat.len())?;
    Ok(y.iter().zip(y_hat).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
}

/// Fraction of samples whose label ranks among the `k` best scores. Ranking
/// breaks ties toward the lower class index.
pub fn top_k_accuracy(y: &[usize], scores: &[Vec<f64>], k: usize) -> Result<f64> {
    check_pairs(y, scores.len())?;
    let hits = y
        .iter()
        .zip(scores)
        .filter(|(&label, row)| {
            let s = row[label];
            let rank = row.iter().enumerate().filter(|&(c, &v)| v > s || (v == s && c < label)).count();
            rank < k
        })
        .count();
    Ok(hits as f64 / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class precision/recall/F1 from a confusion matrix. Any 0/0 ratio is
/// reported as 0 and its name returned in the second list.
pub fn precision_recall_f1(confusion: &[Vec<usize>], class_names: &[String]) -> (Vec<ClassMetrics>, Vec<String>) {
    let n = confusion.len();
    let mut flagged = Vec::new();
    let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let ratio = |num: usize, den: usize, what: &str, c: usize, flagged: &mut Vec<String>| {
        if den == 0 {
            flagged.push(format!("{}:{what}", name(c)));
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let per_class = (0..n)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted, "precision", c, &mut flagged);
            let recall = ratio(tp, support, "recall", c, &mut flagged);
            let f1 = if precision + recall == 0.0 {
                flagged.push(format!("{}:f1", name(c)));
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                name: name(c),
                support,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    (per_class, flagged)
}

/// Cohen's kappa. When chance agreement is total, kappa is 1 for perfect
/// observed agreement and 0 otherwise.
pub fn cohens_kappa(confusion: &[Vec<usize>]) -> f64 {
    let n = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let p_o = (0..n).map(|c| confusion[c][c]).sum::<usize>() as f64 / total;
    let p_e = (0..n)
        .map(|c| {
            let row: usize = confusion[c].iter().sum();
            let col: usize = confusion.iter().map(|r| r[c]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (total * total);
    if (1.0 - p_e).abs() < f64::EPSILON {
        return if p_o == 1.0 { 1.0 } else { 0.0 };
    }
    (p_o - p_e) / (1.0 - p_e)
}

/// Average 1-based ranks; tied values share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Binary ROC AUC via the Mann-Whitney statistic (ties get half credit).
/// `None` when either side is empty.
pub fn binary_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    /// `None` when no class could be scored.
    pub macro_auc: Option<f64>,
    /// One-vs-rest AUC per class; `None` for classes that were skipped.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Macro one-vs-rest AUC over the classes present in `y` (that also have negatives).
pub fn auc_macro_ovr(y: &[usize], scores: &[Vec<f64>]) -> Result<AucSummary> {
    check_pairs(y, scores.len())?;
    let n = scores[0].len();
    if let Some(index) = scores.iter().position(|r| r.len() != n || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { index });
    }
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let pos: Vec<bool> = y.iter().map(|&l| l == c).collect();
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            binary_auc(&pos, &col)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let skipped = (0..n).filter(|&c| per_class[c].is_none()).collect();
    let macro_auc = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(AucSummary {
        macro_auc,
        per_class,
        skipped,
    })
}

/// Mean absolute and mean squared error on integer class codes.
pub fn mae_mse(y: &[usize], y_hat: &[usize]) -> Result<(f64, f64)> {
    check_pairs(y, y_hat.len())?;
    let n = y.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&a, &b) in y.iter().zip(y_hat) {
        let d = a as f64 - b as f64;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, sq / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub class_names: Vec<String>,
    pub accuracy: f64,
    pub top2: f64,
    pub top3: f64,
    pub kappa: f64,
    pub auc_macro: Option<f64>,
    pub auc_per_class: Vec<Option<f64>>,
    pub auc_skipped_classes: Vec<String>,
    /// Macro averages over classes.
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub mae: f64,
    pub mse: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Ratios that were 0/0 and therefore reported as 0.
    pub zero_division: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Report from per-sample class scores (e.g. softmax outputs); predictions are the argmax.
    pub fn from_scores(y: &[usize], scores: &[Vec<f64>], class_names: &[String]) -> Result<Self> {
        check_pairs(y, scores.len())?;
        let n = class_names.len();
        if let Some(row) = scores.iter().find(|r| r.len() != n) {
            return Err(Error::Shape {
                context: "score row vs class count",
                left: vec![row.len()],
                right: vec![n],
            });
        }
        let y_hat: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
        let confusion = confusion_matrix(y, &y_hat, n)?;
        let (per_class, zero_division) = precision_recall_f1(&confusion, class_names);
        let auc = auc_macro_ovr(y, scores)?;
        let (mae, mse) = mae_mse(y, &y_hat)?;
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
        Ok(Self {
            n_samples: y.len(),
            class_names: class_names.to_vec(),
            accuracy: accuracy(y, &y_hat)?,
            top2: top_k_accuracy(y, scores, 2)?,
            top3: top_k_accuracy(y, scores, 3)?,
            kappa: cohens_kappa(&confusion),
            auc_macro: auc.macro_auc,
            auc_per_class: auc.per_class,
            auc_skipped_classes: auc.skipped.iter().map(|&c| class_names[c].clone()).collect(),
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            mae,
            mse,
            per_class,
            zero_division,
            confusion,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Confusion matrix with a header row of predicted classes and one row per true class.
    pub fn write_confusion_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every learnable value of the tagged block (weights and biases), one per row
/// as `param,value`.
pub fn export_weight_distribution<T: Scalar, W: Write>(checkpoint: &Checkpoint<T>, tag: &str, out: W) -> Result<usize> {
    let block: Block = tag.parse()?;
    let values = checkpoint.block_values(block);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["param", "value"])?;
    for (name, v) in &values {
        w.write_record([name.to_string(), v.f64().to_string()])?;
    }
    w.flush()?;
    Ok(values.len())
}
