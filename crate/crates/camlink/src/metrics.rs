//! Evaluation metrics for predicted linksets.
//!
//! Seven quantities make up a report: elementwise accuracy, pooled
//! prediction variance, connected components excluding isolated nodes,
//! isolated-node fraction, saturated-node fraction (degree above the cap),
//! link validity (fraction of predicted edges within range), and the ratio
//! of predicted to labeled link counts.
//!
//! Accuracy and variance are measured over the strict upper triangle only;
//! the diagonal and mirror entries carry no information. Variance pools all
//! predictions across the batch. Every metric is invariant under node
//! relabeling.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{connected_components, AdjMatrix};
use crate::solver::{euclid, Instance};
use crate::tensor::DTensor;

/// The Table-style metric suite for one batch of predictions.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub variance: f64,
    pub cc: f64,
    pub isolated_pct: f64,
    pub saturated_pct: f64,
    pub link_validity_pct: f64,
    pub link_count_ratio: f64,
}

/// Per-instance metric breakdown, one line per instance in the breakdown file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceBreakdown {
    pub index: u64,
    pub accuracy: f64,
    pub cc: f64,
    pub isolated: usize,
    pub saturated: usize,
    pub predicted_edges: usize,
    pub label_edges: usize,
    pub valid_edges: usize,
}

/// Fraction of strict-upper-triangle entries where the thresholded
/// prediction agrees with the label.
pub fn accuracy(pred_prob: &DTensor, label: &AdjMatrix, threshold: f64) -> Result<f64> {
    let n = label.n();
    check_pred_shape(pred_prob, n)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, j, bit) in label.iter_upper() {
        if (pred_prob.at2(i, j) >= threshold) == bit {
            correct += 1;
        }
        total += 1;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Population variance of all strict-upper-triangle predicted probabilities,
/// pooled over the batch.
pub fn prediction_variance(pred_probs: &[DTensor]) -> Result<f64> {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    for p in pred_probs {
        let (n, m) = p.dims2()?;
        if n != m {
            return Err(Error::Validation(format!(
                "prediction matrix must be square, got {n}x{m}"
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let v = p.at2(i, j);
                sum += v;
                sq += v * v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    let mean = sum / count as f64;
    // The subtraction can land a rounding epsilon below zero.
    Ok((sq / count as f64 - mean * mean).max(0.0))
}

/// Component count over the subgraph induced by nodes of degree >= 1.
/// An empty graph scores 0.
pub fn cc_excluding_isolated(pred: &AdjMatrix) -> Result<f64> {
    let (count, _) = connected_components(pred)?;
    let isolated = (0..pred.n()).filter(|&i| pred.degree(i) == 0).count();
    Ok((count - isolated) as f64)
}

/// Fraction of nodes with no predicted edge.
pub fn isolated_pct(pred: &AdjMatrix) -> f64 {
    let n = pred.n();
    (0..n).filter(|&i| pred.degree(i) == 0).count() as f64 / n.max(1) as f64
}

/// Fraction of nodes whose predicted degree exceeds the cap k.
pub fn saturated_pct(pred: &AdjMatrix, k: usize) -> f64 {
    let n = pred.n();
    (0..n).filter(|&i| pred.degree(i) > k).count() as f64 / n.max(1) as f64
}

/// Fraction of predicted edges within range d. Defined as 1.0 when nothing
/// is predicted (vacuous validity).
pub fn link_validity(pred: &AdjMatrix, coords: &[[f64; 2]], d: f64) -> f64 {
    let mut valid = 0usize;
    let mut total = 0usize;
    for (i, j, bit) in pred.iter_upper() {
        if bit {
            total += 1;
            if euclid(coords[i], coords[j]) <= d {
                valid += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        valid as f64 / total as f64
    }
}

/// Mean predicted edge count over mean labeled edge count.
pub fn link_count_ratio(preds: &[AdjMatrix], labels: &[AdjMatrix]) -> f64 {
    let pred_mean: f64 =
        preds.iter().map(|p| p.edge_count() as f64).sum::<f64>() / preds.len().max(1) as f64;
    let label_mean: f64 =
        labels.iter().map(|l| l.edge_count() as f64).sum::<f64>() / labels.len().max(1) as f64;
    if label_mean == 0.0 {
        if pred_mean == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        pred_mean / label_mean
    }
}

fn check_pred_shape(pred: &DTensor, n: usize) -> Result<()> {
    if pred.shape() != [n, n] {
        return Err(Error::Validation(format!(
            "prediction shape {:?} does not match n = {n}",
            pred.shape()
        )));
    }
    Ok(())
}

/// Thresholds a probability matrix into a symmetric binary adjacency.
pub fn binarize(pred_prob: &DTensor, threshold: f64) -> Result<AdjMatrix> {
    let (n, m) = pred_prob.dims2()?;
    if n != m {
        return Err(Error::Validation(format!(
            "prediction matrix must be square, got {n}x{m}"
        )));
    }
    let mut adj = AdjMatrix::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let p = 0.5 * (pred_prob.at2(i, j) + pred_prob.at2(j, i));
            adj.set_sym(i, j, p >= threshold);
        }
    }
    Ok(adj)
}

/// Runs the whole metric suite for a batch of probability predictions
/// against their instances.
pub fn evaluate(
    pred_probs: &[DTensor],
    instances: &[Instance],
    indices: &[u64],
    threshold: f64,
) -> Result<(MetricsReport, Vec<InstanceBreakdown>)> {
    if pred_probs.len() != instances.len() || indices.len() != instances.len() {
        return Err(Error::Validation(format!(
            "evaluate got {} predictions, {} instances, {} indices",
            pred_probs.len(),
            instances.len(),
            indices.len()
        )));
    }
    if instances.is_empty() {
        return Err(Error::Validation("evaluate needs at least one instance".into()));
    }
    let mut breakdowns = Vec::with_capacity(instances.len());
    let mut binary = Vec::with_capacity(instances.len());
    let mut labels = Vec::with_capacity(instances.len());
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut cc_sum = 0.0;
    let mut isolated_sum = 0.0;
    let mut saturated_sum = 0.0;
    let mut valid_edges = 0usize;
    let mut predicted_edges = 0usize;
    for ((pred, inst), &index) in pred_probs.iter().zip(instances).zip(indices) {
        let n = inst.n();
        check_pred_shape(pred, n)?;
        let adj = binarize(pred, threshold)?;
        let mut inst_correct = 0usize;
        for (i, j, bit) in inst.label.iter_upper() {
            if (pred.at2(i, j) >= threshold) == bit {
                inst_correct += 1;
            }
            total += 1;
        }
        correct += inst_correct;
        let pairs = (n * (n - 1) / 2).max(1);
        let inst_acc = inst_correct as f64 / pairs as f64;
        let cc = cc_excluding_isolated(&adj)?;
        cc_sum += cc;
        isolated_sum += isolated_pct(&adj);
        saturated_sum += saturated_pct(&adj, inst.k);
        let mut inst_valid = 0usize;
        for (i, j, bit) in adj.iter_upper() {
            if bit {
                predicted_edges += 1;
                if euclid(inst.coords[i], inst.coords[j]) <= inst.d {
                    valid_edges += 1;
                    inst_valid += 1;
                }
            }
        }
        breakdowns.push(InstanceBreakdown {
            index,
            accuracy: inst_acc,
            cc,
            isolated: (0..n).filter(|&i| adj.degree(i) == 0).count(),
            saturated: (0..n).filter(|&i| adj.degree(i) > inst.k).count(),
            predicted_edges: adj.edge_count(),
            label_edges: inst.label.edge_count(),
            valid_edges: inst_valid,
        });
        binary.push(adj);
        labels.push(inst.label.clone());
    }
    let count = instances.len() as f64;
    let report = MetricsReport {
        accuracy: correct as f64 / total.max(1) as f64,
        variance: prediction_variance(pred_probs)?,
        cc: cc_sum / count,
        isolated_pct: isolated_sum / count,
        saturated_pct: saturated_sum / count,
        link_validity_pct: if predicted_edges == 0 {
            1.0
        } else {
            valid_edges as f64 / predicted_edges as f64
        },
        link_count_ratio: link_count_ratio(&binary, &labels),
    };
    Ok((report, breakdowns))
}

impl MetricsReport {
    /// Flat key-value text record; keys match the field names exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "accuracy {:.17e}", self.accuracy).unwrap();
        writeln!(out, "variance {:.17e}", self.variance).unwrap();
        writeln!(out, "cc {:.17e}", self.cc).unwrap();
        writeln!(out, "isolated_pct {:.17e}", self.isolated_pct).unwrap();
        writeln!(out, "saturated_pct {:.17e}", self.saturated_pct).unwrap();
        writeln!(out, "link_validity_pct {:.17e}", self.link_validity_pct).unwrap();
        writeln!(out, "link_count_ratio {:.17e}", self.link_count_ratio).unwrap();
        out
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<MetricsReport> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("bad report line: {line}")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("bad report value in '{line}': {e}")))?;
            fields.insert(key.to_string(), value);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("report missing key {k}")))
        };
        Ok(MetricsReport {
            accuracy: get("accuracy")?,
            variance: get("variance")?,
            cc: get("cc")?,
            isolated_pct: get("isolated_pct")?,
            saturated_pct: get("saturated_pct")?,
            link_validity_pct: get("link_validity_pct")?,
            link_count_ratio: get("link_count_ratio")?,
        })
    }
}
