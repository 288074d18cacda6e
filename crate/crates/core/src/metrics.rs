//! Ranking and threshold metrics over pooled object scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Input(format!("score {s} is not a number")));
    }
    Ok(())
}

/// Indices ordered by descending score; equal scores keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Rank-based average precision: the mean, over positives, of the precision
/// of the ranking cut at that positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Undefined("average precision without positive labels".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Confusion counts at `score >= threshold`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        check(scores, labels)?;
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    Ok(Confusion::at(scores, labels, threshold)?.f1())
}

pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Undefined("accuracy of an empty set".into()));
    }
    Ok(Confusion::at(scores, labels, threshold)?.accuracy())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall at every distinct score, highest threshold first,
/// so recall is non-decreasing along the curve.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let order = ranking(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).map_or(true, |&j| scores[j] != scores[i]);
        if last_of_tie {
            points.push(PrPoint {
                threshold: scores[i],
                recall: ratio(tp, positives),
                precision: ratio(tp, tp + fp),
            });
        }
    }
    Ok(points)
}
