//! Macro-averaged P/R/F1, precision-recall curves and threshold sweeps.

use serde::{Deserialize, Serialize};

use crate::data::RelationSchema;
use crate::objective;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub relation: String,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro-averaged over non-NA classes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pr_area: f64,
    pub per_class: Vec<ClassReport>,
    /// Decoding threshold, when one was swept.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip)]
    pub pr_points: Vec<PrPoint>,
}

impl EvalReport {
    pub fn write_pr_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "score,precision,recall")?;
        for p in &self.pr_points {
            writeln!(w, "{},{},{}", p.score, p.precision, p.recall)?;
        }
        Ok(())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class confusion counts and the macro averages. Classes with neither
/// gold instances nor predictions are left out of the average.
pub fn classification_report(gold: &[Vec<usize>], predicted: &[Vec<usize>], schema: &RelationSchema) -> Result<Vec<ClassReport>> {
    if gold.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "{} gold label sets for {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let j = schema.len();
    let mut tp = vec![0usize; j];
    let mut fp = vec![0usize; j];
    let mut fneg = vec![0usize; j];
    for (g, p) in gold.iter().zip(predicted) {
        for &r in p {
            if r >= j {
                return Err(Error::Schema(format!("predicted relation {r} outside schema")));
            }
            if g.contains(&r) {
                tp[r] += 1;
            } else {
                fp[r] += 1;
            }
        }
        for &r in g {
            if r >= j {
                return Err(Error::Schema(format!("gold relation {r} outside schema")));
            }
            if !p.contains(&r) {
                fneg[r] += 1;
            }
        }
    }
    Ok((0..j)
        .map(|r| {
            let precision = ratio(tp[r], tp[r] + fp[r]);
            let recall = ratio(tp[r], tp[r] + fneg[r]);
            ClassReport {
                relation: schema.name(r).to_string(),
                true_positives: tp[r],
                false_positives: fp[r],
                false_negatives: fneg[r],
                precision,
                recall,
                f1: harmonic(precision, recall),
            }
        })
        .collect())
}

fn macro_average(per_class: &[ClassReport]) -> (f64, f64, f64) {
    let active: Vec<&ClassReport> = per_class
        .iter()
        .filter(|c| c.true_positives + c.false_positives + c.false_negatives > 0)
        .collect();
    if active.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = active.len() as f64;
    (
        active.iter().map(|c| c.precision).sum::<f64>() / n,
        active.iter().map(|c| c.recall).sum::<f64>() / n,
        active.iter().map(|c| c.f1).sum::<f64>() / n,
    )
}

/// Precision/recall after each candidate, taken in descending score order
/// (ties keep input order).
pub fn pr_curve(candidates: &[(f64, bool)]) -> Vec<PrPoint> {
    let positives = candidates.iter().filter(|(_, y)| *y).count();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].0.total_cmp(&candidates[a].0));
    let mut hits = 0;
    order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let (score, gold) = candidates[i];
            hits += usize::from(gold);
            PrPoint {
                score,
                precision: hits as f64 / (rank + 1) as f64,
                recall: ratio(hits, positives),
            }
        })
        .collect()
}

/// Trapezoidal area under precision as a function of recall, starting from
/// recall 0 at the first point's precision.
pub fn pr_area(points: &[PrPoint]) -> f64 {
    let Some(first) = points.first() else { return 0.0 };
    let mut area = 0.0;
    let (mut r0, mut p0) = (0.0, first.precision);
    for p in points {
        area += (p.recall - r0) * (p.precision + p0) / 2.0;
        r0 = p.recall;
        p0 = p.precision;
    }
    area
}

/// Report over decoded label sets plus per-relation scores for the PR
/// curve. Every (sentence, relation) pair is a PR candidate.
pub fn evaluate_predictions(
    gold: &[Vec<usize>],
    predicted: &[Vec<usize>],
    scores: &[Vec<f64>],
    schema: &RelationSchema,
) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Contract("evaluation over an empty corpus".into()));
    }
    if scores.len() != gold.len() {
        return Err(Error::Contract(format!("{} score rows for {} sentences", scores.len(), gold.len())));
    }
    let per_class = classification_report(gold, predicted, schema)?;
    let (precision, recall, f1) = macro_average(&per_class);
    let mut candidates = Vec::with_capacity(gold.len() * schema.len());
    for (g, s) in gold.iter().zip(scores) {
        if s.len() != schema.len() {
            return Err(Error::Contract(format!("{} scores for {} relations", s.len(), schema.len())));
        }
        candidates.extend(s.iter().enumerate().map(|(j, &x)| (x, g.contains(&j))));
    }
    let pr_points = pr_curve(&candidates);
    Ok(EvalReport {
        precision,
        recall,
        f1,
        pr_area: pr_area(&pr_points),
        per_class,
        threshold: None,
        pr_points,
    })
}

/// Label-set recall over a subset of sentences: gold facts recovered over
/// gold facts.
pub fn label_recall(gold: &[Vec<usize>], predicted: &[Vec<usize>]) -> f64 {
    let total: usize = gold.iter().map(Vec::len).sum();
    let hits: usize = gold
        .iter()
        .zip(predicted)
        .map(|(g, p)| g.iter().filter(|r| p.contains(r)).count())
        .sum();
    ratio(hits, total)
}

/// Confidence thresholds swept for single-label baselines.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub threshold: f64,
    pub report: EvalReport,
    /// `(threshold, macro F1)` for every threshold tried.
    pub table: Vec<(f64, f64)>,
}

/// Decodes `{ j : score_j > t }` at every threshold 0.1..0.9 and keeps the
/// best macro F1; ties go to the lowest threshold.
pub fn threshold_sweep(gold: &[Vec<usize>], scores: &[Vec<f64>], schema: &RelationSchema) -> Result<SweepResult> {
    let mut best: Option<(f64, EvalReport)> = None;
    let mut table = Vec::new();
    for t in sweep_thresholds() {
        let predicted: Vec<Vec<usize>> = scores.iter().map(|s| objective::decode(s, t).labels).collect();
        let mut report = evaluate_predictions(gold, &predicted, scores, schema)?;
        report.threshold = Some(t);
        table.push((t, report.f1));
        if best.as_ref().is_none_or(|(_, b)| report.f1 > b.f1) {
            best = Some((t, report));
        }
    }
    let (threshold, report) = best.expect("nine thresholds evaluated");
    Ok(SweepResult {
        threshold,
        report,
        table,
    })
}
