//! Losses and agreement metrics for score and score-distribution
//! predictions.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CharmError, Result};

const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    probabilities: Vec<f64>,
    bin_values: Vec<f64>,
}

impl ScoreDistribution {
    pub fn new(probabilities: Vec<f64>, bin_values: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() || probabilities.len() != bin_values.len() {
            return Err(CharmError::Distribution(format!(
                "{} probabilities for {} bins",
                probabilities.len(),
                bin_values.len()
            )));
        }
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(CharmError::Distribution("negative or non-finite probability".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(CharmError::Distribution(format!("probabilities sum to {total}")));
        }
        if bin_values
            .windows(2)
            .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
        {
            return Err(CharmError::Distribution("bin values must increase strictly".into()));
        }
        Ok(Self {
            probabilities,
            bin_values,
        })
    }

    /// Distribution over the score levels `1..=B`.
    pub fn over_levels(probabilities: Vec<f64>) -> Result<Self> {
        let bins = (1..=probabilities.len()).map(|v| v as f64).collect();
        Self::new(probabilities, bins)
    }

    pub fn bins(&self) -> usize {
        self.probabilities.len()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn bin_values(&self) -> &[f64] {
        &self.bin_values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub emd_exponent: f64,
    pub acc_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            emd_exponent: 2.0,
            acc_threshold: 5.0,
        }
    }
}

/// `((1/B) * sum_k |CDF_pred(k) - CDF_gt(k)|^r)^(1/r)`
pub fn emd_loss(pred: &ScoreDistribution, gt: &ScoreDistribution, r: f64) -> Result<f64> {
    if pred.bin_values != gt.bin_values {
        return Err(CharmError::Distribution("bin layouts differ".into()));
    }
    if !(r >= 1.0 && r.is_finite()) {
        return Err(CharmError::Config(format!("EMD exponent {r} must be >= 1")));
    }
    let (mut cp, mut cg, mut acc) = (0.0, 0.0, 0.0);
    for (p, g) in pred.probabilities.iter().zip(&gt.probabilities) {
        cp += p;
        cg += g;
        acc += (cp - cg).abs().powf(r);
    }
    Ok((acc / pred.bins() as f64).powf(1.0 / r))
}

pub fn l1_loss(pred: f64, gt: f64) -> f64 {
    (pred - gt).abs()
}

pub fn mean_score(dist: &ScoreDistribution) -> f64 {
    dist.probabilities
        .iter()
        .zip(&dist.bin_values)
        .map(|(p, v)| p * v)
        .sum()
}

fn check_pair(pred: &[f64], gt: &[f64], min: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(CharmError::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.len() < min {
        return Err(CharmError::UndefinedCorrelation(format!(
            "need at least {min} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(CharmError::NonFinite("scores".into()));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(CharmError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with mid-ranks for ties.
pub fn srcc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt, 2)?;
    plcc(&mid_ranks(pred), &mid_ranks(gt))
}

/// Fraction of samples on the same side of `threshold` in both lists.
pub fn acc(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    check_pair(pred, gt, 1)?;
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (**p > threshold) == (**g > threshold))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// One row of a prediction or ground-truth file.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreRow {
    Score(f64),
    Distribution(ScoreDistribution),
}

impl ScoreRow {
    pub fn mean(&self) -> f64 {
        match self {
            ScoreRow::Score(s) => *s,
            ScoreRow::Distribution(d) => mean_score(d),
        }
    }
}

/// Reads `id,score` or `id,p1,...,pB` CSV (with header). Distribution rows
/// are over the levels `1..=B`.
pub fn read_score_csv<R: Read>(reader: R) -> Result<Vec<(String, ScoreRow)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "id" {
        return Err(CharmError::Data("score csv must start with an `id` column".into()));
    }
    let single = headers.len() == 2 && &headers[1] == "score";
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let id = record[0].to_string();
        let values = record
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| CharmError::Data(format!("row `{id}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let row = if single {
            ScoreRow::Score(values[0])
        } else {
            ScoreRow::Distribution(ScoreDistribution::over_levels(values)?)
        };
        rows.push((id, row));
    }
    Ok(rows)
}

pub fn read_score_file(path: impl AsRef<Path>) -> Result<Vec<(String, ScoreRow)>> {
    read_score_csv(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub plcc: f64,
    pub srcc: f64,
    pub acc: f64,
    pub acc_threshold: f64,
    /// Mean EMD over rows when both sides carry distributions.
    pub emd: Option<f64>,
    pub l1: f64,
}

/// Joins predictions to ground truth by id and computes every metric.
/// Ids must match exactly (same set, no duplicates).
pub fn evaluate(pred: &[(String, ScoreRow)], gt: &[(String, ScoreRow)], cfg: &EvalConfig) -> Result<MetricReport> {
    let mut by_id: HashMap<&str, &ScoreRow> = HashMap::with_capacity(gt.len());
    for (id, row) in gt {
        if by_id.insert(id, row).is_some() {
            return Err(CharmError::Data(format!("duplicate ground-truth id `{id}`")));
        }
    }
    if pred.len() != gt.len() {
        return Err(CharmError::Data(format!(
            "{} predictions for {} ground-truth rows",
            pred.len(),
            gt.len()
        )));
    }
    let mut p_means = Vec::with_capacity(pred.len());
    let mut g_means = Vec::with_capacity(pred.len());
    let mut emds = Vec::new();
    let mut all_dist = true;
    for (id, p) in pred {
        let g = by_id
            .remove(id.as_str())
            .ok_or_else(|| CharmError::Data(format!("prediction id `{id}` missing from ground truth")))?;
        p_means.push(p.mean());
        g_means.push(g.mean());
        match (p, g) {
            (ScoreRow::Distribution(a), ScoreRow::Distribution(b)) => emds.push(emd_loss(a, b, cfg.emd_exponent)?),
            _ => all_dist = false,
        }
    }
    let l1 = p_means.iter().zip(&g_means).map(|(a, b)| l1_loss(*a, *b)).sum::<f64>() / p_means.len().max(1) as f64;
    Ok(MetricReport {
        count: p_means.len(),
        plcc: plcc(&p_means, &g_means)?,
        srcc: srcc(&p_means, &g_means)?,
        acc: acc(&p_means, &g_means, cfg.acc_threshold)?,
        acc_threshold: cfg.acc_threshold,
        emd: (all_dist && !emds.is_empty()).then(|| emds.iter().sum::<f64>() / emds.len() as f64),
        l1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ScoreDistribution {
        ScoreDistribution::over_levels(p.to_vec()).unwrap()
    }

    /// O(n^2) mid-rank: 1 + #smaller + (#equal - 1) / 2.
    fn brute_mid_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let eq = v.iter().filter(|y| *y == x).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn emd_examples() {
        let a = dist(&[0.1, 0.2, 0.7]);
        assert_eq!(emd_loss(&a, &a, 2.0).unwrap(), 0.0);
        let v = emd_loss(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0]), 2.0).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
        let b = dist(&[0.3, 0.3, 0.4]);
        assert_eq!(emd_loss(&a, &b, 2.0).unwrap(), emd_loss(&b, &a, 2.0).unwrap());
        assert!(emd_loss(&a, &dist(&[0.5, 0.5]), 2.0).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(ScoreDistribution::over_levels(vec![0.5, 0.4]).is_err());
        assert!(ScoreDistribution::over_levels(vec![1.5, -0.5]).is_err());
        assert!(ScoreDistribution::new(vec![0.5, 0.5], vec![2.0, 2.0]).is_err());
    }

    #[test]
    fn l1_and_mean() {
        assert_eq!(l1_loss(5.0, 5.0), 0.0);
        assert_eq!(l1_loss(3.0, 5.0), 2.0);
        assert_eq!(l1_loss(5.0, 3.0), 2.0);
        let mut delta = vec![0.0; 10];
        delta[6] = 1.0;
        assert_eq!(mean_score(&dist(&delta)), 7.0);
        assert!((mean_score(&dist(&[0.1; 10])) - 5.5).abs() < 1e-12);
        let two = ScoreDistribution::new(vec![0.5, 0.5], vec![2.0, 4.0]).unwrap();
        assert_eq!(mean_score(&two), 3.0);
    }

    #[test]
    fn correlation_examples() {
        let gt = [1.0, 4.0, 2.0, 8.0, 5.0];
        let affine: Vec<f64> = gt.iter().map(|g| 2.0 * g + 3.0).collect();
        assert!((plcc(&affine, &gt).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = gt.iter().map(|g| -g).collect();
        assert!((plcc(&neg, &gt).unwrap() + 1.0).abs() < 1e-12);
        assert!((plcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            plcc(&[1.0, 1.0], &[1.0, 2.0]),
            Err(CharmError::UndefinedCorrelation(_))
        ));

        let cubed: Vec<f64> = gt.iter().map(|g| g * g * g + 1.0).collect();
        assert!((srcc(&cubed, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!((srcc(&neg, &gt).unwrap() + 1.0).abs() < 1e-12);
        let tied = srcc(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((tied - 0.9487).abs() < 1e-4);
        assert!((tied - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn acc_examples() {
        assert_eq!(acc(&[6.0, 4.0], &[6.0, 4.0], 5.0).unwrap(), 1.0);
        assert_eq!(acc(&[6.0, 4.0], &[7.0, 3.0], 5.0).unwrap(), 1.0);
        assert_eq!(acc(&[6.0], &[4.0], 5.0).unwrap(), 0.0);
        assert!(acc(&[], &[], 5.0).is_err());
    }

    #[test]
    fn csv_and_evaluate() {
        let pred = read_score_csv("id,score\na,6\nb,4\nc,7\n".as_bytes()).unwrap();
        let gt = read_score_csv("id,score\nc,8\na,5.5\nb,3\n".as_bytes()).unwrap();
        let r = evaluate(&pred, &gt, &EvalConfig::default()).unwrap();
        assert_eq!((r.count, r.acc), (3, 1.0));
        assert!((r.srcc - 1.0).abs() < 1e-12);
        assert_eq!(r.emd, None);

        let other = read_score_csv("id,score\na,6\nb,4\nz,7\n".as_bytes()).unwrap();
        assert!(evaluate(&pred, &other, &EvalConfig::default()).is_err());

        let dists = read_score_csv("id,p1,p2,p3\na,0.2,0.3,0.5\nb,1,0,0\n".as_bytes()).unwrap();
        let r = evaluate(
            &dists,
            &dists,
            &EvalConfig {
                acc_threshold: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((r.plcc - 1.0).abs() < 1e-12);
        assert_eq!(r.emd, Some(0.0));
    }

    proptest! {
        #[test]
        fn mid_ranks_match_brute_force(v in prop::collection::vec(0u8..6, 1..30)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            prop_assert_eq!(mid_ranks(&v), brute_mid_ranks(&v));
        }

        #[test]
        fn metric_ranges(a in prop::collection::vec(-100f64..100.0, 3..20), seed in 0u64..1000) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.5 + ((i as u64 * 7919 + seed) % 13) as f64).collect();
            if let Ok(r) = plcc(&a, &b) { prop_assert!((-1.0..=1.0).contains(&r)); }
            if let Ok(r) = srcc(&a, &b) { prop_assert!((-1.0..=1.0).contains(&r)); }
            let x = acc(&a, &b, 0.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(acc(&a, &a, 3.0).unwrap(), 1.0);
        }

        #[test]
        fn emd_r1_is_mean_abs_cdf_gap(p in prop::collection::vec(0.01f64..1.0, 2..12), q in prop::collection::vec(0.01f64..1.0, 2..12)) {
            let n = p.len().min(q.len());
            let norm = |v: &[f64]| { let s: f64 = v[..n].iter().sum(); v[..n].iter().map(|x| x / s).collect::<Vec<_>>() };
            let (a, b) = (dist(&norm(&p)), dist(&norm(&q)));
            let (mut ca, mut cb, mut gap) = (0.0, 0.0, 0.0);
            for k in 0..n { ca += a.probabilities()[k]; cb += b.probabilities()[k]; gap += (ca - cb).abs(); }
            prop_assert!((emd_loss(&a, &b, 1.0).unwrap() - gap / n as f64).abs() < 1e-12);
            prop_assert!(emd_loss(&a, &b, 2.0).unwrap() >= 0.0);
        }
    }
}
