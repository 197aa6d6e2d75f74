//! Micro-averaged precision, recall and F1 over (utterance, label) decisions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        harmonic_mean(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2PR / (P + R)`, or 0 when both are 0.
pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_label: BTreeMap<String, Counts>,
}

impl MetricReport {
    pub fn from_counts(total: Counts, per_label: BTreeMap<String, Counts>) -> Self {
        Self {
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            per_label,
        }
    }

    /// Pools `(predicted, gold)` label-index sets for every utterance.
    pub fn from_decisions(decisions: &[(Vec<usize>, Vec<usize>)], labels: &[String]) -> Result<Self> {
        let mut total = Counts::default();
        let mut per: BTreeMap<String, Counts> = BTreeMap::new();
        let name = |i: usize| {
            labels
                .get(i)
                .cloned()
                .ok_or_else(|| Error::UnknownLabel(format!("label index {i}")))
        };
        for (pred, gold) in decisions {
            for &p in pred {
                let c = per.entry(name(p)?).or_default();
                if gold.contains(&p) {
                    total.tp += 1;
                    c.tp += 1;
                } else {
                    total.fp += 1;
                    c.fp += 1;
                }
            }
            for &g in gold {
                if !pred.contains(&g) {
                    total.fn_ += 1;
                    per.entry(name(g)?).or_default().fn_ += 1;
                }
            }
        }
        Ok(Self::from_counts(total, per))
    }
}

/// Median F1 of an odd number of seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianReport {
    pub median: f64,
    pub per_seed: Vec<(u64, f64)>,
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() || values.len().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "median needs an odd number of runs, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[sorted.len() / 2])
}

/// Runs `task` once per seed and reports the median of the returned scores.
pub fn median_of_runs(seeds: &[u64], mut task: impl FnMut(u64) -> Result<f64>) -> Result<MedianReport> {
    median(&vec![0.0; seeds.len()])?;
    let per_seed = seeds
        .iter()
        .map(|&s| task(s).map(|f| (s, f)))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = per_seed.iter().map(|(_, f)| *f).collect();
    Ok(MedianReport {
        median: median(&scores)?,
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn counts_definition() {
        let c = Counts { tp: 2, fp: 1, fn_: 1 };
        assert!((c.precision() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.recall() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(Counts::default().f1(), 0.0);
    }

    #[test]
    fn all_correct_is_perfect() {
        let d = vec![(vec![0], vec![0]), (vec![1], vec![1])];
        let r = MetricReport::from_decisions(&d, &labels(2)).unwrap();
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn multi_label_hand_tally() {
        // u1: gold {0,1}, predicted {0}     -> tp 1, fn 1
        // u2: gold {2},   predicted {2,1}   -> tp 1, fp 1
        // u3: gold {1},   predicted {1}     -> tp 1
        let d = vec![(vec![0], vec![0, 1]), (vec![2, 1], vec![2]), (vec![1], vec![1])];
        let r = MetricReport::from_decisions(&d, &labels(3)).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (3, 1, 1));
        assert_eq!(r.per_label["l1"], Counts { tp: 1, fp: 1, fn_: 1 });
        assert!((r.f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[0.5, 0.6, 0.7, 0.8, 0.9]).unwrap(), 0.7);
        assert_eq!(median(&[0.9, 0.5, 0.8, 0.6, 0.7]).unwrap(), 0.7);
        assert_eq!(median(&[0.4; 5]).unwrap(), 0.4);
        assert!(median(&[0.1, 0.2]).is_err());
        let r = median_of_runs(&[1, 2, 3], |s| Ok(s as f64 / 10.0)).unwrap();
        assert_eq!(r.median, 0.2);
        assert_eq!(r.per_seed.len(), 3);
    }
}
