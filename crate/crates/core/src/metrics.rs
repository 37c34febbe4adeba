//! Threshold metrics for presentation-attack detection.
//!
//! Scores are spoof probabilities; a sample is predicted as attack when its
//! score is `>= thr`. APCER is the fraction of attacks accepted as bona fide,
//! BPCER the fraction of bona fide samples rejected, ACER their mean. HTER is
//! the same average on a test set at a threshold fixed beforehand on
//! development data. TPR@FPR treats Spoof as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Class;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Class>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Class>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::contract(format!("score {i} is not finite")));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let live = self.count(Class::Live);
        let spoof = self.count(Class::Spoof);
        if live == 0 || spoof == 0 {
            return Err(Error::UndefinedRate(format!(
                "need both classes, got {live} live and {spoof} spoof samples"
            )));
        }
        Ok((live, spoof))
    }
}

pub fn rates_at_threshold(set: &ScoredSet, thr: f64) -> Result<Rates> {
    let (live, spoof) = set.require_both()?;
    let mut accepted_attacks = 0usize;
    let mut rejected_live = 0usize;
    for (&s, &y) in set.scores.iter().zip(&set.labels) {
        match y {
            Class::Spoof if s < thr => accepted_attacks += 1,
            Class::Live if s >= thr => rejected_live += 1,
            _ => {}
        }
    }
    Ok(rates_from_counts(accepted_attacks, spoof, rejected_live, live))
}

fn rates_from_counts(accepted_attacks: usize, spoof: usize, rejected_live: usize, live: usize) -> Rates {
    let apcer = accepted_attacks as f64 / spoof as f64;
    let bpcer = rejected_live as f64 / live as f64;
    Rates { apcer, bpcer, acer: (apcer + bpcer) / 2.0 }
}

/// Candidate thresholds: 0, 1 and midpoints of consecutive sorted unique scores.
pub fn candidate_thresholds(set: &ScoredSet) -> Vec<f64> {
    let mut uniq = set.scores.clone();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut cands: Vec<f64> = uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    cands.push(0.0);
    cands.push(1.0);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands
}

/// Threshold minimizing development ACER over [`candidate_thresholds`];
/// ties resolve to the lowest threshold.
pub fn select_threshold(dev: &ScoredSet) -> Result<f64> {
    let (live, spoof) = dev.require_both()?;
    let mut order: Vec<usize> = (0..dev.len()).collect();
    order.sort_by(|&a, &b| dev.scores[a].total_cmp(&dev.scores[b]));
    // Sweep ascending: at threshold `c`, samples with score < c are predicted live.
    let mut below = 0usize;
    let mut accepted_attacks = 0usize;
    let mut live_below = 0usize;
    let mut best: Option<(f64, f64)> = None;
    for c in candidate_thresholds(dev) {
        while below < order.len() && dev.scores[order[below]] < c {
            match dev.labels[order[below]] {
                Class::Spoof => accepted_attacks += 1,
                Class::Live => live_below += 1,
            }
            below += 1;
        }
        let acer = rates_from_counts(accepted_attacks, spoof, live - live_below, live).acer;
        if best.map_or(true, |(_, b)| acer < b) {
            best = Some((c, acer));
        }
    }
    Ok(best.expect("candidate set is never empty").0)
}

/// `(FAR + FRR) / 2` at a threshold chosen on other data.
pub fn hter(test: &ScoredSet, thr_from_dev: f64) -> Result<f64> {
    let r = rates_at_threshold(test, thr_from_dev)?;
    let far = r.apcer;
    let frr = r.bpcer;
    Ok((far + frr) / 2.0)
}

/// Highest TPR among thresholds whose FPR is at most `fpr_target`, on the
/// step ROC (no interpolation). Positives are Spoof.
pub fn tpr_at_fpr(set: &ScoredSet, fpr_target: f64) -> Result<f64> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(Error::contract(format!("fpr_target {fpr_target} outside (0, 1)")));
    }
    let (live, spoof) = set.require_both()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    // Lower the threshold one distinct score at a time, from above the maximum.
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let v = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == v {
            match set.labels[order[i]] {
                Class::Spoof => tp += 1,
                Class::Live => fp += 1,
            }
            i += 1;
        }
        if fp as f64 / live as f64 > fpr_target {
            break;
        }
        best = best.max(tp as f64 / spoof as f64);
    }
    Ok(best)
}
