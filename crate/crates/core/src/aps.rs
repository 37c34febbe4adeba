//! Adaptive prototype selection.
//!
//! A prototype's density is the number of same-class embeddings whose cosine
//! with it strictly exceeds the class threshold. Per class, the densest
//! prototype is kept unconditionally; then the densest remaining candidate is
//! taken repeatedly, and the samples it covers are removed before densities
//! are recomputed. Selection stops once the best remaining density is zero or
//! no candidates are left.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::{Class, PrototypeBank};
use crate::linalg::dot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub threshold: f64,
    /// Per prototype, number of covered samples.
    pub densities: Vec<usize>,
    /// Per prototype, indices of covered samples (ascending).
    pub covered: Vec<Vec<usize>>,
}

/// Counts, for each prototype, the embeddings with `⟨p, f⟩ > t`.
pub fn density<P: AsRef<[f64]>, F: AsRef<[f64]>>(prototypes: &[P], embeddings: &[F], t: f64) -> DensityReport {
    let all: Vec<usize> = (0..embeddings.len()).collect();
    let covered: Vec<Vec<usize>> =
        prototypes.iter().map(|p| covered_by(p.as_ref(), embeddings, &all, t)).collect();
    DensityReport { threshold: t, densities: covered.iter().map(Vec::len).collect(), covered }
}

fn covered_by<F: AsRef<[f64]>>(p: &[f64], embeddings: &[F], pool: &[usize], t: f64) -> Vec<usize> {
    pool.iter().copied().filter(|&i| dot(p, embeddings[i].as_ref()) > t).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub class: Class,
    /// 0 is the mandatory pick.
    pub step: usize,
    pub prototype: usize,
    pub density: usize,
    /// Number of samples removed with this prototype.
    pub popped: usize,
    #[serde(skip)]
    pub popped_samples: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Selected prototype indices per class, in selection order.
    pub selected: [Vec<usize>; 2],
    pub thresholds: [f64; 2],
    pub bank: PrototypeBank,
    pub log: Vec<SelectionStep>,
}

impl SelectionResult {
    pub fn total_selected(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }
}

/// Greedy max-density selection for one class.
fn select_class<P: AsRef<[f64]>, F: AsRef<[f64]>>(
    class: Class,
    prototypes: &[P],
    embeddings: &[F],
    t: f64,
) -> (Vec<usize>, Vec<SelectionStep>) {
    let mut candidates: Vec<usize> = (0..prototypes.len()).collect();
    let mut remaining: Vec<usize> = (0..embeddings.len()).collect();
    let mut selected = Vec::new();
    let mut log = Vec::new();
    while !candidates.is_empty() {
        // Ties go to the lowest prototype index: candidates stay ascending
        // and only a strictly larger density replaces the incumbent.
        let mut best: Option<(usize, Vec<usize>)> = None;
        for (pos, &r) in candidates.iter().enumerate() {
            let cov = covered_by(prototypes[r].as_ref(), embeddings, &remaining, t);
            if best.as_ref().map_or(true, |(_, b)| cov.len() > b.len()) {
                best = Some((pos, cov));
            }
        }
        let (pos, cov) = best.expect("candidates non-empty");
        if !selected.is_empty() && cov.is_empty() {
            break;
        }
        let r = candidates.remove(pos);
        remaining.retain(|i| cov.binary_search(i).is_err());
        log.push(SelectionStep {
            class,
            step: selected.len(),
            prototype: r,
            density: cov.len(),
            popped: cov.len(),
            popped_samples: cov,
        });
        selected.push(r);
    }
    (selected, log)
}

pub fn select_prototypes<F: AsRef<[f64]>>(
    bank: &PrototypeBank,
    live_embeddings: &[F],
    spoof_embeddings: &[F],
    t_live: f64,
    t_spoof: f64,
) -> Result<SelectionResult> {
    let (live_sel, mut log) = select_class(Class::Live, bank.prototypes(Class::Live), live_embeddings, t_live);
    let (spoof_sel, spoof_log) =
        select_class(Class::Spoof, bank.prototypes(Class::Spoof), spoof_embeddings, t_spoof);
    log.extend(spoof_log);
    let selected = [live_sel, spoof_sel];
    let reduced = bank.select(&selected)?;
    Ok(SelectionResult { selected, thresholds: [t_live, t_spoof], bank: reduced, log })
}

/// Median, over the class's samples, of the best similarity to any of its
/// prototypes. Returns 0 when there are no samples.
pub fn default_threshold<P: AsRef<[f64]>, F: AsRef<[f64]>>(prototypes: &[P], embeddings: &[F]) -> f64 {
    let mut best: Vec<f64> = embeddings
        .iter()
        .map(|f| {
            prototypes
                .iter()
                .map(|p| dot(p.as_ref(), f.as_ref()))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    if best.is_empty() {
        return 0.0;
    }
    best.sort_by(f64::total_cmp);
    let n = best.len();
    if n % 2 == 1 {
        best[n / 2]
    } else {
        0.5 * (best[n / 2 - 1] + best[n / 2])
    }
}

pub fn default_thresholds<F: AsRef<[f64]>>(
    bank: &PrototypeBank,
    live_embeddings: &[F],
    spoof_embeddings: &[F],
) -> [f64; 2] {
    [
        default_threshold(bank.prototypes(Class::Live), live_embeddings),
        default_threshold(bank.prototypes(Class::Spoof), spoof_embeddings),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::init_bank;
    use crate::linalg::normalize;

    fn angle(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn density_enumeration() {
        let p = vec![vec![1.0, 0.0]];
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.6]];
        let r = density(&p, &f, 0.7);
        assert_eq!(r.densities, vec![2]);
        assert_eq!(r.covered, vec![vec![0, 2]]);
        assert_eq!(density(&p, &f, 1.0).densities, vec![0]);
        let empty: Vec<Vec<f64>> = Vec::new();
        let r = density(&p, &empty, 0.0);
        assert_eq!(r.densities, vec![0]);
        assert!(r.covered[0].is_empty());
    }

    #[test]
    fn strict_membership() {
        let p = vec![vec![1.0, 0.0]];
        let f = vec![vec![0.5, 0.75f64.sqrt()]];
        assert_eq!(density(&p, &f, 0.5).densities, vec![0]);
    }

    #[test]
    fn greedy_with_popping() {
        // p_a covers {f1, f2}, p_b covers {f2, f3}, p_c covers nothing.
        let f = vec![angle(0.0), angle(0.5), angle(1.0)];
        let pa = angle(0.25);
        let pb = angle(0.75);
        let pc = angle(3.0);
        let t = 0.25f64.cos() - 1e-9;
        let bank = PrototypeBank::new(vec![pa, pb, pc], vec![angle(-2.0)]).unwrap();
        let r = density(bank.prototypes(Class::Live), &f, t);
        assert_eq!(r.covered, vec![vec![0, 1], vec![1, 2], vec![]]);
        let empty: Vec<Vec<f64>> = Vec::new();
        let sel = select_prototypes(&bank, &f, &empty, t, 0.0).unwrap();
        assert_eq!(sel.selected[0], vec![0, 1]);
        assert_eq!(sel.log[0].popped_samples, vec![0, 1]);
        assert_eq!(sel.log[1].density, 1);
        assert_eq!(sel.log[1].popped_samples, vec![2]);
        assert_eq!(sel.selected[1], vec![0]);
        assert_eq!(sel.bank.count(Class::Live), 2);
    }

    #[test]
    fn zero_density_keeps_only_mandatory() {
        let bank = init_bank(5, 3, 1).unwrap();
        let f = vec![normalize(&[1.0, 1.0, 1.0])];
        let sel = select_prototypes(&bank, &f, &f, 1.0, 1.0).unwrap();
        assert_eq!(sel.selected, [vec![0], vec![0]]);
    }

    #[test]
    fn full_coverage_keeps_one_per_class() {
        let bank = init_bank(6, 4, 2).unwrap();
        let f: Vec<Vec<f64>> = (0..10).map(|i| normalize(&[i as f64, 1.0, -1.0, 0.5])).collect();
        let sel = select_prototypes(&bank, &f, &f, -1.0 - 1e-9, -1.0 - 1e-9).unwrap();
        assert_eq!(sel.total_selected(), 2);
        assert_eq!(sel.log[0].popped, 10);
    }

    #[test]
    fn single_prototype_class() {
        let bank = init_bank(1, 3, 3).unwrap();
        let f = vec![normalize(&[0.0, 1.0, 0.0])];
        let sel = select_prototypes(&bank, &f, &f, 0.0, 0.0).unwrap();
        assert_eq!(sel.selected, [vec![0], vec![0]]);
        assert_eq!(sel.bank, bank);
    }

    #[test]
    fn median_threshold() {
        let p = vec![vec![1.0, 0.0]];
        let f = vec![angle(0.0), angle(1.0), angle(2.0), angle(3.0)];
        let t = default_threshold(&p, &f);
        assert!((t - 0.5 * (1f64.cos() + 2f64.cos())).abs() < 1e-15);
    }

    #[test]
    fn log_serializes_counts() {
        let step = SelectionStep { class: Class::Spoof, step: 1, prototype: 3, density: 4, popped: 4, popped_samples: vec![1, 2, 3, 4] };
        let json = serde_json::to_string(&step).unwrap();
        assert_eq!(json, r#"{"class":"Spoof","step":1,"prototype":3,"density":4,"popped":4}"#);
    }
}
