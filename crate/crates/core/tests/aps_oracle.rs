//! Prototype selection against an oracle that enumerates every pop sequence.

use lda_core::aps::{density, select_prototypes};
use lda_core::linalg::normalize;
use lda_core::{Class, PrototypeBank};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All pick sequences in which every pick has the largest remaining
/// coverage, the first pick is unconditional and the sequence ends exactly
/// when no candidate covers anything new (or none are left).
fn all_greedy_sequences(protos: &[Vec<f64>], samples: &[Vec<f64>], t: f64) -> Vec<Vec<(usize, usize)>> {
    fn rec(
        covers: &[Vec<bool>],
        left: &mut Vec<bool>,
        taken: &mut Vec<bool>,
        seq: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        let gains: Vec<Option<usize>> = (0..covers.len())
            .map(|r| (!taken[r]).then(|| covers[r].iter().zip(left.iter()).filter(|(c, l)| **c && **l).count()))
            .collect();
        let best = gains.iter().flatten().copied().max();
        match best {
            None => out.push(seq.clone()),
            Some(0) if !seq.is_empty() => out.push(seq.clone()),
            Some(g) => {
                for r in 0..covers.len() {
                    if gains[r] != Some(g) {
                        continue;
                    }
                    let saved = left.clone();
                    for (l, c) in left.iter_mut().zip(&covers[r]) {
                        *l &= !*c;
                    }
                    taken[r] = true;
                    seq.push((r, g));
                    rec(covers, left, taken, seq, out);
                    seq.pop();
                    taken[r] = false;
                    *left = saved;
                }
            }
        }
    }
    let covers: Vec<Vec<bool>> = protos.iter().map(|p| samples.iter().map(|f| dot(p, f) > t).collect()).collect();
    let mut out = Vec::new();
    rec(&covers, &mut vec![true; samples.len()], &mut vec![false; protos.len()], &mut Vec::new(), &mut out);
    out
}

fn check(protos: &[Vec<f64>], samples: &[Vec<f64>], t: f64) {
    let bank = PrototypeBank::new(protos.to_vec(), vec![protos[0].clone()]).unwrap();
    let none: Vec<Vec<f64>> = Vec::new();
    let sel = select_prototypes(&bank, samples, &none, t, t).unwrap();
    let got: Vec<(usize, usize)> =
        sel.log.iter().filter(|s| s.class == Class::Live).map(|s| (s.prototype, s.popped)).collect();
    let valid = all_greedy_sequences(protos, samples, t);
    assert!(valid.contains(&got), "{got:?} not among {valid:?}");
    // ties resolve to the lowest index at every step
    let lowest = valid.iter().min_by(|a, b| {
        let ia: Vec<usize> = a.iter().map(|p| p.0).collect();
        let ib: Vec<usize> = b.iter().map(|p| p.0).collect();
        ia.cmp(&ib)
    });
    assert_eq!(Some(&got), lowest);
    assert_eq!(sel.selected[0], got.iter().map(|p| p.0).collect::<Vec<_>>());
    assert_eq!(sel.bank.count(Class::Live), got.len());
}

#[test]
fn three_prototype_example() {
    let f = [vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    // p_a covers f1 and f2, p_b covers f2 and f3, p_c covers nothing
    let pa = normalize(&[1.0, 1.0]);
    let pb = normalize(&[-1.0, 1.0]);
    let pc = vec![0.0, -1.0];
    let t = 0.5;
    assert!(dot(&pa, &f[0]) > t && (dot(&pa, &f[0]) - h).abs() < 1e-15);
    let sel = select_prototypes(&PrototypeBank::new(vec![pa, pb, pc], vec![vec![1.0, 0.0]]).unwrap(), &f, &f[..0], t, t)
        .unwrap();
    assert_eq!(sel.selected[0], vec![0, 1]);
    let pops: Vec<usize> = sel.log.iter().filter(|s| s.class == Class::Live).map(|s| s.popped).collect();
    assert_eq!(pops, vec![2, 1]);
}

#[test]
fn density_example() {
    let p = [vec![1.0, 0.0]];
    let f = [vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.6]];
    let d = density(&p, &f, 0.7);
    assert_eq!(d.densities, vec![2]);
    assert_eq!(d.covered, vec![vec![0, 2]]);
}

#[test]
fn strict_threshold_excludes_equality() {
    let p = [vec![1.0, 0.0]];
    let f = [vec![0.5, (0.75f64).sqrt()]];
    assert_eq!(density(&p, &f, 0.5).densities, vec![0]);
}

fn unit2() -> impl Strategy<Value = Vec<f64>> {
    // coarse angles make coincident similarities and ties common
    (0u32..24).prop_map(|k| {
        let a = k as f64 * std::f64::consts::PI / 12.0;
        vec![a.cos(), a.sin()]
    })
}

fn unit3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 3)
        .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-2)
        .prop_map(|v| normalize(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_sequence_oracle_on_grid(
        protos in prop::collection::vec(unit2(), 1..=6),
        samples in prop::collection::vec(unit2(), 0..=20),
        t in -0.9f64..0.95,
    ) {
        check(&protos, &samples, t);
    }

    #[test]
    fn matches_sequence_oracle_in_3d(
        protos in prop::collection::vec(unit3(), 1..=6),
        samples in prop::collection::vec(unit3(), 0..=20),
        t in -0.5f64..0.9,
    ) {
        check(&protos, &samples, t);
    }

    #[test]
    fn selection_is_a_subset_and_covers_what_the_bank_covered(
        protos in prop::collection::vec(unit3(), 1..=6),
        samples in prop::collection::vec(unit3(), 0..=20),
        t in -0.5f64..0.9,
    ) {
        let bank = PrototypeBank::new(protos.clone(), protos.clone()).unwrap();
        let sel = select_prototypes(&bank, &samples, &samples, t, t).unwrap();
        for class in Class::ALL {
            let kept = &sel.selected[class.index()];
            prop_assert!(!kept.is_empty() && kept.len() <= protos.len());
            for f in &samples {
                let before = protos.iter().any(|p| dot(p, f) > t);
                let after = kept.iter().any(|&r| dot(&protos[r], f) > t);
                prop_assert_eq!(before, after);
            }
        }
    }
}
