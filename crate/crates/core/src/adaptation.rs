//! Few-shot domain adaptation: one class-mean prototype per class from a few
//! labeled target-domain samples, appended to an already trained bank.

use crate::error::{Error, Result};
use crate::head::{Class, PrototypeBank};
use crate::linalg::{norm, Matrix};
use crate::model::MlpParams;
use crate::synthdata::{to_batch, LabeledSample};

/// Normalized arithmetic mean of unit embeddings.
pub fn class_mean_prototype<F: AsRef<[f64]>>(embeddings: &[F]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or_else(|| Error::contract("class mean of an empty set"))?;
    let dim = first.as_ref().len();
    let mut mean = vec![0.0; dim];
    for f in embeddings {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(Error::contract("embeddings have differing dimensions"));
        }
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
    }
    let inv = 1.0 / embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let n = norm(&mean);
    if n < 1e-12 {
        return Err(Error::Degenerate(format!("class mean has norm {n:e}")));
    }
    Ok(mean.into_iter().map(|m| m / n).collect())
}

/// Appends one class-mean prototype per class, computed from the target
/// samples' embeddings. Existing prototypes are left untouched.
pub fn adapt(bank: &PrototypeBank, model: &MlpParams, target: &[LabeledSample]) -> Result<PrototypeBank> {
    let mut adapted = bank.clone();
    let (x, labels) = to_batch(target)?;
    let emb = if target.is_empty() { Matrix::zeros(0, bank.dim()) } else { model.embed(&x)? };
    for class in Class::ALL {
        let rows: Vec<&[f64]> = emb
            .iter_rows()
            .zip(&labels)
            .filter(|(_, &y)| y == class)
            .map(|(r, _)| r)
            .collect();
        if rows.is_empty() {
            return Err(Error::config(format!("no {class} samples in the target set")));
        }
        adapted.push(class, class_mean_prototype(&rows)?)?;
    }
    Ok(adapted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{class_similarity, init_bank};
    use crate::synthdata::{default_fig1_spec, sample_mixture};

    #[test]
    fn singleton_and_symmetric_means() {
        assert_eq!(class_mean_prototype(&[[1.0, 0.0]]).unwrap(), vec![1.0, 0.0]);
        let m = class_mean_prototype(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m[0] - h).abs() < 1e-15 && (m[1] - h).abs() < 1e-15);
    }

    #[test]
    fn antipodal_mean_is_degenerate() {
        assert!(matches!(class_mean_prototype(&[[1.0, 0.0], [-1.0, 0.0]]), Err(Error::Degenerate(_))));
        let empty: [[f64; 2]; 0] = [];
        assert!(matches!(class_mean_prototype(&empty), Err(Error::Contract(_))));
    }

    fn bank_2_4() -> PrototypeBank {
        let b = init_bank(4, 8, 11).unwrap();
        b.select(&[vec![0, 1], vec![0, 1, 2, 3]]).unwrap()
    }

    #[test]
    fn adapt_appends_one_per_class() {
        let bank = bank_2_4();
        let model = MlpParams::init(&[2, 16, 8], 3).unwrap();
        let target = sample_mixture(&default_fig1_spec(), 30, 5).unwrap();
        let adapted = adapt(&bank, &model, &target).unwrap();
        assert_eq!(adapted.count(Class::Live), 3);
        assert_eq!(adapted.count(Class::Spoof), 5);
        for class in Class::ALL {
            for (r, p) in bank.prototypes(class).iter().enumerate() {
                assert_eq!(adapted.get(class, r), p.as_slice());
            }
        }
        assert!(adapted.is_unit());
    }

    #[test]
    fn adapt_requires_both_classes() {
        let bank = bank_2_4();
        let model = MlpParams::init(&[2, 16, 8], 3).unwrap();
        let live_only: Vec<_> = sample_mixture(&default_fig1_spec(), 40, 5)
            .unwrap()
            .into_iter()
            .filter(|s| s.y == Class::Live)
            .collect();
        assert!(matches!(adapt(&bank, &model, &live_only), Err(Error::Config(_))));
    }

    #[test]
    fn adapted_cosines_stay_within_prototype_range() {
        let bank = bank_2_4();
        let model = MlpParams::init(&[2, 16, 8], 3).unwrap();
        let data = sample_mixture(&default_fig1_spec(), 60, 8).unwrap();
        let adapted = adapt(&bank, &model, &data[..30]).unwrap();
        let (x, _) = to_batch(&data[30..]).unwrap();
        for f in model.embed(&x).unwrap().iter_rows() {
            let pred = class_similarity(f, &adapted, 0.1);
            for c in Class::ALL {
                let sims = &pred.sims[c.index()];
                let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(pred.cos(c) >= lo - 1e-12 && pred.cos(c) <= hi + 1e-12);
            }
        }
    }
}
