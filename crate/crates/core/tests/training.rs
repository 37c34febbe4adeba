//! End-to-end training properties on the ring mixture.

use lda_core::experiments::ReproManifest;
use lda_core::synthdata::{default_fig1_spec, sample_mixture, shift_domain, to_batch, LabeledSample};
use lda_core::trainer::{evaluate, train, train_observed, TrainConfig, TrainOutcome};
use lda_core::{Class, MixtureSpec};

struct Split {
    train: Vec<LabeledSample>,
    dev: Vec<LabeledSample>,
    test: Vec<LabeledSample>,
}

fn split(spec: &MixtureSpec, m: &ReproManifest, seed: u64) -> Split {
    Split {
        train: sample_mixture(spec, m.n_train, 1000 + seed).unwrap(),
        dev: sample_mixture(spec, m.n_dev, 2000 + seed).unwrap(),
        test: sample_mixture(spec, m.n_test, 3000 + seed).unwrap(),
    }
}

fn run(cfg: &TrainConfig, seed: u64, data: &Split) -> TrainOutcome {
    train(&TrainConfig { seed, ..cfg.clone() }, &data.train, &data.dev).unwrap()
}

fn unit_gap(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs()
}

#[test]
fn norms_stay_unit_at_every_step() {
    let spec = default_fig1_spec();
    let train_set = sample_mixture(&spec, 400, 11).unwrap();
    let dev = sample_mixture(&spec, 200, 12).unwrap();
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let mut worst = 0.0f64;
    let mut steps = 0;
    train_observed(&cfg, &train_set, &dev, &mut |state, batch| {
        steps += 1;
        for c in Class::ALL {
            for p in state.bank.prototypes(c) {
                worst = worst.max(unit_gap(p));
            }
        }
        let (x, _) = to_batch(batch).unwrap();
        for f in state.model.embed(&x).unwrap().iter_rows() {
            worst = worst.max(unit_gap(f));
        }
    })
    .unwrap();
    assert_eq!(steps, 3 * 400usize.div_ceil(64));
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn identical_inputs_train_identically() {
    let spec = default_fig1_spec();
    let train_set = sample_mixture(&spec, 300, 5).unwrap();
    let dev = sample_mixture(&spec, 100, 6).unwrap();
    let cfg = TrainConfig { epochs: 4, use_aux: true, ..TrainConfig::default() };
    let a = train(&cfg, &train_set, &dev).unwrap();
    let b = train(&cfg, &train_set, &dev).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.bank, b.bank);
    assert_eq!(a.aux, b.aux);
    let other = train(&TrainConfig { seed: 1, ..cfg }, &train_set, &dev).unwrap();
    assert_ne!(a.model, other.model);
}

#[test]
fn more_prototypes_lower_mean_dev_acer() {
    let m = ReproManifest::default();
    let spec = default_fig1_spec();
    let mut means = Vec::new();
    for k in m.multi_prototype_k {
        let mut cfg = m.multi_prototype.clone();
        cfg.lda.k_init = k;
        let mut total = 0.0;
        for &seed in &m.seeds {
            let data = split(&spec, &m, seed);
            let out = run(&cfg, seed, &data);
            total += evaluate(&out.model, &out.bank, &cfg.effective_lda(), &data.dev, &data.dev, &[]).unwrap().dev.acer;
        }
        means.push(total / m.seeds.len() as f64);
    }
    assert!(means[1] < means[0], "dev ACER K=1 {} vs K=4 {}", means[0], means[1]);
    assert!(means[0] > 0.0);
}

#[test]
fn shifted_domain_raises_unadapted_error() {
    let m = ReproManifest::default();
    let source = default_fig1_spec();
    let target = shift_domain(&source, &m.shift_translation, m.shift_std_scale).unwrap();
    let mut wins = 0;
    for &seed in &m.seeds {
        let data = split(&source, &m, seed);
        let out = run(&m.adaptation, seed, &data);
        let lda = m.adaptation.effective_lda();
        let target_test = sample_mixture(&target, m.n_test, 4000 + seed).unwrap();
        let in_domain = evaluate(&out.model, &out.bank, &lda, &data.dev, &data.test, &[]).unwrap().hter;
        let shifted = evaluate(&out.model, &out.bank, &lda, &data.dev, &target_test, &[]).unwrap().hter;
        wins += usize::from(shifted > in_domain);
    }
    assert!(wins >= m.min_seed_wins, "{wins} of {}", m.seeds.len());
}
