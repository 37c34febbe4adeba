//! Experiment harness behind `lda repro` and the acceptance suite.
//!
//! Each experiment reads its settings from a [`ReproManifest`], returns a
//! verdict and writes CSV tables. Tables carry no timings, so two runs from
//! one manifest yield identical bytes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::adapt;
use crate::aps::{default_thresholds, select_prototypes};
use crate::error::{Error, Result};
use crate::head::{
    class_similarity, inter_center_loss, intra_center_loss, lda_loss, lda_s_loss, prototype_data_loss, AuxHeads,
    AuxTargets, Class, LdaConfig, PrototypeBank, UNIT_TOL,
};
use crate::linalg::{dot, norm, normalize, Matrix};
use crate::metrics::{candidate_thresholds, hter, rates_at_threshold, select_threshold, tpr_at_fpr, ScoredSet};
use crate::synthdata::{default_fig1_spec, sample_mixture, shift_domain, to_batch, LabeledSample};
use crate::trainer::{evaluate, grad_check, score_samples, train, train_observed, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproManifest {
    /// Paired seeds; seed `s` trains with seed `s` on data drawn from
    /// `1000 + s` (train), `2000 + s` (dev), `3000 + s` (test).
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Seeds out of `seeds.len()` on which a per-seed claim must hold.
    pub min_seed_wins: usize,
    /// Seed for the randomized oracle checks.
    pub check_seed: u64,

    pub lda: LdaConfig,
    pub grad_trials: usize,
    pub grad_tolerance: f64,
    pub reduction_inputs: usize,
    pub reduction_tolerance: f64,

    pub multi_prototype: TrainConfig,
    /// Single-prototype baseline and multi-prototype setting.
    pub multi_prototype_k: [usize; 2],
    pub pc_benefit: TrainConfig,

    pub aps: TrainConfig,
    pub aps_oracle_instances: usize,
    pub aps_count_range: [usize; 2],
    /// Largest tolerated absolute change in test ACER after pruning.
    pub aps_max_acer_change: f64,

    pub adaptation: TrainConfig,
    pub shift_translation: Vec<f64>,
    pub shift_std_scale: f64,
    pub target_shots: usize,

    pub metrics_sets: usize,
    pub metrics_max_n: usize,
    pub invariance_instances: usize,
    pub invariance_tolerance: f64,
}

impl Default for ReproManifest {
    fn default() -> Self {
        let linear = TrainConfig { layer_sizes: vec![2, 8], ..TrainConfig::default() };
        let mut pc = TrainConfig::default();
        pc.lda.lambda1 = 3.0;
        let mut aps = TrainConfig::default();
        aps.lda.k_init = 16;
        ReproManifest {
            seeds: (0..5).collect(),
            n_train: 2000,
            n_dev: 1000,
            n_test: 1000,
            min_seed_wins: 4,
            check_seed: 7,
            lda: LdaConfig::default(),
            grad_trials: 50,
            grad_tolerance: 1e-5,
            reduction_inputs: 1000,
            reduction_tolerance: 1e-12,
            multi_prototype: linear,
            multi_prototype_k: [1, 4],
            pc_benefit: pc,
            aps,
            aps_oracle_instances: 100,
            aps_count_range: [2, 10],
            aps_max_acer_change: 0.01,
            adaptation: TrainConfig::default(),
            shift_translation: vec![1.7321, -1.0],
            shift_std_scale: 1.0,
            target_shots: 30,
            metrics_sets: 100,
            metrics_max_n: 200,
            invariance_instances: 50,
            invariance_tolerance: 1e-10,
        }
    }
}

/// A CSV artifact produced by an experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub tables: Vec<Table>,
}

impl CriterionReport {
    /// `PASS 3 multi-prototype: ...`
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {} {}: {}", self.id, self.name, self.detail)
    }
}

fn table(name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<Table> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(crate::head::csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(crate::head::csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(Table { name: name.to_string(), csv: String::from_utf8(bytes).expect("csv output is utf-8") })
}

struct SeedData {
    train: Vec<LabeledSample>,
    dev: Vec<LabeledSample>,
    test: Vec<LabeledSample>,
}

fn seed_data(m: &ReproManifest, seed: u64) -> Result<SeedData> {
    let spec = default_fig1_spec();
    Ok(SeedData {
        train: sample_mixture(&spec, m.n_train, 1000 + seed)?,
        dev: sample_mixture(&spec, m.n_dev, 2000 + seed)?,
        test: sample_mixture(&spec, m.n_test, 3000 + seed)?,
    })
}

fn train_seed(base: &TrainConfig, seed: u64, data: &SeedData) -> Result<TrainOutcome> {
    let cfg = TrainConfig { seed, ..base.clone() };
    train(&cfg, &data.train, &data.dev)
}

fn test_acer(out: &TrainOutcome, bank: &PrototypeBank, cfg: &TrainConfig, data: &SeedData) -> Result<f64> {
    Ok(evaluate(&out.model, bank, &cfg.effective_lda(), &data.dev, &data.test, &[])?.test.acer)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn gradient_oracle(m: &ReproManifest) -> Result<CriterionReport> {
    let r = grad_check(&m.lda, m.grad_trials, m.grad_tolerance, m.check_seed)?;
    let rows = [
        ("pd", r.pd),
        ("pc_inter", r.pc_inter),
        ("pc_intra", r.pc_intra),
        ("lda", r.lda),
        ("lda_s", r.lda_s),
        ("model", r.model),
    ]
    .iter()
    .map(|(k, v)| vec![k.to_string(), v.to_string()])
    .collect();
    Ok(CriterionReport {
        id: 1,
        name: "gradient oracle",
        passed: r.passed && r.trials >= m.grad_trials,
        detail: format!(
            "{} instances ({} resampled), max relative error {:.2e} (tol {:.0e})",
            r.trials, r.resampled, r.max_rel_error, r.tolerance
        ),
        tables: vec![table("gradcheck.csv", &["path", "max_rel_error"], rows)?],
    })
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if norm(&v) > 0.1 {
            return normalize(&v);
        }
    }
}

/// Two-class softmax cross-entropy on the logits `s·⟨f, p_c⟩`.
fn cross_entropy_on_cosines(f: &[f64], live: &[f64], spoof: &[f64], y: Class, s: f64) -> f64 {
    let logits = [s * dot(f, live), s * dot(f, spoof)];
    let hi = logits[0].max(logits[1]);
    let lse = hi + ((logits[0] - hi).exp() + (logits[1] - hi).exp()).ln();
    lse - logits[y.index()]
}

pub fn reduction_oracle(m: &ReproManifest) -> Result<CriterionReport> {
    let cfg = LdaConfig { m: 0.0, lambda1: 0.0, lambda2: 0.0, k_init: 1, ..m.lda.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(m.check_seed);
    let mut worst = 0.0f64;
    for _ in 0..m.reduction_inputs {
        let dim = rng.gen_range(2..=8);
        let bank = PrototypeBank::new(vec![random_unit(&mut rng, dim)], vec![random_unit(&mut rng, dim)])?;
        let f = random_unit(&mut rng, dim);
        let y = if rng.gen::<bool>() { Class::Spoof } else { Class::Live };
        let pred = class_similarity(&f, &bank, cfg.tau_w);
        let ours = prototype_data_loss(&pred, y, cfg.s, cfg.m).loss;
        let batch = lda_loss(&Matrix::from_rows(&[f.as_slice()])?, &[y], &bank, &cfg)?.total;
        let reference = cross_entropy_on_cosines(&f, bank.get(Class::Live, 0), bank.get(Class::Spoof, 0), y, cfg.s);
        worst = worst.max((ours - reference).abs()).max((batch - reference).abs());
    }
    Ok(CriterionReport {
        id: 2,
        name: "reduction oracle",
        passed: worst <= m.reduction_tolerance,
        detail: format!("{} inputs, max |diff| {worst:.2e} (tol {:.0e})", m.reduction_inputs, m.reduction_tolerance),
        tables: Vec::new(),
    })
}

pub fn multi_prototype(m: &ReproManifest) -> Result<CriterionReport> {
    let [k_base, k_multi] = m.multi_prototype_k;
    let mut rows = Vec::new();
    let (mut base, mut multi) = (Vec::new(), Vec::new());
    for &seed in &m.seeds {
        let data = seed_data(m, seed)?;
        for (k, acc) in [(k_base, &mut base), (k_multi, &mut multi)] {
            let mut cfg = m.multi_prototype.clone();
            cfg.lda.k_init = k;
            let out = train_seed(&cfg, seed, &data)?;
            let acer = test_acer(&out, &out.bank, &cfg, &data)?;
            rows.push(vec![seed.to_string(), k.to_string(), acer.to_string()]);
            acc.push(acer);
        }
    }
    let wins = base.iter().zip(&multi).filter(|(b, k)| k < b).count();
    let (mb, mk) = (mean(&base), mean(&multi));
    Ok(CriterionReport {
        id: 3,
        name: "multi-prototype benefit",
        passed: mk < mb && wins >= m.min_seed_wins,
        detail: format!(
            "mean test ACER K={k_multi} {:.3}% vs K={k_base} {:.3}%, lower on {wins}/{} seeds",
            100.0 * mk,
            100.0 * mb,
            m.seeds.len()
        ),
        tables: vec![table("multi_prototype.csv", &["seed", "k_init", "test_acer"], rows)?],
    })
}

pub fn pc_benefit(m: &ReproManifest) -> Result<CriterionReport> {
    let mut rows = Vec::new();
    let (mut full, mut pd_only, mut satisfied) = (Vec::new(), Vec::new(), 0);
    for &seed in &m.seeds {
        let data = seed_data(m, seed)?;
        for (variant, use_pc) in [("pd_only", false), ("full", true)] {
            let cfg = TrainConfig { use_pc_inter: use_pc, use_pc_intra: use_pc, ..m.pc_benefit.clone() };
            let out = train_seed(&cfg, seed, &data)?;
            let acer = test_acer(&out, &out.bank, &cfg, &data)?;
            let inter = inter_center_loss(&out.bank, cfg.lda.delta1).loss;
            rows.push(vec![seed.to_string(), variant.to_string(), acer.to_string(), inter.to_string()]);
            if use_pc {
                full.push(acer);
                satisfied += usize::from(inter == 0.0);
            } else {
                pd_only.push(acer);
            }
        }
    }
    let (mf, mp) = (mean(&full), mean(&pd_only));
    Ok(CriterionReport {
        id: 4,
        name: "prototype-center loss benefit",
        passed: mf <= mp && satisfied >= m.min_seed_wins,
        detail: format!(
            "mean test ACER full {:.3}% vs PD only {:.3}%, inter hinge satisfied on {satisfied}/{} seeds",
            100.0 * mf,
            100.0 * mp,
            m.seeds.len()
        ),
        tables: vec![table("pc_benefit.csv", &["seed", "variant", "test_acer", "pc_inter"], rows)?],
    })
}

/// Greedy selection for one class, written over coverage bitmasks.
/// Returns `(prototype, newly covered count)` per pick.
pub fn greedy_selection_oracle(prototypes: &[Vec<f64>], embeddings: &[Vec<f64>], t: f64) -> Vec<(usize, usize)> {
    assert!(embeddings.len() <= 64, "oracle handles at most 64 samples");
    let masks: Vec<u64> = prototypes
        .iter()
        .map(|p| {
            embeddings
                .iter()
                .enumerate()
                .filter(|(_, f)| dot(p, f) > t)
                .fold(0u64, |acc, (i, _)| acc | (1 << i))
        })
        .collect();
    let mut covered = 0u64;
    let mut taken = vec![false; prototypes.len()];
    let mut picks = Vec::new();
    loop {
        let best = (0..prototypes.len())
            .filter(|&r| !taken[r])
            .map(|r| (r, (masks[r] & !covered).count_ones() as usize))
            .fold(None, |best: Option<(usize, usize)>, c| match best {
                Some(b) if b.1 >= c.1 => Some(b),
                _ => Some(c),
            });
        match best {
            Some((r, gain)) if picks.is_empty() || gain > 0 => {
                taken[r] = true;
                covered |= masks[r];
                picks.push((r, gain));
            }
            _ => return picks,
        }
    }
}

fn aps_oracle_mismatches(m: &ReproManifest) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(m.check_seed);
    let mut mismatches = 0;
    for _ in 0..m.aps_oracle_instances {
        let dim = rng.gen_range(2..=5);
        let mut classes: [Vec<Vec<f64>>; 2] = Default::default();
        let mut samples: [Vec<Vec<f64>>; 2] = Default::default();
        for c in 0..2 {
            let k = rng.gen_range(1..=6);
            for _ in 0..k {
                // Occasional duplicates exercise the tie rule.
                let p = match classes[c].last() {
                    Some(prev) if rng.gen_bool(0.2) => Vec::clone(prev),
                    _ => random_unit(&mut rng, dim),
                };
                classes[c].push(p);
            }
            let n = rng.gen_range(0..=20);
            samples[c] = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
        }
        let t = [rng.gen_range(-0.5..0.9), rng.gen_range(-0.5..0.9)];
        let [live, spoof] = classes;
        let bank = PrototypeBank::new(live, spoof)?;
        let sel = select_prototypes(&bank, &samples[0], &samples[1], t[0], t[1])?;
        for class in Class::ALL {
            let i = class.index();
            let expected = greedy_selection_oracle(bank.prototypes(class), &samples[i], t[i]);
            let got: Vec<(usize, usize)> =
                sel.log.iter().filter(|s| s.class == class).map(|s| (s.prototype, s.popped)).collect();
            if got != expected || sel.selected[i] != expected.iter().map(|e| e.0).collect::<Vec<_>>() {
                mismatches += 1;
                break;
            }
        }
    }
    Ok(mismatches)
}

fn class_rows<'a>(emb: &'a Matrix, samples: &[LabeledSample], class: Class) -> Vec<&'a [f64]> {
    emb.iter_rows().zip(samples).filter(|(_, s)| s.y == class).map(|(r, _)| r).collect()
}

pub fn aps_oracle_and_stability(m: &ReproManifest) -> Result<CriterionReport> {
    let mismatches = aps_oracle_mismatches(m)?;
    let mut rows = Vec::new();
    let mut stable = 0;
    for &seed in &m.seeds {
        let data = seed_data(m, seed)?;
        let out = train_seed(&m.aps, seed, &data)?;
        let (x, _) = to_batch(&data.train)?;
        let emb = out.model.embed(&x)?;
        let live = class_rows(&emb, &data.train, Class::Live);
        let spoof = class_rows(&emb, &data.train, Class::Spoof);
        let [t_live, t_spoof] = default_thresholds(&out.bank, &live, &spoof);
        let sel = select_prototypes(&out.bank, &live, &spoof, t_live, t_spoof)?;
        let before = test_acer(&out, &out.bank, &m.aps, &data)?;
        let after = test_acer(&out, &sel.bank, &m.aps, &data)?;
        let n = sel.total_selected();
        let ok = (m.aps_count_range[0]..=m.aps_count_range[1]).contains(&n)
            && (after - before).abs() <= m.aps_max_acer_change;
        stable += usize::from(ok);
        rows.push(vec![
            seed.to_string(),
            sel.selected[0].len().to_string(),
            sel.selected[1].len().to_string(),
            before.to_string(),
            after.to_string(),
        ]);
    }
    Ok(CriterionReport {
        id: 5,
        name: "prototype selection",
        passed: mismatches == 0 && stable >= m.min_seed_wins,
        detail: format!(
            "oracle mismatches {mismatches}/{}; K={} pruned within [{}, {}] with |dACER| <= {:.1}pp on {stable}/{} seeds",
            m.aps_oracle_instances,
            m.aps.lda.k_init,
            m.aps_count_range[0],
            m.aps_count_range[1],
            100.0 * m.aps_max_acer_change,
            m.seeds.len()
        ),
        tables: vec![table(
            "aps.csv",
            &["seed", "selected_live", "selected_spoof", "test_acer_before", "test_acer_after"],
            rows,
        )?],
    })
}

pub fn adaptation(m: &ReproManifest) -> Result<CriterionReport> {
    let target_spec = shift_domain(&default_fig1_spec(), &m.shift_translation, m.shift_std_scale)?;
    let lda = m.adaptation.effective_lda();
    let mut rows = Vec::new();
    let mut wins = 0;
    for &seed in &m.seeds {
        let data = seed_data(m, seed)?;
        let target_test = sample_mixture(&target_spec, m.n_test, 4000 + seed)?;
        let shots = sample_mixture(&target_spec, m.target_shots, 5000 + seed)?;
        let out = train_seed(&m.adaptation, seed, &data)?;
        let adapted = adapt(&out.bank, &out.model, &shots)?;
        let target_hter = |bank: &PrototypeBank| -> Result<f64> {
            let thr = select_threshold(&score_samples(&out.model, bank, &lda, &data.dev)?)?;
            hter(&score_samples(&out.model, bank, &lda, &target_test)?, thr)
        };
        let (h0, h1) = (target_hter(&out.bank)?, target_hter(&adapted)?);
        let source = evaluate(&out.model, &out.bank, &lda, &data.dev, &data.test, &[])?.hter;
        wins += usize::from(h1 < h0);
        rows.push(vec![seed.to_string(), source.to_string(), h0.to_string(), h1.to_string()]);
    }
    Ok(CriterionReport {
        id: 6,
        name: "few-shot adaptation",
        passed: wins >= m.min_seed_wins,
        detail: format!("target HTER lowered on {wins}/{} seeds with {} shots", m.seeds.len(), m.target_shots),
        tables: vec![table("adaptation.csv", &["seed", "source_hter", "target_hter_unadapted", "target_hter_adapted"], rows)?],
    })
}

fn random_scored_set(rng: &mut ChaCha8Rng, max_n: usize) -> ScoredSet {
    let n = rng.gen_range(2..=max_n);
    let coarse = rng.gen_bool(0.5);
    let mut labels: Vec<Class> = (0..n).map(|_| if rng.gen::<bool>() { Class::Spoof } else { Class::Live }).collect();
    labels[0] = Class::Live;
    labels[1] = Class::Spoof;
    let scores = (0..n)
        .map(|_| if coarse { rng.gen_range(0..=10) as f64 / 10.0 } else { rng.gen::<f64>() })
        .collect();
    ScoredSet { scores, labels }
}

/// `(APCER, BPCER)` by direct counting.
fn brute_rates(set: &ScoredSet, thr: f64) -> (f64, f64) {
    let count = |class: Class, pred_spoof: bool| {
        set.scores.iter().zip(&set.labels).filter(|(&s, &y)| y == class && (s >= thr) == pred_spoof).count() as f64
    };
    let apcer = count(Class::Spoof, false) / (count(Class::Spoof, false) + count(Class::Spoof, true));
    let bpcer = count(Class::Live, true) / (count(Class::Live, false) + count(Class::Live, true));
    (apcer, bpcer)
}

fn brute_threshold(set: &ScoredSet) -> f64 {
    let mut uniq: Vec<f64> = Vec::new();
    for &s in &set.scores {
        if !uniq.contains(&s) {
            uniq.push(s);
        }
    }
    uniq.sort_by(f64::total_cmp);
    let mut cands = vec![0.0, 1.0];
    for w in uniq.windows(2) {
        cands.push((w[0] + w[1]) / 2.0);
    }
    let acer = |t: f64| {
        let (a, b) = brute_rates(set, t);
        (a + b) / 2.0
    };
    let mut best: Option<(f64, f64)> = None;
    for c in cands {
        let a = acer(c);
        match best {
            Some((bt, ba)) if ba < a || (ba == a && bt <= c) => {}
            _ => best = Some((c, a)),
        }
    }
    best.expect("at least two candidates").0
}

fn brute_tpr(set: &ScoredSet, target: f64) -> f64 {
    let total = |class: Class| set.labels.iter().filter(|&&y| y == class).count() as f64;
    let at_or_above = |class: Class, t: f64| {
        set.scores.iter().zip(&set.labels).filter(|(&s, &y)| y == class && s >= t).count() as f64
    };
    let mut thresholds: Vec<f64> = set.scores.clone();
    thresholds.push(f64::INFINITY);
    let mut best = 0.0f64;
    for t in thresholds {
        if at_or_above(Class::Live, t) / total(Class::Live) <= target {
            best = best.max(at_or_above(Class::Spoof, t) / total(Class::Spoof));
        }
    }
    best
}

/// Number of sets on which some metric disagrees with brute force.
pub fn metrics_oracle_mismatches(n_sets: usize, max_n: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..n_sets {
        let dev = random_scored_set(&mut rng, max_n);
        let test = random_scored_set(&mut rng, max_n);
        let mut ok = true;
        for thr in candidate_thresholds(&dev).into_iter().chain([0.25, 0.5]) {
            let r = rates_at_threshold(&dev, thr)?;
            ok &= (r.apcer, r.bpcer) == brute_rates(&dev, thr) && r.acer == (r.apcer + r.bpcer) / 2.0;
        }
        let thr = select_threshold(&dev)?;
        ok &= thr == brute_threshold(&dev);
        let (far, frr) = brute_rates(&test, thr);
        ok &= hter(&test, thr)? == (far + frr) / 2.0;
        for target in [0.01, 0.05, 0.1, 0.3, rng.gen_range(0.001..0.999)] {
            ok &= tpr_at_fpr(&test, target)? == brute_tpr(&test, target);
        }
        mismatches += usize::from(!ok);
    }
    Ok(mismatches)
}

pub fn metrics_oracle(m: &ReproManifest) -> Result<CriterionReport> {
    let mismatches = metrics_oracle_mismatches(m.metrics_sets, m.metrics_max_n, m.check_seed)?;
    Ok(CriterionReport {
        id: 7,
        name: "metrics oracle",
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches on {} random score sets (n <= {})", m.metrics_sets, m.metrics_max_n),
        tables: Vec::new(),
    })
}

/// Orthogonal matrix from Gram-Schmidt on random rows.
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in &rows {
            let c = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= c * y);
        }
        if norm(&v) > 1e-3 {
            rows.push(normalize(&v));
        }
    }
    Matrix::from_rows(&rows).expect("square")
}

struct LossInstance {
    embeddings: Matrix,
    labels: Vec<Class>,
    spoof_type: Vec<usize>,
    illum: Vec<usize>,
    bank: PrototypeBank,
    heads: AuxHeads,
}

impl LossInstance {
    fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let dim = rng.gen_range(2..=8);
        let b = rng.gen_range(1..=8);
        let live = (0..rng.gen_range(1..=4)).map(|_| random_unit(rng, dim)).collect();
        let spoof = (0..rng.gen_range(1..=4)).map(|_| random_unit(rng, dim)).collect();
        let rows: Vec<Vec<f64>> = (0..b).map(|_| random_unit(rng, dim)).collect();
        Ok(LossInstance {
            embeddings: Matrix::from_rows(&rows)?,
            labels: (0..b).map(|_| if rng.gen::<bool>() { Class::Spoof } else { Class::Live }).collect(),
            spoof_type: (0..b).map(|_| rng.gen_range(0..4)).collect(),
            illum: (0..b).map(|_| rng.gen_range(0..3)).collect(),
            bank: PrototypeBank::new(live, spoof)?,
            heads: AuxHeads::init(4, 3, dim, rng.gen())?,
        })
    }

    /// `[per-sample PD..., inter, intra, L_LDA, L_LDA_S]`.
    fn losses(&self, cfg: &LdaConfig) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = self
            .embeddings
            .iter_rows()
            .zip(&self.labels)
            .map(|(f, &y)| prototype_data_loss(&class_similarity(f, &self.bank, cfg.tau_w), y, cfg.s, cfg.m).loss)
            .collect();
        out.push(inter_center_loss(&self.bank, cfg.delta1).loss);
        out.push(intra_center_loss(&self.bank, cfg.delta2).loss);
        out.push(lda_loss(&self.embeddings, &self.labels, &self.bank, cfg)?.total);
        let targets = AuxTargets { spoof_type: &self.spoof_type, illum: &self.illum };
        out.push(lda_s_loss(&self.embeddings, &self.labels, targets, &self.bank, &self.heads, cfg)?.total);
        Ok(out)
    }

    fn permuted(&self, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut classes: [Vec<Vec<f64>>; 2] = Default::default();
        for c in Class::ALL {
            let mut p = self.bank.prototypes(c).to_vec();
            p.shuffle(rng);
            classes[c.index()] = p;
        }
        let [live, spoof] = classes;
        Ok(LossInstance { bank: PrototypeBank::new(live, spoof)?, ..self.clone_parts() })
    }

    fn rotated(&self, q: &Matrix) -> Result<Self> {
        let rot = |vs: &[Vec<f64>]| vs.iter().map(|v| q.matvec(v)).collect::<Vec<_>>();
        let rows: Vec<Vec<f64>> = self.embeddings.iter_rows().map(|f| q.matvec(f)).collect();
        let mut heads = self.heads.clone();
        for d in [&mut heads.spoof_type, &mut heads.illum] {
            for o in 0..d.weights.rows() {
                let w = q.matvec(d.weights.row(o));
                d.weights.row_mut(o).copy_from_slice(&w);
            }
        }
        Ok(LossInstance {
            embeddings: Matrix::from_rows(&rows)?,
            bank: PrototypeBank::new(rot(self.bank.prototypes(Class::Live)), rot(self.bank.prototypes(Class::Spoof)))?,
            heads,
            ..self.clone_parts()
        })
    }

    fn clone_parts(&self) -> Self {
        LossInstance {
            embeddings: self.embeddings.clone(),
            labels: self.labels.clone(),
            spoof_type: self.spoof_type.clone(),
            illum: self.illum.clone(),
            bank: self.bank.clone(),
            heads: self.heads.clone(),
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_unit_deviation<'a>(vs: impl Iterator<Item = &'a [f64]>) -> f64 {
    vs.map(|v| (norm(v) - 1.0).abs()).fold(0.0, f64::max)
}

pub fn invariance(m: &ReproManifest) -> Result<CriterionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(m.check_seed);
    let (mut perm_dev, mut rot_dev) = (0.0f64, 0.0f64);
    for _ in 0..m.invariance_instances {
        let inst = LossInstance::random(&mut rng)?;
        let base = inst.losses(&m.lda)?;
        perm_dev = perm_dev.max(max_abs_diff(&base, &inst.permuted(&mut rng)?.losses(&m.lda)?));
        let q = random_orthogonal(&mut rng, inst.bank.dim());
        rot_dev = rot_dev.max(max_abs_diff(&base, &inst.rotated(&q)?.losses(&m.lda)?));
    }

    // Unit norms along one full training run, then after adaptation.
    let seed = m.seeds.first().copied().unwrap_or(0);
    let data = seed_data(m, seed)?;
    let cfg = TrainConfig { seed, ..m.pc_benefit.clone() };
    let (mut emb_dev, mut bank_dev, mut steps) = (0.0f64, 0.0f64, 0usize);
    let mut failure = None;
    let out = train_observed(&cfg, &data.train, &data.dev, &mut |state, batch| {
        steps += 1;
        bank_dev = bank_dev.max(max_unit_deviation(Class::ALL.iter().flat_map(|&c| state.bank.prototypes(c)).map(Vec::as_slice)));
        match to_batch(batch).and_then(|(x, _)| state.model.embed(&x)) {
            Ok(e) => emb_dev = emb_dev.max(max_unit_deviation(e.iter_rows())),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let target_spec = shift_domain(&default_fig1_spec(), &m.shift_translation, m.shift_std_scale)?;
    let shots = sample_mixture(&target_spec, m.target_shots, 5000 + seed)?;
    let adapted = adapt(&out.bank, &out.model, &shots)?;
    let adapted_dev = max_unit_deviation(Class::ALL.iter().flat_map(|&c| adapted.prototypes(c)).map(Vec::as_slice));

    let tol = m.invariance_tolerance;
    let passed = perm_dev <= tol && rot_dev <= tol && emb_dev <= UNIT_TOL && bank_dev <= UNIT_TOL && adapted_dev <= UNIT_TOL;
    let rows = vec![
        vec!["permutation".into(), perm_dev.to_string()],
        vec!["orthogonal".into(), rot_dev.to_string()],
        vec!["embedding_norm".into(), emb_dev.to_string()],
        vec!["prototype_norm".into(), bank_dev.to_string()],
        vec!["adapted_norm".into(), adapted_dev.to_string()],
    ];
    Ok(CriterionReport {
        id: 8,
        name: "invariance",
        passed,
        detail: format!(
            "{} instances: permutation {perm_dev:.1e}, orthogonal {rot_dev:.1e} (tol {tol:.0e}); \
             unit-norm deviation over {steps} steps: embeddings {emb_dev:.1e}, prototypes {bank_dev:.1e}, adapted {adapted_dev:.1e}",
            m.invariance_instances
        ),
        tables: vec![table("invariance.csv", &["check", "max_abs_deviation"], rows)?],
    })
}

/// Criteria 1 to 8, in order.
pub fn run_all(m: &ReproManifest) -> Result<Vec<CriterionReport>> {
    Ok(vec![
        gradient_oracle(m)?,
        reduction_oracle(m)?,
        multi_prototype(m)?,
        pc_benefit(m)?,
        aps_oracle_and_stability(m)?,
        adaptation(m)?,
        metrics_oracle(m)?,
        invariance(m)?,
    ])
}

pub fn tables(reports: &[CriterionReport]) -> Vec<&Table> {
    reports.iter().flat_map(|r| &r.tables).collect()
}

/// Compares the tables of two runs byte for byte.
pub fn determinism(first: &[CriterionReport], second: &[CriterionReport]) -> CriterionReport {
    let (a, b) = (tables(first), tables(second));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.name.as_str()).collect();
    let passed = a.len() == b.len() && differing.is_empty();
    CriterionReport {
        id: 9,
        name: "determinism",
        passed,
        detail: if passed {
            format!("{} CSV tables identical across two runs", a.len())
        } else {
            format!("tables differ: {}", differing.join(", "))
        },
        tables: Vec::new(),
    }
}
