//! Mini-batch SGD over the embedding network, the prototype bank and the
//! optional auxiliary heads, plus evaluation and a finite-difference gradient
//! checker for every loss path.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{
    center_extremes, class_similarity, csv_err, init_bank, inter_center_loss, intra_center_loss, lda_loss,
    lda_s_loss, spoof_score, AuxHeads, AuxTargets, BankGrads, Class, LdaConfig, PrototypeBank,
};
use crate::linalg::{norm, normalize, Matrix};
use crate::metrics::{rates_at_threshold, select_threshold, tpr_at_fpr, Rates, ScoredSet};
use crate::model::MlpParams;
use crate::synthdata::{to_batch, LabeledSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lda: LdaConfig,
    /// Input dim, hidden sizes, embedding dim.
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0 for plain SGD, 0.9 for heavy-ball momentum.
    pub momentum: f64,
    pub seed: u64,
    pub use_pc_inter: bool,
    pub use_pc_intra: bool,
    pub use_aux: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lda: LdaConfig::default(),
            layer_sizes: vec![2, 32, 8],
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            use_pc_inter: true,
            use_pc_intra: true,
            use_aux: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lda.validate()?;
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::config("layer_sizes needs >= 2 positive entries"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Loss weights with the ablation flags applied.
    pub fn effective_lda(&self) -> LdaConfig {
        LdaConfig {
            lambda1: if self.use_pc_inter { self.lda.lambda1 } else { 0.0 },
            lambda2: if self.use_pc_intra { self.lda.lambda2 } else { 0.0 },
            ..self.lda.clone()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub pd: f64,
    pub pc_inter: f64,
    pub pc_intra: f64,
    pub aux: f64,
    /// Training-set ACER at threshold 0.5.
    pub train_acer: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Development threshold and ACER after the last epoch.
    pub final_dev_threshold: f64,
    pub final_dev_acer: f64,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for rec in &self.epochs {
            wtr.serialize(rec).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μ v + g`, `θ ← θ − lr v`.
#[derive(Clone, Debug)]
struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        debug_assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub pd: f64,
    pub pc_inter: f64,
    pub pc_intra: f64,
    pub aux: f64,
}

/// Trainable state: network, prototypes, optional auxiliary heads.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: MlpParams,
    pub bank: PrototypeBank,
    pub aux: Option<AuxHeads>,
    cfg: TrainConfig,
    lda: LdaConfig,
    opt: Sgd,
}

impl TrainState {
    /// Seeds: network `seed`, prototypes `seed + 1`, auxiliary heads `seed + 2`.
    pub fn init(cfg: &TrainConfig, train_set: &[LabeledSample]) -> Result<Self> {
        cfg.validate()?;
        let model = MlpParams::init(&cfg.layer_sizes, cfg.seed)?;
        let bank = init_bank(cfg.lda.k_init, cfg.embedding_dim(), cfg.seed.wrapping_add(1))?;
        let aux = if cfg.use_aux {
            let n_s = train_set.iter().map(|s| s.spoof_type + 1).max().unwrap_or(1);
            let n_i = train_set.iter().map(|s| s.illum + 1).max().unwrap_or(1);
            Some(AuxHeads::init(n_s, n_i, cfg.embedding_dim(), cfg.seed.wrapping_add(2))?)
        } else {
            None
        };
        Ok(TrainState {
            model,
            bank,
            aux,
            lda: cfg.effective_lda(),
            cfg: cfg.clone(),
            opt: Sgd { lr: cfg.lr, momentum: cfg.momentum, velocity: Vec::new() },
        })
    }

    /// Losses and all gradients on one batch, without updating anything.
    pub fn gradients(&self, batch: &[LabeledSample]) -> Result<(StepLosses, MlpParams, BankGrads, Option<AuxHeads>)> {
        let (x, labels) = to_batch(batch)?;
        let (emb, tape) = self.model.forward(&x)?;
        let (losses, grad_emb, grad_bank, grad_aux) = match &self.aux {
            Some(heads) => {
                let st: Vec<usize> = batch.iter().map(|s| s.spoof_type).collect();
                let il: Vec<usize> = batch.iter().map(|s| s.illum).collect();
                let out = lda_s_loss(&emb, &labels, AuxTargets { spoof_type: &st, illum: &il }, &self.bank, heads, &self.lda)?;
                let losses = StepLosses {
                    total: out.total,
                    pd: out.lda.pd,
                    pc_inter: out.lda.inter,
                    pc_intra: out.lda.intra,
                    aux: out.aux,
                };
                (losses, out.grad_embeddings, out.grad_bank, Some(out.grad_heads))
            }
            None => {
                let out = lda_loss(&emb, &labels, &self.bank, &self.lda)?;
                let losses = StepLosses { total: out.total, pd: out.pd, pc_inter: out.inter, pc_intra: out.intra, aux: 0.0 };
                (losses, out.grad_embeddings, out.grad_bank, None)
            }
        };
        let grad_model = self.model.backward(&tape, &grad_emb)?;
        Ok((losses, grad_model, grad_bank, grad_aux))
    }

    /// One optimizer step followed by re-projection of the prototypes onto the sphere.
    pub fn step(&mut self, batch: &[LabeledSample]) -> Result<StepLosses> {
        let (losses, grad_model, grad_bank, grad_aux) = self.gradients(batch)?;
        if !losses.total.is_finite() {
            return Err(Error::Diverged { epoch: 0, step: 0 });
        }
        let mut params = self.model.tensors_mut();
        let mut grads = grad_model.tensors();
        let [live, spoof] = &grad_bank.classes;
        let [bank_live, bank_spoof] = self.bank.classes_mut();
        params.extend(bank_live.iter_mut().map(|p| p.as_mut_slice()));
        params.extend(bank_spoof.iter_mut().map(|p| p.as_mut_slice()));
        grads.extend(live.iter().map(|g| g.as_slice()));
        grads.extend(spoof.iter().map(|g| g.as_slice()));
        if let (Some(heads), Some(g)) = (self.aux.as_mut(), grad_aux.as_ref()) {
            params.extend(heads.tensors_mut());
            grads.extend(g.tensors());
        }
        self.opt.step(params, grads);
        self.bank.renormalize();
        Ok(losses)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpParams,
    pub bank: PrototypeBank,
    pub aux: Option<AuxHeads>,
    pub history: TrainHistory,
}

fn require_both_classes(set: &[LabeledSample], name: &str) -> Result<()> {
    for c in Class::ALL {
        if !set.iter().any(|s| s.y == c) {
            return Err(Error::config(format!("{name} set has no {c} samples")));
        }
    }
    Ok(())
}

pub fn train(cfg: &TrainConfig, train_set: &[LabeledSample], dev_set: &[LabeledSample]) -> Result<TrainOutcome> {
    train_observed(cfg, train_set, dev_set, &mut |_, _| {})
}

/// [`train`], calling `observer` after every optimizer step with the updated
/// state and the batch that produced it.
pub fn train_observed(
    cfg: &TrainConfig,
    train_set: &[LabeledSample],
    dev_set: &[LabeledSample],
    observer: &mut dyn FnMut(&TrainState, &[LabeledSample]),
) -> Result<TrainOutcome> {
    require_both_classes(train_set, "training")?;
    require_both_classes(dev_set, "development")?;
    let mut state = TrainState::init(cfg, train_set)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = StepLosses::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let l = state.step(&batch).map_err(|e| match e {
                Error::Diverged { .. } => Error::Diverged { epoch, step },
                other => other,
            })?;
            if !state.model.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            observer(&state, &batch);
            // Sample-weighted, so epoch values do not depend on how batches split.
            let w = chunk.len() as f64;
            sums.total += w * l.total;
            sums.pd += w * l.pd;
            sums.pc_inter += w * l.pc_inter;
            sums.pc_intra += w * l.pc_intra;
            sums.aux += w * l.aux;
        }
        let k = train_set.len() as f64;
        let train_scores = score_samples(&state.model, &state.bank, &state.lda, train_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            total: sums.total / k,
            pd: sums.pd / k,
            pc_inter: sums.pc_inter / k,
            pc_intra: sums.pc_intra / k,
            aux: sums.aux / k,
            train_acer: rates_at_threshold(&train_scores, 0.5)?.acer,
        });
    }
    let dev_scores = score_samples(&state.model, &state.bank, &state.lda, dev_set)?;
    let thr = select_threshold(&dev_scores)?;
    history.final_dev_threshold = thr;
    history.final_dev_acer = rates_at_threshold(&dev_scores, thr)?.acer;
    Ok(TrainOutcome { model: state.model, bank: state.bank, aux: state.aux, history })
}

/// Spoof scores for every sample, in input order.
pub fn score_samples(
    model: &MlpParams,
    bank: &PrototypeBank,
    lda: &LdaConfig,
    samples: &[LabeledSample],
) -> Result<ScoredSet> {
    if samples.is_empty() {
        return ScoredSet::new(Vec::new(), Vec::new());
    }
    let (x, labels) = to_batch(samples)?;
    let emb = model.embed(&x)?;
    let scores = emb.iter_rows().map(|f| spoof_score(&class_similarity(f, bank, lda.tau_w), lda.s)).collect();
    ScoredSet::new(scores, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub dev: Rates,
    pub test: Rates,
    pub hter: f64,
    pub tpr_at_fpr: Vec<TprPoint>,
}

pub const DEFAULT_FPR_TARGETS: [f64; 3] = [0.01, 0.005, 0.001];

/// Threshold on `dev`, then APCER/BPCER/ACER, HTER and TPR@FPR on `test`.
pub fn evaluate(
    model: &MlpParams,
    bank: &PrototypeBank,
    lda: &LdaConfig,
    dev_set: &[LabeledSample],
    test_set: &[LabeledSample],
    fpr_targets: &[f64],
) -> Result<EvalReport> {
    let dev = score_samples(model, bank, lda, dev_set)?;
    let test = score_samples(model, bank, lda, test_set)?;
    evaluate_scores(&dev, &test, fpr_targets)
}

pub fn evaluate_scores(dev: &ScoredSet, test: &ScoredSet, fpr_targets: &[f64]) -> Result<EvalReport> {
    let threshold = select_threshold(dev)?;
    let test_rates = rates_at_threshold(test, threshold)?;
    Ok(EvalReport {
        threshold,
        dev: rates_at_threshold(dev, threshold)?,
        test: test_rates,
        hter: crate::metrics::hter(test, threshold)?,
        tpr_at_fpr: fpr_targets
            .iter()
            .map(|&fpr| Ok(TprPoint { fpr, tpr: tpr_at_fpr(test, fpr)? }))
            .collect::<Result<_>>()?,
    })
}

impl EvalReport {
    /// Rows `metric,split,threshold,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["metric", "split", "threshold", "value"]).map_err(csv_err)?;
        let thr = self.threshold.to_string();
        let mut row = |metric: &str, split: &str, value: f64| {
            wtr.write_record([metric, split, thr.as_str(), &value.to_string()]).map_err(csv_err)
        };
        for (split, r) in [("dev", &self.dev), ("test", &self.test)] {
            row("apcer", split, r.apcer)?;
            row("bpcer", split, r.bpcer)?;
            row("acer", split, r.acer)?;
        }
        row("hter", "test", self.hter)?;
        for p in &self.tpr_at_fpr {
            row(&format!("tpr@fpr={}", p.fpr), "test", p.tpr)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Largest relative error seen per gradient path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Instances discarded for lying within the kink margin.
    pub resampled: usize,
    pub tolerance: f64,
    pub pd: f64,
    pub pc_inter: f64,
    pub pc_intra: f64,
    pub lda: f64,
    pub lda_s: f64,
    /// Network parameters, end to end through the full objective.
    pub model: f64,
    pub max_rel_error: f64,
    /// True when every path is below tolerance; vacuously true for zero trials.
    pub passed: bool,
}

/// Instances closer than this to a hinge, tie, clamp or ReLU kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|)` on the whole gradient vector.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale.max(1e-12)
    }
}

fn central_difference(x: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(x);
            x[i] = orig - FD_STEP;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

struct Instance {
    bank: PrototypeBank,
    embeddings: Matrix,
    labels: Vec<Class>,
    spoof_type: Vec<usize>,
    illum: Vec<usize>,
    heads: AuxHeads,
    model: MlpParams,
    inputs: Matrix,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if norm(&v) > 1e-3 {
            return normalize(&v);
        }
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let dim = rng.gen_range(2..=8);
    let k_live = rng.gen_range(1..=4);
    let k_spoof = rng.gen_range(1..=4);
    let b = rng.gen_range(1..=8);
    let live = (0..k_live).map(|_| random_unit(rng, dim)).collect();
    let spoof = (0..k_spoof).map(|_| random_unit(rng, dim)).collect();
    let bank = PrototypeBank::new(live, spoof)?;
    let rows: Vec<Vec<f64>> = (0..b).map(|_| random_unit(rng, dim)).collect();
    let embeddings = Matrix::from_rows(&rows)?;
    let labels: Vec<Class> = (0..b).map(|_| if rng.gen_bool(0.5) { Class::Spoof } else { Class::Live }).collect();
    let n_s = rng.gen_range(2..=4);
    let n_i = rng.gen_range(2..=3);
    let spoof_type = (0..b).map(|_| rng.gen_range(0..n_s)).collect();
    let illum = (0..b).map(|_| rng.gen_range(0..n_i)).collect();
    let mut heads = AuxHeads::init(n_s, n_i, dim, rng.gen())?;
    for t in heads.tensors_mut() {
        for x in t.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    let d_in = rng.gen_range(1..=4);
    let hidden = rng.gen_range(2..=8);
    let mut model = MlpParams::init(&[d_in, hidden, dim], rng.gen())?;
    for t in model.tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let inputs = Matrix::from_vec(b, d_in, (0..b * d_in).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
    Ok(Instance { bank, embeddings, labels, spoof_type, illum, heads, model, inputs })
}

fn sorted_gap(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// True when a finite-difference probe could straddle a non-smooth point.
fn near_kink(inst: &Instance, cfg: &LdaConfig) -> bool {
    let bank = &inst.bank;
    let mut inter_sims = Vec::new();
    for p in bank.prototypes(Class::Live) {
        for q in bank.prototypes(Class::Spoof) {
            inter_sims.push(crate::linalg::dot(p, q));
        }
    }
    let mut intra_sims = Vec::new();
    for c in Class::ALL {
        let ps = bank.prototypes(c);
        for r in 0..ps.len() {
            for t in r + 1..ps.len() {
                intra_sims.push(crate::linalg::dot(&ps[r], &ps[t]));
            }
        }
    }
    if sorted_gap(inter_sims.clone()) < KINK_MARGIN || sorted_gap(intra_sims.clone()) < KINK_MARGIN {
        return true;
    }
    if intra_sims.iter().any(|s| (s - cfg.delta2).abs() < KINK_MARGIN) {
        return true;
    }
    if let (mx, Some(mn)) = center_extremes(bank) {
        if (mx.sim - mn.sim + cfg.delta1).abs() < KINK_MARGIN {
            return true;
        }
    }
    for f in inst.embeddings.iter_rows() {
        let pred = class_similarity(f, bank, cfg.tau_w);
        if pred.cos.iter().any(|c| c.abs() > 1.0 - KINK_MARGIN) {
            return true;
        }
    }
    let Ok((emb, tape)) = inst.model.forward(&inst.inputs) else { return true };
    let pre = tape.pre_activations();
    if pre[..pre.len() - 1].iter().any(|m| m.as_slice().iter().any(|z| z.abs() < KINK_MARGIN)) {
        return true;
    }
    if tape.feature_norms().iter().any(|n| *n < KINK_MARGIN) {
        return true;
    }
    for f in emb.iter_rows() {
        let pred = class_similarity(f, bank, cfg.tau_w);
        if pred.cos.iter().any(|c| c.abs() > 1.0 - KINK_MARGIN) {
            return true;
        }
    }
    false
}

fn bank_from_flat(template: &PrototypeBank, flat: &[f64]) -> PrototypeBank {
    let mut bank = template.clone();
    let dim = bank.dim();
    let mut off = 0;
    for c in Class::ALL {
        for p in bank.prototypes_mut(c) {
            p.copy_from_slice(&flat[off..off + dim]);
            off += dim;
        }
    }
    bank
}

fn flat_bank(bank: &PrototypeBank) -> Vec<f64> {
    Class::ALL.iter().flat_map(|&c| bank.prototypes(c).iter().flatten().copied()).collect()
}

fn heads_from_flat(template: &AuxHeads, flat: &[f64]) -> AuxHeads {
    let mut h = template.clone();
    let mut off = 0;
    for t in h.tensors_mut() {
        t.copy_from_slice(&flat[off..off + t.len()]);
        off += t.len();
    }
    h
}

fn model_from_flat(template: &MlpParams, flat: &[f64]) -> MlpParams {
    let mut m = template.clone();
    let mut off = 0;
    for t in m.tensors_mut() {
        t.copy_from_slice(&flat[off..off + t.len()]);
        off += t.len();
    }
    m
}

/// Variables of a loss: embeddings, prototypes, auxiliary heads.
fn split3(v: &[f64], a: usize, b: usize) -> (&[f64], &[f64], &[f64]) {
    (&v[..a], &v[a..a + b], &v[a + b..])
}

fn check_instance(inst: &Instance, cfg: &LdaConfig, corrupt: f64) -> Result<[f64; 6]> {
    let targets = AuxTargets { spoof_type: &inst.spoof_type, illum: &inst.illum };
    let n_emb = inst.embeddings.as_slice().len();
    let bank_flat = flat_bank(&inst.bank);
    let n_bank = bank_flat.len();
    let heads_flat: Vec<f64> = inst.heads.tensors().concat();
    let (b, dim) = (inst.embeddings.rows(), inst.embeddings.cols());
    let corrupt_vec = |mut v: Vec<f64>| {
        if let Some(x) = v.first_mut() {
            *x = *x * (1.0 + corrupt) + corrupt;
        }
        v
    };

    let pd_cfg = LdaConfig { lambda1: 0.0, lambda2: 0.0, ..cfg.clone() };
    let eval_lda = |x: &[f64], c: &LdaConfig| -> f64 {
        let (e, p, _) = split3(x, n_emb, n_bank);
        let emb = Matrix::from_vec(b, dim, e.to_vec()).expect("shape");
        lda_loss(&emb, &inst.labels, &bank_from_flat(&inst.bank, p), c).map(|o| o.total).unwrap_or(f64::NAN)
    };
    let lda_grads = |c: &LdaConfig| -> Result<Vec<f64>> {
        let o = lda_loss(&inst.embeddings, &inst.labels, &inst.bank, c)?;
        let mut g = o.grad_embeddings.as_slice().to_vec();
        g.extend(o.grad_bank.flatten());
        Ok(corrupt_vec(g))
    };
    let mut x: Vec<f64> = inst.embeddings.as_slice().to_vec();
    x.extend(&bank_flat);

    let pd = relative_error(&lda_grads(&pd_cfg)?, &central_difference(&mut x.clone(), &mut |v| eval_lda(v, &pd_cfg)));
    let lda = relative_error(&lda_grads(cfg)?, &central_difference(&mut x.clone(), &mut |v| eval_lda(v, cfg)));

    let mut p = bank_flat.clone();
    let inter_a = corrupt_vec(inter_center_loss(&inst.bank, cfg.delta1).grads.flatten());
    let inter_n = central_difference(&mut p, &mut |v| inter_center_loss(&bank_from_flat(&inst.bank, v), cfg.delta1).loss);
    let intra_a = corrupt_vec(intra_center_loss(&inst.bank, cfg.delta2).grads.flatten());
    let intra_n = central_difference(&mut p, &mut |v| intra_center_loss(&bank_from_flat(&inst.bank, v), cfg.delta2).loss);

    let eval_s = |v: &[f64]| -> f64 {
        let (e, p, h) = split3(v, n_emb, n_bank);
        let emb = Matrix::from_vec(b, dim, e.to_vec()).expect("shape");
        lda_s_loss(&emb, &inst.labels, targets, &bank_from_flat(&inst.bank, p), &heads_from_flat(&inst.heads, h), cfg)
            .map(|o| o.total)
            .unwrap_or(f64::NAN)
    };
    let s_out = lda_s_loss(&inst.embeddings, &inst.labels, targets, &inst.bank, &inst.heads, cfg)?;
    let mut s_a = s_out.grad_embeddings.as_slice().to_vec();
    s_a.extend(s_out.grad_bank.flatten());
    s_a.extend(s_out.grad_heads.tensors().concat());
    let mut xs = x.clone();
    xs.extend(&heads_flat);
    let lda_s = relative_error(&corrupt_vec(s_a), &central_difference(&mut xs, &mut |v| eval_s(v)));

    // End to end: network parameters through the full objective.
    let eval_model = |v: &[f64]| -> f64 {
        let m = model_from_flat(&inst.model, v);
        let emb = m.embed(&inst.inputs).expect("shape");
        lda_s_loss(&emb, &inst.labels, targets, &inst.bank, &inst.heads, cfg).map(|o| o.total).unwrap_or(f64::NAN)
    };
    let (emb, tape) = inst.model.forward(&inst.inputs)?;
    let out = lda_s_loss(&emb, &inst.labels, targets, &inst.bank, &inst.heads, cfg)?;
    let gm = inst.model.backward(&tape, &out.grad_embeddings)?;
    let mut theta: Vec<f64> = inst.model.tensors().concat();
    let model = relative_error(&corrupt_vec(gm.tensors().concat()), &central_difference(&mut theta, &mut |v| eval_model(v)));

    Ok([pd, relative_error(&inter_a, &inter_n), relative_error(&intra_a, &intra_n), lda, lda_s, model])
}

/// Compares every analytic gradient with central finite differences on
/// `n_trials` random small instances (N ≤ 8, K ≤ 4, batch ≤ 8).
pub fn grad_check(cfg: &LdaConfig, n_trials: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_with_corruption(cfg, n_trials, tolerance, seed, 0.0)
}

/// [`grad_check`] with the first analytic component of every gradient
/// perturbed by `corrupt`; a negative control for the checker itself.
#[doc(hidden)]
pub fn grad_check_with_corruption(
    cfg: &LdaConfig,
    n_trials: usize,
    tolerance: f64,
    seed: u64,
    corrupt: f64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { tolerance, ..Default::default() };
    while report.trials < n_trials {
        let inst = random_instance(&mut rng)?;
        if near_kink(&inst, cfg) {
            report.resampled += 1;
            continue;
        }
        let errs = check_instance(&inst, cfg, corrupt)?;
        let slots = [
            &mut report.pd,
            &mut report.pc_inter,
            &mut report.pc_intra,
            &mut report.lda,
            &mut report.lda_s,
            &mut report.model,
        ];
        for (slot, e) in slots.into_iter().zip(errs) {
            // NaN must not be swallowed by max
            *slot = if e.is_nan() || slot.is_nan() { f64::NAN } else { slot.max(e) };
        }
        report.trials += 1;
    }
    report.max_rel_error = [report.pd, report.pc_inter, report.pc_intra, report.lda, report.lda_s, report.model]
        .into_iter()
        .fold(0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) });
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{default_fig1_spec, sample_mixture};

    fn small_cfg() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 32, layer_sizes: vec![2, 8, 4], ..TrainConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..small_cfg() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..small_cfg() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..small_cfg() }.validate().is_err());
        assert!(TrainConfig { layer_sizes: vec![2], ..small_cfg() }.validate().is_err());
        small_cfg().validate().unwrap();
    }

    #[test]
    fn zero_lr_is_a_null_step() {
        let data = sample_mixture(&default_fig1_spec(), 200, 1).unwrap();
        let cfg = TrainConfig { lr: 0.0, epochs: 3, ..small_cfg() };
        let init = TrainState::init(&cfg, &data).unwrap();
        let out = train(&cfg, &data, &data).unwrap();
        assert_eq!(out.model, init.model);
        assert_eq!(out.bank, init.bank);
        let h = &out.history.epochs;
        assert!(h.windows(2).all(|w| w[0].train_acer == w[1].train_acer));
        assert!(h.windows(2).all(|w| (w[0].total - w[1].total).abs() < 1e-12));
    }

    #[test]
    fn single_step_matches_analytic_gradient() {
        let data = sample_mixture(&default_fig1_spec(), 64, 2).unwrap();
        let cfg = TrainConfig { lr: 0.05, momentum: 0.0, epochs: 1, batch_size: 64, ..small_cfg() };
        let mut state = TrainState::init(&cfg, &data).unwrap();
        let before = state.clone();
        let (_, gm, gb, _) = before.gradients(&data).unwrap();
        state.step(&data).unwrap();
        for ((after, b), g) in state.model.tensors().iter().zip(before.model.tensors()).zip(gm.tensors()) {
            for i in 0..after.len() {
                assert!((after[i] - (b[i] - cfg.lr * g[i])).abs() < 1e-15);
            }
        }
        for c in Class::ALL {
            for (r, p) in state.bank.prototypes(c).iter().enumerate() {
                let raw: Vec<f64> =
                    before.bank.get(c, r).iter().zip(gb.get(c, r)).map(|(p, g)| p - cfg.lr * g).collect();
                let want = normalize(&raw);
                for (a, w) in p.iter().zip(&want) {
                    assert!((a - w).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_unit_prototypes() {
        let data = sample_mixture(&default_fig1_spec(), 300, 3).unwrap();
        let cfg = TrainConfig { use_aux: true, ..small_cfg() };
        let a = train(&cfg, &data, &data).unwrap();
        let b = train(&cfg, &data, &data).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.history, b.history);
        assert!(a.bank.is_unit());
        assert_eq!(a.history.epochs.len(), 2);
    }

    #[test]
    fn missing_class_rejected() {
        let data: Vec<_> = sample_mixture(&default_fig1_spec(), 100, 3).unwrap().into_iter().filter(|s| s.y == Class::Live).collect();
        assert!(matches!(train(&small_cfg(), &data, &data), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let data = sample_mixture(&default_fig1_spec(), 100, 3).unwrap();
        let mut bad = data.clone();
        bad[5].x[0] = f64::INFINITY;
        let err = train(&small_cfg(), &bad, &data).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn evaluate_perfect_scores() {
        let dev = ScoredSet::new(vec![0.1, 0.2, 0.9, 0.95], vec![Class::Live, Class::Live, Class::Spoof, Class::Spoof]).unwrap();
        let r = evaluate_scores(&dev, &dev, &DEFAULT_FPR_TARGETS).unwrap();
        assert_eq!(r.test.acer, 0.0);
        assert_eq!(r.tpr_at_fpr.len(), 3);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,split,threshold,value\n"));
        assert!(text.contains("tpr@fpr=0.001,test"));
    }

    #[test]
    fn grad_check_passes_and_catches_corruption() {
        let cfg = LdaConfig::default();
        let r = grad_check(&cfg, 10, 1e-5, 4).unwrap();
        assert!(r.passed, "{r:?}");
        let bad = grad_check_with_corruption(&cfg, 10, 1e-5, 4, 0.5).unwrap();
        assert!(!bad.passed);
        let empty = grad_check(&cfg, 0, 1e-5, 4).unwrap();
        assert!(empty.passed);
        assert_eq!(empty.trials, 0);
    }
}
