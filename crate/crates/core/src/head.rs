//! Multi-prototype classification head.
//!
//! An embedding `f` is compared with every prototype of a class; the class
//! cosine is the softmax-weighted mean of those similarities
//! (`cos θ_j = Σ_r softmax_r(⟨f,P_j^r⟩ / τ_w) ⟨f,P_j^r⟩`). The data loss is a
//! two-class additive-angular-margin cross-entropy over the class cosines,
//! and two hinge regularizers shape the prototype layout: the inter term keeps
//! the most similar Live/Spoof pair `δ1` below the least similar same-class
//! pair, the intra term pushes every same-class pair below `δ2`.
//!
//! All losses return analytic gradients. Prototype gradients are taken with
//! respect to the raw vectors; callers re-project onto the sphere after a step.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, normalize, Matrix};
use crate::model::Dense;

/// Tolerance on the unit-norm invariant of prototypes and embeddings.
pub const UNIT_TOL: f64 = 1e-9;

/// Cosines fed to the margin term are clamped to `[-1 + CLAMP, 1 - CLAMP]`.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Live = 0,
    Spoof = 1,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Live, Class::Spoof];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Class::Live),
            1 => Ok(Class::Spoof),
            _ => Err(Error::contract(format!("class index {i} is not 0 (Live) or 1 (Spoof)"))),
        }
    }

    #[inline]
    pub fn other(self) -> Self {
        match self {
            Class::Live => Class::Spoof,
            Class::Spoof => Class::Live,
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Class::Live => "live",
            Class::Spoof => "spoof",
        })
    }
}

/// Unit-norm prototypes for each class, indexed by [`Class::index`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    classes: [Vec<Vec<f64>>; 2],
}

/// Gradient with the same layout as a [`PrototypeBank`].
#[derive(Clone, Debug, PartialEq)]
pub struct BankGrads {
    pub classes: [Vec<Vec<f64>>; 2],
}

impl BankGrads {
    pub fn zeros_like(bank: &PrototypeBank) -> Self {
        let z = |c: Class| vec![vec![0.0; bank.dim()]; bank.count(c)];
        BankGrads { classes: [z(Class::Live), z(Class::Spoof)] }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &BankGrads) {
        for (mine, theirs) in self.classes.iter_mut().zip(&other.classes) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                axpy(alpha, b, a);
            }
        }
    }

    pub fn get(&self, class: Class, r: usize) -> &[f64] {
        &self.classes[class.index()][r]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.classes.iter().flatten().flatten().copied().collect()
    }
}

impl PrototypeBank {
    pub fn new(live: Vec<Vec<f64>>, spoof: Vec<Vec<f64>>) -> Result<Self> {
        if live.is_empty() || spoof.is_empty() {
            return Err(Error::config("each class needs at least one prototype"));
        }
        let dim = live[0].len();
        if dim == 0 {
            return Err(Error::config("prototype dimension must be positive"));
        }
        for (class, protos) in [(Class::Live, &live), (Class::Spoof, &spoof)] {
            for (r, p) in protos.iter().enumerate() {
                if p.len() != dim {
                    return Err(Error::config(format!(
                        "{class} prototype {r} has dimension {}, expected {dim}",
                        p.len()
                    )));
                }
                let n = norm(p);
                if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::config(format!(
                        "{class} prototype {r} has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(PrototypeBank { classes: [live, spoof] })
    }

    /// Normalizes every vector, then validates.
    pub fn from_unnormalized(live: Vec<Vec<f64>>, spoof: Vec<Vec<f64>>) -> Result<Self> {
        let n = |v: Vec<Vec<f64>>| v.iter().map(|p| normalize(p)).collect::<Vec<_>>();
        Self::new(n(live), n(spoof))
    }

    pub fn dim(&self) -> usize {
        self.classes[0][0].len()
    }

    pub fn count(&self, class: Class) -> usize {
        self.classes[class.index()].len()
    }

    pub fn total(&self) -> usize {
        self.count(Class::Live) + self.count(Class::Spoof)
    }

    pub fn prototypes(&self, class: Class) -> &[Vec<f64>] {
        &self.classes[class.index()]
    }

    pub fn get(&self, class: Class, r: usize) -> &[f64] {
        &self.classes[class.index()][r]
    }

    /// Raw mutable access for optimizer steps. The unit-norm invariant is the
    /// caller's to restore, see [`PrototypeBank::renormalize`].
    pub fn prototypes_mut(&mut self, class: Class) -> &mut [Vec<f64>] {
        &mut self.classes[class.index()]
    }

    /// Both classes at once, for optimizers updating every prototype in one pass.
    pub fn classes_mut(&mut self) -> [&mut [Vec<f64>]; 2] {
        let [live, spoof] = &mut self.classes;
        [live, spoof]
    }

    /// Projects every prototype back onto the unit sphere. Vectors already
    /// unit to machine precision are left bit-identical.
    pub fn renormalize(&mut self) {
        for p in self.classes.iter_mut().flatten() {
            if (norm(p) - 1.0).abs() > f64::EPSILON {
                *p = normalize(p);
            }
        }
    }

    pub fn push(&mut self, class: Class, prototype: Vec<f64>) -> Result<()> {
        if prototype.len() != self.dim() || (norm(&prototype) - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract("appended prototype must be unit-norm with matching dimension"));
        }
        self.classes[class.index()].push(prototype);
        Ok(())
    }

    /// Sub-bank keeping the listed prototype indices of each class, in the given order.
    pub fn select(&self, keep: &[Vec<usize>; 2]) -> Result<Self> {
        let pick = |c: Class| -> Result<Vec<Vec<f64>>> {
            keep[c.index()]
                .iter()
                .map(|&r| {
                    self.classes[c.index()]
                        .get(r)
                        .cloned()
                        .ok_or_else(|| Error::contract(format!("{c} prototype {r} out of range")))
                })
                .collect()
        };
        Self::new(pick(Class::Live)?, pick(Class::Spoof)?)
    }

    pub fn is_unit(&self) -> bool {
        self.classes.iter().flatten().all(|p| (norm(p) - 1.0).abs() <= UNIT_TOL)
    }

    /// One row per prototype: `class,index,x0,..,x{N-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["class".to_string(), "index".to_string()];
        header.extend((0..self.dim()).map(|i| format!("x{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for class in Class::ALL {
            for (r, p) in self.prototypes(class).iter().enumerate() {
                let mut rec = vec![class.index().to_string(), r.to_string()];
                rec.extend(p.iter().map(|x| x.to_string()));
                wtr.write_record(&rec).map_err(csv_err)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut classes: [Vec<(usize, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::Parse(format!("row {line}: missing field {i}")));
            let class: usize = field(0)?.trim().parse().map_err(|e| Error::Parse(format!("row {line}: {e}")))?;
            let index: usize = field(1)?.trim().parse().map_err(|e| Error::Parse(format!("row {line}: {e}")))?;
            let coords = (2..rec.len())
                .map(|i| field(i)?.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {line}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            classes[Class::from_index(class)?.index()].push((index, coords));
        }
        let [mut live, mut spoof] = classes;
        live.sort_by_key(|(i, _)| *i);
        spoof.sort_by_key(|(i, _)| *i);
        Self::new(live.into_iter().map(|(_, v)| v).collect(), spoof.into_iter().map(|(_, v)| v).collect())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// `K_init` prototypes per class, uniform in `[-1, 1]^N` then normalized.
pub fn init_bank(k_init: usize, dim: usize, seed: u64) -> Result<PrototypeBank> {
    if k_init == 0 || dim == 0 {
        return Err(Error::config("init_bank needs k_init >= 1 and dim >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            // A zero draw cannot be normalized; vanishingly rare.
            if norm(&v) > 1e-6 {
                return normalize(&v);
            }
        }
    };
    let live = (0..k_init).map(|_| draw(&mut rng)).collect();
    let spoof = (0..k_init).map(|_| draw(&mut rng)).collect();
    PrototypeBank::new(live, spoof)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaConfig {
    /// Logit scale.
    pub s: f64,
    /// Additive angular margin in radians.
    pub m: f64,
    /// Temperature of the per-class prototype softmax.
    pub tau_w: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,
    pub lambda_aux: f64,
    pub k_init: usize,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            s: 64.0,
            m: 0.7,
            tau_w: 0.1,
            delta1: 0.5,
            delta2: 0.0,
            lambda1: 0.1,
            lambda2: 0.001,
            lambda_s: 0.1,
            lambda_i: 0.001,
            lambda_aux: 1.0,
            k_init: 4,
        }
    }
}

impl LdaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("invalid LdaConfig: {what}")));
        let finite = [
            self.s, self.m, self.tau_w, self.delta1, self.delta2, self.lambda1, self.lambda2,
            self.lambda_s, self.lambda_i, self.lambda_aux,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return bad("non-finite value");
        }
        if self.s <= 0.0 {
            return bad("s must be > 0");
        }
        if self.tau_w <= 0.0 {
            return bad("tau_w must be > 0");
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.m) {
            return bad("m must lie in [0, pi/2)");
        }
        if !(0.0..=2.0).contains(&self.delta1) {
            return bad("delta1 must lie in [0, 2]");
        }
        if !(-1.0..=1.0).contains(&self.delta2) {
            return bad("delta2 must lie in [-1, 1]");
        }
        if [self.lambda1, self.lambda2, self.lambda_s, self.lambda_i, self.lambda_aux]
            .iter()
            .any(|l| *l < 0.0)
        {
            return bad("balance weights must be >= 0");
        }
        if self.k_init == 0 {
            return bad("k_init must be >= 1");
        }
        Ok(())
    }
}

/// Aggregated class cosines for one embedding, plus what produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrediction {
    pub cos: [f64; 2],
    /// `⟨f, P_j^r⟩` per class.
    pub sims: [Vec<f64>; 2],
    /// Softmax aggregation weights per class; each sums to 1.
    pub weights: [Vec<f64>; 2],
    pub tau_w: f64,
}

impl ClassPrediction {
    pub fn cos(&self, class: Class) -> f64 {
        self.cos[class.index()]
    }

    /// `∂ cos θ_j / ∂ sim_r = w_r (1 + (sim_r − cos θ_j) / τ_w)`.
    pub fn cos_grad_wrt_sims(&self, class: Class) -> Vec<f64> {
        let j = class.index();
        let c = self.cos[j];
        self.weights[j]
            .iter()
            .zip(&self.sims[j])
            .map(|(w, s)| w * (1.0 + (s - c) / self.tau_w))
            .collect()
    }
}

fn softmax_scaled(values: &[f64], inv_temp: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) * inv_temp).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn class_similarity(embedding: &[f64], bank: &PrototypeBank, tau_w: f64) -> ClassPrediction {
    let per_class = |c: Class| {
        let sims: Vec<f64> = bank.prototypes(c).iter().map(|p| dot(embedding, p)).collect();
        let weights = softmax_scaled(&sims, 1.0 / tau_w);
        let cos = weights.iter().zip(&sims).map(|(w, s)| w * s).sum::<f64>();
        (cos, sims, weights)
    };
    let (c0, s0, w0) = per_class(Class::Live);
    let (c1, s1, w1) = per_class(Class::Spoof);
    ClassPrediction { cos: [c0, c1], sims: [s0, s1], weights: [w0, w1], tau_w }
}

/// Probability of Spoof, `softmax(s·cos θ_0, s·cos θ_1)[1]`, margin excluded.
pub fn spoof_score(pred: &ClassPrediction, s: f64) -> f64 {
    sigmoid(s * (pred.cos[1] - pred.cos[0]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdLoss {
    pub loss: f64,
    /// Gradient with respect to `[cos θ_0, cos θ_1]`.
    pub grad_cos: [f64; 2],
}

/// `cos(θ + m)` for `cos θ = c`, with `c` clamped away from ±1, and its
/// derivative in `c` (zero where the clamp is active).
pub fn margin_cos(c: f64, m: f64) -> (f64, f64) {
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let cc = c.clamp(lo, hi);
    let sin = (1.0 - cc * cc).sqrt();
    let (sm, cm) = m.sin_cos();
    let value = cc * cm - sin * sm;
    let deriv = if c > lo && c < hi { cm + sm * cc / sin } else { 0.0 };
    (value, deriv)
}

/// Two-class additive-angular-margin cross-entropy over aggregated cosines.
pub fn prototype_data_loss(pred: &ClassPrediction, y: Class, s: f64, m: f64) -> PdLoss {
    let (target, dtarget) = margin_cos(pred.cos(y), m);
    let other = pred.cos(y.other());
    // -log(e^{s t} / (e^{s t} + e^{s o})) = softplus(s (o - t))
    let z = s * (other - target);
    let loss = softplus(z);
    let p = sigmoid(z);
    let mut grad_cos = [0.0; 2];
    grad_cos[y.index()] = -s * p * dtarget;
    grad_cos[y.other().index()] = s * p;
    PdLoss { loss, grad_cos }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterLoss {
    pub loss: f64,
    pub grads: BankGrads,
}

/// A prototype pair `(class_a, r_a)`, `(class_b, r_b)` and its similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtoPair {
    pub a: (Class, usize),
    pub b: (Class, usize),
    pub sim: f64,
}

/// Most similar Live/Spoof pair and least similar same-class pair (`r1 ≠ r2`).
/// Ties go to the first pair in prototype index order. The intra pair is
/// `None` when both classes hold a single prototype.
pub fn center_extremes(bank: &PrototypeBank) -> (ProtoPair, Option<ProtoPair>) {
    let mut max_inter: Option<ProtoPair> = None;
    for (r1, p) in bank.prototypes(Class::Live).iter().enumerate() {
        for (r2, q) in bank.prototypes(Class::Spoof).iter().enumerate() {
            let sim = dot(p, q);
            if max_inter.map_or(true, |m| sim > m.sim) {
                max_inter = Some(ProtoPair { a: (Class::Live, r1), b: (Class::Spoof, r2), sim });
            }
        }
    }
    let mut min_intra: Option<ProtoPair> = None;
    for class in Class::ALL {
        let protos = bank.prototypes(class);
        for r1 in 0..protos.len() {
            for r2 in r1 + 1..protos.len() {
                let sim = dot(&protos[r1], &protos[r2]);
                if min_intra.map_or(true, |m| sim < m.sim) {
                    min_intra = Some(ProtoPair { a: (class, r1), b: (class, r2), sim });
                }
            }
        }
    }
    (max_inter.expect("bank has at least one prototype per class"), min_intra)
}

fn add_pair_grad(grads: &mut BankGrads, bank: &PrototypeBank, pair: &ProtoPair, sign: f64) {
    let (ca, ra) = pair.a;
    let (cb, rb) = pair.b;
    axpy(sign, bank.get(cb, rb), &mut grads.classes[ca.index()][ra]);
    axpy(sign, bank.get(ca, ra), &mut grads.classes[cb.index()][rb]);
}

/// `[max inter sim − min intra sim + δ1]_+`, zero when no intra pair exists.
pub fn inter_center_loss(bank: &PrototypeBank, delta1: f64) -> CenterLoss {
    let mut grads = BankGrads::zeros_like(bank);
    let (max_inter, min_intra) = center_extremes(bank);
    let Some(min_intra) = min_intra else {
        return CenterLoss { loss: 0.0, grads };
    };
    let raw = max_inter.sim - min_intra.sim + delta1;
    if raw > 0.0 {
        add_pair_grad(&mut grads, bank, &max_inter, 1.0);
        add_pair_grad(&mut grads, bank, &min_intra, -1.0);
        CenterLoss { loss: raw, grads }
    } else {
        CenterLoss { loss: 0.0, grads }
    }
}

/// `Σ_j Σ_{r<t} [⟨P_j^r, P_j^t⟩ − δ2]_+`.
pub fn intra_center_loss(bank: &PrototypeBank, delta2: f64) -> CenterLoss {
    let mut grads = BankGrads::zeros_like(bank);
    let mut loss = 0.0;
    for class in Class::ALL {
        let protos = bank.prototypes(class);
        for r in 0..protos.len() {
            for t in r + 1..protos.len() {
                let sim = dot(&protos[r], &protos[t]);
                if sim > delta2 {
                    loss += sim - delta2;
                    add_pair_grad(&mut grads, bank, &ProtoPair { a: (class, r), b: (class, t), sim }, 1.0);
                }
            }
        }
    }
    CenterLoss { loss, grads }
}

/// Combined objective for one batch with its gradients.
#[derive(Clone, Debug)]
pub struct LdaLoss {
    pub total: f64,
    /// Mean prototype data loss over the batch.
    pub pd: f64,
    pub inter: f64,
    pub intra: f64,
    pub grad_embeddings: Matrix,
    pub grad_bank: BankGrads,
}

fn check_batch(embeddings: &Matrix, labels: &[Class], bank: &PrototypeBank) -> Result<()> {
    if embeddings.rows() == 0 {
        return Err(Error::contract("empty batch"));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::contract(format!(
            "{} embeddings but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if embeddings.cols() != bank.dim() {
        return Err(Error::contract(format!(
            "embedding dimension {} does not match prototype dimension {}",
            embeddings.cols(),
            bank.dim()
        )));
    }
    Ok(())
}

/// Mean prototype data loss plus `λ1·inter + λ2·intra` (center terms once per batch).
pub fn lda_loss(
    embeddings: &Matrix,
    labels: &[Class],
    bank: &PrototypeBank,
    cfg: &LdaConfig,
) -> Result<LdaLoss> {
    check_batch(embeddings, labels, bank)?;
    let b = embeddings.rows();
    let inv_b = 1.0 / b as f64;
    let mut grad_embeddings = Matrix::zeros(b, bank.dim());
    let mut grad_bank = BankGrads::zeros_like(bank);
    let mut pd_sum = 0.0;
    for (i, (f, &y)) in embeddings.iter_rows().zip(labels).enumerate() {
        let pred = class_similarity(f, bank, cfg.tau_w);
        let pd = prototype_data_loss(&pred, y, cfg.s, cfg.m);
        pd_sum += pd.loss;
        let gf = grad_embeddings.row_mut(i);
        for class in Class::ALL {
            let upstream = pd.grad_cos[class.index()] * inv_b;
            if upstream == 0.0 {
                continue;
            }
            for (r, d) in pred.cos_grad_wrt_sims(class).into_iter().enumerate() {
                let g = upstream * d;
                axpy(g, bank.get(class, r), gf);
                axpy(g, f, &mut grad_bank.classes[class.index()][r]);
            }
        }
    }
    let pd = pd_sum * inv_b;
    let inter = inter_center_loss(bank, cfg.delta1);
    let intra = intra_center_loss(bank, cfg.delta2);
    if cfg.lambda1 != 0.0 {
        grad_bank.add_scaled(cfg.lambda1, &inter.grads);
    }
    if cfg.lambda2 != 0.0 {
        grad_bank.add_scaled(cfg.lambda2, &intra.grads);
    }
    Ok(LdaLoss {
        total: pd + cfg.lambda1 * inter.loss + cfg.lambda2 * intra.loss,
        pd,
        inter: inter.loss,
        intra: intra.loss,
        grad_embeddings,
        grad_bank,
    })
}

/// Linear heads predicting the semantic sub-labels from the embedding.
/// Spoof-type class 0 is reserved for "no attack" (Live samples).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxHeads {
    pub spoof_type: Dense,
    pub illum: Dense,
}

impl AuxHeads {
    pub fn init(n_spoof_types: usize, n_illum: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_spoof_types == 0 || n_illum == 0 || dim == 0 {
            return Err(Error::config("auxiliary heads need at least one class each"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |out: usize| {
            let bound = (6.0 / (dim + out) as f64).sqrt();
            let mut d = Dense::zeros(dim, out);
            for w in d.weights.as_mut_slice() {
                *w = rng.gen_range(-bound..bound);
            }
            d
        };
        Ok(AuxHeads { spoof_type: dense(n_spoof_types), illum: dense(n_illum) })
    }

    pub fn zeros_like(&self) -> Self {
        AuxHeads {
            spoof_type: Dense::zeros(self.spoof_type.fan_in(), self.spoof_type.fan_out()),
            illum: Dense::zeros(self.illum.fan_in(), self.illum.fan_out()),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.spoof_type.weights.as_slice(),
            &self.spoof_type.bias,
            self.illum.weights.as_slice(),
            &self.illum.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.spoof_type.weights.as_mut_slice(),
            &mut self.spoof_type.bias,
            self.illum.weights.as_mut_slice(),
            &mut self.illum.bias,
        ]
    }
}

/// Softmax cross-entropy and its gradient in the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::contract(format!("label {label} out of range for {} classes", logits.len())));
    }
    let p = softmax_scaled(logits, 1.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = p;
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

#[derive(Clone, Debug)]
pub struct AuxLoss {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    pub grads: AuxHeads,
}

fn dense_apply(d: &Dense, x: &[f64]) -> Vec<f64> {
    d.weights.iter_rows().zip(&d.bias).map(|(w, b)| dot(w, x) + b).collect()
}

/// `λ_s·CE(spoof type) + λ_i·CE(illumination)` for one embedding.
pub fn aux_loss(
    embedding: &[f64],
    heads: &AuxHeads,
    spoof_type: usize,
    illum: usize,
    lambda_s: f64,
    lambda_i: f64,
) -> Result<AuxLoss> {
    if embedding.len() != heads.spoof_type.fan_in() {
        return Err(Error::contract("embedding dimension does not match auxiliary heads"));
    }
    let mut grads = heads.zeros_like();
    let mut grad_embedding = vec![0.0; embedding.len()];
    let mut loss = 0.0;
    for (head, g, label, lambda) in [
        (&heads.spoof_type, &mut grads.spoof_type, spoof_type, lambda_s),
        (&heads.illum, &mut grads.illum, illum, lambda_i),
    ] {
        let (ce, dlogits) = softmax_cross_entropy(&dense_apply(head, embedding), label)?;
        if lambda == 0.0 {
            continue;
        }
        loss += lambda * ce;
        for (o, dz) in dlogits.iter().enumerate() {
            let dz = lambda * dz;
            g.bias[o] += dz;
            axpy(dz, embedding, g.weights.row_mut(o));
            axpy(dz, head.weights.row(o), &mut grad_embedding);
        }
    }
    Ok(AuxLoss { loss, grad_embedding, grads })
}

/// Per-sample semantic labels for the auxiliary heads.
#[derive(Clone, Copy, Debug)]
pub struct AuxTargets<'a> {
    pub spoof_type: &'a [usize],
    pub illum: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct LdaSLoss {
    pub total: f64,
    pub lda: LdaLoss,
    /// Mean auxiliary loss over the batch (before `λ_Aux`).
    pub aux: f64,
    pub grad_embeddings: Matrix,
    pub grad_bank: BankGrads,
    pub grad_heads: AuxHeads,
}

/// `L_LDA + λ_Aux · mean(L_Aux)` with gradients summed.
pub fn lda_s_loss(
    embeddings: &Matrix,
    labels: &[Class],
    targets: AuxTargets<'_>,
    bank: &PrototypeBank,
    heads: &AuxHeads,
    cfg: &LdaConfig,
) -> Result<LdaSLoss> {
    let lda = lda_loss(embeddings, labels, bank, cfg)?;
    let b = embeddings.rows();
    if targets.spoof_type.len() != b || targets.illum.len() != b {
        return Err(Error::contract("auxiliary label count does not match batch"));
    }
    let scale = cfg.lambda_aux / b as f64;
    let mut grad_embeddings = lda.grad_embeddings.clone();
    let mut grad_heads = heads.zeros_like();
    let mut aux_sum = 0.0;
    for (i, f) in embeddings.iter_rows().enumerate() {
        let a = aux_loss(f, heads, targets.spoof_type[i], targets.illum[i], cfg.lambda_s, cfg.lambda_i)?;
        aux_sum += a.loss;
        if scale == 0.0 {
            continue;
        }
        axpy(scale, &a.grad_embedding, grad_embeddings.row_mut(i));
        for (acc, g) in grad_heads.tensors_mut().into_iter().zip(a.grads.tensors()) {
            axpy(scale, g, acc);
        }
    }
    let aux = aux_sum / b as f64;
    Ok(LdaSLoss {
        total: lda.total + cfg.lambda_aux * aux,
        grad_bank: lda.grad_bank.clone(),
        lda,
        aux,
        grad_embeddings,
        grad_heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        normalize(v)
    }

    fn angle(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn class_enum_roundtrip() {
        assert_eq!(Class::from_index(1).unwrap(), Class::Spoof);
        assert!(Class::from_index(2).is_err());
        assert_eq!(Class::Live.other(), Class::Spoof);
    }

    #[test]
    fn singleton_class_cosine_is_the_similarity() {
        let bank = PrototypeBank::new(vec![angle(0.0)], vec![angle(2.0)]).unwrap();
        // ⟨f, P⟩ = cos(π/3) = 0.5
        let f = angle(std::f64::consts::FRAC_PI_3);
        let pred = class_similarity(&f, &bank, 0.1);
        assert!((pred.cos(Class::Live) - 0.5).abs() < 1e-15);
        assert_eq!(pred.weights[0], vec![1.0]);
    }

    #[test]
    fn equal_similarities_average_to_themselves() {
        let f = vec![1.0, 0.0, 0.0];
        let a = unit(&[0.3, (1.0f64 - 0.09).sqrt(), 0.0]);
        let b = unit(&[0.3, 0.0, (1.0f64 - 0.09).sqrt()]);
        let bank = PrototypeBank::new(vec![a, b], vec![vec![0.0, 1.0, 0.0]]).unwrap();
        let pred = class_similarity(&f, &bank, 0.1);
        assert!((pred.cos(Class::Live) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sharp_temperature_weights() {
        // sims {0.8, 0.0}, τ_w = 0.1: weights = softmax(8, 0), cos = 0.8·e^8/(e^8+1)
        let f = vec![1.0, 0.0, 0.0];
        let p1 = vec![0.8, 0.6, 0.0];
        let p2 = vec![0.0, 0.0, 1.0];
        let bank = PrototypeBank::new(vec![p1, p2], vec![vec![0.0, 1.0, 0.0]]).unwrap();
        let pred = class_similarity(&f, &bank, 0.1);
        let w = 8f64.exp() / (8f64.exp() + 1.0);
        assert!((pred.weights[0][0] - w).abs() < 1e-15);
        assert!((pred.cos(Class::Live) - 0.8 * w).abs() < 1e-15);
        assert!((pred.cos(Class::Live) - 0.79973).abs() < 5e-6);
    }

    fn pred_with(c0: f64, c1: f64) -> ClassPrediction {
        ClassPrediction { cos: [c0, c1], sims: [vec![c0], vec![c1]], weights: [vec![1.0], vec![1.0]], tau_w: 0.1 }
    }

    #[test]
    fn margin_free_loss_is_plain_cross_entropy() {
        let (c1, c2) = (0.3, -0.2);
        let got = prototype_data_loss(&pred_with(c2, c1), Class::Spoof, 1.0, 0.0).loss;
        let want = -(c1.exp() / (c1.exp() + c2.exp())).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn symmetric_margin_free_loss_is_log_two() {
        for s in [0.5, 1.0, 64.0] {
            let l = prototype_data_loss(&pred_with(0.4, 0.4), Class::Live, s, 0.0).loss;
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn large_scale_margin_loss_is_tiny() {
        let (phi, _) = margin_cos(0.5, 0.7);
        assert!((phi - (0.5f64.acos() + 0.7).cos()).abs() < 1e-12);
        assert!((phi + 0.1755).abs() < 1e-4);
        let l = prototype_data_loss(&pred_with(0.5, -0.5), Class::Live, 64.0, 0.7).loss;
        let want = (-64.0 * (phi + 0.5)).exp().ln_1p();
        assert!(l < 1e-8 && l > 0.0);
        assert!((l - want).abs() < 1e-20);
    }

    #[test]
    fn margin_clamp_is_finite_at_boundaries() {
        for c in [-1.0, 1.0] {
            let pd = prototype_data_loss(&pred_with(c, -c), Class::Live, 64.0, 0.7);
            assert!(pd.loss.is_finite() && pd.grad_cos.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn spoof_score_values() {
        assert_eq!(spoof_score(&pred_with(0.2, 0.2), 64.0), 0.5);
        let v = spoof_score(&pred_with(0.0, 0.1), 64.0);
        assert!((v - 1.0 / (1.0 + (-6.4f64).exp())).abs() < 1e-15);
        assert!((v - 0.99834).abs() < 5e-6);
        assert!(spoof_score(&pred_with(0.0, 0.11), 64.0) > v);
    }

    /// Bank whose inter max and intra min are set through 2-d angles.
    #[test]
    fn inter_loss_formula() {
        // live: 0 and acos(0.2); spoof: acos(0.1) on the other side
        let a = angle(0.0);
        let b = angle(0.2f64.acos());
        let s = angle(-(0.1f64.acos()));
        let bank = PrototypeBank::new(vec![a, b], vec![s]).unwrap();
        let (mx, mn) = center_extremes(&bank);
        assert!((mx.sim - 0.1).abs() < 1e-12);
        assert!((mn.unwrap().sim - 0.2).abs() < 1e-12);
        let l = inter_center_loss(&bank, 0.5);
        assert!((l.loss - 0.4).abs() < 1e-12);
        // gradient flows to the max pair (+) and min pair (−) only
        let g = &l.grads;
        for (got, want) in g.get(Class::Spoof, 0).iter().zip(bank.get(Class::Live, 0)) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn inter_loss_inactive_and_degenerate() {
        let a = angle(0.0);
        let b = angle(0.9f64.acos());
        let s = angle(std::f64::consts::PI - 0.2);
        let bank = PrototypeBank::new(vec![a.clone(), b], vec![s.clone()]).unwrap();
        // max inter = cos(π − 0.2) ≈ −0.98, min intra = 0.9
        let l = inter_center_loss(&bank, 0.5);
        assert_eq!(l.loss, 0.0);
        assert!(l.grads.flatten().iter().all(|x| *x == 0.0));
        let single = PrototypeBank::new(vec![a], vec![s]).unwrap();
        assert_eq!(inter_center_loss(&single, 2.0).loss, 0.0);
    }

    #[test]
    fn intra_loss_formula() {
        let live = vec![angle(0.0), angle(0.3f64.acos())];
        let spoof = vec![angle(2.0), angle(2.0 + (-0.2f64).acos())];
        let bank = PrototypeBank::new(live, spoof).unwrap();
        assert!((intra_center_loss(&bank, 0.0).loss - 0.3).abs() < 1e-12);
        assert_eq!(intra_center_loss(&bank, 0.5).loss, 0.0);
        // always active: (0.3 + 1) + (−0.2 + 1)
        assert!((intra_center_loss(&bank, -1.0).loss - 2.1).abs() < 1e-12);
    }

    #[test]
    fn lambdas_zero_reduce_to_mean_pd() {
        let bank = init_bank(3, 4, 5).unwrap();
        let e = Matrix::from_rows(&[unit(&[1.0, 2.0, 0.0, -1.0]), unit(&[0.0, 1.0, 1.0, 1.0])]).unwrap();
        let labels = [Class::Live, Class::Spoof];
        let cfg = LdaConfig { lambda1: 0.0, lambda2: 0.0, ..LdaConfig::default() };
        let out = lda_loss(&e, &labels, &bank, &cfg).unwrap();
        let mean: f64 = e
            .iter_rows()
            .zip(labels)
            .map(|(f, y)| prototype_data_loss(&class_similarity(f, &bank, cfg.tau_w), y, cfg.s, cfg.m).loss)
            .sum::<f64>()
            / 2.0;
        assert_eq!(out.total, mean);
    }

    #[test]
    fn lda_loss_rejects_bad_batches() {
        let bank = init_bank(2, 3, 0).unwrap();
        let cfg = LdaConfig::default();
        assert!(lda_loss(&Matrix::zeros(0, 3), &[], &bank, &cfg).is_err());
        assert!(lda_loss(&Matrix::zeros(1, 3), &[], &bank, &cfg).is_err());
        assert!(lda_loss(&Matrix::zeros(1, 2), &[Class::Live], &bank, &cfg).is_err());
    }

    #[test]
    fn aux_loss_values() {
        let heads = AuxHeads::init(4, 3, 2, 1).unwrap();
        let zero = aux_loss(&[0.6, 0.8], &heads, 1, 2, 0.0, 0.0).unwrap();
        assert_eq!(zero.loss, 0.0);
        let flat = heads.zeros_like();
        let l = aux_loss(&[0.6, 0.8], &flat, 1, 2, 1.0, 1.0).unwrap();
        assert!((l.loss - (4f64.ln() + 3f64.ln())).abs() < 1e-12);
        assert!(matches!(aux_loss(&[0.6, 0.8], &heads, 4, 0, 1.0, 1.0), Err(Error::Contract(_))));
        assert!(matches!(aux_loss(&[0.6, 0.8], &heads, 0, 3, 1.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn lda_s_additivity() {
        let bank = init_bank(2, 3, 1).unwrap();
        let heads = AuxHeads::init(3, 2, 3, 2).unwrap();
        let e = Matrix::from_rows(&[unit(&[1.0, 0.5, 0.2]), unit(&[-0.3, 1.0, 0.4])]).unwrap();
        let labels = [Class::Live, Class::Spoof];
        let targets = AuxTargets { spoof_type: &[0, 2], illum: &[1, 0] };
        let cfg0 = LdaConfig { lambda_aux: 0.0, ..LdaConfig::default() };
        let r0 = lda_s_loss(&e, &labels, targets, &bank, &heads, &cfg0).unwrap();
        assert_eq!(r0.total, lda_loss(&e, &labels, &bank, &cfg0).unwrap().total);
        let cfg1 = LdaConfig { lambda_aux: 1.0, ..LdaConfig::default() };
        let r1 = lda_s_loss(&e, &labels, targets, &bank, &heads, &cfg1).unwrap();
        assert!((r1.total - (r1.lda.total + r1.aux)).abs() < 1e-15);
    }

    #[test]
    fn init_bank_shape_and_determinism() {
        let a = init_bank(4, 8, 3).unwrap();
        assert_eq!(a.count(Class::Live), 4);
        assert_eq!(a.count(Class::Spoof), 4);
        assert!(a.is_unit());
        assert_eq!(a, init_bank(4, 8, 3).unwrap());
        assert_ne!(a, init_bank(4, 8, 4).unwrap());
    }

    #[test]
    fn bank_rejects_non_unit() {
        assert!(PrototypeBank::new(vec![vec![1.0, 1.0]], vec![vec![1.0, 0.0]]).is_err());
        assert!(PrototypeBank::new(vec![], vec![vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn bank_csv_roundtrip() {
        let bank = init_bank(3, 5, 9).unwrap();
        let mut buf = Vec::new();
        bank.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("class,index,x0,x1,x2,x3,x4\n"));
        assert_eq!(PrototypeBank::read_csv(buf.as_slice()).unwrap(), bank);
    }

    proptest! {
        #[test]
        fn class_cosines_are_bounded(seed in 0u64..500, k in 1usize..6, tau in 0.01f64..10.0) {
            let bank = init_bank(k, 5, seed).unwrap();
            let f = init_bank(1, 5, seed + 1000).unwrap().get(Class::Live, 0).to_vec();
            let pred = class_similarity(&f, &bank, tau);
            for c in Class::ALL {
                prop_assert!(pred.cos(c) >= -1.0 && pred.cos(c) <= 1.0);
                prop_assert!((pred.weights[c.index()].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(pred.weights[c.index()].iter().all(|w| *w >= 0.0));
            }
        }

        #[test]
        fn margin_is_monotone(c in -0.99f64..0.99, other in -1.0f64..1.0, s in 0.5f64..64.0, m1 in 0.0f64..1.5, dm in 0.0f64..0.5) {
            let theta = c.acos();
            let m2 = m1 + dm;
            prop_assume!(m2 < std::f64::consts::PI - theta);
            let l1 = prototype_data_loss(&pred_with(c, other), Class::Live, s, m1).loss;
            let l2 = prototype_data_loss(&pred_with(c, other), Class::Live, s, m2).loss;
            prop_assert!(l2 >= l1 - 1e-12 * l1.abs().max(1e-300));
        }

        #[test]
        fn center_losses_are_non_negative(seed in 0u64..500, k in 1usize..6, d1 in 0.0f64..2.0, d2 in -1.0f64..1.0) {
            let bank = init_bank(k, 4, seed).unwrap();
            prop_assert!(inter_center_loss(&bank, d1).loss >= 0.0);
            prop_assert!(intra_center_loss(&bank, d2).loss >= 0.0);
        }
    }
}
