//! Browser demo on the two-dimensional ring mixture: train with a chosen
//! number of prototypes, prune the bank, adapt to a shifted domain, and
//! sample the spoof score over the input plane for drawing.
//!
//! [`Demo`] is plain Rust and runs natively; the `wasm_bindgen` exports
//! return JSON strings and flat `f64` arrays for the page script.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use lda_core::adaptation::adapt;
use lda_core::aps::{default_thresholds, select_prototypes};
use lda_core::head::{class_similarity, spoof_score};
use lda_core::metrics::{hter, rates_at_threshold, select_threshold};
use lda_core::synthdata::{default_fig1_spec, sample_mixture, shift_domain, to_batch};
use lda_core::trainer::{score_samples, train, TrainConfig};
use lda_core::{Class, LabeledSample, Matrix, MlpParams, PrototypeBank};

/// Half-width of the square drawn by the page, in input units.
pub const EXTENT: f64 = 4.0;

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub live_prototypes: usize,
    pub spoof_prototypes: usize,
    pub threshold: f64,
    pub test_acer: f64,
    /// Set once the bank has been adapted.
    pub target_hter_before: Option<f64>,
    pub target_hter_after: Option<f64>,
}

pub struct Demo {
    cfg: TrainConfig,
    model: MlpParams,
    trained: PrototypeBank,
    bank: PrototypeBank,
    train: Vec<LabeledSample>,
    dev: Vec<LabeledSample>,
    test: Vec<LabeledSample>,
    target: Vec<LabeledSample>,
    hters: Option<(f64, f64)>,
}

fn js_err(e: lda_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

impl Demo {
    pub fn train(seed: u64, k_init: usize, epochs: usize) -> lda_core::Result<Self> {
        let spec = default_fig1_spec();
        let mut cfg = TrainConfig { seed, epochs, ..TrainConfig::default() };
        cfg.lda.k_init = k_init;
        let train_set = sample_mixture(&spec, 2000, 1000 + seed)?;
        let dev = sample_mixture(&spec, 1000, 2000 + seed)?;
        let test = sample_mixture(&spec, 1000, 3000 + seed)?;
        let out = train(&cfg, &train_set, &dev)?;
        Ok(Demo {
            cfg,
            model: out.model,
            trained: out.bank.clone(),
            bank: out.bank,
            train: train_set,
            dev,
            test,
            target: Vec::new(),
            hters: None,
        })
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    fn threshold(&self, bank: &PrototypeBank) -> lda_core::Result<f64> {
        select_threshold(&score_samples(&self.model, bank, &self.cfg.effective_lda(), &self.dev)?)
    }

    pub fn summary(&self) -> lda_core::Result<Summary> {
        let thr = self.threshold(&self.bank)?;
        let test = score_samples(&self.model, &self.bank, &self.cfg.effective_lda(), &self.test)?;
        Ok(Summary {
            live_prototypes: self.bank.count(Class::Live),
            spoof_prototypes: self.bank.count(Class::Spoof),
            threshold: thr,
            test_acer: rates_at_threshold(&test, thr)?.acer,
            target_hter_before: self.hters.map(|h| h.0),
            target_hter_after: self.hters.map(|h| h.1),
        })
    }

    /// Greedy density pruning of the trained bank. `None` thresholds use the
    /// per-class median best similarity.
    pub fn prune(&mut self, t_live: Option<f64>, t_spoof: Option<f64>) -> lda_core::Result<Summary> {
        let (x, _) = to_batch(&self.train)?;
        let emb = self.model.embed(&x)?;
        let rows = |c: Class| -> Vec<&[f64]> {
            emb.iter_rows().zip(&self.train).filter(|(_, s)| s.y == c).map(|(r, _)| r).collect()
        };
        let (live, spoof) = (rows(Class::Live), rows(Class::Spoof));
        let [d_live, d_spoof] = default_thresholds(&self.trained, &live, &spoof);
        let sel = select_prototypes(
            &self.trained,
            &live,
            &spoof,
            t_live.unwrap_or(d_live),
            t_spoof.unwrap_or(d_spoof),
        )?;
        self.bank = sel.bank;
        self.target.clear();
        self.hters = None;
        self.summary()
    }

    /// Appends class-mean prototypes from `shots` samples of the shifted
    /// domain and records target HTER before and after.
    pub fn adapt(&mut self, tx: f64, ty: f64, shots: usize, seed: u64) -> lda_core::Result<Summary> {
        let spec = shift_domain(&default_fig1_spec(), &[tx, ty], 1.0)?;
        let few = sample_mixture(&spec, shots, 5000 + seed)?;
        let target_test = sample_mixture(&spec, 1000, 4000 + seed)?;
        let adapted = adapt(&self.bank, &self.model, &few)?;
        let lda = self.cfg.effective_lda();
        let target_hter = |bank: &PrototypeBank| -> lda_core::Result<f64> {
            hter(&score_samples(&self.model, bank, &lda, &target_test)?, self.threshold(bank)?)
        };
        let before = target_hter(&self.bank)?;
        let after = target_hter(&adapted)?;
        self.bank = adapted;
        self.target = target_test;
        self.hters = Some((before, after));
        self.summary()
    }

    pub fn reset(&mut self) {
        self.bank = self.trained.clone();
        self.target.clear();
        self.hters = None;
    }

    /// Spoof scores on a `res x res` grid over `[-EXTENT, EXTENT]^2`, row
    /// by row from the top (largest y) down.
    pub fn field(&self, res: usize) -> lda_core::Result<Vec<f64>> {
        let step = 2.0 * EXTENT / res.max(1) as f64;
        let mut rows = Vec::with_capacity(res * res);
        for i in 0..res {
            let y = EXTENT - (i as f64 + 0.5) * step;
            for j in 0..res {
                rows.push([-EXTENT + (j as f64 + 0.5) * step, y]);
            }
        }
        let emb = self.model.embed(&Matrix::from_rows(&rows)?)?;
        let lda = self.cfg.effective_lda();
        Ok(emb.iter_rows().map(|f| spoof_score(&class_similarity(f, &self.bank, lda.tau_w), lda.s)).collect())
    }

    /// Test samples (and target samples after adaptation) as `x, y, label, domain` quadruples.
    pub fn points(&self) -> Vec<f64> {
        let tag = |set: &[LabeledSample], domain: f64| -> Vec<f64> {
            set.iter().flat_map(|s| [s.x[0], s.x[1], s.y.index() as f64, domain]).collect()
        };
        let mut out = tag(&self.test, 0.0);
        out.extend(tag(&self.target, 1.0));
        out
    }
}

#[wasm_bindgen]
pub struct WebDemo(Demo);

#[wasm_bindgen]
impl WebDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, k_init: u32, epochs: u32) -> Result<WebDemo, JsValue> {
        Demo::train(seed.into(), k_init as usize, epochs as usize).map(WebDemo).map_err(js_err)
    }

    pub fn summary(&self) -> Result<String, JsValue> {
        let s = self.0.summary().map_err(js_err)?;
        Ok(serde_json::to_string(&s).expect("summary serializes"))
    }

    /// Thresholds below -1 select the per-class default.
    pub fn prune(&mut self, t_live: f64, t_spoof: f64) -> Result<String, JsValue> {
        let opt = |t: f64| (t >= -1.0).then_some(t);
        let s = self.0.prune(opt(t_live), opt(t_spoof)).map_err(js_err)?;
        Ok(serde_json::to_string(&s).expect("summary serializes"))
    }

    pub fn adapt(&mut self, tx: f64, ty: f64, shots: u32, seed: u32) -> Result<String, JsValue> {
        let s = self.0.adapt(tx, ty, shots as usize, seed.into()).map_err(js_err)?;
        Ok(serde_json::to_string(&s).expect("summary serializes"))
    }

    pub fn reset(&mut self) {
        self.0.reset();
    }

    pub fn field(&self, res: u32) -> Result<Vec<f64>, JsValue> {
        self.0.field(res as usize).map_err(js_err)
    }

    pub fn points(&self) -> Vec<f64> {
        self.0.points()
    }

    pub fn extent() -> f64 {
        EXTENT
    }
}
