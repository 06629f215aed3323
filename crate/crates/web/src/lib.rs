//! Browser bindings for the demo page in `www/`.
//!
//! Three operations are exposed: the soft labels of a fully separated
//! dictionary, a label-smoothing target for comparison, and a small
//! sibling-pairs training run stepped one epoch at a time.

use ccl_core::classifier::{lsr_target, LsrBase};
use ccl_core::data::{generate_synthetic, stratified_split, LabeledDataset, SyntheticSpec};
use ccl_core::head::{CclConfig, SoftLabelMatrix};
use ccl_core::metrics::ConfusionMatrix;
use ccl_core::trainer::{default_drop_epochs, evaluate, TrainConfig, TrainState};
use wasm_bindgen::prelude::*;

fn js(e: ccl_core::Error) -> JsError {
    JsError::new(&format!("{}: {e}", e.category()))
}

/// Row-major `K×K` soft labels when every pair of class embeddings sits at
/// squared distance `b`.
pub fn overfit_matrix(classes: usize, b: f64) -> Vec<f64> {
    let a = (-b).exp();
    let s = 1.0 + (classes as f64 - 1.0) * a;
    (0..classes * classes)
        .map(|i| if i / classes == i % classes { 1.0 / s } else { a / s })
        .collect()
}

#[wasm_bindgen(js_name = overfitSoftLabels)]
pub fn overfit_soft_labels(classes: usize, b: f64) -> Vec<f64> {
    overfit_matrix(classes, b)
}

/// Uniform smoothing weight with the same rows as [`overfit_matrix`].
#[wasm_bindgen(js_name = overfitEpsilon)]
pub fn overfit_epsilon(classes: usize, b: f64) -> f64 {
    let a = (-b).exp();
    classes as f64 * a / (1.0 + (classes as f64 - 1.0) * a)
}

/// Smoothed target for `label`; `apriori` mixes in `prior` instead of the
/// uniform distribution.
#[wasm_bindgen(js_name = lsrTarget)]
pub fn lsr_row(label: usize, classes: usize, epsilon: f64, prior: Option<Vec<f64>>) -> Result<Vec<f64>, JsError> {
    let base = match prior {
        Some(p) => LsrBase::Apriori(p),
        None => LsrBase::Uniform,
    };
    lsr_target(label, classes, epsilon, &base).map(|t| t.probs).map_err(js)
}

/// Six classes in three sibling pairs, trained epoch by epoch.
#[wasm_bindgen]
pub struct SiblingDemo {
    state: TrainState,
    train: LabeledDataset,
    val: LabeledDataset,
    soft: SoftLabelMatrix,
    confusion: Option<ConfusionMatrix>,
}

impl SiblingDemo {
    pub fn create(seed: u64, d_near: f64, lr_ccl: f64, epochs: usize) -> ccl_core::Result<Self> {
        let spec = SyntheticSpec {
            d_near,
            ..SyntheticSpec::sibling_pairs(40, seed)
        };
        let (train, val) = stratified_split(&generate_synthetic(&spec)?, 0.8, seed)?;
        let cfg = TrainConfig {
            epochs,
            lr_drop_epochs: default_drop_epochs(epochs),
            backbone_widths: vec![32, 16],
            seed,
            ..TrainConfig::default()
        };
        let ccl = CclConfig {
            lr_ccl,
            ..CclConfig::default()
        };
        let state = TrainState::new(cfg, ccl, &train)?;
        let soft = state.soft_labels()?.expect("ccl mode has a dictionary");
        Ok(Self {
            state,
            train,
            val,
            soft,
            confusion: None,
        })
    }

    pub fn advance(&mut self) -> ccl_core::Result<()> {
        let report = self.state.train_epoch(&self.train)?;
        self.soft = report.soft_labels.expect("ccl mode has a dictionary");
        self.confusion = Some(evaluate(&self.state.model.classifier, &self.val)?);
        Ok(())
    }
}

#[wasm_bindgen]
impl SiblingDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, d_near: f64, lr_ccl: f64, epochs: usize) -> Result<SiblingDemo, JsError> {
        Self::create(seed.into(), d_near, lr_ccl, epochs).map_err(js)
    }

    /// Trains one epoch; false once all epochs are done.
    pub fn step(&mut self) -> Result<bool, JsError> {
        if self.done() {
            return Ok(false);
        }
        self.advance().map_err(js)?;
        Ok(true)
    }

    pub fn done(&self) -> bool {
        self.state.epoch >= self.state.cfg.epochs
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn classes(&self) -> usize {
        self.soft.classes()
    }

    /// Row-major soft label matrix of the current dictionary.
    #[wasm_bindgen(js_name = softLabels)]
    pub fn soft_labels(&self) -> Vec<f64> {
        self.soft.values().to_vec()
    }

    pub fn softness(&self) -> f64 {
        self.soft.mean_correct_softness()
    }

    pub fn frozen(&self) -> bool {
        self.state.dict_frozen()
    }

    #[wasm_bindgen(js_name = valAccuracy)]
    pub fn val_accuracy(&self) -> f64 {
        self.confusion
            .as_ref()
            .and_then(|c| c.accuracy().ok())
            .unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_rows_are_uniform_lsr() {
        let m = overfit_matrix(7, 2.0);
        let eps = overfit_epsilon(7, 2.0);
        let lsr = lsr_target(0, 7, eps, &LsrBase::Uniform).unwrap().probs;
        for j in 0..7 {
            assert!((m[j] - lsr[j]).abs() < 1e-15);
        }
        assert!((eps - 0.522815).abs() < 1e-6);
    }

    #[test]
    fn demo_runs_to_completion() {
        let mut demo = SiblingDemo::create(1, 1.0, 0.01, 5).unwrap();
        assert_eq!(demo.classes(), 6);
        assert!(demo.val_accuracy().is_nan());
        for _ in 0..5 {
            demo.advance().unwrap();
        }
        assert!(demo.done());
        assert_eq!(demo.epoch(), 5);
        let m = demo.soft_labels();
        for row in m.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((0.0..=1.0).contains(&demo.val_accuracy()));
    }
}
