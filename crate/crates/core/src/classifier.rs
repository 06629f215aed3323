//! Backbone, classification layer, target distributions and the
//! classification losses.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::SoftLabelMatrix;
use crate::nn::{BoundMlp, Mlp};

/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Feature extractor `f1` followed by the fully-connected layer `f_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    backbone: Mlp,
    fc: Mlp,
}

#[derive(Clone, Debug)]
pub struct BoundClassifier {
    pub backbone: BoundMlp,
    pub fc: BoundMlp,
}

impl BoundClassifier {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone.vars();
        v.extend(self.fc.vars());
        v
    }
}

/// Outputs of a classifier forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

impl Classifier {
    /// `backbone_widths` runs from the input dimension to `n1`.
    pub fn new<R: Rng + ?Sized>(
        backbone_widths: &[usize],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Mlp::new(backbone_widths, rng)?;
        let fc = Mlp::new(&[backbone.output_dim(), classes], rng)?;
        Ok(Self { backbone, fc })
    }

    pub fn zeros(backbone_widths: &[usize], classes: usize) -> Result<Self> {
        let backbone = Mlp::zeros(backbone_widths)?;
        let fc = Mlp::zeros(&[backbone.output_dim(), classes])?;
        Ok(Self { backbone, fc })
    }

    pub fn from_parts(backbone: Mlp, fc: Mlp) -> Result<Self> {
        if fc.layers().len() != 1 || fc.input_dim() != backbone.output_dim() {
            return Err(Error::Mismatch {
                what: "classification layer input",
                expected: backbone.output_dim(),
                found: fc.input_dim(),
            });
        }
        Ok(Self { backbone, fc })
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn fc(&self) -> &Mlp {
        &self.fc
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.fc.output_dim()
    }

    /// Backbone tensors followed by the classification layer's.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.backbone.tensors();
        t.extend(self.fc.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.backbone.tensors_mut();
        t.extend(self.fc.tensors_mut());
        t
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundClassifier {
        BoundClassifier {
            backbone: self.backbone.bind(g, trainable),
            fc: self.fc.bind(g, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundClassifier, x: Var) -> Result<ClassifierOutput> {
        let features = self.backbone.forward(g, &bound.backbone, x)?;
        let logits = self.fc.forward(g, &bound.fc, features)?;
        let probs = g.softmax(logits);
        Ok(ClassifierOutput {
            features,
            logits,
            probs,
        })
    }

    /// Feature vector and class probabilities of a single input.
    pub fn classify(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let out = self.forward(&mut g, &bound, xv)?;
        Ok((
            g.value(out.features).data().to_vec(),
            g.value(out.probs).data().to_vec(),
        ))
    }

    /// Class probabilities for every row of `x`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(out.probs).clone())
    }

    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let q = self.probabilities(x)?;
        Ok((0..q.rows()).map(|r| predict(q.row(r))).collect())
    }
}

/// Arg-max; the lowest index wins ties.
pub fn predict(q: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Hard,
    LsrUniform,
    LsrApriori,
    SoftLearned,
}

/// A target distribution over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
    pub kind: TargetKind,
    pub epsilon: Option<f64>,
}

/// Base distribution mixed in by label smoothing.
#[derive(Clone, Debug, PartialEq)]
pub enum LsrBase {
    Uniform,
    /// Class frequencies; must sum to 1.
    Apriori(Vec<f64>),
}

fn check_label(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::LabelOutOfRange { label: y, classes });
    }
    Ok(())
}

/// Labels are 0-based.
pub fn one_hot(y: usize, classes: usize) -> Result<TargetDistribution> {
    check_label(y, classes)?;
    let mut probs = vec![0.0; classes];
    probs[y] = 1.0;
    Ok(TargetDistribution {
        probs,
        kind: TargetKind::Hard,
        epsilon: None,
    })
}

/// `(1 − ε)·δ_{k,y} + ε·u(k)`.
pub fn lsr_target(
    y: usize,
    classes: usize,
    epsilon: f64,
    base: &LsrBase,
) -> Result<TargetDistribution> {
    check_label(y, classes)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let (u, kind): (Vec<f64>, _) = match base {
        LsrBase::Uniform => (vec![1.0 / classes as f64; classes], TargetKind::LsrUniform),
        LsrBase::Apriori(freqs) => {
            if freqs.len() != classes {
                return Err(Error::Mismatch {
                    what: "prior length",
                    expected: classes,
                    found: freqs.len(),
                });
            }
            let total: f64 = freqs.iter().sum();
            if freqs.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "prior must be nonnegative and sum to 1, sums to {total}"
                )));
            }
            (freqs.clone(), TargetKind::LsrApriori)
        }
    };
    let probs = u
        .iter()
        .enumerate()
        .map(|(k, uk)| {
            let hard = if k == y { 1.0 - epsilon } else { 0.0 };
            hard + epsilon * uk
        })
        .collect();
    Ok(TargetDistribution {
        probs,
        kind,
        epsilon: Some(epsilon),
    })
}

/// One-hot rows for a batch of labels, `[m×K]`.
pub fn one_hot_rows(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        check_label(y, classes)?;
        t.row_mut(i)[y] = 1.0;
    }
    Ok(t)
}

/// Stacks target distributions into an `[m×K]` matrix.
pub fn target_rows(targets: &[TargetDistribution]) -> Result<Tensor> {
    Tensor::from_rows(&targets.iter().map(|t| t.probs.as_slice()).collect::<Vec<_>>())
}

/// Batch-mean cross entropy `−Σ_k t_k log max(q_k, 1e-12)` of probabilities
/// `q: [m×K]` against `targets: [m×K]`.
pub fn cross_entropy(g: &mut Graph, q: Var, targets: &Tensor) -> Result<Var> {
    let m = g.value(q).rows();
    let t = g.constant(targets.clone());
    let lq = g.log_clamped(q, LOG_FLOOR);
    let weighted = g.mul(lq, t)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / m as f64))
}

/// Batch-mean `Σ_k p_k log(p_k / q_k)`, with `0 log 0 = 0` and `q` clamped
/// at 1e-12.
pub fn kl_divergence(g: &mut Graph, p: &Tensor, q: Var) -> Result<Var> {
    let m = g.value(q).rows();
    let entropy_term: f64 = p
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum();
    let pv = g.constant(p.clone());
    let lq = g.log_clamped(q, LOG_FLOOR);
    let weighted = g.mul(lq, pv)?;
    let s = g.sum(weighted);
    let cross = g.scale(s, -1.0 / m as f64);
    Ok(g.add_scalar(cross, entropy_term / m as f64))
}

/// Plain cross entropy of one probability vector.
pub fn cross_entropy_value(q: &[f64], target: &[f64]) -> f64 {
    -q.iter()
        .zip(target)
        .map(|(q, t)| t * q.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

/// Plain KL divergence of one pair of distributions.
pub fn kl_divergence_value(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.max(LOG_FLOOR).ln()))
        .sum()
}

#[derive(Clone, Copy, Debug)]
pub struct ClassificationLoss {
    pub total: Var,
    pub cross_entropy: Var,
    pub kl: Option<Var>,
}

/// Cross entropy against the hard labels plus `kl_weight` times the KL
/// divergence from each label's soft label row. A zero weight drops the KL
/// term from the graph entirely.
pub fn classification_loss(
    g: &mut Graph,
    q: Var,
    labels: &[usize],
    soft: &SoftLabelMatrix,
    kl_weight: f64,
) -> Result<ClassificationLoss> {
    let k = g.value(q).cols();
    if soft.classes() != k {
        return Err(Error::Mismatch {
            what: "soft label classes",
            expected: k,
            found: soft.classes(),
        });
    }
    let hard = one_hot_rows(labels, k)?;
    let ce = cross_entropy(g, q, &hard)?;
    if kl_weight == 0.0 {
        return Ok(ClassificationLoss {
            total: ce,
            cross_entropy: ce,
            kl: None,
        });
    }
    let rows: Vec<&[f64]> = labels.iter().map(|&y| soft.row(y)).collect();
    let p = Tensor::from_rows(&rows)?;
    let kl = kl_divergence(g, &p, q)?;
    let weighted = g.scale(kl, kl_weight);
    let total = g.add(ce, weighted)?;
    Ok(ClassificationLoss {
        total,
        cross_entropy: ce,
        kl: Some(kl),
    })
}
