//! Alternating end-to-end training.
//!
//! Every minibatch runs two phases. First the soft labels are read off the
//! current class dictionary and the classifier (backbone and fc layer) takes
//! an SGD step on its loss while the head is held fixed. Then the head
//! (embedding network and, unless frozen, the dictionary) takes a step on its
//! own loss, using the features computed in the first phase as constants.
//!
//! After each epoch the mean diagonal of the soft label matrix is recorded;
//! once it has not decreased for `patience` epochs the dictionary is frozen
//! for good while everything else keeps training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::classifier::{
    classification_loss, cross_entropy, lsr_target, target_rows, Classifier, LsrBase,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::head::{head_loss, soft_labels, CclConfig, ClassDictionary, EmbeddingNet, SoftLabelMatrix};
use crate::metrics::ConfusionMatrix;
use crate::optim::{clip_gradients, Sgd, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};

/// Which targets supervise the classifier.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetMode {
    /// One-hot labels only.
    Hard,
    /// Label smoothing towards the uniform distribution.
    LsrUniform { epsilon: f64 },
    /// Label smoothing towards the training-set class frequencies.
    LsrApriori { epsilon: f64 },
    /// One-hot cross entropy plus KL towards the learned soft labels.
    Ccl,
}

impl TargetMode {
    pub fn uses_head(&self) -> bool {
        matches!(self, TargetMode::Ccl)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TargetMode::Hard => "hard",
            TargetMode::LsrUniform { .. } => "lsr-u",
            TargetMode::LsrApriori { .. } => "lsr-a",
            TargetMode::Ccl => "ccl",
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            TargetMode::LsrUniform { epsilon } | TargetMode::LsrApriori { epsilon } => Some(*epsilon),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    /// Epochs (0-based) from which both learning rates are multiplied by 0.1.
    pub lr_drop_epochs: Vec<usize>,
    /// Global-norm clip applied to each update phase's parameter group.
    pub grad_clip_norm: f64,
    /// Epochs without a softness decrease before the dictionary freezes;
    /// `None` never freezes.
    pub patience: Option<usize>,
    pub kl_weight: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Backbone hidden widths; the last entry is the feature dimension `n1`.
    pub backbone_widths: Vec<usize>,
    pub mode: TargetMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 40;
        Self {
            epochs,
            batch_size: 32,
            lr_backbone: 0.1,
            lr_drop_epochs: default_drop_epochs(epochs),
            grad_clip_norm: 5.0,
            patience: Some(10),
            kl_weight: 1.0,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            backbone_widths: vec![32, 8],
            mode: TargetMode::Ccl,
            seed: 0,
        }
    }
}

/// Drops at 50% and 75% of training.
pub fn default_drop_epochs(epochs: usize) -> Vec<usize> {
    vec![epochs / 2, epochs * 3 / 4]
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!(
                "lr_drop_epochs must be sorted, got {:?}",
                self.lr_drop_epochs
            )));
        }
        if let Some(&e) = self.lr_drop_epochs.iter().find(|&&e| e > self.epochs) {
            return Err(Error::invalid(format!(
                "lr drop epoch {e} is past the last epoch {}",
                self.epochs
            )));
        }
        if !(self.lr_backbone >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::invalid("lr_backbone must be >= 0 and grad_clip_norm > 0"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::invalid("kl_weight must be >= 0"));
        }
        if self.patience == Some(0) {
            return Err(Error::invalid("patience must be >= 1"));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::invalid("backbone widths must be nonempty and positive"));
        }
        if let Some(eps) = self.mode.epsilon() {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::invalid(format!("epsilon must lie in [0, 1], got {eps}")));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.backbone_widths.last().expect("validated")
    }
}

/// Piecewise-constant rates `(backbone, head)` for a 0-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig, head: &CclConfig) -> (f64, f64) {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
    let mut factor = 1.0;
    for _ in 0..drops {
        factor *= 0.1;
    }
    (cfg.lr_backbone * factor, head.lr_ccl * factor)
}

/// Per-epoch mean correct-class softness and the freeze decision.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftnessHistory {
    values: Vec<f64>,
    best: Option<f64>,
    since_improvement: usize,
    patience: usize,
    frozen: bool,
}

impl SoftnessHistory {
    pub fn new(patience: usize) -> Self {
        Self {
            values: Vec::new(),
            best: None,
            since_improvement: 0,
            patience,
            frozen: false,
        }
    }

    /// Records one observation. Only a strict decrease below the best value
    /// so far resets the counter. Returns whether the dictionary is frozen.
    pub fn update(&mut self, p_bar: f64) -> bool {
        self.values.push(p_bar);
        if self.frozen {
            return true;
        }
        match self.best {
            Some(best) if p_bar >= best => self.since_improvement += 1,
            _ => {
                self.best = Some(p_bar);
                self.since_improvement = 0;
            }
        }
        if self.since_improvement >= self.patience {
            self.frozen = true;
        }
        self.frozen
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since_improvement
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Embedding network plus class dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct CclHead {
    pub net: EmbeddingNet,
    pub dict: ClassDictionary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub classifier: Classifier,
    pub head: Option<CclHead>,
}

/// Independent random streams derived from one seed, so that e.g. the head
/// initialization never perturbs the backbone's.
const STREAM_BACKBONE: u64 = 0;
const STREAM_HEAD: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Model {
    pub fn new(
        input_dim: usize,
        classes: usize,
        cfg: &TrainConfig,
        ccl: &CclConfig,
    ) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(input_dim)
            .chain(cfg.backbone_widths.iter().copied())
            .collect();
        let classifier = Classifier::new(&widths, classes, &mut stream(cfg.seed, STREAM_BACKBONE))?;
        let head = if cfg.mode.uses_head() {
            let mut rng = stream(cfg.seed, STREAM_HEAD);
            let net = EmbeddingNet::new(cfg.feature_dim(), ccl, &mut rng)?;
            let dict = ClassDictionary::random(classes, ccl.n2, &mut rng)?;
            Some(CclHead { net, dict })
        } else {
            None
        };
        Ok(Self { classifier, head })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub cfg: TrainConfig,
    pub ccl: CclConfig,
    pub history: Option<SoftnessHistory>,
    /// Completed epochs.
    pub epoch: usize,
    opt_classifier: Sgd,
    opt_embed: Option<Sgd>,
    opt_dict: Option<Sgd>,
    shuffle_rng: ChaCha8Rng,
    prior: Vec<f64>,
}

impl TrainState {
    /// Fresh state for `train`; its class frequencies are the a-priori
    /// smoothing distribution.
    pub fn new(cfg: TrainConfig, ccl: CclConfig, train: &LabeledDataset) -> Result<Self> {
        let model = Model::new(train.dim(), train.classes(), &cfg, &ccl)?;
        Self::with_model(model, cfg, ccl, train.class_frequencies())
    }

    pub fn with_model(model: Model, cfg: TrainConfig, ccl: CclConfig, prior: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        ccl.validate()?;
        if cfg.mode.uses_head() != model.head.is_some() {
            return Err(Error::invalid("model head does not match the target mode"));
        }
        let opt_classifier = Sgd::new(&model.classifier.tensors(), cfg.momentum, cfg.weight_decay);
        let (opt_embed, opt_dict) = match &model.head {
            Some(h) => (
                Some(Sgd::new(&h.net.mlp().tensors(), cfg.momentum, cfg.weight_decay)),
                Some(Sgd::new(&[h.dict.embeddings()], cfg.momentum, cfg.weight_decay)),
            ),
            None => (None, None),
        };
        let history = if cfg.mode.uses_head() {
            cfg.patience.map(SoftnessHistory::new)
        } else {
            None
        };
        let shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
        Ok(Self {
            model,
            history,
            epoch: 0,
            opt_classifier,
            opt_embed,
            opt_dict,
            shuffle_rng,
            prior,
            cfg,
            ccl,
        })
    }

    pub fn current_lrs(&self) -> (f64, f64) {
        lr_schedule(self.epoch, &self.cfg, &self.ccl)
    }

    pub fn dict_frozen(&self) -> bool {
        self.model.head.as_ref().is_some_and(|h| h.dict.is_frozen())
    }

    /// Soft labels of the current dictionary (ccl mode only).
    pub fn soft_labels(&self) -> Result<Option<SoftLabelMatrix>> {
        self.model
            .head
            .as_ref()
            .map(|h| soft_labels(&h.dict, self.ccl.b, self.epoch))
            .transpose()
    }

    fn classifier_targets(&self, labels: &[usize]) -> Result<Tensor> {
        let k = self.model.classifier.classes();
        let base = match &self.cfg.mode {
            TargetMode::LsrApriori { .. } => LsrBase::Apriori(self.prior.clone()),
            _ => LsrBase::Uniform,
        };
        let eps = self.cfg.mode.epsilon().unwrap_or(0.0);
        let targets = labels
            .iter()
            .map(|&y| lsr_target(y, k, eps, &base))
            .collect::<Result<Vec<_>>>()?;
        target_rows(&targets)
    }

    /// Classifier update with the head fixed. Returns the batch loss and the
    /// pre-update features.
    pub fn backbone_phase(&mut self, x: &Tensor, labels: &[usize], lr: f64) -> Result<(f64, Tensor)> {
        let soft = self.soft_labels()?;
        let clf = &self.model.classifier;
        let mut g = Graph::new();
        let bound = clf.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let out = clf.forward(&mut g, &bound, xv)?;
        let loss = match (&self.cfg.mode, &soft) {
            (TargetMode::Ccl, Some(soft)) => {
                classification_loss(&mut g, out.probs, labels, soft, self.cfg.kl_weight)?.total
            }
            (TargetMode::Hard, _) => {
                let t = crate::classifier::one_hot_rows(labels, clf.classes())?;
                cross_entropy(&mut g, out.probs, &t)?
            }
            _ => {
                let t = self.classifier_targets(labels)?;
                cross_entropy(&mut g, out.probs, &t)?
            }
        };
        g.backward(loss)?;
        let mut grads = collect_grads(&g, &bound.vars());
        clip_gradients(&mut grads, self.cfg.grad_clip_norm);
        let value = g.value(loss).item();
        let features = g.value(out.features).clone();
        drop(bound);
        self.opt_classifier
            .step(&mut self.model.classifier.tensors_mut(), &grads, lr)?;
        Ok((value, features))
    }

    /// Head update with the classifier fixed. A frozen dictionary receives
    /// no gradient and is not stepped.
    pub fn head_phase(&mut self, features: &Tensor, labels: &[usize], lr: f64) -> Result<f64> {
        let head = self
            .model
            .head
            .as_mut()
            .ok_or_else(|| Error::invalid("head phase requires the ccl mode"))?;
        head.dict.check()?;
        let mut g = Graph::new();
        let bound = head.net.bind(&mut g, true);
        let fv = g.constant(features.clone());
        let e = head.net.forward(&mut g, &bound, fv)?;
        let dv = head.dict.bind(&mut g);
        let loss = head_loss(&mut g, e, labels, dv, &self.ccl)?;
        g.backward(loss.total)?;

        let net_vars = bound.vars();
        let mut group = net_vars.clone();
        let frozen = head.dict.is_frozen();
        if !frozen {
            group.push(dv);
        }
        let mut grads = collect_grads(&g, &group);
        clip_gradients(&mut grads, self.cfg.grad_clip_norm);
        let dict_grad = if frozen { None } else { grads.pop() };

        self.opt_embed
            .as_mut()
            .expect("head optimizer")
            .step(&mut head.net.mlp_mut().tensors_mut(), &grads, lr)?;
        if let (Some(dg), Some(emb)) = (dict_grad, head.dict.embeddings_mut()) {
            self.opt_dict
                .as_mut()
                .expect("dictionary optimizer")
                .step(&mut [emb], &[dg], lr)?;
        }
        Ok(g.value(loss.total).item())
    }

    /// Both phases on one minibatch.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepLosses> {
        let (lr_b, lr_h) = self.current_lrs();
        let (cls, features) = self.backbone_phase(x, labels, lr_b)?;
        let ccl = if self.model.head.is_some() {
            Some(self.head_phase(&features, labels, lr_h)?)
        } else {
            None
        };
        Ok(StepLosses { cls, ccl })
    }

    /// One pass over `data` in a seeded random order.
    pub fn train_epoch(&mut self, data: &LabeledDataset) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        let (lr_b, lr_h) = self.current_lrs();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let (mut sum_cls, mut sum_ccl) = (0.0, 0.0);
        for batch in order.chunks(self.cfg.batch_size) {
            let x = data.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let losses = self.train_step(&x, &y)?;
            let w = batch.len() as f64;
            sum_cls += losses.cls * w;
            sum_ccl += losses.ccl.unwrap_or(0.0) * w;
        }
        let n = data.len() as f64;
        self.epoch += 1;

        let soft = self.soft_labels()?;
        let softness = soft.as_ref().map(SoftLabelMatrix::mean_correct_softness);
        if let (Some(p), Some(hist)) = (softness, self.history.as_mut()) {
            if hist.update(p) {
                if let Some(h) = self.model.head.as_mut() {
                    h.dict.freeze();
                }
            }
        }
        Ok(EpochReport {
            epoch: self.epoch,
            loss_cls: sum_cls / n,
            loss_ccl: self.model.head.is_some().then_some(sum_ccl / n),
            softness,
            lr_backbone: lr_b,
            lr_ccl: lr_h,
            frozen: self.dict_frozen(),
            soft_labels: soft,
        })
    }
}

fn collect_grads(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub ccl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based index of the epoch just completed.
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_ccl: Option<f64>,
    /// Mean diagonal of the end-of-epoch soft label matrix.
    pub softness: Option<f64>,
    pub lr_backbone: f64,
    pub lr_ccl: f64,
    pub frozen: bool,
    pub soft_labels: Option<SoftLabelMatrix>,
}

/// Confusion matrix of the classifier's arg-max predictions on `data`.
pub fn evaluate(classifier: &Classifier, data: &LabeledDataset) -> Result<ConfusionMatrix> {
    if data.dim() != classifier.input_dim() {
        return Err(Error::Mismatch {
            what: "feature dimension",
            expected: classifier.input_dim(),
            found: data.dim(),
        });
    }
    if data.classes() != classifier.classes() {
        return Err(Error::Mismatch {
            what: "class count",
            expected: classifier.classes(),
            found: data.classes(),
        });
    }
    let pred = classifier.predict_batch(data.features())?;
    ConfusionMatrix::from_predictions(data.classes(), data.labels(), &pred)
}
