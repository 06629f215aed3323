//! The class-correlation head.
//!
//! An embedding network maps backbone features into an `n2`-dimensional
//! space that also holds one learnable embedding per class (the class
//! dictionary). Distances are squared Euclidean distances between
//! L2-normalized vectors, so they live in `[0, 4]` and equal `2 - 2 cos θ`.
//! Negated distances to the class embeddings act as classification logits,
//! and the same distances between class embeddings give the soft labels.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{l2_norm, softmax_in_place, sq_dist, Graph, Tensor, Var, MIN_NORM};
use crate::classifier::{cross_entropy, one_hot_rows};
use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp};

/// Squared distance between orthogonal unit vectors.
pub const ORTHOGONAL_MARGIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CclConfig {
    /// Largest pairwise class-embedding distance left unpenalized.
    pub b: f64,
    /// Weight of the class correlation loss.
    pub alpha_cc: f64,
    /// Embedding dimension.
    pub n2: usize,
    /// Hidden widths of the embedding network.
    pub embed_hidden: Vec<usize>,
    /// Initial learning rate of the head.
    pub lr_ccl: f64,
}

impl Default for CclConfig {
    fn default() -> Self {
        Self {
            b: ORTHOGONAL_MARGIN,
            alpha_cc: 10.0,
            n2: 16,
            embed_hidden: vec![64, 64],
            lr_ccl: 0.0005,
        }
    }
}

impl CclConfig {
    /// Three layers of width 1024, 1024 and 512.
    pub fn full_scale() -> Self {
        Self {
            n2: 512,
            embed_hidden: vec![1024, 1024],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::invalid(format!("margin b must be > 0, got {}", self.b)));
        }
        if !(self.alpha_cc >= 0.0) {
            return Err(Error::invalid(format!(
                "alpha_cc must be >= 0, got {}",
                self.alpha_cc
            )));
        }
        if !(self.lr_ccl >= 0.0) {
            return Err(Error::invalid(format!(
                "lr_ccl must be >= 0, got {}",
                self.lr_ccl
            )));
        }
        if self.n2 == 0 || self.embed_hidden.contains(&0) {
            return Err(Error::invalid("embedding widths must be positive"));
        }
        Ok(())
    }
}

/// The embedding network `f2`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    mlp: Mlp,
}

impl EmbeddingNet {
    pub fn new<R: Rng + ?Sized>(n1: usize, cfg: &CclConfig, rng: &mut R) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(n1)
            .chain(cfg.embed_hidden.iter().copied())
            .chain(std::iter::once(cfg.n2))
            .collect();
        Ok(Self {
            mlp: Mlp::new(&widths, rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        self.mlp.bind(g, trainable)
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundMlp, features: Var) -> Result<Var> {
        self.mlp.forward(g, bound, features)
    }

    /// Embeds a single feature vector.
    pub fn embed(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, f.len()], f.to_vec())?);
        let e = self.forward(&mut g, &bound, x)?;
        Ok(g.value(e).data().to_vec())
    }
}

/// The class embeddings, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDictionary {
    embeddings: Tensor,
    frozen: bool,
}

impl ClassDictionary {
    /// Unit-norm Gaussian directions.
    pub fn random<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::invalid("dictionary needs at least one class and dimension"));
        }
        let mut embeddings = Tensor::randn(&[classes, dim], 1.0, rng);
        for k in 0..classes {
            let row = embeddings.row_mut(k);
            let n = l2_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::from_embeddings(embeddings)
    }

    /// Wraps a `[K×n2]` matrix; every row must have norm ≥ 1e-12.
    pub fn from_embeddings(embeddings: Tensor) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() == 0 {
            return Err(Error::Shape {
                op: "class dictionary",
                left: embeddings.shape().to_vec(),
                right: vec![],
            });
        }
        let dict = Self {
            embeddings,
            frozen: false,
        };
        dict.check()?;
        Ok(dict)
    }

    pub fn classes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embedding(&self, k: usize) -> &[f64] {
        self.embeddings.row(k)
    }

    /// Mutable access, refused once frozen.
    pub fn embeddings_mut(&mut self) -> Option<&mut Tensor> {
        (!self.frozen).then_some(&mut self.embeddings)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Fails with a degenerate-vector error naming the first collapsed class.
    pub fn check(&self) -> Result<()> {
        for k in 0..self.classes() {
            let norm = l2_norm(self.embedding(k));
            if !(norm >= MIN_NORM) {
                return Err(Error::Degenerate {
                    what: format!("class embedding {k}"),
                    norm,
                });
            }
        }
        Ok(())
    }

    /// Places the embeddings on `g`; trainable only when not frozen.
    pub fn bind(&self, g: &mut Graph) -> Var {
        g.leaf(self.embeddings.clone(), !self.frozen)
    }

    fn normalized(&self) -> Result<Vec<Vec<f64>>> {
        self.check()?;
        Ok((0..self.classes())
            .map(|k| normalize(self.embedding(k)).expect("checked"))
            .collect())
    }
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    (n >= MIN_NORM).then(|| v.iter().map(|x| x / n).collect())
}

/// Squared distance between the normalized vectors, `‖e1/‖e1‖ − e2/‖e2‖‖²`.
pub fn distance(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::Shape {
            op: "distance",
            left: vec![e1.len()],
            right: vec![e2.len()],
        });
    }
    let degenerate = |v: &[f64], which: &str| Error::Degenerate {
        what: which.to_string(),
        norm: l2_norm(v),
    };
    let a = normalize(e1).ok_or_else(|| degenerate(e1, "first argument"))?;
    let b = normalize(e2).ok_or_else(|| degenerate(e2, "second argument"))?;
    Ok(sq_dist(&a, &b))
}

fn rename_degenerate(err: Error, prefix: &str) -> Error {
    match err {
        Error::Degenerate { what, norm } => Error::Degenerate {
            what: format!("{prefix} {}", what.trim_start_matches("row ")),
            norm,
        },
        other => other,
    }
}

/// Negated distances from each embedding row of `e: [m×n2]` to each class
/// embedding of `dict: [K×n2]`, shape `[m×K]`. Softmax of the result is the
/// distance-based class probability.
pub fn head_logits(g: &mut Graph, e: Var, dict: Var) -> Result<Var> {
    let en = g
        .l2_normalize(e)
        .map_err(|err| rename_degenerate(err, "sample embedding"))?;
    let cn = g
        .l2_normalize(dict)
        .map_err(|err| rename_degenerate(err, "class embedding"))?;
    let d = g.pairwise_sq_dist(en, cn)?;
    Ok(g.neg(d))
}

/// `(1/K²) Σ_{k1,k2} relu(f_d(c_k1, c_k2) − b)`, diagonal terms included.
pub fn class_correlation_loss(g: &mut Graph, dict: Var, b: f64) -> Result<Var> {
    let k = g.value(dict).rows();
    let cn = g
        .l2_normalize(dict)
        .map_err(|err| rename_degenerate(err, "class embedding"))?;
    let d = g.pairwise_sq_dist(cn, cn)?;
    let excess = g.add_scalar(d, -b);
    let hinge = g.relu(excess);
    let total = g.sum(hinge);
    Ok(g.scale(total, 1.0 / (k * k) as f64))
}

/// Plain evaluation of [`class_correlation_loss`].
pub fn class_correlation_loss_value(dict: &ClassDictionary, b: f64) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(dict.embeddings.clone());
    let l = class_correlation_loss(&mut g, d, b)?;
    Ok(g.value(l).item())
}

/// Loss terms of the head on one batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadLoss {
    pub total: Var,
    pub cross_entropy: Var,
    pub correlation: Var,
}

/// Batch-mean cross entropy of `softmax(head_logits)` against the labels,
/// plus `alpha_cc` times the class correlation loss.
pub fn head_loss(
    g: &mut Graph,
    e: Var,
    labels: &[usize],
    dict: Var,
    cfg: &CclConfig,
) -> Result<HeadLoss> {
    let k = g.value(dict).rows();
    let targets = one_hot_rows(labels, k)?;
    let logits = head_logits(g, e, dict)?;
    let q = g.softmax(logits);
    let ce = cross_entropy(g, q, &targets)?;
    let cc = class_correlation_loss(g, dict, cfg.b)?;
    let weighted = g.scale(cc, cfg.alpha_cc);
    let total = g.add(ce, weighted)?;
    Ok(HeadLoss {
        total,
        cross_entropy: ce,
        correlation: cc,
    })
}

/// Distance-based class probabilities for one feature vector. Diagnostic
/// only; predictions come from the classifier.
pub fn head_probabilities(
    net: &EmbeddingNet,
    dict: &ClassDictionary,
    features: &[f64],
) -> Result<Vec<f64>> {
    let e = net.embed(features)?;
    let mut g = Graph::new();
    let ev = g.constant(Tensor::new(vec![1, e.len()], e)?);
    let dv = g.constant(dict.embeddings.clone());
    let logits = head_logits(&mut g, ev, dv)?;
    let q = g.softmax(logits);
    Ok(g.value(q).data().to_vec())
}

/// Row-stochastic `K×K` matrix; row `k` is the soft label distribution of
/// class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelMatrix {
    classes: usize,
    values: Vec<f64>,
    b: f64,
    epoch: usize,
}

impl SoftLabelMatrix {
    pub fn from_rows(rows: &[Vec<f64>], b: f64, epoch: usize) -> Result<Self> {
        let classes = rows.len();
        let mut values = Vec::with_capacity(classes * classes);
        for r in rows {
            if r.len() != classes {
                return Err(Error::Mismatch {
                    what: "soft label row length",
                    expected: classes,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            classes,
            values,
            b,
            epoch,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn margin(&self) -> f64 {
        self.b
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.classes..(k + 1) * self.classes]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.classes + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn identity(classes: usize) -> Self {
        let mut values = vec![0.0; classes * classes];
        for k in 0..classes {
            values[k * classes + k] = 1.0;
        }
        Self {
            classes,
            values,
            b: ORTHOGONAL_MARGIN,
            epoch: 0,
        }
    }

    /// Mean of the diagonal. Lower means softer labels.
    pub fn mean_correct_softness(&self) -> f64 {
        (0..self.classes).map(|k| self.get(k, k)).sum::<f64>() / self.classes as f64
    }

    /// True when every row's diagonal entry is strictly larger than the rest.
    pub fn diagonal_is_row_argmax(&self) -> bool {
        (0..self.classes).all(|k| {
            let d = self.get(k, k);
            (0..self.classes).all(|j| j == k || self.get(k, j) < d)
        })
    }

    /// Least-squares fit of a uniform label-smoothing matrix, whose rows are
    /// `1 − ε + ε/K` on the diagonal and `ε/K` elsewhere. The minimizer is
    /// `K/(K−1) · (1 − mean diagonal)`.
    pub fn nearest_uniform_epsilon(&self) -> f64 {
        if self.classes < 2 {
            return 0.0;
        }
        let k = self.classes as f64;
        k / (k - 1.0) * (1.0 - self.mean_correct_softness())
    }

    /// Text export: `# classes=<K> b=<b> epoch=<e>` then one comma-separated
    /// row per class with six fractional digits.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# classes={} b={} epoch={}\n", self.classes, self.b, self.epoch);
        for k in 0..self.classes {
            let row: Vec<String> = self.row(k).iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses [`SoftLabelMatrix::to_csv`] output (values rounded to 1e-6).
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| perr(1, "missing '# classes=..' header".into()))?;
        let (mut classes, mut b, mut epoch) = (None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| perr(1, format!("bad header field '{field}'")))?;
            let bad = |_| perr(1, format!("bad value for {key}: '{value}'"));
            match key {
                "classes" => classes = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "b" => b = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "epoch" => epoch = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                _ => return Err(perr(1, format!("unknown header key '{key}'"))),
            }
        }
        let classes = classes.ok_or_else(|| perr(1, "header lacks classes".into()))?;
        let mut rows = Vec::with_capacity(classes);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(i + 1, e.to_string()))?;
            if row.len() != classes {
                return Err(perr(
                    i + 1,
                    format!("expected {classes} values, found {}", row.len()),
                ));
            }
            rows.push(row);
        }
        if rows.len() != classes {
            return Err(perr(
                text.lines().count(),
                format!("expected {classes} rows, found {}", rows.len()),
            ));
        }
        Self::from_rows(&rows, b.unwrap_or(ORTHOGONAL_MARGIN), epoch.unwrap_or(0))
    }
}

/// Row `k` is `softmax(−[f_d(c_1, c_k), …, f_d(c_K, c_k)])`.
pub fn soft_labels(dict: &ClassDictionary, b: f64, epoch: usize) -> Result<SoftLabelMatrix> {
    let unit = dict.normalized()?;
    let k = unit.len();
    let mut values = Vec::with_capacity(k * k);
    for ck in &unit {
        let mut row: Vec<f64> = unit.iter().map(|cj| -sq_dist(cj, ck)).collect();
        softmax_in_place(&mut row);
        values.extend(row);
    }
    Ok(SoftLabelMatrix {
        classes: k,
        values,
        b,
        epoch,
    })
}

/// Mean diagonal of a soft label matrix.
pub fn mean_correct_softness(m: &SoftLabelMatrix) -> f64 {
    m.mean_correct_softness()
}
