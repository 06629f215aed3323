//! End-to-end runs: flat `key=value` configuration, the training pipeline
//! with its on-disk artifacts, evaluation, data generation and soft label
//! export.
//!
//! A training run writes into its output directory:
//!
//! - `config.txt`: the fully resolved configuration,
//! - `train.log`: one `key=value` record per epoch,
//! - `params.txt`: all parameters as headered text tensors,
//! - `softlabels.csv`: the final soft label matrix (ccl mode only),
//! - `metrics.txt`: the validation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::classifier::Classifier;
use crate::data::{generate_synthetic, stratified_split, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::head::{soft_labels, CclConfig, ClassDictionary, EmbeddingNet, SoftLabelMatrix};
use crate::metrics::{ConfusionMatrix, MetricSummary};
use crate::nn::{Linear, Mlp};
use crate::trainer::{default_drop_epochs, evaluate, CclHead, EpochReport, Model, TargetMode, TrainConfig, TrainState};

/// Smoothing weight of the `-u5`/`-a5` settings, which matches the soft
/// labels of a fully separated dictionary for seven classes.
pub const EPSILON_OVERFIT_K7: f64 = 0.5228;
pub const EPSILON_SMALL: f64 = 0.1;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// dashes in keys are read as underscores.
pub fn parse_key_values(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            });
        };
        out.push((normalize_key(k), v.trim().to_string()));
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticPreset {
    SiblingPairs,
    Separable,
    Isic,
}

impl SyntheticPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sibling-pairs" => Ok(Self::SiblingPairs),
            "separable" => Ok(Self::Separable),
            "isic" => Ok(Self::Isic),
            _ => Err(Error::invalid(format!(
                "unknown synthetic preset '{s}' (expected sibling-pairs, separable or isic)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SiblingPairs => "sibling-pairs",
            Self::Separable => "separable",
            Self::Isic => "isic",
        }
    }
}

/// Synthetic data request: a preset plus optional geometry overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRequest {
    pub preset: SyntheticPreset,
    pub per_class: usize,
    pub classes: usize,
    pub divisor: usize,
    pub d_near: Option<f64>,
    pub d_far: Option<f64>,
    pub stddev: Option<f64>,
    pub seed: u64,
}

impl SyntheticRequest {
    pub fn new(preset: SyntheticPreset, seed: u64) -> Self {
        Self {
            preset,
            per_class: 40,
            classes: 7,
            divisor: 10,
            d_near: None,
            d_far: None,
            stddev: None,
            seed,
        }
    }

    pub fn spec(&self) -> SyntheticSpec {
        let mut spec = match self.preset {
            SyntheticPreset::SiblingPairs => SyntheticSpec::sibling_pairs(self.per_class, self.seed),
            SyntheticPreset::Separable => SyntheticSpec::separable(self.classes, self.per_class, self.seed),
            SyntheticPreset::Isic => SyntheticSpec::isic_shaped(self.divisor, self.seed),
        };
        if let Some(v) = self.d_near {
            spec.d_near = v;
        }
        if let Some(v) = self.d_far {
            spec.d_far = v;
        }
        if let Some(v) = self.stddev {
            spec.stddev = v;
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic(SyntheticRequest),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    /// Separate validation file; otherwise the data is split.
    pub val_data: Option<PathBuf>,
    pub train_ratio: f64,
    pub train: TrainConfig,
    pub ccl: CclConfig,
    pub out: PathBuf,
}

const KEYS: &[&str] = &[
    "data", "val_data", "synthetic", "per_class", "classes", "divisor", "d_near", "d_far",
    "stddev", "data_seed", "train_ratio", "mode", "epsilon", "epochs", "batch_size",
    "lr_backbone", "lr_ccl", "lr_drops", "grad_clip", "patience", "kl_weight", "momentum",
    "weight_decay", "backbone", "b", "alpha_cc", "n2", "embed_hidden", "seed", "out",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v == "none" || v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Resolves a mode name; `lsr-u1`/`lsr-u5`/`lsr-a1`/`lsr-a5` carry their
/// own smoothing weight.
pub fn parse_mode(mode: &str, epsilon: Option<f64>) -> Result<TargetMode> {
    let preset = match mode {
        "lsr-u1" | "lsr-a1" => Some(EPSILON_SMALL),
        "lsr-u5" | "lsr-a5" => Some(EPSILON_OVERFIT_K7),
        _ => None,
    };
    let eps = match (preset, epsilon) {
        (Some(p), Some(e)) if p != e => {
            return Err(Error::invalid(format!(
                "mode {mode} fixes epsilon={p}, but epsilon={e} was given"
            )))
        }
        (Some(p), _) => Some(p),
        (None, e) => e,
    };
    match (mode, eps) {
        ("hard", None) => Ok(TargetMode::Hard),
        ("ccl", None) => Ok(TargetMode::Ccl),
        ("hard" | "ccl", Some(_)) => Err(Error::invalid(format!("epsilon is only valid for lsr modes, not {mode}"))),
        ("lsr-u" | "lsr-u1" | "lsr-u5", Some(epsilon)) => Ok(TargetMode::LsrUniform { epsilon }),
        ("lsr-a" | "lsr-a1" | "lsr-a5", Some(epsilon)) => Ok(TargetMode::LsrApriori { epsilon }),
        ("lsr-u" | "lsr-a", None) => Err(Error::invalid(format!("mode {mode} requires epsilon"))),
        _ => Err(Error::invalid(format!(
            "unknown mode '{mode}' (expected hard, ccl, lsr-u, lsr-a, lsr-u1, lsr-u5, lsr-a1 or lsr-a5)"
        ))),
    }
}

impl RunConfig {
    /// Builds a configuration from `key=value` pairs; later pairs override
    /// earlier ones.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            let k = normalize_key(k);
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::invalid(format!("unknown config key '{k}'")));
            }
            map.insert(k, v.clone());
        }
        let get = |k: &str| map.get(k).map(String::as_str);

        let seed: u64 = get("seed").map(|v| parse_num("seed", v)).transpose()?.unwrap_or(0);
        let data = match (get("data"), get("synthetic")) {
            (Some(_), Some(_)) => return Err(Error::invalid("set exactly one of data and synthetic, not both")),
            (None, None) => return Err(Error::invalid("no data source: set data=<path> or synthetic=<preset>")),
            (Some(p), None) => DataSource::File(PathBuf::from(p)),
            (None, Some(preset)) => {
                let data_seed = get("data_seed").map(|v| parse_num("data_seed", v)).transpose()?.unwrap_or(seed);
                let mut req = SyntheticRequest::new(SyntheticPreset::parse(preset)?, data_seed);
                if let Some(v) = get("per_class") {
                    req.per_class = parse_num("per_class", v)?;
                }
                if let Some(v) = get("classes") {
                    req.classes = parse_num("classes", v)?;
                }
                if let Some(v) = get("divisor") {
                    req.divisor = parse_num("divisor", v)?;
                    if req.divisor == 0 {
                        return Err(Error::invalid("divisor must be >= 1"));
                    }
                }
                req.d_near = get("d_near").map(|v| parse_num("d_near", v)).transpose()?;
                req.d_far = get("d_far").map(|v| parse_num("d_far", v)).transpose()?;
                req.stddev = get("stddev").map(|v| parse_num("stddev", v)).transpose()?;
                DataSource::Synthetic(req)
            }
        };
        if matches!(data, DataSource::File(_)) {
            for k in ["per_class", "classes", "divisor", "d_near", "d_far", "stddev", "data_seed"] {
                if map.contains_key(k) {
                    return Err(Error::invalid(format!("{k} only applies to synthetic data")));
                }
            }
        }

        let mut train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let epsilon = get("epsilon").map(|v| parse_num("epsilon", v)).transpose()?;
        train.mode = parse_mode(get("mode").unwrap_or("ccl"), epsilon)?;
        if let Some(v) = get("epochs") {
            train.epochs = parse_num("epochs", v)?;
        }
        train.lr_drop_epochs = match get("lr_drops") {
            Some(v) => parse_list("lr_drops", v)?,
            None => default_drop_epochs(train.epochs),
        };
        if let Some(v) = get("batch_size") {
            train.batch_size = parse_num("batch_size", v)?;
        }
        if let Some(v) = get("lr_backbone") {
            train.lr_backbone = parse_num("lr_backbone", v)?;
        }
        if let Some(v) = get("grad_clip") {
            train.grad_clip_norm = parse_num("grad_clip", v)?;
        }
        if let Some(v) = get("patience") {
            train.patience = if v == "none" { None } else { Some(parse_num("patience", v)?) };
        }
        if let Some(v) = get("kl_weight") {
            train.kl_weight = parse_num("kl_weight", v)?;
        }
        if let Some(v) = get("momentum") {
            train.momentum = parse_num("momentum", v)?;
        }
        if let Some(v) = get("weight_decay") {
            train.weight_decay = parse_num("weight_decay", v)?;
        }
        if let Some(v) = get("backbone") {
            train.backbone_widths = parse_list("backbone", v)?;
        }
        train.validate()?;

        let mut ccl = CclConfig::default();
        if let Some(v) = get("lr_ccl") {
            ccl.lr_ccl = parse_num("lr_ccl", v)?;
        }
        if let Some(v) = get("b") {
            ccl.b = parse_num("b", v)?;
        }
        if let Some(v) = get("alpha_cc") {
            ccl.alpha_cc = parse_num("alpha_cc", v)?;
        }
        if let Some(v) = get("n2") {
            ccl.n2 = parse_num("n2", v)?;
        }
        if let Some(v) = get("embed_hidden") {
            ccl.embed_hidden = parse_list("embed_hidden", v)?;
        }
        ccl.validate()?;

        let train_ratio = get("train_ratio").map(|v| parse_num("train_ratio", v)).transpose()?.unwrap_or(0.8);
        if !(train_ratio > 0.0 && train_ratio < 1.0) {
            return Err(Error::invalid(format!("train_ratio must lie in (0, 1), got {train_ratio}")));
        }
        Ok(Self {
            data,
            val_data: get("val_data").map(PathBuf::from),
            train_ratio,
            train,
            ccl,
            out: PathBuf::from(get("out").unwrap_or("run")),
        })
    }

    /// Every setting as `key=value` lines, in a form `from_pairs` accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.data {
            DataSource::File(p) => {
                let _ = writeln!(s, "data={}", p.display());
            }
            DataSource::Synthetic(r) => {
                let spec = r.spec();
                let _ = writeln!(s, "synthetic={}", r.preset.name());
                let _ = writeln!(s, "per_class={}", r.per_class);
                let _ = writeln!(s, "classes={}", r.classes);
                let _ = writeln!(s, "divisor={}", r.divisor);
                let _ = writeln!(s, "d_near={}", spec.d_near);
                let _ = writeln!(s, "d_far={}", spec.d_far);
                let _ = writeln!(s, "stddev={}", spec.stddev);
                let _ = writeln!(s, "data_seed={}", r.seed);
            }
        }
        if let Some(p) = &self.val_data {
            let _ = writeln!(s, "val_data={}", p.display());
        }
        let t = &self.train;
        let _ = writeln!(s, "train_ratio={}", self.train_ratio);
        let _ = writeln!(s, "mode={}", t.mode.name());
        if let Some(e) = t.mode.epsilon() {
            let _ = writeln!(s, "epsilon={e}");
        }
        let _ = writeln!(s, "epochs={}", t.epochs);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "lr_backbone={}", t.lr_backbone);
        let _ = writeln!(s, "lr_ccl={}", self.ccl.lr_ccl);
        let _ = writeln!(s, "lr_drops={}", join(&t.lr_drop_epochs));
        let _ = writeln!(s, "grad_clip={}", t.grad_clip_norm);
        let _ = writeln!(s, "patience={}", t.patience.map_or("none".into(), |p| p.to_string()));
        let _ = writeln!(s, "kl_weight={}", t.kl_weight);
        let _ = writeln!(s, "momentum={}", t.momentum);
        let _ = writeln!(s, "weight_decay={}", t.weight_decay);
        let _ = writeln!(s, "backbone={}", join(&t.backbone_widths));
        let _ = writeln!(s, "b={}", self.ccl.b);
        let _ = writeln!(s, "alpha_cc={}", self.ccl.alpha_cc);
        let _ = writeln!(s, "n2={}", self.ccl.n2);
        let _ = writeln!(s, "embed_hidden={}", join(&self.ccl.embed_hidden));
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "out={}", self.out.display());
        s
    }

    /// Training and validation sets.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let full = match &self.data {
            DataSource::File(p) => LabeledDataset::load(p)?,
            DataSource::Synthetic(r) => generate_synthetic(&r.spec())?,
        };
        match &self.val_data {
            Some(p) => {
                let val = LabeledDataset::load(p)?;
                if val.dim() != full.dim() || val.classes() != full.classes() {
                    return Err(Error::invalid(format!(
                        "validation data has K={} dim={}, training data K={} dim={}",
                        val.classes(),
                        val.dim(),
                        full.classes(),
                        full.dim()
                    )));
                }
                Ok((full, val))
            }
            None => stratified_split(&full, self.train_ratio, self.train.seed),
        }
    }
}

/// One `train.log` record.
pub fn log_line(r: &EpochReport, val: &MetricSummary) -> String {
    let opt = |v: Option<f64>| v.map_or("na".to_string(), |x| format!("{x:.6}"));
    format!(
        "epoch={} loss_cls={:.6} loss_ccl={} softness={} lr_backbone={:.4e} lr_ccl={:.4e} frozen={} val_acc={:.6} val_kappa={:.6}",
        r.epoch,
        r.loss_cls,
        opt(r.loss_ccl),
        opt(r.softness),
        r.lr_backbone,
        r.lr_ccl,
        r.frozen,
        val.accuracy,
        val.kappa,
    )
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub soft_labels: Option<SoftLabelMatrix>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSummary,
    pub log: Vec<String>,
}

/// Runs the full pipeline and writes all artifacts to `cfg.out`. `on_epoch`
/// sees every report together with its log line.
pub fn train_run(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochReport, &str)) -> Result<TrainOutcome> {
    let (train, val) = cfg.load_data()?;
    let mut state = TrainState::new(cfg.train.clone(), cfg.ccl.clone(), &train)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_file(&cfg.out.join("config.txt"), &cfg.to_text())?;

    let mut log = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        let report = state.train_epoch(&train)?;
        let cm = evaluate(&state.model.classifier, &val)?;
        let line = log_line(&report, &MetricSummary::from_confusion(&cm)?);
        on_epoch(&report, &line);
        log.push(line);
    }
    let mut log_text = log.join("\n");
    log_text.push('\n');
    write_file(&cfg.out.join("train.log"), &log_text)?;
    write_file(
        &cfg.out.join("params.txt"),
        &params_to_text(&state.model, &state.cfg.mode, &state.ccl, state.epoch),
    )?;
    let soft = state.soft_labels()?;
    if let Some(m) = &soft {
        m.write(&cfg.out.join("softlabels.csv"))?;
    }
    let confusion = evaluate(&state.model.classifier, &val)?;
    write_file(&cfg.out.join("metrics.txt"), &confusion.report()?)?;
    Ok(TrainOutcome {
        metrics: MetricSummary::from_confusion(&confusion)?,
        model: state.model,
        soft_labels: soft,
        confusion,
        log,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A model read back from `params.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub model: Model,
    pub mode: TargetMode,
    pub ccl: CclConfig,
    pub epoch: usize,
}

impl SavedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        params_from_text(&text, &path.display().to_string())
    }

    /// Soft labels of the saved dictionary (ccl models only).
    pub fn soft_labels(&self) -> Result<SoftLabelMatrix> {
        let head = self
            .model
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("a {} model has no class dictionary", self.mode.name())))?;
        soft_labels(&head.dict, self.ccl.b, self.epoch)
    }
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let _ = writeln!(out, "tensor {name} {}", shape.join(" "));
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    for row in t.data().chunks(cols) {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    }
}

fn write_mlp(out: &mut String, prefix: &str, mlp: &Mlp) {
    for (i, layer) in mlp.layers().iter().enumerate() {
        write_tensor(out, &format!("{prefix}.{i}.weight"), &layer.weight);
        write_tensor(out, &format!("{prefix}.{i}.bias"), &layer.bias);
    }
}

/// Text parameter file: `key=value` header lines, then `tensor <name>
/// <shape...>` blocks of whitespace-separated floats, one matrix row per
/// line. Floats use the shortest exponent form that reads back exactly.
pub fn params_to_text(model: &Model, mode: &TargetMode, ccl: &CclConfig, epoch: usize) -> String {
    let clf = &model.classifier;
    let mut out = String::from("# ccl parameters\n");
    let _ = writeln!(out, "mode={}", mode.name());
    if let Some(e) = mode.epsilon() {
        let _ = writeln!(out, "epsilon={e}");
    }
    let _ = writeln!(out, "classes={}", clf.classes());
    let _ = writeln!(out, "epoch={epoch}");
    let _ = writeln!(out, "b={}", ccl.b);
    let _ = writeln!(out, "alpha_cc={}", ccl.alpha_cc);
    let _ = writeln!(out, "lr_ccl={}", ccl.lr_ccl);
    if let Some(h) = &model.head {
        let _ = writeln!(out, "frozen={}", h.dict.is_frozen());
    }
    write_mlp(&mut out, "backbone", clf.backbone());
    write_mlp(&mut out, "fc", clf.fc());
    if let Some(h) = &model.head {
        write_mlp(&mut out, "embed", h.net.mlp());
        write_tensor(&mut out, "dict", h.dict.embeddings());
    }
    out
}

pub fn params_from_text(text: &str, source: &str) -> Result<SavedModel> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut header = BTreeMap::new();
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((i, raw)) = lines.next() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| perr(i + 1, "tensor without a name".into()))?.to_string();
            let shape = parts
                .map(|p| p.parse::<usize>().map_err(|_| perr(i + 1, format!("bad dimension '{p}'"))))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            while data.len() < n {
                let (j, row) = lines
                    .next()
                    .ok_or_else(|| perr(i + 1, format!("tensor {name} ends early")))?;
                for v in row.split_whitespace() {
                    data.push(v.parse::<f64>().map_err(|_| perr(j + 1, format!("bad value '{v}'")))?);
                }
            }
            if data.len() != n {
                return Err(perr(i + 1, format!("tensor {name} has {} values, expected {n}", data.len())));
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        } else if let Some((k, v)) = line.split_once('=') {
            header.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            return Err(perr(i + 1, format!("unexpected line '{line}'")));
        }
    }

    let missing = |k: &str| perr(1, format!("missing header key '{k}'"));
    let head_val = |k: &str| header.get(k).map(String::as_str).ok_or_else(|| missing(k));
    let num = |k: &str| -> Result<f64> {
        head_val(k)?
            .parse()
            .map_err(|_| perr(1, format!("header key '{k}' is not a number")))
    };
    let epsilon = header.get("epsilon").map(|_| num("epsilon")).transpose()?;
    let mode = parse_mode(head_val("mode")?, epsilon)?;
    let epoch = num("epoch")? as usize;
    let ccl = CclConfig {
        b: num("b")?,
        alpha_cc: num("alpha_cc")?,
        lr_ccl: num("lr_ccl")?,
        ..CclConfig::default()
    };

    let mut take_mlp = |prefix: &str| -> Result<Mlp> {
        let mut layers = Vec::new();
        while let Some(weight) = tensors.remove(&format!("{prefix}.{}.weight", layers.len())) {
            let bias = tensors
                .remove(&format!("{prefix}.{}.bias", layers.len()))
                .ok_or_else(|| perr(1, format!("{prefix}.{}.bias missing", layers.len())))?;
            layers.push(Linear { weight, bias });
        }
        if layers.is_empty() {
            return Err(perr(1, format!("no {prefix} layers")));
        }
        Mlp::from_layers(layers)
    };
    let classifier = Classifier::from_parts(take_mlp("backbone")?, take_mlp("fc")?)?;
    let head = if mode.uses_head() {
        let net = EmbeddingNet::from_mlp(take_mlp("embed")?);
        let mut dict = ClassDictionary::from_embeddings(
            tensors.remove("dict").ok_or_else(|| perr(1, "tensor dict missing".into()))?,
        )?;
        if header.get("frozen").map(String::as_str) == Some("true") {
            dict.freeze();
        }
        Some(CclHead { net, dict })
    } else {
        None
    };
    if let Some(name) = tensors.keys().next() {
        return Err(perr(1, format!("unexpected tensor {name}")));
    }
    let classes = num("classes")? as usize;
    if classifier.classes() != classes {
        return Err(Error::Mismatch {
            what: "class count",
            expected: classes,
            found: classifier.classes(),
        });
    }
    let ccl = match &head {
        Some(h) => CclConfig {
            n2: h.dict.dim(),
            embed_hidden: h.net.mlp().widths()[1..h.net.mlp().widths().len() - 1].to_vec(),
            ..ccl
        },
        None => ccl,
    };
    Ok(SavedModel {
        model: Model { classifier, head },
        mode,
        ccl,
        epoch,
    })
}

/// Confusion matrix report of a saved model on a dataset file.
pub fn eval_run(params: &Path, data: &Path) -> Result<(ConfusionMatrix, String)> {
    let saved = SavedModel::load(params)?;
    let ds = LabeledDataset::load(data)?;
    let cm = evaluate(&saved.model.classifier, &ds)?;
    let report = cm.report()?;
    Ok((cm, report))
}

/// Soft label matrix of a saved model plus a summary of how soft it is.
pub fn export_softlabels(params: &Path) -> Result<(SoftLabelMatrix, String)> {
    let saved = SavedModel::load(params)?;
    let m = saved.soft_labels()?;
    Ok((m.clone(), softlabel_summary(&m)))
}

pub fn softlabel_summary(m: &SoftLabelMatrix) -> String {
    format!(
        "classes={}\nb={}\nepoch={}\nmean_softness={:.6}\nepsilon_uniform={:.6}\ndiagonal_argmax={}\n",
        m.classes(),
        m.margin(),
        m.epoch(),
        m.mean_correct_softness(),
        m.nearest_uniform_epsilon(),
        m.diagonal_is_row_argmax()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(s: &str) -> Vec<(String, String)> {
        parse_key_values(s, "test").unwrap()
    }

    #[test]
    fn key_value_parsing() {
        let p = pairs("# c\n\nmode = ccl\nlr-ccl=0.01\n");
        assert_eq!(p, vec![("mode".into(), "ccl".into()), ("lr_ccl".into(), "0.01".into())]);
        let err = parse_key_values("a=1\nbroken\n", "cfg").unwrap_err();
        assert!(err.to_string().starts_with("cfg:2:"), "{err}");
    }

    #[test]
    fn table_modes_reachable_by_config() {
        let cases = [
            ("hard", TargetMode::Hard),
            ("lsr-u1", TargetMode::LsrUniform { epsilon: 0.1 }),
            ("lsr-u5", TargetMode::LsrUniform { epsilon: 0.5228 }),
            ("lsr-a1", TargetMode::LsrApriori { epsilon: 0.1 }),
            ("lsr-a5", TargetMode::LsrApriori { epsilon: 0.5228 }),
            ("ccl", TargetMode::Ccl),
        ];
        for (name, mode) in cases {
            let cfg = RunConfig::from_pairs(&pairs(&format!("synthetic=separable\nmode={name}\n"))).unwrap();
            assert_eq!(cfg.train.mode, mode);
        }
        assert!(parse_mode("lsr-u", None).is_err());
        assert!(parse_mode("hard", Some(0.1)).is_err());
        assert!(parse_mode("lsr-u1", Some(0.3)).is_err());
        assert!(parse_mode("soft", None).is_err());
    }

    #[test]
    fn data_source_must_be_unique() {
        assert!(RunConfig::from_pairs(&pairs("mode=hard\n")).is_err());
        assert!(RunConfig::from_pairs(&pairs("data=x.txt\nsynthetic=isic\n")).is_err());
        assert!(RunConfig::from_pairs(&pairs("data=x.txt\nper_class=3\n")).is_err());
        let err = RunConfig::from_pairs(&pairs("synthetic=isic\nbogus=1\n")).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn later_pairs_override() {
        let cfg = RunConfig::from_pairs(&pairs("synthetic=isic\nepochs=10\nepochs=20\n")).unwrap();
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.lr_drop_epochs, vec![10, 15]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_pairs(&pairs(
            "synthetic=sibling-pairs\nper_class=9\nmode=lsr-a\nepsilon=0.3\npatience=none\nlr_drops=none\nbackbone=5,4\nseed=7\n",
        ))
        .unwrap();
        let again = RunConfig::from_pairs(&pairs(&cfg.to_text())).unwrap();
        let spec = |c: &RunConfig| match &c.data {
            DataSource::Synthetic(r) => r.spec(),
            DataSource::File(_) => unreachable!(),
        };
        assert_eq!(spec(&cfg), spec(&again));
        assert_eq!((&cfg.train, &cfg.ccl, cfg.train_ratio), (&again.train, &again.ccl, again.train_ratio));
        assert_eq!(cfg.to_text(), again.to_text());
    }

    #[test]
    fn params_round_trip_exactly() {
        let cfg = RunConfig::from_pairs(&pairs("synthetic=sibling-pairs\nper_class=4\nbackbone=6,5\nembed_hidden=7\nn2=3\n")).unwrap();
        let (train, _) = cfg.load_data().unwrap();
        let mut state = TrainState::new(cfg.train.clone(), cfg.ccl.clone(), &train).unwrap();
        state.train_epoch(&train).unwrap();
        state.model.head.as_mut().unwrap().dict.freeze();
        let text = params_to_text(&state.model, &state.cfg.mode, &state.ccl, state.epoch);
        let saved = params_from_text(&text, "p").unwrap();
        assert_eq!(saved.model, state.model);
        assert_eq!(saved.ccl, state.ccl);
        assert_eq!(saved.epoch, 1);
        assert_eq!(params_to_text(&saved.model, &saved.mode, &saved.ccl, saved.epoch), text);
    }

    #[test]
    fn params_errors_name_the_line() {
        let err = params_from_text("mode=hard\ntensor fc.0.weight 2 2\n1 2\nx 4\n", "p.txt").unwrap_err();
        assert!(err.to_string().starts_with("p.txt:4:"), "{err}");
        assert!(params_from_text("mode=hard\n", "p").is_err());
    }

    #[test]
    fn summary_of_overfit_dictionary() {
        let a = (-2.0f64).exp();
        let s = 1.0 + 6.0 * a;
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|k| (0..7).map(|j| if j == k { 1.0 / s } else { a / s }).collect())
            .collect();
        let m = SoftLabelMatrix::from_rows(&rows, 2.0, 3).unwrap();
        let summary = softlabel_summary(&m);
        assert!(summary.contains("epsilon_uniform=0.522815\n"), "{summary}");
        assert!(summary.contains("mean_softness=0.551873\n"), "{summary}");
    }
}
