//! Labeled feature-vector datasets: file format, stratified splitting and a
//! synthetic generator whose class geometry is known in advance.
//!
//! Dataset file format:
//!
//! ```text
//! # comment lines start with '#'
//! K=<classes> dim=<features>
//! <label>,<v1>,...,<v_dim>
//! ```
//!
//! Labels are 1-based in files and 0-based everywhere else.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-class image counts of the seven-class dermoscopy benchmark
/// (MEL, NV, BCC, AKIEC, BKL, DF, VASC).
pub const ISIC_CLASS_COUNTS: [usize; 7] = [1113, 6705, 514, 327, 1099, 115, 142];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    class_counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::invalid("features must be an N×dim matrix"));
        }
        if features.rows() != labels.len() {
            return Err(Error::Mismatch {
                what: "label count",
                expected: features.rows(),
                found: labels.len(),
            });
        }
        let mut class_counts = vec![0; classes];
        for &y in &labels {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            class_counts[y] += 1;
        }
        Ok(Self {
            features,
            labels,
            classes,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Empirical class distribution.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.class_counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.features.select_rows(indices), labels, self.classes)
            .expect("subset of a valid dataset")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("K={} dim={}\n", self.classes, self.dim());
        for (i, &y) in self.labels.iter().enumerate() {
            let _ = write!(out, "{}", y + 1);
            for v in self.features.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut header: Option<(usize, usize)> = None;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((classes, dim)) = header else {
                header = Some(parse_header(line).map_err(|m| perr(lineno, m))?);
                continue;
            };
            let mut fields = line.split(',');
            let label_field = fields.next().unwrap_or("").trim();
            let label: usize = label_field
                .parse()
                .map_err(|_| perr(lineno, format!("bad label '{label_field}'")))?;
            if label == 0 || label > classes {
                return Err(perr(
                    lineno,
                    format!("label {label} outside 1..={classes}"),
                ));
            }
            let values = fields
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| perr(lineno, format!("bad value '{}'", f.trim())))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                return Err(perr(
                    lineno,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            labels.push(label - 1);
            data.extend(values);
        }
        let (classes, dim) = header.ok_or_else(|| perr(1, "missing 'K=<int> dim=<int>' header".into()))?;
        let features = Tensor::new(vec![labels.len(), dim], data)?;
        Self::new(features, labels, classes)
    }
}

fn parse_header(line: &str) -> std::result::Result<(usize, usize), String> {
    let (mut k, mut dim) = (None, None);
    for field in line.split_whitespace() {
        match field.split_once('=') {
            Some(("K", v)) => k = v.parse().ok(),
            Some(("dim", v)) => dim = v.parse().ok(),
            _ => return Err(format!("bad header field '{field}'")),
        }
    }
    match (k, dim) {
        (Some(k), Some(d)) if k > 0 && d > 0 => Ok((k, d)),
        _ => Err(format!("expected 'K=<int> dim=<int>', got '{line}'")),
    }
}

/// Gaussian clusters around class centers placed on a similarity graph.
///
/// Classes joined (transitively) by `siblings` form a group. Group centers
/// sit on orthogonal axes `d_far` apart; within a group, members are offset
/// along further orthogonal axes so that siblings are `d_near` apart.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples_per_class: Vec<usize>,
    pub dim: usize,
    pub siblings: Vec<(usize, usize)>,
    pub d_near: f64,
    pub d_far: f64,
    pub stddev: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn classes(&self) -> usize {
        self.samples_per_class.len()
    }

    /// Six classes in three sibling pairs (0,1), (2,3), (4,5).
    pub fn sibling_pairs(per_class: usize, seed: u64) -> Self {
        Self {
            samples_per_class: vec![per_class; 6],
            dim: 8,
            siblings: vec![(0, 1), (2, 3), (4, 5)],
            d_near: 1.0,
            d_far: 4.0,
            stddev: 0.5,
            seed,
        }
    }

    /// `classes` well-separated clusters with no sibling structure.
    pub fn separable(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            samples_per_class: vec![per_class; classes],
            dim: classes.max(2) + 1,
            siblings: Vec::new(),
            d_near: 1.0,
            d_far: 4.0,
            stddev: 0.3,
            seed,
        }
    }

    /// Seven classes with counts proportional to [`ISIC_CLASS_COUNTS`],
    /// divided by `divisor` (each class keeps at least 2 samples).
    pub fn isic_shaped(divisor: usize, seed: u64) -> Self {
        let samples_per_class = ISIC_CLASS_COUNTS
            .iter()
            .map(|&c| ((c as f64 / divisor as f64).round() as usize).max(2))
            .collect();
        Self {
            samples_per_class,
            dim: 8,
            // Melanoma/nevus and the two keratinocyte lesions look alike.
            siblings: vec![(0, 1), (2, 3), (4, 3)],
            d_near: 1.5,
            d_far: 3.0,
            stddev: 0.6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k == 0 {
            return Err(Error::invalid("synthetic spec needs at least one class"));
        }
        if !(self.stddev >= 0.0) || !self.stddev.is_finite() {
            return Err(Error::invalid(format!("stddev must be >= 0, got {}", self.stddev)));
        }
        if !(self.d_near > 0.0 && self.d_far > self.d_near) {
            return Err(Error::invalid(format!(
                "need 0 < d_near < d_far, got d_near={} d_far={}",
                self.d_near, self.d_far
            )));
        }
        for &(a, b) in &self.siblings {
            if a >= k || b >= k || a == b {
                return Err(Error::invalid(format!("bad sibling pair ({a}, {b}) for {k} classes")));
            }
        }
        let (groups, max_size) = self.groups();
        let needed = groups.iter().max().map_or(0, |g| g + 1) + max_size;
        if self.dim < needed {
            return Err(Error::invalid(format!(
                "dim {} too small for this sibling layout, need at least {needed}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Group index of each class (groups numbered by first appearance) and
    /// the largest group size.
    fn groups(&self) -> (Vec<usize>, usize) {
        let k = self.classes();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.siblings {
            if a < k && b < k {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut ids = vec![usize::MAX; k];
        let mut group = vec![0; k];
        let mut sizes = Vec::new();
        for (c, g) in group.iter_mut().enumerate() {
            let r = find(&mut parent, c);
            if ids[r] == usize::MAX {
                ids[r] = sizes.len();
                sizes.push(0);
            }
            *g = ids[r];
            sizes[ids[r]] += 1;
        }
        (group, sizes.into_iter().max().unwrap_or(0))
    }

    pub fn class_centers(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let (group, _) = self.groups();
        let n_groups = group.iter().max().map_or(0, |g| g + 1);
        let mut rank_in_group = vec![0; n_groups];
        let far = self.d_far / 2f64.sqrt();
        let near = self.d_near / 2f64.sqrt();
        Ok(group
            .iter()
            .map(|&g| {
                let mut c = vec![0.0; self.dim];
                c[g] = far;
                c[n_groups + rank_in_group[g]] = near;
                rank_in_group[g] += 1;
                c
            })
            .collect())
    }

    /// Whether classes `a` and `b` share a sibling group.
    pub fn are_siblings(&self, a: usize, b: usize) -> bool {
        let (group, _) = self.groups();
        a != b && group[a] == group[b]
    }
}

/// Samples the clusters described by `spec`, class by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let centers = spec.class_centers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n: usize = spec.samples_per_class.iter().sum();
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, (&count, center)) in spec.samples_per_class.iter().zip(&centers).enumerate() {
        for _ in 0..count {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c + spec.stddev * z);
            }
            labels.push(k);
        }
    }
    let features = Tensor::new(vec![n, spec.dim], data)?;
    LabeledDataset::new(features, labels, spec.classes())
}

/// Splits each class independently: `round(ratio·count)` (half up) samples go
/// to the first split, clamped so that both splits keep at least one sample
/// of every class.
pub fn stratified_split(
    ds: &LabeledDataset,
    ratio: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if let Some(k) = ds.class_counts().iter().position(|&c| c < 2) {
        return Err(Error::invalid(format!(
            "class {} has {} samples; stratified splitting needs at least 2",
            k + 1,
            ds.class_counts()[k]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for k in 0..ds.classes() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == k).collect();
        idx.shuffle(&mut rng);
        let n_train = split_count(idx.len(), ratio);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Number of a class's samples assigned to the first split.
pub fn split_count(count: usize, ratio: f64) -> usize {
    let n = (ratio * count as f64 + 0.5).floor() as usize;
    n.clamp(1, count.saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sq_dist;

    fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> usize {
        let mut best = 0;
        for (k, c) in centers.iter().enumerate() {
            if sq_dist(x, c) < sq_dist(x, &centers[best]) {
                best = k;
            }
        }
        best
    }

    #[test]
    fn counts_and_size() {
        let spec = SyntheticSpec {
            samples_per_class: vec![10, 10],
            ..SyntheticSpec::separable(2, 10, 1)
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.class_counts(), &[10, 10]);
    }

    #[test]
    fn vanishing_stddev_reproduces_centers() {
        let spec = SyntheticSpec {
            stddev: 0.0,
            ..SyntheticSpec::sibling_pairs(3, 9)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let centers = spec.class_centers().unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.features().row(i), centers[ds.labels()[i]].as_slice());
        }
    }

    #[test]
    fn center_geometry() {
        let spec = SyntheticSpec::sibling_pairs(1, 0);
        let c = spec.class_centers().unwrap();
        for a in 0..6 {
            for b in 0..6 {
                if a == b {
                    continue;
                }
                let d = sq_dist(&c[a], &c[b]).sqrt();
                if spec.are_siblings(a, b) {
                    assert!((d - spec.d_near).abs() < 1e-12, "{a},{b}: {d}");
                } else {
                    assert!(d >= spec.d_far - 1e-12, "{a},{b}: {d}");
                }
            }
        }
    }

    #[test]
    fn nearest_center_recovers_labels() {
        let spec = SyntheticSpec {
            d_near: 3.0,
            d_far: 5.0,
            stddev: 0.2,
            ..SyntheticSpec::sibling_pairs(50, 4)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let centers = spec.class_centers().unwrap();
        let correct = (0..ds.len())
            .filter(|&i| nearest_center(ds.features().row(i), &centers) == ds.labels()[i])
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::sibling_pairs(5, 123);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 124, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = SyntheticSpec::sibling_pairs(2, 0);
        assert!(SyntheticSpec { d_far: 0.5, ..base.clone() }.validate().is_err());
        assert!(SyntheticSpec { stddev: -1.0, ..base.clone() }.validate().is_err());
        assert!(SyntheticSpec { dim: 4, ..base.clone() }.validate().is_err());
        assert!(SyntheticSpec { siblings: vec![(0, 9)], ..base }.validate().is_err());
    }

    #[test]
    fn split_even_counts() {
        let ds = generate_synthetic(&SyntheticSpec::separable(2, 10, 0)).unwrap();
        let (train, val) = stratified_split(&ds, 0.8, 1).unwrap();
        assert_eq!(train.class_counts(), &[8, 8]);
        assert_eq!(val.class_counts(), &[2, 2]);
    }

    #[test]
    fn split_isic_counts() {
        let train: Vec<usize> = ISIC_CLASS_COUNTS.iter().map(|&c| split_count(c, 0.8)).collect();
        assert_eq!(train, vec![890, 5364, 411, 262, 879, 92, 114]);
    }

    #[test]
    fn split_is_partition_and_deterministic() {
        let spec = SyntheticSpec {
            samples_per_class: vec![7, 3, 12, 2, 5, 9],
            ..SyntheticSpec::sibling_pairs(0, 5)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let (t1, v1) = stratified_split(&ds, 0.8, 42).unwrap();
        let (t2, v2) = stratified_split(&ds, 0.8, 42).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(t1.len() + v1.len(), ds.len());
        for k in 0..ds.classes() {
            let c = ds.class_counts()[k];
            assert!(v1.class_counts()[k] >= 1);
            assert!((t1.class_counts()[k] as f64 - 0.8 * c as f64).abs() <= 1.0);
        }
        // Every row lands in exactly one split.
        let mut rows: Vec<Vec<u64>> = t1
            .features()
            .data()
            .chunks(ds.dim())
            .chain(v1.features().data().chunks(ds.dim()))
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut all: Vec<Vec<u64>> = ds
            .features()
            .data()
            .chunks(ds.dim())
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        all.sort();
        assert_eq!(rows, all);
    }

    #[test]
    fn split_needs_two_per_class() {
        let t = Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let ds = LabeledDataset::new(t, vec![0, 0, 1], 2).unwrap();
        assert!(stratified_split(&ds, 0.8, 0).is_err());
    }

    #[test]
    fn parse_valid_file() {
        let text = "# demo\nK=3 dim=4\n1,0,0,0,1\n2,1,1,1,1\n3,0.5,0.5,0.5,0.5\n# mid comment\n1,1e-3,2,3,4\n2,0,0,0,0\n3,-1,-2,-3,-4\n";
        let ds = LabeledDataset::parse(text, "f").unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels()[..3], [0, 1, 2]);
        assert_eq!(ds.class_counts(), &[2, 2, 2]);
    }

    #[test]
    fn parse_short_row_names_line() {
        let text = "K=3 dim=4\n1,0,0,0,1\n2,1,1,1\n";
        let err = LabeledDataset::parse(text, "f.txt").unwrap_err();
        assert!(err.to_string().starts_with("f.txt:3:"), "{err}");
    }

    #[test]
    fn parse_label_out_of_range() {
        let err = LabeledDataset::parse("K=2 dim=1\n3,0.5\n", "f").unwrap_err();
        assert!(err.to_string().contains("label 3"), "{err}");
        assert!(LabeledDataset::parse("K=2 dim=1\n0,0.5\n", "f").is_err());
        assert!(LabeledDataset::parse("1,0.5\n", "f").is_err());
    }

    #[test]
    fn text_round_trip() {
        let spec = SyntheticSpec::sibling_pairs(4, 77);
        let ds = generate_synthetic(&spec).unwrap();
        let back = LabeledDataset::parse(&ds.to_text(), "mem").unwrap();
        assert_eq!(ds, back);
    }
}
