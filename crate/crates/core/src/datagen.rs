//! Synthetic long-tailed partial-label datasets and their text format.
//!
//! Classes are indexed by size, largest first. Each class is a Gaussian blob
//! around a mean on the radius-`separation` sphere; candidate sets hold the
//! true label plus every other label flipped in independently with
//! probability `flip_prob` (restricted to the true label's superclass when a
//! hierarchy is given).

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textio::{comment_block, fmt_f64, parse_f64, read_lines, write_file};
use crate::types::CandidateMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_classes: usize,
    /// Size of the largest class, `n_1`.
    pub head_count: usize,
    /// `gamma = n_1 / n_L`.
    pub imbalance_ratio: f64,
    pub flip_prob: f64,
    pub feature_dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    pub test_per_class: usize,
    /// Superclass id of every class; candidates never leave the superclass.
    pub hierarchy: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            head_count: 500,
            imbalance_ratio: 100.0,
            flip_prob: 0.5,
            feature_dim: 16,
            separation: 4.5,
            test_per_class: 100,
            hierarchy: None,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.feature_dim == 0 || self.head_count == 0 {
            return Err(Error::invalid("classes, head count and feature dimension must be positive"));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::invalid(format!(
                "imbalance ratio must be at least 1, got {}",
                self.imbalance_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip probability {} outside [0, 1)", self.flip_prob)));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("separation must be a nonnegative number"));
        }
        if (self.head_count as f64 / self.imbalance_ratio).round() < 1.0 {
            return Err(Error::invalid("the smallest class would be empty"));
        }
        if let Some(h) = &self.hierarchy {
            if h.len() != self.n_classes {
                return Err(Error::invalid(format!(
                    "hierarchy covers {} classes, expected {}",
                    h.len(),
                    self.n_classes
                )));
            }
        }
        Ok(())
    }
}

/// `n_j = round(n_1 gamma^(-(j-1)/(c-1)))`.
pub fn longtail_counts(head_count: usize, imbalance_ratio: f64, n_classes: usize) -> Vec<usize> {
    if n_classes == 1 {
        return vec![head_count];
    }
    (0..n_classes)
        .map(|j| {
            let t = j as f64 / (n_classes - 1) as f64;
            (head_count as f64 * imbalance_ratio.powf(-t)).round() as usize
        })
        .collect()
}

/// Exclusive class-index ends of the many and medium groups; the few group
/// runs to the last class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupBoundaries {
    pub many_end: usize,
    pub medium_end: usize,
    pub n_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl GroupBoundaries {
    pub fn group_of(&self, class: usize) -> Group {
        if class < self.many_end {
            Group::Many
        } else if class < self.medium_end {
            Group::Medium
        } else {
            Group::Few
        }
    }
}

/// Thirds by class index with the remainder in the middle: `(3, 7)` for ten
/// classes, `(33, 67)` for a hundred.
pub fn group_split(class_counts: &[usize]) -> Result<GroupBoundaries> {
    if class_counts.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("class counts must be sorted in descending order"));
    }
    let c = class_counts.len();
    let third = c / 3;
    Ok(GroupBoundaries {
        many_end: third,
        medium_end: c - third,
        n_classes: c,
    })
}

/// Unit-free class means on the radius-`separation` sphere.
fn class_means(c: usize, d: usize, separation: f64, rng: &mut Rng) -> Array2<f64> {
    let mut means = Array2::zeros((c, d));
    for mut row in means.outer_iter_mut() {
        loop {
            row.mapv_inplace(|_| rng.normal());
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| separation * v / norm);
                break;
            }
        }
    }
    means
}

fn sample_blobs(means: &Array2<f64>, counts: &[usize], rng: &mut Rng) -> (Array2<f64>, Vec<usize>) {
    let n: usize = counts.iter().sum();
    let d = means.ncols();
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut i = 0;
    for (k, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut row = features.row_mut(i);
            for j in 0..d {
                row[j] = means[[k, j]] + rng.normal();
            }
            labels.push(k);
            i += 1;
        }
    }
    (features, labels)
}

/// Train and balanced test features with their true labels.
pub struct GeneratedFeatures {
    pub train_features: Array2<f64>,
    pub train_labels: Vec<usize>,
    pub test_features: Array2<f64>,
    pub test_labels: Vec<usize>,
}

pub fn gen_features(spec: &DatasetSpec, rng: &Rng) -> Result<GeneratedFeatures> {
    spec.validate()?;
    let means = class_means(spec.n_classes, spec.feature_dim, spec.separation, &mut rng.derive(1));
    let counts = longtail_counts(spec.head_count, spec.imbalance_ratio, spec.n_classes);
    let (train_features, train_labels) = sample_blobs(&means, &counts, &mut rng.derive(2));
    let test_counts = vec![spec.test_per_class; spec.n_classes];
    let (test_features, test_labels) = sample_blobs(&means, &test_counts, &mut rng.derive(3));
    Ok(GeneratedFeatures {
        train_features,
        train_labels,
        test_features,
        test_labels,
    })
}

/// True label plus independent flips of every eligible negative label.
pub fn gen_candidates(
    true_labels: &[usize],
    n_classes: usize,
    flip_prob: f64,
    hierarchy: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<CandidateMatrix> {
    if !(0.0..1.0).contains(&flip_prob) {
        return Err(Error::invalid(format!("flip probability {flip_prob} outside [0, 1)")));
    }
    let mut bits = Array2::from_elem((true_labels.len(), n_classes), false);
    for (i, &y) in true_labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        bits[[i, y]] = true;
        for j in 0..n_classes {
            if j == y {
                continue;
            }
            let eligible = hierarchy.is_none_or(|h| h[j] == h[y]);
            // Draw for every negative so the stream does not depend on the hierarchy.
            let flipped = rng.bernoulli(flip_prob);
            if eligible && flipped {
                bits[[i, j]] = true;
            }
        }
    }
    CandidateMatrix::new(bits)
}

/// One split of a partially labeled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialDataset {
    pub features: Array2<f64>,
    pub true_labels: Vec<usize>,
    pub candidates: CandidateMatrix,
    pub class_counts: Vec<usize>,
    pub group_boundaries: GroupBoundaries,
}

impl PartialDataset {
    pub fn new(features: Array2<f64>, true_labels: Vec<usize>, candidates: CandidateMatrix) -> Result<Self> {
        let n = features.nrows();
        if true_labels.len() != n || candidates.n_samples() != n {
            return Err(Error::shape(format!(
                "{n} feature rows, {} labels, {} candidate rows",
                true_labels.len(),
                candidates.n_samples()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        let c = candidates.n_classes();
        let mut class_counts = vec![0; c];
        for (i, &y) in true_labels.iter().enumerate() {
            if y >= c {
                return Err(Error::invalid(format!("sample {i}: label {y} out of range")));
            }
            if !candidates.contains(i, y) {
                return Err(Error::invalid(format!(
                    "sample {i}: true label {y} missing from its candidate set"
                )));
            }
            class_counts[y] += 1;
        }
        let group_boundaries = group_split(&class_counts)?;
        Ok(Self {
            features,
            true_labels,
            candidates,
            class_counts,
            group_boundaries,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.candidates.n_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// The same samples with singleton candidate sets, i.e. full supervision.
    pub fn fully_supervised(&self) -> Self {
        let sets: Vec<Vec<usize>> = self.true_labels.iter().map(|&y| vec![y]).collect();
        let candidates =
            CandidateMatrix::from_sets(&sets, self.n_classes()).expect("labels were validated");
        Self {
            candidates,
            ..self.clone()
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> (Array2<f64>, CandidateMatrix) {
        (self.features.select(Axis(0), idx), self.candidates.select_rows(idx))
    }
}

/// A generated train/test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub train: PartialDataset,
    pub test: PartialDataset,
}

pub fn generate(spec: &DatasetSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let rng = Rng::new(spec.seed);
    let feats = gen_features(spec, &rng)?;
    let candidates = gen_candidates(
        &feats.train_labels,
        spec.n_classes,
        spec.flip_prob,
        spec.hierarchy.as_deref(),
        &mut rng.derive(4),
    )?;
    let train = PartialDataset::new(feats.train_features, feats.train_labels, candidates)?;
    let test_sets: Vec<Vec<usize>> = feats.test_labels.iter().map(|&y| vec![y]).collect();
    let test_candidates = CandidateMatrix::from_sets(&test_sets, spec.n_classes)?;
    let test = PartialDataset::new(feats.test_features, feats.test_labels, test_candidates)?;
    Ok(GeneratedDataset { train, test })
}

const DATASET_MAGIC: &str = "plrlab-dataset";
const DATASET_VERSION: &str = "v1";

pub fn write_dataset(ds: &PartialDataset, path: &Path) -> Result<()> {
    write_dataset_with_comments(ds, path, &[])
}

/// Header line, optional `#` comment lines, then one tab-separated record per
/// sample: id, features, true label, comma-separated candidate ids.
pub fn write_dataset_with_comments(ds: &PartialDataset, path: &Path, comments: &[String]) -> Result<()> {
    let mut out = format!(
        "{DATASET_MAGIC} {DATASET_VERSION} N={} c={} d={}\n",
        ds.n_samples(),
        ds.n_classes(),
        ds.feature_dim()
    );
    out.push_str(&comment_block(comments));
    for i in 0..ds.n_samples() {
        out.push_str(&i.to_string());
        for &v in ds.features.row(i) {
            out.push('\t');
            out.push_str(&fmt_f64(v));
        }
        out.push('\t');
        out.push_str(&ds.true_labels[i].to_string());
        out.push('\t');
        let cands: Vec<String> = ds.candidates.candidates(i).iter().map(|j| j.to_string()).collect();
        out.push_str(&cands.join(","));
        out.push('\n');
    }
    write_file(path, &out)
}

fn parse_header(path: &Path, line: &str) -> Result<(usize, usize, usize)> {
    let bad = |msg: &str| Error::format(path, 1, msg);
    let toks: Vec<&str> = line.split(' ').collect();
    if toks.len() != 5 || toks[0] != DATASET_MAGIC {
        return Err(bad("not a plrlab dataset header"));
    }
    if toks[1] != DATASET_VERSION {
        return Err(bad(&format!("unsupported dataset version {:?}", toks[1])));
    }
    let field = |tok: &str, key: &str| -> Result<usize> {
        tok.strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("bad {key}= field")))
    };
    Ok((field(toks[2], "N")?, field(toks[3], "c")?, field(toks[4], "d")?))
}

pub fn read_dataset(path: &Path) -> Result<PartialDataset> {
    let lines = read_lines(path)?;
    let (_, header) = lines
        .first()
        .ok_or_else(|| Error::format(path, 1, "empty dataset file"))?;
    let (n, c, d) = parse_header(path, header)?;
    let records: Vec<&(usize, String)> = lines[1..].iter().filter(|(_, l)| !l.starts_with('#')).collect();
    if records.len() < n {
        let line = lines.len() + 1;
        return Err(Error::format(
            path,
            line,
            format!("truncated: expected {n} records, found {}", records.len()),
        ));
    }
    if records.len() > n {
        return Err(Error::format(path, records[n].0, format!("more than {n} records")));
    }
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut sets = Vec::with_capacity(n);
    for (i, (ln, line)) in records.into_iter().enumerate() {
        let bad = |msg: String| Error::format(path, *ln, msg);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != d + 3 {
            return Err(bad(format!("expected {} fields, found {}", d + 3, fields.len())));
        }
        if fields[0].parse::<usize>().ok() != Some(i) {
            return Err(bad(format!("expected sample id {i}, found {:?}", fields[0])));
        }
        let row: Vec<f64> = fields[1..=d]
            .iter()
            .map(|s| parse_f64(s).ok_or_else(|| bad(format!("bad feature value {s:?}"))))
            .collect::<Result<_>>()?;
        features.row_mut(i).assign(&Array1::from(row));
        let y: usize = fields[d + 1]
            .parse()
            .map_err(|_| bad(format!("bad label {:?}", fields[d + 1])))?;
        labels.push(y);
        let set: Vec<usize> = fields[d + 2]
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad candidate id {s:?}"))))
            .collect::<Result<_>>()?;
        if set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("candidate ids must be strictly ascending".into()));
        }
        if set.iter().any(|&j| j >= c) {
            return Err(bad(format!("candidate id out of range for {c} classes")));
        }
        sets.push(set);
    }
    let candidates = CandidateMatrix::from_sets(&sets, c)?;
    PartialDataset::new(features, labels, candidates).map_err(|e| Error::format(path, 0, e.to_string()))
}
