//! Datasets: citation networks, digit archives and the synthetic
//! following-pairs generator.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::EvidenceAtom;
use crate::net::SupervisionMode;

pub const CITE_RELATION: &str = "Cite";
pub const LINK_RELATION: &str = "link";
pub const SYNTHETIC_DIGIT_DIM: usize = 32;
pub const SYNTHETIC_DIGIT_SCALE: f64 = 3.0;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("split '{0}' is empty")]
    EmptySplit(&'static str),
    #[error("fraction {name} = {value} must lie in (0, 1)")]
    Fraction { name: &'static str, value: f64 },
    #[error("cannot realise {wanted} {kind} links: only {available} candidate pairs")]
    InsufficientPairs {
        kind: &'static str,
        wanted: usize,
        available: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSetting {
    /// Cross-split evidence is dropped; each split is its own world.
    #[default]
    SeparateWorlds,
    /// One world; only training labels are observed.
    Transductive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub features: Array2<f64>,
    pub class_names: Vec<String>,
    /// 0/1 supervision, one row per pattern.
    pub labels: Array2<f64>,
    /// Patterns whose labels are visible during training.
    pub observed: Vec<bool>,
    pub split: Vec<Split>,
    pub evidence: Vec<EvidenceAtom>,
    pub mode: SupervisionMode,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed[i]).collect()
    }

    /// Index of the positive class of a one-label pattern.
    pub fn label_of(&self, pattern: usize) -> Option<usize> {
        self.labels.row(pattern).iter().position(|&v| v > 0.5)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.len();
        if self.features.nrows() != n || self.labels.nrows() != n || self.observed.len() != n || self.split.len() != n {
            return Err(DataError::Invalid(format!(
                "inconsistent sizes: {} ids, {} feature rows, {} label rows",
                n,
                self.features.nrows(),
                self.labels.nrows()
            )));
        }
        if self.labels.ncols() != self.n_classes() {
            return Err(DataError::Invalid(format!(
                "{} label columns for {} classes",
                self.labels.ncols(),
                self.n_classes()
            )));
        }
        let unique: HashSet<&String> = self.ids.iter().collect();
        if unique.len() != n {
            return Err(DataError::Invalid("duplicate pattern id".into()));
        }
        if self.labels.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(DataError::Invalid("labels must be 0 or 1".into()));
        }
        if self.mode == SupervisionMode::OneLabel {
            for (i, row) in self.labels.rows().into_iter().enumerate() {
                if self.observed[i] && row.sum() != 1.0 {
                    return Err(DataError::Invalid(format!(
                        "pattern '{}' has {} positive classes",
                        self.ids[i],
                        row.sum()
                    )));
                }
            }
        }
        for (i, (&o, &s)) in self.observed.iter().zip(&self.split).enumerate() {
            if o && s != Split::Train {
                return Err(DataError::Invalid(format!(
                    "pattern '{}' is observed but in the {} split",
                    self.ids[i],
                    s.name()
                )));
            }
        }
        Ok(())
    }

    /// Sub-dataset over the given patterns. Evidence atoms mentioning a
    /// dropped pattern are dropped.
    pub fn restrict(&self, keep: &[usize]) -> Dataset {
        let all: HashSet<&str> = self.ids.iter().map(String::as_str).collect();
        let kept: HashSet<&str> = keep.iter().map(|&i| self.ids[i].as_str()).collect();
        let evidence = self
            .evidence
            .iter()
            .filter(|e| {
                e.args
                    .iter()
                    .all(|a| !all.contains(a.as_str()) || kept.contains(a.as_str()))
            })
            .cloned()
            .collect();
        let mut features = Array2::zeros((keep.len(), self.feature_dim()));
        let mut labels = Array2::zeros((keep.len(), self.n_classes()));
        for (k, &i) in keep.iter().enumerate() {
            features.row_mut(k).assign(&self.features.row(i));
            labels.row_mut(k).assign(&self.labels.row(i));
        }
        Dataset {
            ids: keep.iter().map(|&i| self.ids[i].clone()).collect(),
            features,
            class_names: self.class_names.clone(),
            labels,
            observed: keep.iter().map(|&i| self.observed[i]).collect(),
            split: keep.iter().map(|&i| self.split[i]).collect(),
            evidence,
            mode: self.mode,
        }
    }

    /// The world formed by one split's patterns.
    pub fn world(&self, split: Split) -> Dataset {
        self.restrict(&self.indices(split))
    }

    /// Prefixes every pattern id (and the matching evidence arguments).
    pub fn with_id_prefix(mut self, prefix: &str) -> Dataset {
        let ids: HashSet<String> = self.ids.iter().cloned().collect();
        for id in &mut self.ids {
            *id = format!("{prefix}{id}");
        }
        for e in &mut self.evidence {
            for a in &mut e.args {
                if ids.contains(a) {
                    *a = format!("{prefix}{a}");
                }
            }
        }
        self
    }

    /// Re-indexes label columns onto `names`, e.g. the classes a model was
    /// trained with. Every present class must appear in `names`.
    pub fn with_classes(mut self, names: &[String]) -> Result<Dataset, DataError> {
        let mut labels = Array2::zeros((self.len(), names.len()));
        for (k, c) in self.class_names.iter().enumerate() {
            let j = names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| DataError::Invalid(format!("class '{c}' is not among {names:?}")))?;
            labels.column_mut(j).assign(&self.labels.column(k));
        }
        self.labels = labels;
        self.class_names = names.to_vec();
        Ok(self)
    }

    /// Marks every pattern as observed training data.
    pub fn all_observed(mut self) -> Dataset {
        self.split = vec![Split::Train; self.len()];
        self.observed = vec![true; self.len()];
        self
    }

    /// Marks every pattern as unobserved data of `split`.
    pub fn all_hidden(mut self, split: Split) -> Dataset {
        self.split = vec![split; self.len()];
        self.observed = vec![false; self.len()];
        self
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Loads a citation network in the node/edge TSV format, with the edges
/// as `Cite` evidence.
pub fn load_citation(nodes_path: &Path, edges_path: &Path) -> Result<Dataset, DataError> {
    load_graph(nodes_path, edges_path, CITE_RELATION)
}

/// Node lines are `id<TAB>label<TAB>features`, where an empty label marks
/// an unlabelled node (unobserved, test split) and features are
/// space-separated word indices (value 1) or `index:value` pairs. An
/// optional `#dim N` line fixes the feature dimension. Edge lines are
/// `src<TAB>dst`.
pub fn load_graph(nodes_path: &Path, edges_path: &Path, relation: &str) -> Result<Dataset, DataError> {
    let text = read(nodes_path)?;
    let malformed = |line: usize, message: String| DataError::Malformed {
        path: nodes_path.to_path_buf(),
        line,
        message,
    };
    let mut declared_dim: Option<usize> = None;
    // (id, label, sparse features)
    type Row = (String, String, Vec<(usize, f64)>);
    let mut rows: Vec<Row> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(d) = rest.trim().strip_prefix("dim") {
                let d = d
                    .trim()
                    .parse()
                    .map_err(|_| malformed(line_no, format!("bad dimension '{}'", d.trim())))?;
                declared_dim = Some(d);
            }
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(malformed(
                line_no,
                format!("expected 2 or 3 tab-separated fields, got {}", parts.len()),
            ));
        }
        let mut feats = Vec::new();
        if let Some(f) = parts.get(2) {
            for tok in f.split_whitespace() {
                let (idx, val) = match tok.split_once(':') {
                    Some((i, v)) => (
                        i,
                        v.parse::<f64>()
                            .map_err(|_| malformed(line_no, format!("bad value '{v}'")))?,
                    ),
                    None => (tok, 1.0),
                };
                let idx: usize = idx
                    .parse()
                    .map_err(|_| malformed(line_no, format!("bad feature index '{idx}'")))?;
                feats.push((idx, val));
            }
        }
        rows.push((parts[0].to_string(), parts[1].to_string(), feats));
    }
    let max_idx = rows.iter().flat_map(|r| r.2.iter().map(|f| f.0 + 1)).max().unwrap_or(0);
    let dim = match declared_dim {
        Some(d) if max_idx > d => {
            return Err(DataError::Invalid(format!(
                "feature index {} exceeds declared dimension {}",
                max_idx - 1,
                d
            )))
        }
        Some(d) => d,
        None => max_idx,
    };
    let mut class_names: Vec<String> = rows.iter().filter(|r| !r.1.is_empty()).map(|r| r.1.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let class_idx: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let n = rows.len();
    let mut features = Array2::zeros((n, dim));
    let mut labels = Array2::zeros((n, class_names.len()));
    let mut ids = Vec::with_capacity(n);
    for (i, (id, label, feats)) in rows.iter().enumerate() {
        for &(j, v) in feats {
            features[[i, j]] = v;
        }
        if let Some(&c) = class_idx.get(label.as_str()) {
            labels[[i, c]] = 1.0;
        }
        ids.push(id.clone());
    }
    let known: HashSet<&str> = ids.iter().map(String::as_str).collect();

    let text = read(edges_path)?;
    let mut evidence = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let err = |message: String| DataError::Malformed {
            path: edges_path.to_path_buf(),
            line: k + 1,
            message,
        };
        if parts.len() != 2 {
            return Err(err(format!("expected 2 tab-separated fields, got {}", parts.len())));
        }
        for p in &parts {
            if !known.contains(p) {
                return Err(err(format!("edge refers to unknown node '{p}'")));
            }
        }
        evidence.push(EvidenceAtom {
            predicate: relation.to_string(),
            args: vec![parts[0].to_string(), parts[1].to_string()],
            value: true,
        });
    }
    let ds = Dataset {
        ids,
        features,
        class_names,
        labels,
        observed: rows.iter().map(|r| !r.1.is_empty()).collect(),
        split: rows
            .iter()
            .map(|r| if r.1.is_empty() { Split::Test } else { Split::Train })
            .collect(),
        evidence,
        mode: SupervisionMode::OneLabel,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads the public Citeseer distribution (`citeseer.content`, one dense
/// binary row per paper with the label last; `citeseer.cites`, lines of
/// `cited citing`). Citations to papers without content are skipped.
pub fn load_citeseer_raw(content_path: &Path, cites_path: &Path) -> Result<Dataset, DataError> {
    let text = read(content_path)?;
    let mut rows = Vec::new();
    let mut dim = None;
    for (k, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let err = |message: String| DataError::Malformed {
            path: content_path.to_path_buf(),
            line: k + 1,
            message,
        };
        if parts.len() < 2 {
            return Err(err("expected id, features and label".into()));
        }
        let d = parts.len() - 2;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => return Err(err(format!("{d} features, expected {prev}"))),
            _ => {}
        }
        let feats: Vec<f64> = parts[1..parts.len() - 1]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad feature '{t}'"))))
            .collect::<Result<_, _>>()?;
        rows.push((parts[0].to_string(), parts[parts.len() - 1].to_string(), feats));
    }
    let dim = dim.unwrap_or(0);
    let mut class_names: Vec<String> = rows.iter().filter(|r| !r.1.is_empty()).map(|r| r.1.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let n = rows.len();
    let mut features = Array2::zeros((n, dim));
    let mut labels = Array2::zeros((n, class_names.len()));
    let mut ids = Vec::with_capacity(n);
    for (i, (id, label, f)) in rows.into_iter().enumerate() {
        features.row_mut(i).assign(&ndarray::Array1::from(f));
        let c = class_names.iter().position(|c| *c == label).expect("collected above");
        labels[[i, c]] = 1.0;
        ids.push(id);
    }
    let known: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let text = read(cites_path)?;
    let mut evidence = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 || !known.contains(parts[0]) || !known.contains(parts[1]) {
            continue;
        }
        evidence.push(EvidenceAtom {
            predicate: CITE_RELATION.to_string(),
            args: vec![parts[1].to_string(), parts[0].to_string()],
            value: true,
        });
    }
    let ds = Dataset {
        ids,
        features,
        class_names,
        labels,
        observed: vec![true; n],
        split: vec![Split::Train; n],
        evidence,
        mode: SupervisionMode::OneLabel,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads a citation dataset from a directory holding either
/// `nodes.tsv`/`edges.tsv` or `citeseer.content`/`citeseer.cites`.
pub fn load_citation_dir(dir: &Path) -> Result<Dataset, DataError> {
    let nodes = dir.join("nodes.tsv");
    if nodes.exists() {
        return load_citation(&nodes, &dir.join("edges.tsv"));
    }
    load_citeseer_raw(&dir.join("citeseer.content"), &dir.join("citeseer.cites"))
}

/// Writes the node/edge TSV format read by [`load_graph`].
pub fn write_graph(ds: &Dataset, nodes_path: &Path, edges_path: &Path) -> Result<(), DataError> {
    let mut nodes = format!("#dim {}\n", ds.feature_dim());
    for i in 0..ds.len() {
        let label = ds.label_of(i).map(|c| ds.class_names[c].as_str()).unwrap_or("");
        let feats: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(j, &v)| if v == 1.0 { j.to_string() } else { format!("{j}:{v}") })
            .collect();
        let _ = writeln!(nodes, "{}\t{}\t{}", ds.ids[i], label, feats.join(" "));
    }
    let mut edges = String::new();
    for e in ds.evidence.iter().filter(|e| e.value && e.args.len() == 2) {
        let _ = writeln!(edges, "{}\t{}", e.args[0], e.args[1]);
    }
    fs::write(nodes_path, nodes).map_err(io_err(nodes_path))?;
    fs::write(edges_path, edges).map_err(io_err(edges_path))?;
    Ok(())
}

/// Assigns a random train/valid/test split. `valid_fraction` is taken out
/// of the sampled training portion.
pub fn split_dataset(
    ds: &Dataset,
    train_fraction: f64,
    valid_fraction: f64,
    setting: SplitSetting,
    seed: u64,
) -> Result<Dataset, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Fraction {
            name: "train_fraction",
            value: train_fraction,
        });
    }
    if !(0.0..1.0).contains(&valid_fraction) {
        return Err(DataError::Fraction {
            name: "valid_fraction",
            value: valid_fraction,
        });
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_sampled = (train_fraction * n as f64).round() as usize;
    let n_valid = (valid_fraction * n_sampled as f64).round() as usize;
    let n_train = n_sampled.saturating_sub(n_valid);
    if n_train == 0 {
        return Err(DataError::EmptySplit("train"));
    }
    if n_sampled >= n {
        return Err(DataError::EmptySplit("test"));
    }
    if valid_fraction > 0.0 && n_valid == 0 {
        return Err(DataError::EmptySplit("valid"));
    }
    let mut split = vec![Split::Test; n];
    for (k, &i) in order.iter().enumerate().take(n_sampled) {
        split[i] = if k < n_valid { Split::Valid } else { Split::Train };
    }
    let mut out = ds.clone();
    out.observed = split.iter().map(|&s| s == Split::Train).collect();
    out.split = split;
    if setting == SplitSetting::SeparateWorlds {
        let split_of: HashMap<&str, Split> = out
            .ids
            .iter()
            .zip(&out.split)
            .map(|(id, &s)| (id.as_str(), s))
            .collect();
        out.evidence.retain(|e| {
            let splits: HashSet<Split> = e
                .args
                .iter()
                .filter_map(|a| split_of.get(a.as_str()).copied())
                .collect();
            splits.len() <= 1
        });
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Fraction of links joining a digit to its successor.
    pub predictive_fraction: f64,
    pub seed: u64,
}

/// Where digit images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DigitSource {
    /// Gaussian blobs around a scaled one-hot class mean.
    Synthetic,
    /// Images (one row each, scaled to [0,1]) with their labels.
    Images { features: Array2<f64>, labels: Vec<u8> },
}

impl DigitSource {
    pub fn from_idx(images: &Path, labels: &Path) -> Result<Self, DataError> {
        let features = read_idx_images(images)?;
        let labels = read_idx_labels(labels)?;
        if features.nrows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 9) {
            return Err(DataError::Invalid(format!("digit label {l} out of range")));
        }
        Ok(DigitSource::Images { features, labels })
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Invalid(format!("{}: truncated header", path.display())))
}

/// Reads an idx image archive, scaling pixels to [0,1].
pub fn read_idx_images(path: &Path) -> Result<Array2<f64>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Invalid(format!(
            "{}: bad magic {magic:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = &bytes[16..];
    if pixels.len() != n * rows * cols {
        return Err(DataError::Invalid(format!(
            "{}: {} pixel bytes for {n} images of {rows}x{cols}",
            path.display(),
            pixels.len()
        )));
    }
    Ok(Array2::from_shape_fn((n, rows * cols), |(i, j)| {
        pixels[i * rows * cols + j] as f64 / 255.0
    }))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Invalid(format!(
            "{}: bad magic {magic:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let labels = bytes[8..].to_vec();
    if labels.len() != n {
        return Err(DataError::Invalid(format!(
            "{}: {} labels, header says {n}",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

/// Generates one world of digit images with a `link` relation in which a
/// fraction of the links join a digit to its successor.
pub fn generate_following_pairs(
    n_images: usize,
    noise: NoiseSpec,
    source: &DigitSource,
    links_per_image: f64,
) -> Result<Dataset, DataError> {
    if n_images < 2 {
        return Err(DataError::Invalid("need at least two images".into()));
    }
    let p = noise.predictive_fraction;
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::Invalid(format!("predictive fraction {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let (features, digits): (Array2<f64>, Vec<usize>) = match source {
        DigitSource::Synthetic => {
            let digits: Vec<usize> = (0..n_images).map(|_| rng.random_range(0..10)).collect();
            let mut x = Array2::zeros((n_images, SYNTHETIC_DIGIT_DIM));
            for (i, &d) in digits.iter().enumerate() {
                for j in 0..SYNTHETIC_DIGIT_DIM {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[[i, j]] = z + if j == d { SYNTHETIC_DIGIT_SCALE } else { 0.0 };
                }
            }
            (x, digits)
        }
        DigitSource::Images { features, labels } => {
            if labels.len() < n_images {
                return Err(DataError::Invalid(format!(
                    "archive holds {} images, {n_images} requested",
                    labels.len()
                )));
            }
            let picked = rand::seq::index::sample(&mut rng, labels.len(), n_images).into_vec();
            let mut x = Array2::zeros((n_images, features.ncols()));
            for (k, &i) in picked.iter().enumerate() {
                x.slice_mut(s![k, ..]).assign(&features.row(i));
            }
            (x, picked.iter().map(|&i| labels[i] as usize).collect())
        }
    };

    let n_links = (links_per_image * n_images as f64).round() as usize;
    let n_follow = (p * n_links as f64).round() as usize;
    let mut follow = Vec::new();
    let mut other = Vec::new();
    for x in 0..n_images {
        for y in 0..n_images {
            if x == y {
                continue;
            }
            if digits[y] == digits[x] + 1 {
                follow.push((x, y));
            } else {
                other.push((x, y));
            }
        }
    }
    if follow.len() < n_follow {
        return Err(DataError::InsufficientPairs {
            kind: "successor",
            wanted: n_follow,
            available: follow.len(),
        });
    }
    if other.len() < n_links - n_follow {
        return Err(DataError::InsufficientPairs {
            kind: "non-successor",
            wanted: n_links - n_follow,
            available: other.len(),
        });
    }
    follow.shuffle(&mut rng);
    other.shuffle(&mut rng);
    let mut links: Vec<(usize, usize)> = follow[..n_follow].to_vec();
    links.extend_from_slice(&other[..n_links - n_follow]);
    links.sort_unstable();

    let ids: Vec<String> = (0..n_images).map(|i| format!("img{i}")).collect();
    let mut labels = Array2::zeros((n_images, 10));
    for (i, &d) in digits.iter().enumerate() {
        labels[[i, d]] = 1.0;
    }
    let evidence = links
        .into_iter()
        .map(|(x, y)| EvidenceAtom {
            predicate: LINK_RELATION.to_string(),
            args: vec![ids[x].clone(), ids[y].clone()],
            value: true,
        })
        .collect();
    let ds = Dataset {
        ids,
        features,
        class_names: (0..10).map(|d| d.to_string()).collect(),
        labels,
        observed: vec![true; n_images],
        split: vec![Split::Train; n_images],
        evidence,
        mode: SupervisionMode::OneLabel,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        p
    }

    fn toy(dir: &Path) -> (PathBuf, PathBuf) {
        let nodes = write(dir, "nodes.tsv", "#dim 4\na\tML\t0 2\nb\tAI\t1\nc\tML\t3 0\n");
        let edges = write(dir, "edges.tsv", "a\tb\nc\ta\n");
        (nodes, edges)
    }

    #[test]
    fn toy_citation() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = toy(dir.path());
        let ds = load_citation(&n, &e).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.class_names, vec!["AI", "ML"]);
        assert_eq!(ds.label_of(1), Some(0));
        assert_eq!(ds.features.row(2).to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(ds.evidence.len(), 2);
        assert_eq!(ds.evidence[1].args, vec!["c", "a"]);
    }

    #[test]
    fn missing_node_in_edges() {
        let dir = tempfile::tempdir().unwrap();
        let (n, _) = toy(dir.path());
        let e = write(dir.path(), "bad.tsv", "a\tb\na\tz\n");
        match load_citation(&n, &e).unwrap_err() {
            DataError::Malformed { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("'z'"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_node_line() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "a\tML\t0\nb\tML\tx1\n");
        let e = write(dir.path(), "e.tsv", "");
        assert!(matches!(
            load_citation(&n, &e),
            Err(DataError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn graph_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_following_pairs(
            12,
            NoiseSpec {
                predictive_fraction: 0.5,
                seed: 3,
            },
            &DigitSource::Synthetic,
            1.0,
        )
        .unwrap();
        let (n, e) = (dir.path().join("n.tsv"), dir.path().join("e.tsv"));
        write_graph(&ds, &n, &e).unwrap();
        let back = load_graph(&n, &e, LINK_RELATION).unwrap();
        assert_eq!(back.ids, ds.ids);
        assert_eq!(back.evidence, ds.evidence);
        for i in 0..ds.len() {
            assert_eq!(
                ds.class_names[ds.label_of(i).unwrap()],
                back.class_names[back.label_of(i).unwrap()]
            );
        }
        let diff = (&back.features - &ds.features).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn unlabelled_nodes_and_class_reindexing() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = (dir.path().join("n.tsv"), dir.path().join("e.tsv"));
        fs::write(&n, "a\tz\t0\nb\t\t1\nc\tx\t0 1\n").unwrap();
        fs::write(&e, "a\tb\n").unwrap();
        let ds = load_graph(&n, &e, "R").unwrap();
        assert_eq!(ds.class_names, ["x", "z"]);
        assert_eq!(ds.observed, [true, false, true]);
        assert_eq!(ds.label_of(1), None);
        let names: Vec<String> = ["w", "z", "x"].iter().map(|s| s.to_string()).collect();
        let re = ds.clone().with_classes(&names).unwrap();
        assert_eq!(re.label_of(0), Some(1));
        assert_eq!(re.label_of(2), Some(2));
        assert!(ds.with_classes(&names[..2]).is_err());
    }

    fn synthetic_graph(n: usize) -> Dataset {
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let mut labels = Array2::zeros((n, 2));
        for i in 0..n {
            labels[[i, i % 2]] = 1.0;
        }
        let evidence = (0..n)
            .map(|i| EvidenceAtom {
                predicate: CITE_RELATION.into(),
                args: vec![ids[i].clone(), ids[(i * 7 + 1) % n].clone()],
                value: true,
            })
            .collect();
        Dataset {
            ids,
            features: Array2::zeros((n, 1)),
            class_names: vec!["A".into(), "B".into()],
            labels,
            observed: vec![true; n],
            split: vec![Split::Train; n],
            evidence,
            mode: SupervisionMode::OneLabel,
        }
    }

    #[test]
    fn splits() {
        let ds = synthetic_graph(100);
        let t = split_dataset(&ds, 0.5, 0.1, SplitSetting::Transductive, 7).unwrap();
        assert_eq!(t.indices(Split::Valid).len(), 5);
        assert_eq!(t.indices(Split::Train).len(), 45);
        assert_eq!(t.indices(Split::Test).len(), 50);
        assert_eq!(t.observed_indices(), t.indices(Split::Train));
        assert_eq!(t.evidence, ds.evidence);

        let s = split_dataset(&ds, 0.5, 0.1, SplitSetting::SeparateWorlds, 7).unwrap();
        assert_eq!(s.split, t.split);
        assert!(s.evidence.len() < ds.evidence.len());
        let split_of: HashMap<&str, Split> = s.ids.iter().map(String::as_str).zip(s.split.iter().copied()).collect();
        for e in &s.evidence {
            assert_eq!(split_of[e.args[0].as_str()], split_of[e.args[1].as_str()]);
        }
        assert_eq!(
            split_dataset(&ds, 0.5, 0.1, SplitSetting::SeparateWorlds, 7).unwrap(),
            s
        );
        assert!(split_dataset(&ds, 1.0, 0.1, SplitSetting::Transductive, 7).is_err());
        assert!(matches!(
            split_dataset(&synthetic_graph(3), 0.1, 0.0, SplitSetting::Transductive, 1),
            Err(DataError::EmptySplit("train"))
        ));
    }

    #[test]
    fn restrict_drops_dangling_evidence() {
        let ds = synthetic_graph(10);
        let sub = ds.restrict(&[0, 1, 2, 3]);
        assert_eq!(sub.len(), 4);
        assert!(sub.evidence.iter().all(|e| e.args.iter().all(|a| sub.ids.contains(a))));
    }

    #[test]
    fn following_pairs_properties() {
        let spec = |p, seed| NoiseSpec {
            predictive_fraction: p,
            seed,
        };
        let a = generate_following_pairs(50, spec(1.0, 4), &DigitSource::Synthetic, 1.0).unwrap();
        let b = generate_following_pairs(50, spec(1.0, 4), &DigitSource::Synthetic, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.evidence.len(), 50);
        let digit = |ds: &Dataset, id: &str| ds.label_of(ds.ids.iter().position(|i| i == id).unwrap()).unwrap();
        for e in &a.evidence {
            assert_eq!(digit(&a, &e.args[1]), digit(&a, &e.args[0]) + 1);
        }
        let c = generate_following_pairs(50, spec(0.1, 4), &DigitSource::Synthetic, 1.0).unwrap();
        let follows = c
            .evidence
            .iter()
            .filter(|e| digit(&c, &e.args[1]) == digit(&c, &e.args[0]) + 1)
            .count();
        assert_eq!(follows, 5);
        assert!(matches!(
            generate_following_pairs(3, spec(1.0, 1), &DigitSource::Synthetic, 5.0),
            Err(DataError::InsufficientPairs { .. })
        ));
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for v in [3u32, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 255, 51, 0, 0, 0, 0, 0, 255, 255, 255, 255]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&3u32.to_be_bytes());
        lab.extend_from_slice(&[7, 0, 9]);
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab).unwrap();
        let src = DigitSource::from_idx(&ip, &lp).unwrap();
        match &src {
            DigitSource::Images { features, labels } => {
                assert_eq!(features.dim(), (3, 4));
                assert_eq!(features[[0, 1]], 1.0);
                assert_eq!(features[[0, 2]], 0.2);
                assert_eq!(labels, &vec![7, 0, 9]);
            }
            _ => unreachable!(),
        }
        fs::write(&lp, &img).unwrap();
        assert!(read_idx_labels(&lp).is_err());
    }
}
