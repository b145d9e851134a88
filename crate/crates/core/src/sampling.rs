//! Normalization, SMOTE class balancing, stratified splits and folds, and
//! the dataset manifest CSV.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::FdlImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub k_neighbors: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub folds: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            seed: 13,
            split_ratio: 0.8,
            folds: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(Error::config("k_neighbors must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds must be at least 2"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(format!("split ratio {} outside (0, 1)", self.split_ratio)));
        }
        Ok(())
    }
}

/// Where a dataset sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Origin {
    Original(usize),
    /// `base + gap * (neighbor - base)`, indices into the input dataset.
    Synthetic { base: usize, neighbor: usize, gap: f64 },
}

impl Origin {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, Origin::Synthetic { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDataset {
    pub images: Vec<FdlImage>,
    pub class_names: Vec<String>,
    pub origins: Vec<Origin>,
    pub seed: u64,
}

impl ImageDataset {
    pub fn new(images: Vec<FdlImage>, class_names: Vec<String>, seed: u64) -> Result<Self> {
        let origins = (0..images.len()).map(Origin::Original).collect();
        let ds = Self {
            images,
            class_names,
            origins,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        for (index, img) in self.images.iter().enumerate() {
            if img.label >= n {
                return Err(Error::LabelOutOfRange {
                    index,
                    label: img.label,
                    n_classes: n,
                });
            }
        }
        if self.origins.len() != self.images.len() {
            return Err(Error::config("origins and images differ in length"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.labels(), self.n_classes())
    }

    /// Sub-dataset at `indices`; origins are carried over unchanged.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            class_names: self.class_names.clone(),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            seed: self.seed,
        }
    }
}

pub fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// `(x - min) / (max - min)`; constant series map to zeros.
pub fn minmax_normalize(series: &[f64]) -> Vec<f64> {
    let (min, max) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    // NaN input leaves a NaN range
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; series.len()];
    }
    series.iter().map(|&v| (v - min) / range).collect()
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

/// Oversample every class up to the majority count.
///
/// Each synthetic sample is `x + u * (x_nn - x)` with `u ~ U[0, 1]` and
/// `x_nn` drawn from the `k` nearest same-class neighbors of `x`
/// (Euclidean on flattened pixels). Base samples cycle through a seeded
/// permutation of the class. `k` is clamped to `class size - 1`.
pub fn smote_balance(dataset: &ImageDataset, config: &SamplerConfig) -> Result<ImageDataset> {
    if config.k_neighbors < 1 {
        return Err(Error::config("k_neighbors must be at least 1"));
    }
    dataset.validate()?;
    let labels = dataset.labels();
    let counts = class_counts(&labels, dataset.n_classes());
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut out = dataset.clone();
    out.seed = config.seed;
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 || count == target {
            continue;
        }
        if count < 2 {
            return Err(Error::TooFewSamples {
                class: dataset.class_names[class].clone(),
                count,
                required: 2,
            });
        }
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let k = config.k_neighbors.min(count - 1);
        let neighbors: Vec<Vec<usize>> = members
            .par_iter()
            .map(|&i| {
                let mut d: Vec<(f64, usize)> = members
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| (squared_distance(&dataset.images[i].pixels, &dataset.images[j].pixels), j))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect();

        let mut order: Vec<usize> = (0..members.len()).collect();
        order.shuffle(&mut rng);
        for s in 0..target - count {
            let slot = order[s % order.len()];
            let base = members[slot];
            let neighbor = neighbors[slot][rng.random_range(0..k)];
            let gap: f64 = rng.random();
            let a = &dataset.images[base].pixels;
            let b = &dataset.images[neighbor].pixels;
            let pixels = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let v = (x as f64 + gap * (y as f64 - x as f64)) as f32;
                    v.clamp(x.min(y), x.max(y))
                })
                .collect();
            out.images.push(FdlImage {
                side: dataset.images[base].side,
                pixels,
                label: class,
            });
            out.origins.push(Origin::Synthetic { base, neighbor, gap });
        }
    }
    Ok(out)
}

/// Per-class quotas summing to `round(ratio * total)`, largest remainder first.
fn proportional_quotas(counts: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let want = (ratio * total as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| ratio * c as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = want.saturating_sub(quotas.iter().sum());
    for &c in order.iter().cycle().take(counts.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            missing -= 1;
        }
    }
    quotas
}

/// Stratified holdout split returning `(train, test)` index lists, each shuffled.
pub fn stratified_split_indices(labels: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} outside (0, 1)")));
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let counts = class_counts(labels, n_classes);
    let quotas = proportional_quotas(&counts, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..quotas[class]]);
        test.extend_from_slice(&members[quotas[class]..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

pub fn stratified_split(dataset: &ImageDataset, ratio: f64, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
    let (train, test) = stratified_split_indices(&dataset.labels(), ratio, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// `folds` stratified `(train, validation)` index pairs.
///
/// Each class is shuffled and dealt round-robin across folds, continuing
/// from where the previous class stopped so fold sizes stay even.
pub fn stratified_kfold(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::config("folds must be at least 2"));
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let counts = class_counts(labels, n_classes);
    if let Some((class, &count)) = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .min_by_key(|(_, &c)| c)
    {
        if folds > count {
            return Err(Error::TooFewSamples {
                class: class.to_string(),
                count,
                required: folds,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val: Vec<Vec<usize>> = vec![Vec::new(); folds];
    let mut next = 0;
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for idx in members {
            val[next].push(idx);
            next = (next + 1) % folds;
        }
    }
    Ok(val
        .iter()
        .enumerate()
        .map(|(f, v)| {
            let mut v = v.clone();
            v.sort_unstable();
            let train = (0..folds)
                .filter(|&g| g != f)
                .flat_map(|g| val[g].iter().copied())
                .collect::<Vec<_>>();
            let mut train = train;
            train.sort_unstable();
            (train, v)
        })
        .collect())
}

/// One row of the image manifest, `path,label,class_name,source_id[,synthetic]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub class_name: String,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory image paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Self {
            rows,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let with_flag = self.rows.iter().any(|r| r.synthetic.is_some());
        let mut w = csv::Writer::from_path(path)?;
        if with_flag {
            w.write_record(["path", "label", "class_name", "source_id", "synthetic"])?;
        } else {
            w.write_record(["path", "label", "class_name", "source_id"])?;
        }
        for r in &self.rows {
            let label = r.label.to_string();
            let mut rec = vec![r.path.as_str(), label.as_str(), r.class_name.as_str(), r.source_id.as_str()];
            if with_flag {
                rec.push(if r.synthetic.unwrap_or(false) { "true" } else { "false" });
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Class names ordered by label, from the rows.
    pub fn class_names(&self) -> Result<Vec<String>> {
        let n = self.rows.iter().map(|r| r.label + 1).max().unwrap_or(0);
        let mut names: Vec<Option<String>> = vec![None; n];
        for r in &self.rows {
            match &names[r.label] {
                Some(existing) if existing != &r.class_name => {
                    return Err(Error::config(format!(
                        "label {} named both {existing:?} and {:?}",
                        r.label, r.class_name
                    )))
                }
                _ => names[r.label] = Some(r.class_name.clone()),
            }
        }
        Ok(names
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.unwrap_or_else(|| format!("class{i}")))
            .collect())
    }

    pub fn load_images(&self) -> Result<Vec<FdlImage>> {
        self.rows
            .par_iter()
            .map(|r| FdlImage::read_pgm(&self.root.join(&r.path), r.label))
            .collect()
    }

    pub fn load_dataset(&self, seed: u64) -> Result<ImageDataset> {
        let images = self.load_images()?;
        let mut ds = ImageDataset::new(images, self.class_names()?, seed)?;
        let mut n_orig = 0;
        for (o, r) in ds.origins.iter_mut().zip(&self.rows) {
            if r.synthetic == Some(true) {
                // parent indices are not persisted
                *o = Origin::Synthetic {
                    base: usize::MAX,
                    neighbor: usize::MAX,
                    gap: f64::NAN,
                };
            } else {
                *o = Origin::Original(n_orig);
                n_orig += 1;
            }
        }
        Ok(ds)
    }
}
