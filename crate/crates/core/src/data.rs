//! MNIST-style IDX ingestion and the dataset variants used in the
//! experiments: plain, pixel-permuted, rotated and flipped.

use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxErrorKind, Result};
use crate::fsutil::atomic_write_bytes;
use crate::symmetry::{Permutation, SymmetryGroup};
use crate::tensor::{Matrix, RngState};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

// Stream ids keep the draws of different constructors independent even when
// they share a seed.
const STREAM_PERMUTE: u64 = 1;
const STREAM_TRAIN_PER_CLASS: u64 = 2;
const STREAM_TRAIN_PER_IMAGE: u64 = 3;
const STREAM_TEST_RANDOM: u64 = 4;
const STREAM_SPLIT: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Permuted,
    Rotated,
    Flipped,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Permuted => "permuted",
            Variant::Rotated => "rotated",
            Variant::Flipped => "flipped",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "permuted" => Ok(Variant::Permuted),
            "rotated" => Ok(Variant::Rotated),
            "flipped" => Ok(Variant::Flipped),
            other => Err(Error::Config(format!(
                "unknown variant '{other}', expected plain, permuted, rotated or flipped"
            ))),
        }
    }
}

/// Images flattened row-major into `count x n²`, pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Matrix,
    labels: Vec<usize>,
    side: usize,
    class_count: usize,
    variant: Variant,
    transform_seed: Option<u64>,
    /// Original label of each (possibly remapped) class id.
    source_classes: Vec<usize>,
    /// Index of the group element applied to each image, when augmented.
    applied: Option<Vec<usize>>,
}

impl ImageDataset {
    pub fn new(images: Matrix, labels: Vec<usize>, side: usize, class_count: usize) -> Result<Self> {
        if images.cols() != side * side {
            return Err(Error::Data(format!(
                "image width {} is not {side}x{side}",
                images.cols()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} out of range for {class_count} classes")));
        }
        if images.as_slice().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            side,
            class_count,
            variant: Variant::Plain,
            transform_seed: None,
            source_classes: (0..class_count).collect(),
            applied: None,
        })
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn transform_seed(&self) -> Option<u64> {
        self.transform_seed
    }

    pub fn source_classes(&self) -> &[usize] {
        &self.source_classes
    }

    pub fn applied_transforms(&self) -> Option<&[usize]> {
        self.applied.as_deref()
    }

    /// Rows `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            applied: self.applied.as_ref().map(|a| indices.iter().map(|&i| a[i]).collect()),
            ..self.clone_meta()
        }
    }

    pub fn take_first(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Per-class image counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Matrix::zeros(0, self.images.cols()),
            labels: Vec::new(),
            side: self.side,
            class_count: self.class_count,
            variant: self.variant,
            transform_seed: self.transform_seed,
            source_classes: self.source_classes.clone(),
            applied: None,
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        flate2::read::GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        std::io::BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

struct IdxCursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxCursor<'a> {
    fn err(&self, offset: usize, kind: IdxErrorKind) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            kind,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(self.err(
                self.bytes.len(),
                IdxErrorKind::Truncated {
                    needed: (n - available) as u64,
                },
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(self.err(0, IdxErrorKind::BadMagic { found, expected }));
        }
        Ok(())
    }
}

/// Raw IDX image file: `(count, rows, cols, pixel bytes)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_all(path)?;
    let mut cur = IdxCursor { path, bytes: &bytes, pos: 0 };
    cur.magic(IDX_IMAGES_MAGIC)?;
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let len = count.checked_mul(rows).and_then(|v| v.checked_mul(cols)).unwrap_or(usize::MAX);
    let pixels = cur.take(len)?.to_vec();
    Ok((count, rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_all(path)?;
    let mut cur = IdxCursor { path, bytes: &bytes, pos: 0 };
    cur.magic(IDX_LABELS_MAGIC)?;
    let count = cur.u32()? as usize;
    Ok(cur.take(count)?.to_vec())
}

/// Loads an image/label IDX pair; pixels are scaled by 1/255. Files ending in
/// `.gz` are decompressed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let (count, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            offset: 4,
            kind: IdxErrorKind::CountMismatch {
                images: count,
                labels: labels.len(),
            },
        });
    }
    if rows != cols {
        return Err(Error::Data(format!(
            "{}: images are {rows}x{cols}, only square grids are supported",
            images_path.display()
        )));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Matrix::from_vec(count, rows * cols, data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    ImageDataset::new(images, labels, rows, class_count)
}

fn pixel_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_idx_images(ds: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.len() * ds.dim());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend_from_slice(&(ds.side as u32).to_be_bytes());
    out.extend_from_slice(&(ds.side as u32).to_be_bytes());
    out.extend(ds.images.as_slice().iter().map(|&v| pixel_byte(v)));
    out
}

pub fn encode_idx_labels(ds: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend(ds.labels.iter().map(|&l| l as u8));
    out
}

/// Writes the dataset as an uncompressed IDX pair (pixels rounded to bytes).
pub fn write_idx(ds: &ImageDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.class_count > 256 {
        return Err(Error::Data("IDX labels are single bytes".into()));
    }
    atomic_write_bytes(images_path, &encode_idx_images(ds))?;
    atomic_write_bytes(labels_path, &encode_idx_labels(ds))
}

/// Applies one permutation to every image.
pub fn apply_permutation(ds: &ImageDataset, perm: &Permutation) -> Result<ImageDataset> {
    if perm.dim() != ds.dim() {
        return Err(Error::Precondition(format!(
            "permutation of size {} for images of size {}",
            perm.dim(),
            ds.dim()
        )));
    }
    let mut images = ds.images.clone();
    for i in 0..ds.len() {
        perm.apply_into(ds.images.row(i), images.row_mut(i));
    }
    Ok(ImageDataset {
        images,
        labels: ds.labels.clone(),
        applied: ds.applied.clone(),
        ..ds.clone_meta()
    })
}

/// The seeded pixel shuffle used by [`permuted_variant`].
pub fn pixel_permutation(dim: usize, seed: u64) -> Permutation {
    let map = RngState::with_stream(seed, STREAM_PERMUTE).permutation(dim);
    Permutation::new(map).expect("Fisher-Yates output is a bijection")
}

/// Every image shuffled by the same seeded pixel permutation, so the same
/// seed must be used for the train and test files.
pub fn permuted_variant(ds: &ImageDataset, seed: u64) -> Result<ImageDataset> {
    let mut out = apply_permutation(ds, &pixel_permutation(ds.dim(), seed))?;
    out.variant = Variant::Permuted;
    out.transform_seed = Some(seed);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// One seeded group element per class, shared by all of its images.
    TrainFixed,
    /// One seeded group element per training image.
    TrainPerImage,
    /// An independent uniform element for every test image.
    TestRandom,
}

/// Transforms the images of `ds` by elements of `group` according to `mode`.
pub fn augmented_variant(ds: &ImageDataset, group: &SymmetryGroup, mode: AugmentMode, seed: u64) -> Result<ImageDataset> {
    if group.dim() != ds.dim() {
        return Err(Error::Precondition(format!(
            "group '{}' acts on {} pixels, images have {}",
            group.name(),
            group.dim(),
            ds.dim()
        )));
    }
    let order = group.order();
    let choice: Vec<usize> = match mode {
        AugmentMode::TrainFixed => {
            let mut rng = RngState::with_stream(seed, STREAM_TRAIN_PER_CLASS);
            let per_class: Vec<usize> = (0..ds.class_count).map(|_| rng.below(order)).collect();
            ds.labels.iter().map(|&l| per_class[l]).collect()
        }
        AugmentMode::TrainPerImage | AugmentMode::TestRandom => {
            let stream = if mode == AugmentMode::TestRandom {
                STREAM_TEST_RANDOM
            } else {
                STREAM_TRAIN_PER_IMAGE
            };
            let mut rng = RngState::with_stream(seed, stream);
            (0..ds.len()).map(|_| rng.below(order)).collect()
        }
    };
    let mut images = ds.images.clone();
    for (i, &c) in choice.iter().enumerate() {
        group.elements()[c].apply_into(ds.images.row(i), images.row_mut(i));
    }
    let variant = match group.name() {
        "rot90" => Variant::Rotated,
        "flip" => Variant::Flipped,
        _ => ds.variant,
    };
    Ok(ImageDataset {
        images,
        labels: ds.labels.clone(),
        variant,
        transform_seed: Some(seed),
        applied: Some(choice),
        ..ds.clone_meta()
    })
}

/// Removes the given classes and renumbers the rest contiguously in
/// ascending order of their current ids.
pub fn drop_classes(ds: &ImageDataset, classes: &[usize]) -> Result<ImageDataset> {
    if let Some(&bad) = classes.iter().find(|&&c| c >= ds.class_count) {
        return Err(Error::Data(format!("class {bad} out of range for {} classes", ds.class_count)));
    }
    let mut remap = vec![None; ds.class_count];
    let mut source_classes = Vec::new();
    for (c, slot) in remap.iter_mut().enumerate() {
        if !classes.contains(&c) {
            *slot = Some(source_classes.len());
            source_classes.push(ds.source_classes[c]);
        }
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| remap[ds.labels[i]].is_some()).collect();
    let mut out = ds.subset(&keep);
    for l in &mut out.labels {
        *l = remap[*l].expect("kept labels have a new id");
    }
    out.class_count = source_classes.len();
    out.source_classes = source_classes;
    Ok(out)
}

/// Train/validation partition of `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
}

/// Seeded shuffle, then the first `round(len * val_fraction)` indices go to
/// validation.
pub fn split(ds: &ImageDataset, val_fraction: f64, seed: u64) -> Result<SplitSpec> {
    split_indices(ds.len(), val_fraction, seed)
}

pub fn split_indices(len: usize, val_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Domain(format!("validation fraction {val_fraction} not in (0, 1)")));
    }
    let n_val = (len as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= len {
        return Err(Error::Domain(format!(
            "splitting {len} items at fraction {val_fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    RngState::with_stream(seed, STREAM_SPLIT).shuffle(&mut idx);
    let train = idx.split_off(n_val);
    Ok(SplitSpec { train, val: idx, seed })
}
