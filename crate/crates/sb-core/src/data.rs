//! Dataset container, deterministic batching, the IDX image/label codec,
//! and a synthetic digit corpus for runs without a real data directory.
//!
//! IDX layout (big-endian u32 header words, then raw u8 payload):
//! images use magic 0x00000803 followed by three dimensions (count, height,
//! width); labels use magic 0x00000801 followed by one dimension. Parsers
//! verify the byte count exactly and report the offset a problem was
//! detected at. Pixel parsing returns the raw 0..255 values; mapping into
//! [0, 1] is a separate step so the codec round-trips bytes unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, IdxError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// (n, 1, h, w), values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Dataset> {
        if images.ndim() < 2 {
            return Err(Error::Shape {
                op: "dataset images",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len(), 0],
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Constraint(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flat element count of one example (all dims past the first).
    pub fn example_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Copies the selected examples into a batch tensor, keeping the order
    /// of `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let stride = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Lookup(format!(
                    "example {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }
}

/// Splits 0..n into consecutive batches of `batch_size` (last one may be
/// short). With an rng the order is a uniform shuffle first; without, the
/// natural order, which evaluation relies on for reproducibility.
pub fn batch_indices(n: usize, batch_size: usize, rng: Option<&mut Rng>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        r.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

fn read_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => Err(IdxError::Truncated {
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
            what,
        }
        .into()),
    }
}

/// Raw pixel values as an (n, h, w) tensor, each in 0..=255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    const HEADER: &str = "image header (magic word and 3 dimensions)";
    let magic = read_u32(bytes, 0, HEADER)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic { offset: 0, found: magic }.into());
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = read_u32(bytes, 4 + 4 * i, HEADER)? as usize;
        if *d == 0 {
            return Err(IdxError::ZeroDimension { offset: 4 + 4 * i, index: i }.into());
        }
    }
    let [n, h, w] = dims;
    let needed = n * h * w;
    let available = bytes.len() - 16;
    if available < needed {
        return Err(IdxError::Truncated { offset: 16, needed, available, what: "image pixels" }.into());
    }
    if available > needed {
        return Err(IdxError::TrailingBytes { offset: 16 + needed, extra: available - needed }.into());
    }
    Tensor::from_vec(&[n, h, w], bytes[16..].iter().map(|&b| b as f64).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    const HEADER: &str = "label header (magic word and 1 dimension)";
    let magic = read_u32(bytes, 0, HEADER)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic { offset: 0, found: magic }.into());
    }
    let n = read_u32(bytes, 4, HEADER)? as usize;
    if n == 0 {
        return Err(IdxError::ZeroDimension { offset: 4, index: 0 }.into());
    }
    let available = bytes.len() - 8;
    if available < n {
        return Err(IdxError::Truncated { offset: 8, needed: n, available, what: "label bytes" }.into());
    }
    if available > n {
        return Err(IdxError::TrailingBytes { offset: 8 + n, extra: available - n }.into());
    }
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != n * h * w {
        return Err(Error::Constraint(format!(
            "{} pixels for dimensions {n}x{h}x{w}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Maps raw 0..255 pixel values into [0, 1].
pub fn normalize(raw: &Tensor) -> Tensor {
    raw.map(|v| v / 255.0)
}

/// Loads `<root>/{train,test}-{images,labels}.idx` into normalized
/// (n, 1, h, w) datasets.
pub fn load_dataset(root: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_split(root, "train")?, load_split(root, "test")?))
}

fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    let read = |name: String| -> Result<Vec<u8>> {
        let path = root.join(&name);
        std::fs::read(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    };
    let raw = parse_idx_images(&read(format!("{split}-images.idx"))?)?;
    let labels = parse_idx_labels(&read(format!("{split}-labels.idx"))?)?;
    let (n, h, w) = {
        let s = raw.shape();
        (s[0], s[1], s[2])
    };
    if labels.len() != n {
        return Err(Error::Constraint(format!(
            "{split} split has {n} images but {} labels",
            labels.len()
        )));
    }
    let images = normalize(&raw).reshaped(&[n, 1, h, w])?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect())
}

/// Keeps a class-balanced fraction of the dataset: per class,
/// round(count·fraction) examples chosen uniformly without replacement.
/// The surviving indices are emitted in ascending order so the result does
/// not depend on class iteration order. A class whose rounded share is zero
/// is an error rather than a silent omission.
pub fn stratified_subsample(ds: &Dataset, fraction: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut selected = Vec::new();
    for (&class, members) in &by_class {
        let take = (members.len() as f64 * fraction).round() as usize;
        if take == 0 {
            return Err(Error::EmptyClass { class });
        }
        let mut pool = members.clone();
        rng.shuffle(&mut pool);
        selected.extend_from_slice(&pool[..take]);
    }
    selected.sort_unstable();
    let (images, labels) = ds.gather(&selected)?;
    Dataset::new(images, labels)
}

/// 7x5 digit stencils, '#' marks an inked cell.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "...#.", "..#..", "..#..", "..#.."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
];

const GLYPH_H: usize = 7;
const GLYPH_W: usize = 5;
const SCALE: usize = 3;
const SIDE: usize = 28;

/// A deterministic stand-in corpus of 28x28 digit images, labels cycling
/// 0..=9. Each example renders its stencil at 3x scale with integer jitter,
/// a random stroke intensity, heavy inked-pixel dropout, and strong
/// background noise; classes stay separable but a small fully-connected
/// network no longer saturates, so train/test gaps are measurable. The
/// stream is forked per (seed, split, example): the same triple always
/// produces the same image, and train/test splits never overlap.
pub fn synthetic_digits(n: usize, seed: u64, split: &str) -> Dataset {
    let root = Rng::new(seed).fork(split);
    let mut data = vec![0.0; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut ex = root.fork(&format!("{i}"));
        let label = i % 10;
        labels.push(label);
        let img = &mut data[i * SIDE * SIDE..(i + 1) * SIDE * SIDE];

        let top = (SIDE - GLYPH_H * SCALE) / 2 + ex.index(7) - 3;
        let left = (SIDE - GLYPH_W * SCALE) / 2 + ex.index(7) - 3;
        let base = 0.35 + 0.65 * ex.next_f64();

        for (gy, row) in GLYPHS[label].iter().enumerate() {
            for (gx, cell) in row.bytes().enumerate() {
                if cell != b'#' {
                    continue;
                }
                for sy in 0..SCALE {
                    for sx in 0..SCALE {
                        if ex.next_f64() < 0.30 {
                            continue;
                        }
                        let y = top + gy * SCALE + sy;
                        let x = left + gx * SCALE + sx;
                        img[y * SIDE + x] = base * (0.6 + 0.4 * ex.next_f64());
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v + 0.30 * ex.next_f64()).clamp(0.0, 1.0);
        }
    }
    let images = Tensor::from_vec(&[n, 1, SIDE, SIDE], data).unwrap();
    Dataset { images, labels }
}
