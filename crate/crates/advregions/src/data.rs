//! MNIST ingestion and image vectors.
//!
//! Images are stored flattened row-major in `[0,1]^784`; the convolutional
//! path reshapes to 1x28x28 internally. The IDX loader decodes the big-endian
//! header fields explicitly and accepts gzip-compressed files transparently.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::bufread::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const N_CLASSES: usize = 10;

/// Which split an image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Identifies an image in its source dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceId {
    pub split: Split,
    pub index: usize,
}

/// A vectorized image in `[0,1]^h` with optional label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVec {
    pub pixels: Vec<f32>,
    pub label: Option<u8>,
    pub source: Option<SourceId>,
}

impl ImageVec {
    pub fn new(pixels: Vec<f32>) -> Self {
        Self {
            pixels,
            label: None,
            source: None,
        }
    }

    pub fn with_label(pixels: Vec<f32>, label: u8) -> Self {
        Self {
            pixels,
            label: Some(label),
            source: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.pixels.len()
    }

    pub fn in_unit_box(&self) -> bool {
        self.pixels.iter().all(|&p| (0.0..=1.0).contains(&p))
    }

    /// Euclidean distance to another image, accumulated in f64.
    pub fn l2_to(&self, other: &ImageVec) -> f64 {
        l2_distance(&self.pixels, &other.pixels)
    }

    /// Number of pixels differing from `other` by more than the float-noise
    /// guard (1e-6).
    pub fn perturbed_count(&self, other: &ImageVec) -> usize {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| (a.to_owned() - b.to_owned()).abs() > PIXEL_EPS)
            .count()
    }
}

/// A pixel counts as perturbed when it moved by more than this.
pub const PIXEL_EPS: f32 = 1e-6;

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// An immutable set of labeled images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageVec>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.images.first().map_or(0, ImageVec::dim)
    }

    /// Order-preserving filter; source ids are retained.
    pub fn select<P: Fn(&ImageVec) -> bool>(&self, predicate: P) -> Dataset {
        Dataset {
            images: self
                .images
                .iter()
                .filter(|img| predicate(img))
                .cloned()
                .collect(),
            split: self.split,
        }
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|ext| ext == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_u32_be(reader: &mut dyn Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_block(reader: &mut dyn Read, needed: usize, path: &Path) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(needed);
    reader
        .take(needed as u64)
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    if data.len() != needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            got: data.len(),
        });
    }
    Ok(data)
}

/// Load an IDX image/label pair. Pixel byte `v` maps to `v as f32 / 255.0`,
/// so 0 -> 0.0 and 255 -> 1.0 exactly.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let mut img_reader = open_maybe_gz(images_path)?;
    let magic = read_u32_be(&mut img_reader, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let n_images = read_u32_be(&mut img_reader, images_path)? as usize;
    let rows = read_u32_be(&mut img_reader, images_path)? as usize;
    let cols = read_u32_be(&mut img_reader, images_path)? as usize;
    let pixels = read_block(&mut img_reader, n_images * rows * cols, images_path)?;

    let mut lbl_reader = open_maybe_gz(labels_path)?;
    let magic = read_u32_be(&mut lbl_reader, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let n_labels = read_u32_be(&mut lbl_reader, labels_path)? as usize;
    if n_labels != n_images {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let labels = read_block(&mut lbl_reader, n_labels, labels_path)?;

    let dim = rows * cols;
    let images = (0..n_images)
        .map(|i| ImageVec {
            pixels: pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&v| v as f32 / 255.0)
                .collect(),
            label: Some(labels[i]),
            source: Some(SourceId { split, index: i }),
        })
        .collect();

    Ok(Dataset { images, split })
}

/// Load the standard four-file MNIST layout from a directory, accepting
/// either raw or `.gz` files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |stem: &str| -> Result<PathBuf> {
        let raw = dir.join(stem);
        if raw.exists() {
            return Ok(raw);
        }
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        Err(Error::MissingArtifact(format!(
            "{} (or .gz) not found in {}",
            stem,
            dir.display()
        )))
    };
    let train = load_idx(
        &find("train-images-idx3-ubyte")?,
        &find("train-labels-idx1-ubyte")?,
        Split::Train,
    )?;
    let test = load_idx(
        &find("t10k-images-idx3-ubyte")?,
        &find("t10k-labels-idx1-ubyte")?,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Write an IDX image/label pair (uncompressed). Pixels are quantized back to
/// bytes with round-to-nearest; used by tests and for exporting sampled
/// images.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    images: &[ImageVec],
    rows: usize,
    cols: usize,
) -> Result<()> {
    use std::io::Write;
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lbl = Vec::with_capacity(8 + images.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(images.len() as u32).to_be_bytes());
    for im in images {
        for &p in &im.pixels {
            img.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        lbl.push(im.label.unwrap_or(0));
    }
    std::fs::File::create(images_path)
        .and_then(|mut f| f.write_all(&img))
        .map_err(|e| Error::io(images_path, e))?;
    std::fs::File::create(labels_path)
        .and_then(|mut f| f.write_all(&lbl))
        .map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn bad_label_magic_is_rejected() {
        let dir = tmpdir();
        let img_path = dir.path().join("img");
        let lbl_path = dir.path().join("lbl");
        write_idx(&img_path, &lbl_path, &[ImageVec::with_label(vec![0.0; 4], 3)], 2, 2).unwrap();
        // Corrupt the label magic.
        let mut bytes = std::fs::read(&lbl_path).unwrap();
        bytes[3] = 0x05;
        std::fs::write(&lbl_path, bytes).unwrap();
        match load_idx(&img_path, &lbl_path, Split::Test) {
            Err(Error::BadMagic { expected, .. }) => assert_eq!(expected, LABEL_MAGIC),
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_pair_round_trips() {
        let dir = tmpdir();
        let img_path = dir.path().join("img");
        let lbl_path = dir.path().join("lbl");
        let images = vec![
            ImageVec::with_label(vec![0.0, 1.0, 100.0 / 255.0, 37.0 / 255.0], 7),
            ImageVec::with_label(vec![5.0 / 255.0, 0.0, 254.0 / 255.0, 1.0], 2),
        ];
        write_idx(&img_path, &lbl_path, &images, 2, 2).unwrap();
        let ds = load_idx(&img_path, &lbl_path, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        for (orig, loaded) in images.iter().zip(&ds.images) {
            assert_eq!(orig.pixels, loaded.pixels);
            assert_eq!(orig.label, loaded.label);
        }
        assert_eq!(
            ds.images[1].source,
            Some(SourceId { split: Split::Train, index: 1 })
        );
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tmpdir();
        let img_path = dir.path().join("img");
        let lbl_path = dir.path().join("lbl");
        write_idx(&img_path, &lbl_path, &[ImageVec::with_label(vec![0.0; 4], 1)], 2, 2).unwrap();
        let lbl2 = dir.path().join("lbl2");
        write_idx(
            &dir.path().join("img2"),
            &lbl2,
            &[
                ImageVec::with_label(vec![0.0; 4], 1),
                ImageVec::with_label(vec![0.0; 4], 2),
            ],
            2,
            2,
        )
        .unwrap();
        match load_idx(&img_path, &lbl2, Split::Test) {
            Err(Error::CountMismatch { images, labels }) => {
                assert_eq!((images, labels), (1, 2));
            }
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tmpdir();
        let img_path = dir.path().join("img");
        let lbl_path = dir.path().join("lbl");
        write_idx(&img_path, &lbl_path, &[ImageVec::with_label(vec![0.5; 4], 1)], 2, 2).unwrap();
        let bytes = std::fs::read(&img_path).unwrap();
        std::fs::write(&img_path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_idx(&img_path, &lbl_path, Split::Test),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn select_preserves_order_and_sources() {
        let images = (0..6)
            .map(|i| {
                let mut im = ImageVec::with_label(vec![i as f32 / 10.0], (i % 3) as u8);
                im.source = Some(SourceId { split: Split::Test, index: i });
                im
            })
            .collect();
        let ds = Dataset { images, split: Split::Test };
        let all = ds.select(|_| true);
        assert_eq!(all.len(), ds.len());
        let ones = ds.select(|im| im.label == Some(1));
        assert!(ones.images.iter().all(|im| im.label == Some(1)));
        assert_eq!(
            ones.images.iter().map(|im| im.source.unwrap().index).collect::<Vec<_>>(),
            vec![1, 4]
        );
    }

    #[test]
    fn gzip_files_load_transparently() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tmpdir();
        let img_path = dir.path().join("img");
        let lbl_path = dir.path().join("lbl");
        write_idx(&img_path, &lbl_path, &[ImageVec::with_label(vec![1.0; 4], 9)], 2, 2).unwrap();
        for p in [&img_path, &lbl_path] {
            let raw = std::fs::read(p).unwrap();
            let gz_path = p.with_extension("gz");
            let mut enc = GzEncoder::new(std::fs::File::create(&gz_path).unwrap(), Default::default());
            enc.write_all(&raw).unwrap();
            enc.finish().unwrap();
        }
        let ds = load_idx(&img_path.with_extension("gz"), &lbl_path.with_extension("gz"), Split::Test).unwrap();
        assert_eq!(ds.images[0].pixels, vec![1.0; 4]);
        assert_eq!(ds.images[0].label, Some(9));
    }
}
