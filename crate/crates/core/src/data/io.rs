//! Dataset directories.
//!
//! ```text
//! DIR/dataset.json         generation config
//! DIR/index.jsonl          one IndexEntry per line
//! DIR/images/NNNNN.ppm     8-bit RGB
//! DIR/masks/NNNNN.pgm      8-bit labels (0 background, k+1 for class k)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::ExtendedColorType;
use serde::{Deserialize, Serialize};

use super::{Dataset, SynthConfig, SyntheticSample, CHANNELS};
use crate::error::{AcrError, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.jsonl";
pub const DATASET_META_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub image: String,
    pub mask: String,
    /// Zero-based present classes.
    pub labels: Vec<usize>,
    pub seed: u64,
}

fn image_err(e: image::ImageError) -> AcrError {
    AcrError::Format(format!("image codec: {e}"))
}

fn to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes `[3, H, W]` values in `[0, 1]` as binary PPM.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != CHANNELS {
        return Err(AcrError::Dimension(format!("cannot write {s:?} as RGB")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let interleaved = (0..h * w).flat_map(|p| (0..CHANNELS).map(move |c| d[c * h * w + p]));
    let bytes = to_bytes(interleaved);
    encode(path, &bytes, h, w, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

fn encode(
    path: &Path,
    bytes: &[u8],
    height: usize,
    width: usize,
    subtype: PnmSubtype,
    color: ExtendedColorType,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(&mut w)
        .with_subtype(subtype)
        .encode(bytes, width as u32, height as u32, color)
        .map_err(image_err)?;
    w.flush()?;
    Ok(())
}

/// Writes raw 8-bit gray values as binary PGM.
pub fn write_pgm(bytes: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    encode(path, bytes, height, width, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(image_err)?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; CHANNELS * h * w];
    for p in 0..h * w {
        for c in 0..CHANNELS {
            data[c * h * w + p] = raw[p * CHANNELS + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![CHANNELS, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(image_err)?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let meta = serde_json::to_string_pretty(&dataset.config)
        .map_err(|e| AcrError::Format(e.to_string()))?;
    fs::write(dir.join(DATASET_META_FILE), meta + "\n")?;
    let mut index = BufWriter::new(fs::File::create(dir.join(INDEX_FILE))?);
    for (id, s) in dataset.samples.iter().enumerate() {
        let entry = IndexEntry {
            id,
            image: format!("images/{id:05}.ppm"),
            mask: format!("masks/{id:05}.pgm"),
            labels: s.present_classes(),
            seed: s.seed,
        };
        write_ppm(&s.image, &dir.join(&entry.image))?;
        write_pgm(s.mask.labels(), s.mask.height(), s.mask.width(), &dir.join(&entry.mask))?;
        let line = serde_json::to_string(&entry).map_err(|e| AcrError::Format(e.to_string()))?;
        writeln!(index, "{line}")?;
    }
    index.flush()?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let file = fs::File::open(dir.join(INDEX_FILE))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            AcrError::Format(format!("{INDEX_FILE} line {}: {e}", n + 1))
        })?);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = fs::read_to_string(dir.join(DATASET_META_FILE))?;
    let mut config: SynthConfig =
        serde_json::from_str(&meta).map_err(|e| AcrError::Format(format!("{DATASET_META_FILE}: {e}")))?;
    let entries = read_index(dir)?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let image = read_ppm(&dir.join(&e.image))?;
        let (raw, h, w) = read_pgm(&dir.join(&e.mask))?;
        if h != image.shape()[1] || w != image.shape()[2] {
            return Err(AcrError::Format(format!("mask of sample {} does not match its image", e.id)));
        }
        let mask = LabelMask::new(h, w, raw)?;
        let mut labels = vec![0.0; config.num_classes];
        for &k in &e.labels {
            if k >= config.num_classes {
                return Err(AcrError::Format(format!("sample {} has label {k} out of range", e.id)));
            }
            labels[k] = 1.0;
        }
        let from_mask: Vec<usize> = mask.present_classes().iter().map(|&l| l as usize - 1).collect();
        if from_mask != e.labels {
            return Err(AcrError::Format(format!(
                "sample {}: labels {:?} disagree with mask classes {from_mask:?}",
                e.id, e.labels
            )));
        }
        samples.push(SyntheticSample {
            image,
            labels,
            mask,
            seed: e.seed,
        });
    }
    config.num_samples = samples.len();
    Ok(Dataset { config, samples })
}
