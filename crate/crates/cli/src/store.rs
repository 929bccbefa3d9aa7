//! On-disk formats: the dataset directory (JSON Lines manifest, sidecar
//! metadata, 8-bit PGM images), JSON artifacts and the experiment log.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use hipline::config::SCHEMA_VERSION;
use hipline::phantom::{Case, Dataset, NoiseReport, PhantomSpec};
use hipline::raster::Image;
use hipline::workflow::SplitSummary;
use hipline::{Error, Result};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.jsonl";
pub const META: &str = "dataset.json";
pub const IMAGE_DIR: &str = "images";

/// Sidecar written next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub config_hash: String,
    pub spec: PhantomSpec,
    /// Identity of the images, independent of the current labels.
    pub content_hash: String,
    pub manifest_hash: String,
    pub splits: Vec<SplitSummary>,
    pub noise: Option<NoiseReport>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| io_err(path, e))
}

pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            &img.to_u8(),
            img.width as u32,
            img.height as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| Error::data(format!("pgm encoding: {e}")))?;
    Ok(out)
}

pub fn decode_gray(bytes: &[u8]) -> Result<Image> {
    let g = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::data(e.to_string()))?
        .decode()
        .map_err(|e| Error::data(format!("image decoding: {e}")))?
        .into_luma8();
    Image::from_u8(g.width() as usize, g.height() as usize, g.as_raw())
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let g = GrayImage::from_raw(img.width as u32, img.height as u32, img.to_u8())
        .ok_or_else(|| Error::shape("image buffer does not match its size"))?;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(g.as_raw(), g.width(), g.height(), ExtendedColorType::L8)
        .map_err(|e| Error::data(format!("png encoding: {e}")))?;
    Ok(out)
}

pub fn manifest_text(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    for c in &ds.cases {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}

/// Assign relative image paths to every hip.
pub fn assign_image_paths(ds: &mut Dataset) {
    for c in &mut ds.cases {
        for h in &mut c.hips {
            h.image_path = Some(format!("{IMAGE_DIR}/{}.pgm", h.image_id));
        }
    }
}

pub fn dataset_meta(ds: &Dataset, config_hash: &str, noise: Option<NoiseReport>) -> DatasetMeta {
    DatasetMeta {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        spec: ds.spec.clone(),
        content_hash: ds.content_hash(),
        manifest_hash: ds.manifest_hash(),
        splits: hipline::workflow::summarize(ds),
        noise,
    }
}

/// Write images, manifest and sidecar.
pub fn write_dataset(dir: &Path, ds: &mut Dataset, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| io_err(dir, e))?;
    assign_image_paths(ds);
    for (c, imgs) in ds.cases.iter().zip(&ds.images) {
        for (h, img) in c.hips.iter().zip(imgs) {
            let rel = h.image_path.as_deref().expect("paths assigned");
            write_atomic(&dir.join(rel), &encode_pgm(img)?)?;
        }
    }
    write_labels(dir, ds, meta)
}

/// Rewrite manifest and sidecar after a relabelling.
pub fn write_labels(dir: &Path, ds: &Dataset, meta: &DatasetMeta) -> Result<()> {
    write_atomic(&dir.join(MANIFEST), manifest_text(ds)?.as_bytes())?;
    let meta = DatasetMeta {
        manifest_hash: ds.manifest_hash(),
        splits: hipline::workflow::summarize(ds),
        ..meta.clone()
    };
    write_json(&dir.join(META), &meta)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<Case>> {
    let path = dir.join(MANIFEST);
    let f =
        fs::File::open(&path).map_err(|e| io_err(&path, format!("{e} (run `generate` first?)")))?;
    let mut cases = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let case: Case = serde_json::from_str(&line)
            .map_err(|e| io_err(&path, format!("line {}: {e}", i + 1)))?;
        cases.push(case);
    }
    Ok(cases)
}

pub fn read_image(dir: &Path, rel: &str) -> Result<Image> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    decode_gray(&bytes).map_err(|e| io_err(&path, e))
}

/// Load a dataset directory, checking the manifest against its sidecar.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = read_json(&dir.join(META))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::data(format!(
            "dataset schema version {} is not {SCHEMA_VERSION}",
            meta.schema_version
        )));
    }
    let cases = read_manifest(dir)?;
    let mut images = Vec::with_capacity(cases.len());
    for c in &cases {
        let load = |i: usize| {
            let rel = c.hips[i]
                .image_path
                .as_deref()
                .ok_or_else(|| Error::data(format!("{} has no image path", c.hips[i].image_id)))?;
            read_image(dir, rel)
        };
        images.push([load(0)?, load(1)?]);
    }
    let ds = Dataset {
        spec: meta.spec.clone(),
        cases,
        images,
    };
    if ds.content_hash() != meta.content_hash {
        return Err(Error::data(format!(
            "{} does not match {}: the dataset directory is inconsistent",
            MANIFEST, META
        )));
    }
    Ok((ds, meta))
}

/// Standard locations under the output directory.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    pub fn training_log(&self, stage: &str) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{stage}.training.json"))
    }

    pub fn gate_tuning(&self) -> PathBuf {
        self.root.join("checkpoints").join("metal.threshold.json")
    }

    pub fn experiments(&self) -> PathBuf {
        self.root.join("experiments.jsonl")
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn eval_dir(&self, split: &str, protocol: &str) -> PathBuf {
        self.root.join("eval").join(format!("{split}-{protocol}"))
    }

    pub fn run_dir(&self, split: &str) -> PathBuf {
        self.root.join("runs").join(split)
    }

    pub fn loop_state(&self) -> PathBuf {
        self.root.join("loop").join("state.json")
    }

    pub fn loop_report(&self) -> PathBuf {
        self.root.join("loop").join("report.json")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.json")
    }

    pub fn grid(&self, stage: &str) -> PathBuf {
        self.root.join("grid").join(format!("{stage}.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_for_quantised_images() {
        let data: Vec<f32> = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        let img = Image::new(4, 3, data).unwrap();
        let back = decode_gray(&encode_pgm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let png = encode_png(&img).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        assert_eq!(decode_gray(&png).unwrap(), img);
    }
}
