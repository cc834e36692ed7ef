//! Dataset layout:
//!   <dir>/manifest.json
//!   <dir>/<id>/image.png   8-bit RGB
//!   <dir>/<id>/depth.f32   raw little-endian f32, row-major H*W
//!   <dir>/<id>/ann.json    boxes, RLE masks, camera

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rle::{self, RleMask};
use super::{hex_string, Box3D, CameraModel, Instance, SceneConfig, SceneSample};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: SceneConfig,
    pub count: usize,
    pub sample_ids: Vec<String>,
    /// sha256 over image.png || depth.f32 || ann.json per sample.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Annotations {
    /// [x, y, z, l, w, h, yaw, class_id] per box.
    boxes: Vec<[f64; 8]>,
    masks: Vec<AnnMask>,
    camera: CameraModel,
}

#[derive(Serialize, Deserialize)]
struct AnnMask {
    class_id: usize,
    #[serde(flatten)]
    rle: RleMask,
}

fn encode_sample(s: &SceneSample) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    let (w, h) = (s.width(), s.height());
    let mut rgb = Vec::with_capacity(w * h * 3);
    for &v in &s.image {
        rgb.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut png = Vec::new();
    image::write_buffer_with_format(
        &mut std::io::Cursor::new(&mut png),
        &rgb,
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )?;

    let mut depth_bytes = Vec::with_capacity(s.depth.len() * 4);
    for &d in &s.depth {
        depth_bytes.extend_from_slice(&d.to_le_bytes());
    }

    let ann = Annotations {
        boxes: s
            .boxes
            .iter()
            .map(|b| {
                [
                    b.center[0],
                    b.center[1],
                    b.center[2],
                    b.size[0],
                    b.size[1],
                    b.size[2],
                    b.yaw,
                    b.class_id as f64,
                ]
            })
            .collect(),
        masks: s
            .instances
            .iter()
            .map(|inst| AnnMask { class_id: inst.class_id, rle: rle::encode(&inst.mask) })
            .collect(),
        camera: s.camera,
    };
    let ann_bytes = serde_json::to_vec(&ann)?;
    Ok((png, depth_bytes, ann_bytes))
}

fn checksum(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    hex_string(&hasher.finalize())
}

/// Persist samples to `dir` and return the manifest. The generating config
/// is recorded so loads can re-validate invariants against it.
pub fn write_dataset(
    samples: &[SceneSample],
    dir: &Path,
    config: &SceneConfig,
) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(Error::validation("empty dataset"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in samples {
        if !seen.insert(s.sample_id.clone()) {
            return Err(Error::validation(format!("duplicate sample_id {}", s.sample_id)));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checksums = BTreeMap::new();
    for s in samples {
        let sub = dir.join(&s.sample_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let (png, depth, ann) = encode_sample(s)?;
        fs::write(sub.join("image.png"), &png).map_err(|e| Error::io(sub.join("image.png"), e))?;
        fs::write(sub.join("depth.f32"), &depth)
            .map_err(|e| Error::io(sub.join("depth.f32"), e))?;
        fs::write(sub.join("ann.json"), &ann).map_err(|e| Error::io(sub.join("ann.json"), e))?;
        checksums.insert(s.sample_id.clone(), checksum(&[&png, &depth, &ann]));
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config_hash: config.hash(),
        config: config.clone(),
        count: samples.len(),
        sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
        checksums,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), bytes)
        .map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    Ok(manifest)
}

/// Load all samples in manifest order, re-validating every invariant.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.count);
    for id in &manifest.sample_ids {
        out.push(read_sample(dir, id, &manifest)?);
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|_| Error::NotADataset(dir.to_path_buf()))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|_| Error::NotADataset(dir.to_path_buf()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::NotADataset(dir.to_path_buf()));
    }
    Ok(manifest)
}

fn read_sample(dir: &Path, id: &str, manifest: &DatasetManifest) -> Result<SceneSample> {
    let sub = dir.join(id);
    let corrupt = |detail: &str| Error::CorruptSample(format!("{id}: {detail}"));
    let png = fs::read(sub.join("image.png")).map_err(|_| corrupt("missing image.png"))?;
    let depth_bytes = fs::read(sub.join("depth.f32")).map_err(|_| corrupt("missing depth.f32"))?;
    let ann_bytes = fs::read(sub.join("ann.json")).map_err(|_| corrupt("missing ann.json"))?;

    if let Some(expect) = manifest.checksums.get(id) {
        let got = checksum(&[&png, &depth_bytes, &ann_bytes]);
        if &got != expect {
            return Err(corrupt("checksum mismatch"));
        }
    }

    let ann: Annotations =
        serde_json::from_slice(&ann_bytes).map_err(|_| corrupt("bad ann.json"))?;
    let (w, h) = (ann.camera.width, ann.camera.height);
    let img = image::load_from_memory_with_format(&png, image::ImageFormat::Png)
        .map_err(|_| corrupt("bad image.png"))?
        .to_rgb8();
    if img.width() as usize != w || img.height() as usize != h {
        return Err(corrupt("image shape mismatch"));
    }
    let image: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();

    if depth_bytes.len() != w * h * 4 {
        return Err(corrupt("depth shape mismatch"));
    }
    let depth: Vec<f32> = depth_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let boxes: Vec<Box3D> = ann
        .boxes
        .iter()
        .map(|a| Box3D {
            center: [a[0], a[1], a[2]],
            size: [a[3], a[4], a[5]],
            yaw: a[6],
            class_id: a[7] as usize,
        })
        .collect();
    let mut instances = Vec::with_capacity(ann.masks.len());
    for m in &ann.masks {
        let mask = rle::decode(&m.rle).map_err(|_| corrupt("bad mask rle"))?;
        if mask.width != w || mask.height != h {
            return Err(corrupt("mask shape mismatch"));
        }
        instances.push(Instance { class_id: m.class_id, mask });
    }

    let sample = SceneSample {
        sample_id: id.to_string(),
        image,
        depth,
        instances,
        boxes,
        camera: ann.camera,
    };
    sample
        .validate(manifest.config.d_max)
        .map_err(|e| corrupt(&format!("invariants violated: {e}")))?;
    Ok(sample)
}
