//! PNG and JSON codecs for the dataset layout, all writes atomic.
//!
//! Files are written to a `.partial` sibling and renamed into place, so a
//! crash never leaves a truncated file under the final name.

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder};
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{
    CameraIntrinsics, DepthMap, Domain, DomainSample, InstanceAnnotation, LoadOptions,
    LoadStats, LoadedDomain, SemanticMap,
};
use crate::{Error, Result};

/// Meters-to-integer scale of the 16-bit depth encoding.
pub const DEPTH_SCALE: f64 = 256.0;

/// One entry of an `instances/<id>.json` file; `mask_file` is relative to
/// the domain directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u32,
    pub class_id: u8,
    pub class_name: String,
    pub bbox: [u32; 4],
    pub mask_file: String,
    pub score: f32,
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes `bytes` to `path` via a temp sibling plus rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes `value` as pretty JSON to `path`, atomically.
pub fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Parses JSON from `path`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn encode_png(path: &Path, bytes: &[u8], w: u32, h: u32, color: ExtendedColorType) -> Result<()> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(bytes, w, h, color)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    atomic_write(path, &out)
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes depth as 16-bit grayscale, meters * 256 rounded, invalid = 0.
pub fn save_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.dim();
    let mut bytes = Vec::with_capacity(h * w * 2);
    for (&v, &ok) in depth.values.iter().zip(depth.valid_mask.iter()) {
        let enc = if ok {
            ((v as f64 * DEPTH_SCALE).round() as u64).clamp(1, u16::MAX as u64) as u16
        } else {
            0
        };
        // The encoder takes 16-bit samples in native byte order.
        bytes.extend_from_slice(&enc.to_ne_bytes());
    }
    encode_png(path, &bytes, w as u32, h as u32, ExtendedColorType::L16)
}

/// Reads a 16-bit grayscale depth PNG; 0 decodes to invalid.
pub fn load_depth_png(path: &Path) -> Result<DepthMap> {
    match open_image(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            let values = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32).0[0] as f32 / DEPTH_SCALE as f32
            });
            Ok(DepthMap::from_values_zero_invalid(values))
        }
        _ => Err(Error::Image {
            path: path.to_path_buf(),
            message: "expected 16-bit grayscale depth".into(),
        }),
    }
}

/// Writes semantic class ids as 8-bit grayscale, 255 = void.
pub fn save_semantic_png(path: &Path, sem: &SemanticMap) -> Result<()> {
    let (h, w) = sem.class_ids.dim();
    let bytes: Vec<u8> = sem.class_ids.iter().copied().collect();
    encode_png(path, &bytes, w as u32, h as u32, ExtendedColorType::L8)
}

/// Reads an 8-bit semantic PNG.
pub fn load_semantic_png(path: &Path) -> Result<SemanticMap> {
    match open_image(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let class_ids = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32).0[0]
            });
            Ok(SemanticMap { class_ids })
        }
        _ => Err(Error::Image {
            path: path.to_path_buf(),
            message: "expected 8-bit grayscale semantics".into(),
        }),
    }
}

/// Writes a binary mask as 8-bit grayscale 0/255.
pub fn save_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255u8 } else { 0 }).collect();
    encode_png(path, &bytes, w as u32, h as u32, ExtendedColorType::L8)
}

/// Reads a binary mask PNG; values above 127 count as true.
pub fn load_mask_png(path: &Path) -> Result<Array2<bool>> {
    match open_image(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32).0[0] > 127
            }))
        }
        _ => Err(Error::Image {
            path: path.to_path_buf(),
            message: "expected 8-bit grayscale mask".into(),
        }),
    }
}

/// Writes channel-height-width RGB in [0,1] as an 8-bit color PNG.
pub fn save_rgb_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "image must have 3 channels");
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push((image[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    encode_png(path, &bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
}

/// Writes an already-rendered 8-bit color image atomically.
pub fn save_color_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    encode_png(path, img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
}

/// Reads an RGB PNG into channel-height-width [0,1].
pub fn load_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = open_image(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0,
    ))
}

/// Ids of all `*.png` files in `dir`, lexicographically sorted.
fn list_png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads one domain directory. See the module docs for the layout.
pub fn load_domain(root: &Path, domain: Domain, opts: &LoadOptions) -> Result<LoadedDomain> {
    let dir = root.join(domain.dir_name());
    let intrinsics: CameraIntrinsics = read_json(&dir.join("intrinsics.json"))?;
    let ids = list_png_ids(&dir.join("images"))?;
    let mut stats = LoadStats::default();
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_rgb_png(&dir.join("images").join(format!("{id}.png")))?;
        let (_, img_h, img_w) = image.dim();

        let depth = match domain {
            Domain::Source => {
                let path = dir.join("depth").join(format!("{id}.png"));
                if !path.exists() {
                    return Err(Error::Data(format!(
                        "source sample {id} has no depth map at {}",
                        path.display()
                    )));
                }
                let d = load_depth_png(&path)?;
                if d.dim() != (img_h, img_w) {
                    return Err(Error::Data(format!(
                        "sample {id}: depth dims {:?} != image {img_h}x{img_w}",
                        d.dim()
                    )));
                }
                Some(d)
            }
            Domain::Target => None,
        };

        let sem_path = dir.join("semantic").join(format!("{id}.png"));
        let semantic = if sem_path.exists() {
            let s = load_semantic_png(&sem_path)?;
            if s.class_ids.dim() != (img_h, img_w) {
                return Err(Error::Data(format!(
                    "sample {id}: semantic dims {:?} != image {img_h}x{img_w}",
                    s.class_ids.dim()
                )));
            }
            s
        } else {
            log::warn!("sample {id}: missing semantic map, treating as all void");
            stats.missing_semantic += 1;
            SemanticMap::all_void(img_h, img_w)
        };

        let inst_path = dir.join("instances").join(format!("{id}.json"));
        let mut instances = Vec::new();
        if inst_path.exists() {
            let records: Vec<InstanceRecord> = read_json(&inst_path)?;
            for rec in records {
                if rec.score < opts.score_threshold {
                    stats.instances_below_threshold += 1;
                    continue;
                }
                let mask = load_mask_png(&dir.join(&rec.mask_file))?;
                let ann = InstanceAnnotation {
                    instance_id: rec.instance_id,
                    class_id: rec.class_id,
                    class_name: rec.class_name,
                    bbox: rec.bbox,
                    mask,
                    score: rec.score,
                };
                ann.validate(img_h, img_w, &id)?;
                instances.push(ann);
            }
        } else {
            log::warn!("sample {id}: missing instance annotations");
            stats.missing_instances += 1;
        }

        samples.push(DomainSample {
            id,
            domain,
            image,
            depth,
            semantic,
            instances,
            intrinsics,
        });
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(LoadedDomain { samples, stats })
}

/// Loads the sealed evaluation depth for one target sample.
pub fn load_eval_depth(root: &Path, id: &str) -> Result<DepthMap> {
    load_depth_png(&root.join("target").join("_eval_depth").join(format!("{id}.png")))
}
