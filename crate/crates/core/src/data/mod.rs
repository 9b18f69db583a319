//! Data model, on-disk dataset format, and synthetic paired-domain data.
//!
//! A dataset root holds two domain directories plus shared split lists:
//!
//! ```text
//! root/
//!   source/  images/*.png depth/*.png semantic/*.png instances/*.json
//!            instances/masks/*.png intrinsics.json
//!   target/  same, minus depth/, plus _eval_depth/*.png (sealed ground
//!            truth read only by the evaluator)
//!   _scene_specs/*.json   exact generator geometry, read only by tests
//!   splits/{train,val,test}.txt
//! ```
//!
//! Depth PNGs are 16-bit grayscale, value = meters * 256, 0 = invalid.
//! Semantic PNGs are 8-bit class ids with 255 = void. Instance JSON lists
//! `{instance_id, class_id, class_name, bbox, mask_file, score}` with masks
//! in standalone binary PNGs.

pub mod augment;
pub mod io;
pub mod synth;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::{Error, Result};

/// Which side of the adaptation gap a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Dense metric depth with an explicit validity mask.
///
/// Valid pixels are strictly positive meters; invalid pixels carry 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Array2<f32>,
    pub valid_mask: Array2<bool>,
}

impl DepthMap {
    /// Builds from a value grid where 0 marks invalid pixels.
    pub fn from_values_zero_invalid(values: Array2<f32>) -> Self {
        let valid_mask = values.mapv(|v| v > 0.0);
        DepthMap { values, valid_mask }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Per-pixel semantic class ids; [`SemanticMap::VOID`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub class_ids: Array2<u8>,
}

impl SemanticMap {
    pub const VOID: u8 = 255;

    pub fn all_void(h: usize, w: usize) -> Self {
        SemanticMap {
            class_ids: Array2::from_elem((h, w), Self::VOID),
        }
    }
}

/// One detected object: class, box, pixel mask, confidence.
#[derive(Debug, Clone)]
pub struct InstanceAnnotation {
    pub instance_id: u32,
    pub class_id: u8,
    pub class_name: String,
    /// (x, y, w, h) in pixels, x right, y down, top-left origin.
    pub bbox: [u32; 4],
    pub mask: Array2<bool>,
    pub score: f32,
}

impl InstanceAnnotation {
    /// Pixel height of the instance, the H of the pseudo-label relation.
    pub fn pixel_height(&self) -> u32 {
        self.bbox[3]
    }

    /// Checks the mask/bbox invariants; `ctx` names the sample in errors.
    pub fn validate(&self, img_h: usize, img_w: usize, ctx: &str) -> Result<()> {
        if self.mask.dim() != (img_h, img_w) {
            return Err(Error::Data(format!(
                "{ctx}: instance {} mask dims {:?} != image {}x{}",
                self.instance_id,
                self.mask.dim(),
                img_h,
                img_w
            )));
        }
        let [bx, by, bw, bh] = self.bbox;
        if bh < 1 || bw < 1 {
            return Err(Error::Data(format!(
                "{ctx}: instance {} has degenerate bbox {:?}",
                self.instance_id, self.bbox
            )));
        }
        let (mut min_y, mut max_y, mut any) = (usize::MAX, 0usize, false);
        for ((y, x), &m) in self.mask.indexed_iter() {
            if !m {
                continue;
            }
            any = true;
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            let inside = x >= bx as usize
                && x < (bx + bw) as usize
                && y >= by as usize
                && y < (by + bh) as usize;
            if !inside {
                return Err(Error::Data(format!(
                    "{ctx}: instance {} mask pixel ({y},{x}) outside bbox {:?}",
                    self.instance_id, self.bbox
                )));
            }
        }
        if !any {
            return Err(Error::Data(format!(
                "{ctx}: instance {} mask has no true pixel",
                self.instance_id
            )));
        }
        let extent = (max_y - min_y + 1) as u32;
        if extent != bh {
            return Err(Error::Data(format!(
                "{ctx}: instance {} mask vertical extent {} != bbox height {}",
                self.instance_id, extent, bh
            )));
        }
        Ok(())
    }
}

/// One image with its annotations; the unit the trainer consumes.
#[derive(Debug, Clone)]
pub struct DomainSample {
    pub id: String,
    pub domain: Domain,
    /// Channel-height-width RGB in [0,1].
    pub image: Array3<f32>,
    /// Present for every source sample; absent on disk for target.
    pub depth: Option<DepthMap>,
    pub semantic: SemanticMap,
    pub instances: Vec<InstanceAnnotation>,
    pub intrinsics: CameraIntrinsics,
}

impl DomainSample {
    pub fn img_dims(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }
}

/// Ingestion knobs for [`load_dataset_with`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    /// Instances below this detection confidence are dropped.
    pub score_threshold: f32,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            score_threshold: 0.5,
        }
    }
}

/// Counters for degraded-but-loadable conditions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub missing_semantic: usize,
    pub missing_instances: usize,
    pub instances_below_threshold: usize,
}

/// A loaded domain with its ingestion warnings.
#[derive(Debug, Clone)]
pub struct LoadedDomain {
    pub samples: Vec<DomainSample>,
    pub stats: LoadStats,
}

/// Loads every sample of one domain under `root` with default options.
///
/// Samples come back ordered lexicographically by id.
pub fn load_dataset(root: &Path, domain: Domain) -> Result<LoadedDomain> {
    load_dataset_with(root, domain, &LoadOptions::default())
}

/// [`load_dataset`] with explicit ingestion options.
pub fn load_dataset_with(
    root: &Path,
    domain: Domain,
    opts: &LoadOptions,
) -> Result<LoadedDomain> {
    io::load_domain(root, domain, opts)
}

/// Ids listed in `root/splits/<name>.txt`, one per line.
pub fn load_split(root: &Path, name: &str) -> Result<BTreeSet<String>> {
    let path = root.join("splits").join(format!("{name}.txt"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Keeps only samples whose id is in `ids`, preserving order.
pub fn filter_split(samples: Vec<DomainSample>, ids: &BTreeSet<String>) -> Vec<DomainSample> {
    samples.into_iter().filter(|s| ids.contains(&s.id)).collect()
}
