//! Deterministic synthetic paired-domain generator.
//!
//! Scenes are a flat ground plane seen from a fixed camera height plus
//! fronto-parallel billboard objects standing on the ground. Billboards make
//! the pinhole size relation exact: an object of physical height `h` at
//! depth `D` projects to `fy * h / D` pixel rows, every mask pixel carries
//! depth exactly `D`, and the median over the mask equals `D`.
//!
//! The two domains share scene statistics but differ in appearance (color
//! mixing, contrast, noise) and in vertical focal length, so adaptation has
//! both an appearance gap and a scale gap to close. Rows at or above the
//! horizon are sky and carry no depth; ground beyond the cap is also
//! invalid, mimicking sparse range sensors.
//!
//! Everything derives from per-sample ChaCha streams, so a (config, seed)
//! pair regenerates byte-identical datasets.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use super::io::{
    atomic_write_json, save_depth_png, save_mask_png, save_rgb_png, save_semantic_png,
    InstanceRecord,
};
use super::{CameraIntrinsics, DepthMap, Domain, InstanceAnnotation, SemanticMap};
use crate::rng::stream_rng;
use crate::{Error, Result};

pub const GROUND: u8 = 0;
pub const SKY: u8 = 1;
pub const CAR: u8 = 2;
pub const VAN: u8 = 3;
pub const TREE: u8 = 4;
pub const BUILDING: u8 = 5;
pub const PERSON: u8 = 6;

/// Number of semantic classes (void excluded).
pub const NUM_CLASSES: usize = 7;

/// Static geometry and availability of one object class.
#[derive(Debug, Clone, Copy)]
pub struct ClassSpec {
    pub id: u8,
    pub name: &'static str,
    pub height_range: (f64, f64),
    pub width_range: (f64, f64),
    pub depth_range: (f64, f64),
    /// Whether detections are emitted for this class.
    pub instance: bool,
    pub in_source: bool,
    pub in_target: bool,
    pub base_color: [f32; 3],
}

/// Placeable classes. `person` exists only in the target domain, so its
/// height prior has no source supervision.
pub const OBJECT_CLASSES: [ClassSpec; 5] = [
    ClassSpec {
        id: CAR,
        name: "car",
        height_range: (1.35, 1.65),
        width_range: (3.6, 4.4),
        depth_range: (4.0, 40.0),
        instance: true,
        in_source: true,
        in_target: true,
        base_color: [0.55, 0.14, 0.12],
    },
    ClassSpec {
        id: VAN,
        name: "van",
        height_range: (1.9, 2.4),
        width_range: (4.2, 5.2),
        depth_range: (5.0, 45.0),
        instance: true,
        in_source: true,
        in_target: true,
        base_color: [0.20, 0.32, 0.55],
    },
    ClassSpec {
        id: TREE,
        name: "tree",
        height_range: (3.0, 7.0),
        width_range: (1.6, 3.0),
        depth_range: (8.0, 55.0),
        instance: false,
        in_source: true,
        in_target: true,
        base_color: [0.12, 0.38, 0.15],
    },
    ClassSpec {
        id: BUILDING,
        name: "building",
        height_range: (6.0, 14.0),
        width_range: (6.0, 14.0),
        depth_range: (20.0, 70.0),
        instance: false,
        in_source: true,
        in_target: true,
        base_color: [0.45, 0.42, 0.40],
    },
    ClassSpec {
        id: PERSON,
        name: "person",
        height_range: (1.5, 1.9),
        width_range: (0.5, 0.7),
        depth_range: (3.0, 18.0),
        instance: true,
        in_source: false,
        in_target: true,
        base_color: [0.62, 0.42, 0.32],
    },
];

pub fn class_spec(id: u8) -> &'static ClassSpec {
    OBJECT_CLASSES
        .iter()
        .find(|c| c.id == id)
        .expect("unknown object class")
}

/// Generator settings; defaults give the desk-scale paired datasets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Vertical focal length per domain; the target default is half the
    /// source, so pseudo-label scale correction has something to correct.
    pub fy_source: f64,
    pub fy_target: f64,
    /// Horizon row; rows above it are sky.
    pub cy: f64,
    pub camera_height: f64,
    pub max_depth: f64,
    /// Placements projecting below these pixel extents are rejected.
    pub min_pixel_height: f64,
    pub min_pixel_width: f64,
    pub max_retries: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub noise_source: f64,
    pub noise_target: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            img_h: 64,
            img_w: 192,
            n_source: 300,
            n_target: 300,
            fy_source: 64.0,
            fy_target: 32.0,
            cy: 24.0,
            camera_height: 1.5,
            max_depth: 80.0,
            min_pixel_height: 2.0,
            min_pixel_width: 2.0,
            max_retries: 40,
            objects_min: 2,
            objects_max: 5,
            train_frac: 0.8,
            val_frac: 0.1,
            noise_source: 0.02,
            noise_target: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn intrinsics(&self, domain: Domain) -> CameraIntrinsics {
        let fy = match domain {
            Domain::Source => self.fy_source,
            Domain::Target => self.fy_target,
        };
        CameraIntrinsics {
            fx: fy,
            fy,
            cx: self.img_w as f64 / 2.0,
            cy: self.cy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_h == 0 || self.img_w == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.cy <= 0.0 || self.cy >= self.img_h as f64 {
            return Err(Error::Config("cy must lie inside the image".into()));
        }
        if self.fy_source <= 0.0 || self.fy_target <= 0.0 {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config("objects_min must not exceed objects_max".into()));
        }
        if !(0.0..=1.0).contains(&self.train_frac)
            || !(0.0..=1.0).contains(&self.val_frac)
            || self.train_frac + self.val_frac > 1.0
        {
            return Err(Error::Config("split fractions must sum to at most 1".into()));
        }
        Ok(())
    }
}

/// Exact geometry of one placed object, stored in the truth sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: u8,
    pub height_m: f64,
    pub width_m: f64,
    pub depth_m: f64,
    pub x_offset_m: f64,
}

/// Ground-truth record of one generated scene; written to
/// `root/_scene_specs/<id>.json` and read only by verification code.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub domain: Domain,
    pub intrinsics: CameraIntrinsics,
    pub img_h: usize,
    pub img_w: usize,
    pub camera_height: f64,
    pub objects: Vec<SceneObject>,
}

/// Inclusive pixel rectangle of a placed billboard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub v0: i64,
    pub v1: i64,
    pub u0: i64,
    pub u1: i64,
}

impl PixelRect {
    fn intersects_with_margin(&self, other: &PixelRect, margin: i64) -> bool {
        !(self.v1 + margin < other.v0
            || other.v1 + margin < self.v0
            || self.u1 + margin < other.u0
            || other.u1 + margin < self.u0)
    }
}

/// Why a candidate placement was rejected, if it was.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementReject {
    TooSmallHeight,
    TooSmallWidth,
    OutsideImage,
    Overlap,
}

/// Continuous projection of a billboard of size `h x w_m` meters at depth
/// `depth`, horizontally centered at pixel `u_center`.
fn project(
    intr: &CameraIntrinsics,
    camera_height: f64,
    h: f64,
    w_m: f64,
    depth: f64,
    u_center: f64,
) -> (f64, f64, f64, f64) {
    let v_top = intr.cy + intr.fy * (camera_height - h) / depth;
    let v_bottom = intr.cy + intr.fy * camera_height / depth;
    let w_px = intr.fx * w_m / depth;
    let u_left = u_center - w_px / 2.0;
    let u_right = u_center + w_px / 2.0;
    (v_top, v_bottom, u_left, u_right)
}

/// Pixel rows/columns whose centers fall inside the half-open projection.
fn rasterize(v_top: f64, v_bottom: f64, u_left: f64, u_right: f64) -> PixelRect {
    // Row v has center v + 0.5; keep centers in [v_top, v_bottom).
    let v0 = (v_top - 0.5).ceil() as i64;
    let v1 = ((v_bottom - 0.5).ceil() as i64) - 1;
    let u0 = (u_left - 0.5).ceil() as i64;
    let u1 = ((u_right - 0.5).ceil() as i64) - 1;
    PixelRect { v0, v1, u0, u1 }
}

/// Decides whether a candidate placement must be resampled.
///
/// The pixel-height threshold is strict: a projection of exactly
/// `min_pixel_height` rows passes.
pub fn placement_rejection(
    cfg: &SynthConfig,
    intr: &CameraIntrinsics,
    h: f64,
    w_m: f64,
    depth: f64,
    u_center: f64,
    existing: &[PixelRect],
) -> Option<PlacementReject> {
    let h_px = intr.fy * h / depth;
    if h_px < cfg.min_pixel_height {
        return Some(PlacementReject::TooSmallHeight);
    }
    let w_px = intr.fx * w_m / depth;
    if w_px < cfg.min_pixel_width {
        return Some(PlacementReject::TooSmallWidth);
    }
    let (v_top, v_bottom, u_left, u_right) = project(intr, cfg.camera_height, h, w_m, depth, u_center);
    if v_top < 0.0
        || v_bottom > cfg.img_h as f64
        || u_left < 0.0
        || u_right > cfg.img_w as f64
    {
        return Some(PlacementReject::OutsideImage);
    }
    let rect = rasterize(v_top, v_bottom, u_left, u_right);
    if rect.v1 < rect.v0 || rect.u1 < rect.u0 {
        return Some(PlacementReject::OutsideImage);
    }
    if existing.iter().any(|r| rect.intersects_with_margin(r, 1)) {
        return Some(PlacementReject::Overlap);
    }
    None
}

/// One fully rendered scene before serialization.
pub struct RenderedSample {
    pub id: String,
    pub domain: Domain,
    pub image: Array3<f32>,
    pub depth: DepthMap,
    pub semantic: SemanticMap,
    pub instances: Vec<InstanceAnnotation>,
    pub spec: SceneSpec,
}

fn sample_id(domain: Domain, idx: usize) -> String {
    match domain {
        Domain::Source => format!("s{idx:06}"),
        Domain::Target => format!("t{idx:06}"),
    }
}

fn sample_stream(domain: Domain, idx: usize) -> u64 {
    let base = match domain {
        Domain::Source => 0x0100_0000u64,
        Domain::Target => 0x0200_0000u64,
    };
    base + idx as u64
}

/// Ground depth at pixel row `v`, or `None` for sky / beyond the cap.
fn ground_depth(cfg: &SynthConfig, intr: &CameraIntrinsics, v: usize) -> Option<f64> {
    let dy = v as f64 + 0.5 - intr.cy;
    if dy <= 0.0 {
        return None;
    }
    let z = intr.fy * cfg.camera_height / dy;
    (z <= cfg.max_depth).then_some(z)
}

/// Renders one scene deterministically from `(seed, domain, idx)`.
pub fn generate_sample(
    cfg: &SynthConfig,
    seed: u64,
    domain: Domain,
    idx: usize,
) -> Result<RenderedSample> {
    let id = sample_id(domain, idx);
    let mut rng = stream_rng(seed, sample_stream(domain, idx));
    let intr = cfg.intrinsics(domain);
    let classes: Vec<&ClassSpec> = OBJECT_CLASSES
        .iter()
        .filter(|c| match domain {
            Domain::Source => c.in_source,
            Domain::Target => c.in_target,
        })
        .collect();

    let n_objects = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut objects: Vec<(SceneObject, PixelRect)> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut placed = false;
        for _attempt in 0..cfg.max_retries {
            let class = classes[rng.random_range(0..classes.len())];
            let h = rng.random_range(class.height_range.0..class.height_range.1);
            let w_m = rng.random_range(class.width_range.0..class.width_range.1);

            // Feasible depth interval: inside the class range, fully inside
            // the image vertically, and above the minimum pixel extents.
            let mut d_lo = class.depth_range.0;
            d_lo = d_lo.max(intr.fy * cfg.camera_height / (cfg.img_h as f64 - intr.cy));
            if h > cfg.camera_height {
                d_lo = d_lo.max(intr.fy * (h - cfg.camera_height) / intr.cy);
            }
            let d_hi = class
                .depth_range
                .1
                .min(intr.fy * h / cfg.min_pixel_height)
                .min(intr.fx * w_m / cfg.min_pixel_width)
                .min(cfg.max_depth);
            if d_lo >= d_hi {
                continue;
            }
            let depth = rng.random_range(d_lo..d_hi);

            let w_px = intr.fx * w_m / depth;
            let u_min = w_px / 2.0 + 1.0;
            let u_max = cfg.img_w as f64 - w_px / 2.0 - 1.0;
            if u_min >= u_max {
                continue;
            }
            let u_center = rng.random_range(u_min..u_max);

            let existing: Vec<PixelRect> = objects.iter().map(|(_, r)| *r).collect();
            if placement_rejection(cfg, &intr, h, w_m, depth, u_center, &existing).is_some() {
                continue;
            }
            let (vt, vb, ul, ur) = project(&intr, cfg.camera_height, h, w_m, depth, u_center);
            let rect = rasterize(vt, vb, ul, ur);
            objects.push((
                SceneObject {
                    class_id: class.id,
                    height_m: h,
                    width_m: w_m,
                    depth_m: depth,
                    x_offset_m: (u_center - intr.cx) * depth / intr.fx,
                },
                rect,
            ));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!(
                "sample {id}: could not place an object after {} attempts",
                cfg.max_retries
            )));
        }
    }

    let (img_h, img_w) = (cfg.img_h, cfg.img_w);
    let mut depth = Array2::<f32>::zeros((img_h, img_w));
    let mut semantic = Array2::<u8>::zeros((img_h, img_w));
    let mut image = Array3::<f32>::zeros((3, img_h, img_w));

    // Background: sky above the horizon, shaded ground below it.
    for v in 0..img_h {
        match ground_depth(cfg, &intr, v) {
            None => {
                let is_sky = (v as f64 + 0.5) <= intr.cy;
                for u in 0..img_w {
                    semantic[[v, u]] = if is_sky { SKY } else { GROUND };
                    // Beyond-cap ground renders like haze; depth stays invalid.
                    let t = (if is_sky {
                        (v as f64 + 0.5) / intr.cy
                    } else {
                        1.0
                    }) as f32;
                    let col = [
                        0.55 + 0.23 * t,
                        0.62 + 0.20 * t,
                        0.82 + 0.08 * t,
                    ];
                    for c in 0..3 {
                        image[[c, v, u]] = col[c];
                    }
                }
            }
            Some(z) => {
                let haze = ((z / cfg.max_depth).powf(0.7) * 0.55) as f32;
                for u in 0..img_w {
                    semantic[[v, u]] = GROUND;
                    depth[[v, u]] = z as f32;
                    let stripe = 0.015 * ((u as f32 * 0.37).sin() + (v as f32 * 0.53).cos());
                    let base = [0.34f32, 0.32, 0.30];
                    for c in 0..3 {
                        image[[c, v, u]] = base[c] * (1.0 - haze) + 0.72 * haze + stripe;
                    }
                }
            }
        }
    }

    // Objects, nearest drawn last; rects never overlap so order only
    // matters for determinism of the color draws below.
    let mut instances = Vec::new();
    let mut next_instance = 0u32;
    for (obj, rect) in &objects {
        let class = class_spec(obj.class_id);
        let jitter: [f32; 3] =
            core::array::from_fn(|_| rng.random_range(-0.08f32..0.08f32));
        let rows = (rect.v1 - rect.v0 + 1) as f32;
        for v in rect.v0..=rect.v1 {
            let row_frac = (v - rect.v0) as f32 / rows;
            let shade = 1.08 - 0.22 * row_frac;
            for u in rect.u0..=rect.u1 {
                let (vu, uu) = (v as usize, u as usize);
                semantic[[vu, uu]] = class.id;
                depth[[vu, uu]] = obj.depth_m as f32;
                for c in 0..3 {
                    image[[c, vu, uu]] =
                        (class.base_color[c] + jitter[c]) * shade;
                }
            }
        }
        if class.instance {
            let mut mask = Array2::from_elem((img_h, img_w), false);
            for v in rect.v0..=rect.v1 {
                for u in rect.u0..=rect.u1 {
                    mask[[v as usize, u as usize]] = true;
                }
            }
            let score = match domain {
                Domain::Source => 1.0,
                Domain::Target => rng.random_range(0.7f32..1.0),
            };
            instances.push(InstanceAnnotation {
                instance_id: next_instance,
                class_id: class.id,
                class_name: class.name.to_owned(),
                bbox: [
                    rect.u0 as u32,
                    rect.v0 as u32,
                    (rect.u1 - rect.u0 + 1) as u32,
                    (rect.v1 - rect.v0 + 1) as u32,
                ],
                mask,
                score,
            });
            next_instance += 1;
        }
    }

    // Domain appearance: the target is re-tinted, flattened in contrast and
    // noisier, so the appearance gap is real but translatable.
    let noise_amp = match domain {
        Domain::Source => cfg.noise_source,
        Domain::Target => cfg.noise_target,
    };
    let noise = Normal::new(0.0f64, noise_amp.max(1e-12)).expect("valid noise sigma");
    for v in 0..img_h {
        for u in 0..img_w {
            let (r, g, b) = (image[[0, v, u]], image[[1, v, u]], image[[2, v, u]]);
            let mixed = match domain {
                Domain::Source => [r, g, b],
                Domain::Target => [
                    0.82 * r + 0.12 * g + 0.06 * b + 0.06,
                    0.05 * r + 0.80 * g + 0.15 * b + 0.04,
                    0.08 * r + 0.18 * g + 0.74 * b + 0.10,
                ],
            };
            for (c, val) in mixed.into_iter().enumerate() {
                let val = match domain {
                    Domain::Source => val,
                    Domain::Target => 0.5 + (val - 0.5) * 0.85,
                };
                let noisy = val + noise.sample(&mut rng) as f32;
                image[[c, v, u]] = noisy.clamp(0.0, 1.0);
            }
        }
    }

    let spec = SceneSpec {
        id: id.clone(),
        domain,
        intrinsics: intr,
        img_h,
        img_w,
        camera_height: cfg.camera_height,
        objects: objects.into_iter().map(|(o, _)| o).collect(),
    };
    Ok(RenderedSample {
        id,
        domain,
        image,
        depth: DepthMap::from_values_zero_invalid(depth),
        semantic: SemanticMap { class_ids: semantic },
        instances,
        spec,
    })
}

/// Totals reported by [`generate_datasets`].
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GenerateSummary {
    pub n_source: usize,
    pub n_target: usize,
    pub instances_source: usize,
    pub instances_target: usize,
}

fn write_sample(dir: &Path, root: &Path, sample: &RenderedSample) -> Result<()> {
    let id = &sample.id;
    save_rgb_png(&dir.join("images").join(format!("{id}.png")), &sample.image)?;
    match sample.domain {
        Domain::Source => {
            save_depth_png(&dir.join("depth").join(format!("{id}.png")), &sample.depth)?;
        }
        Domain::Target => {
            save_depth_png(
                &dir.join("_eval_depth").join(format!("{id}.png")),
                &sample.depth,
            )?;
        }
    }
    save_semantic_png(&dir.join("semantic").join(format!("{id}.png")), &sample.semantic)?;
    let mut records = Vec::with_capacity(sample.instances.len());
    for ann in &sample.instances {
        let mask_file = format!("instances/masks/{id}_{:02}.png", ann.instance_id);
        save_mask_png(&dir.join(&mask_file), &ann.mask)?;
        records.push(InstanceRecord {
            instance_id: ann.instance_id,
            class_id: ann.class_id,
            class_name: ann.class_name.clone(),
            bbox: ann.bbox,
            mask_file,
            score: ann.score,
        });
    }
    atomic_write_json(&dir.join("instances").join(format!("{id}.json")), &records)?;
    atomic_write_json(&root.join("_scene_specs").join(format!("{id}.json")), &sample.spec)?;
    Ok(())
}

fn split_lines(ids: &[String], train_frac: f64, val_frac: f64) -> [Vec<String>; 3] {
    let n = ids.len();
    let n_train = (n as f64 * train_frac).floor() as usize;
    let n_val = (n as f64 * val_frac).floor() as usize;
    let train = ids[..n_train].to_vec();
    let val = ids[n_train..(n_train + n_val).min(n)].to_vec();
    let test = ids[(n_train + n_val).min(n)..].to_vec();
    [train, val, test]
}

/// Generates both domains under `root`, replacing any previous dataset.
///
/// The dataset is staged in a `.partial` sibling directory and renamed into
/// place once complete, so interrupted runs never leave a half-written root.
pub fn generate_datasets(cfg: &SynthConfig, seed: u64, root: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    let staging = {
        let mut name = root.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        root.with_file_name(name)
    };
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let mut summary = GenerateSummary::default();
    let mut all_ids: Vec<(Domain, String)> = Vec::new();
    for (domain, count) in [(Domain::Source, cfg.n_source), (Domain::Target, cfg.n_target)] {
        let dir = staging.join(domain.dir_name());
        atomic_write_json(&dir.join("intrinsics.json"), &cfg.intrinsics(domain))?;
        for idx in 0..count {
            let sample = generate_sample(cfg, seed, domain, idx)?;
            write_sample(&dir, &staging, &sample)?;
            match domain {
                Domain::Source => {
                    summary.n_source += 1;
                    summary.instances_source += sample.instances.len();
                }
                Domain::Target => {
                    summary.n_target += 1;
                    summary.instances_target += sample.instances.len();
                }
            }
            all_ids.push((domain, sample.id));
        }
    }

    // Splits are per domain, then merged so each file covers both domains.
    let mut merged: [Vec<String>; 3] = Default::default();
    for domain in [Domain::Source, Domain::Target] {
        let ids: Vec<String> = all_ids
            .iter()
            .filter(|(d, _)| *d == domain)
            .map(|(_, id)| id.clone())
            .collect();
        let parts = split_lines(&ids, cfg.train_frac, cfg.val_frac);
        for (dst, src) in merged.iter_mut().zip(parts) {
            dst.extend(src);
        }
    }
    for (name, ids) in ["train", "val", "test"].iter().zip(&mut merged) {
        ids.sort();
        let body = ids.join("\n") + "\n";
        super::io::atomic_write(&staging.join("splits").join(format!("{name}.txt")), body.as_bytes())?;
    }
    atomic_write_json(
        &staging.join("generation.json"),
        &serde_json::json!({ "seed": seed, "config": cfg }),
    )?;

    if root.exists() {
        fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    fs::rename(&staging, root).map_err(|e| Error::io(root, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_source: 4,
            n_target: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn projection_matches_pinhole_size_relation() {
        let cfg = SynthConfig::default();
        let intr = CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 96.0,
            cy: 24.0,
        };
        // fy=100, h=2 m, D=4 m projects to 50 rows.
        let (vt, vb, _, _) = project(&intr, cfg.camera_height, 2.0, 1.0, 4.0, 96.0);
        assert!((vb - vt - 50.0).abs() < 1e-12);
    }

    #[test]
    fn rejection_threshold_is_strict_at_two_pixels() {
        let cfg = SynthConfig::default();
        let intr = CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 96.0,
            cy: 24.0,
        };
        // Exactly 2.0 projected rows passes the strict < comparison.
        assert_eq!(
            placement_rejection(&cfg, &intr, 2.0, 3.0, 100.0, 96.0, &[]),
            None
        );
        // Slightly deeper drops below two rows and is resampled.
        assert_eq!(
            placement_rejection(&cfg, &intr, 2.0, 3.0, 101.0, 96.0, &[]),
            Some(PlacementReject::TooSmallHeight)
        );
    }

    #[test]
    fn rejection_catches_out_of_image_and_overlap() {
        let cfg = SynthConfig::default();
        let intr = cfg.intrinsics(Domain::Source);
        // Tall building too close: the top projects above the image.
        assert_eq!(
            placement_rejection(&cfg, &intr, 14.0, 8.0, 20.0, 96.0, &[]),
            Some(PlacementReject::OutsideImage)
        );
        // Horizontally centered too close to the left edge.
        assert_eq!(
            placement_rejection(&cfg, &intr, 1.5, 4.0, 10.0, 2.0, &[]),
            Some(PlacementReject::OutsideImage)
        );
        let (vt, vb, ul, ur) = project(&intr, cfg.camera_height, 1.5, 4.0, 10.0, 96.0);
        let rect = rasterize(vt, vb, ul, ur);
        assert_eq!(
            placement_rejection(&cfg, &intr, 1.5, 4.0, 10.0, 96.0, &[rect]),
            Some(PlacementReject::Overlap)
        );
    }

    #[test]
    fn generated_masks_carry_exact_object_depth() {
        let cfg = small_cfg();
        for domain in [Domain::Source, Domain::Target] {
            for idx in 0..cfg.count(domain) {
                let s = generate_sample(&cfg, 7, domain, idx).unwrap();
                for (ann, obj) in s.instances.iter().zip(instance_objects(&s.spec)) {
                    let mut depths: Vec<f32> = Vec::new();
                    for ((y, x), &m) in ann.mask.indexed_iter() {
                        if m {
                            depths.push(s.depth.values[[y, x]]);
                        }
                    }
                    assert!(!depths.is_empty());
                    assert!(
                        depths.iter().all(|&d| d == obj.depth_m as f32),
                        "mask depth differs from spec depth"
                    );
                }
            }
        }
    }

    #[test]
    fn annotation_height_matches_projection_within_one_pixel() {
        let cfg = small_cfg();
        for idx in 0..4 {
            let s = generate_sample(&cfg, 11, Domain::Source, idx).unwrap();
            for (ann, obj) in s.instances.iter().zip(instance_objects(&s.spec)) {
                let h_px = s.spec.intrinsics.fy * obj.height_m / obj.depth_m;
                let diff = (ann.pixel_height() as f64 - h_px).abs();
                assert!(diff <= 1.0, "H={} vs fy*h/D={h_px}", ann.pixel_height());
            }
        }
    }

    #[test]
    fn annotations_validate_and_avoid_overlap() {
        let cfg = small_cfg();
        let s = generate_sample(&cfg, 13, Domain::Target, 2).unwrap();
        for ann in &s.instances {
            ann.validate(cfg.img_h, cfg.img_w, &s.id).unwrap();
        }
        let mut coverage = Array2::<u8>::zeros((cfg.img_h, cfg.img_w));
        for ann in &s.instances {
            for ((y, x), &m) in ann.mask.indexed_iter() {
                if m {
                    coverage[[y, x]] += 1;
                }
            }
        }
        assert!(coverage.iter().all(|&c| c <= 1), "instance masks overlap");
    }

    #[test]
    fn person_class_is_absent_from_source() {
        let cfg = SynthConfig {
            n_source: 12,
            n_target: 12,
            ..SynthConfig::default()
        };
        let mut source_classes = std::collections::BTreeSet::new();
        let mut target_has_person = false;
        for idx in 0..12 {
            let s = generate_sample(&cfg, 21, Domain::Source, idx).unwrap();
            for obj in &s.spec.objects {
                source_classes.insert(obj.class_id);
            }
            let t = generate_sample(&cfg, 21, Domain::Target, idx).unwrap();
            if t.spec.objects.iter().any(|o| o.class_id == PERSON) {
                target_has_person = true;
            }
        }
        assert!(!source_classes.contains(&PERSON));
        assert!(target_has_person, "seed 21 should place at least one person");
    }

    #[test]
    fn sky_is_invalid_and_ground_rows_share_depth() {
        let cfg = small_cfg();
        let s = generate_sample(&cfg, 5, Domain::Source, 0).unwrap();
        let intr = cfg.intrinsics(Domain::Source);
        for v in 0..cfg.img_h {
            let object_free: Vec<usize> = (0..cfg.img_w)
                .filter(|&u| {
                    let cid = s.semantic.class_ids[[v, u]];
                    cid == GROUND || cid == SKY
                })
                .collect();
            match ground_depth(&cfg, &intr, v) {
                None => {
                    for &u in &object_free {
                        assert!(!s.depth.valid_mask[[v, u]]);
                    }
                }
                Some(z) => {
                    for &u in &object_free {
                        assert!(s.depth.valid_mask[[v, u]]);
                        assert_eq!(s.depth.values[[v, u]], z as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_seeds_differ() {
        let cfg = small_cfg();
        let a = generate_sample(&cfg, 9, Domain::Target, 1).unwrap();
        let b = generate_sample(&cfg, 9, Domain::Target, 1).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth.values, b.depth.values);
        assert_eq!(a.semantic, b.semantic);
        let c = generate_sample(&cfg, 10, Domain::Target, 1).unwrap();
        assert_ne!(a.image, c.image);
    }

    impl SynthConfig {
        fn count(&self, domain: Domain) -> usize {
            match domain {
                Domain::Source => self.n_source,
                Domain::Target => self.n_target,
            }
        }
    }

    fn instance_objects(spec: &SceneSpec) -> Vec<&SceneObject> {
        spec.objects
            .iter()
            .filter(|o| class_spec(o.class_id).instance)
            .collect()
    }
}
