//! Two-phase adaptation training.
//!
//! Phase one (pretrain) learns on the source domain: depth supervision
//! through the source-to-target translator, the semantic branch and the
//! height prior on source labels, plus the adversarial and identity
//! terms that shape the translator. The target-side weight is forced to
//! zero. Phase two (adapt) freezes the translator and discriminator,
//! drops their objectives, and turns on the target-side consistency and
//! instance terms together with the learnable scale.
//!
//! Sample preparation happens once up front: semantic/edge input
//! channels come from the original (never augmented, never translated)
//! images, instance features and source ground-truth heights are
//! precomputed, and instances too small for the height losses are
//! dropped here. Classes are marked source-supervised when any usable
//! source instance carries them; target instances of other classes are
//! the ones whose pseudo-label gradients reach the height predictor.

mod trainer;

pub use trainer::{train_phase, TrainOutcome, Trainer};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::data::augment::AugmentConfig;
use crate::data::{load_dataset, load_split, Domain, DomainSample};
use crate::height::{extract_features, gt_height, usable_for_height, InstanceFeatures};
use crate::losses::LossWeights;
use crate::networks::NetworkConfig;
use crate::nn::Scalar;
use crate::semantic::{canny_edges, encode_semantic_channels, CannyParams};
use crate::{Error, Result};

/// Training phase; adapt continues from a pretrain checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        }
    }
}

/// Switches for the reduced variants of the method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Semantic-consistency branch: source and target consistency terms.
    pub consistency: bool,
    /// Instance-height branch: both instance terms and the scale.
    pub instances: bool,
    /// Replace the height network with one learnable height per class.
    pub per_class_height: bool,
    /// Zero the semantic id channel, leaving only edges.
    pub edges_only: bool,
    /// Override the target focal length used for pseudo depths; the
    /// learnable scale must absorb the mismatch.
    pub declared_fy_target: Option<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            consistency: true,
            instances: true,
            per_class_height: false,
            edges_only: false,
            declared_fy_target: None,
        }
    }
}

/// Everything one training phase needs.
///
/// A fresh default is a valid pretrain config: the target-side weight
/// starts at zero here even though [`LossWeights::default`] carries the
/// adapt-phase value, because pretraining with a nonzero target weight
/// is a config error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Per-phase default when absent: 2000 pretrain, 20000 adapt.
    pub iterations: Option<usize>,
    pub lr: f64,
    /// Split half source half target every step.
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// 0 saves only the final checkpoint.
    pub checkpoint_every: usize,
    pub num_classes: usize,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub canny: CannyParams,
    pub network: NetworkConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            iterations: None,
            lr: 1e-4,
            batch_size: 4,
            seed: 1,
            log_every: 1,
            checkpoint_every: 0,
            num_classes: crate::data::synth::NUM_CLASSES,
            weights: LossWeights {
                lambda_target: 0.0,
                ..LossWeights::default()
            },
            augment: AugmentConfig::default(),
            canny: CannyParams::default(),
            network: NetworkConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Iteration count, falling back to the phase default.
    pub fn resolved_iterations(&self) -> usize {
        self.iterations.unwrap_or(match self.phase {
            Phase::Pretrain => 2000,
            Phase::Adapt => 20000,
        })
    }

    /// A copy configured for the adapt phase: turns the target weight on
    /// (1.0) if the source config left it at zero.
    pub fn adapt_variant(&self) -> TrainConfig {
        let mut cfg = self.clone();
        cfg.phase = Phase::Adapt;
        cfg.iterations = None;
        if cfg.weights.lambda_target == 0.0 {
            cfg.weights.lambda_target = 1.0;
        }
        cfg
    }

    /// Every rule violation in this config; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for r in [self.weights.validate(), self.network.validate()] {
            if let Err(e) = r {
                v.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        }
        if self.phase == Phase::Pretrain && self.weights.lambda_target != 0.0 {
            v.push(format!(
                "pretraining requires lambda_target = 0, got {}",
                self.weights.lambda_target
            ));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            v.push(format!(
                "batch_size must be even and at least 2 for the half/half split, got {}",
                self.batch_size
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.resolved_iterations() == 0 {
            v.push("iterations must be positive".into());
        }
        if self.log_every == 0 {
            v.push("log_every must be positive".into());
        }
        if self.num_classes == 0 || self.num_classes >= 255 {
            v.push(format!(
                "num_classes must be in 1..=254, got {}",
                self.num_classes
            ));
        }
        if let Some(fy) = self.ablation.declared_fy_target {
            if !(fy > 0.0 && fy.is_finite()) {
                v.push(format!("declared_fy_target must be positive, got {fy}"));
            }
        }
        if !(self.canny.low < self.canny.high) || self.canny.sigma <= 0.0 {
            v.push("canny thresholds must satisfy low < high with positive sigma".into());
        }
        if self.augment.delta < 0.0 || self.augment.delta >= 1.0 {
            v.push(format!(
                "augment delta must lie in [0, 1), got {}",
                self.augment.delta
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// One instance after filtering and feature extraction.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub features: InstanceFeatures,
    pub mask: Array2<bool>,
    pub pixel_height: f64,
    /// Present only for source instances with depth evidence.
    pub gt_height: Option<f64>,
    pub class_id: u8,
    /// Whether this class has usable source supervision; pseudo-label
    /// gradients reach the height predictor only when it does not.
    pub source_supervised_class: bool,
}

/// One sample with all static per-sample work done.
#[derive(Debug, Clone)]
pub struct PreparedSample<F> {
    pub id: String,
    /// Original image, the augmentation input.
    pub image_f32: Array3<f32>,
    /// Original image in compute precision, for smoothness weights.
    pub image: Array3<F>,
    /// Two-channel semantic/edge input, from the original image.
    pub sem_input: Array3<F>,
    /// Ground truth as (values, valid); source samples only.
    pub depth: Option<(Array2<F>, Array2<bool>)>,
    pub instances: Vec<PreparedInstance>,
    pub fy: f64,
}

/// Prepared training corpus for both domains.
#[derive(Debug, Clone)]
pub struct TrainData<F> {
    pub source: Vec<PreparedSample<F>>,
    pub target: Vec<PreparedSample<F>>,
    /// Classes with at least one usable source instance.
    pub source_classes: BTreeSet<u8>,
    /// Instances dropped for missing depth evidence.
    pub dropped_source_instances: usize,
}

fn to_precision<F: Scalar>(x: &Array3<f32>) -> Array3<F> {
    x.mapv(|v| F::from_f64(v as f64))
}

fn prepare_sample<F: Scalar>(
    sample: &DomainSample,
    cfg: &TrainConfig,
    source_classes: Option<&BTreeSet<u8>>,
    dropped: &mut usize,
) -> Result<PreparedSample<F>> {
    let (h, w) = sample.img_dims();
    let edges = canny_edges(&sample.image, &cfg.canny)?;
    let mut sem = encode_semantic_channels(&sample.semantic, &edges, cfg.num_classes)
        .map_err(|e| Error::Data(format!("sample {}: {e}", sample.id)))?;
    if cfg.ablation.edges_only {
        sem.index_axis_mut(ndarray::Axis(0), 0).fill(0.0);
    }

    let mut instances = Vec::new();
    for inst in &sample.instances {
        if !usable_for_height(inst) {
            continue;
        }
        let features = extract_features(inst, h, w, cfg.num_classes)
            .map_err(|e| Error::Data(format!("sample {}: {e}", sample.id)))?;
        let gt_h = match (&sample.depth, sample.domain) {
            (Some(depth), Domain::Source) => {
                match gt_height(inst, depth, &sample.intrinsics) {
                    Ok(v) => Some(v),
                    Err(_) => {
                        // No valid depth under the mask; skip the instance.
                        *dropped += 1;
                        continue;
                    }
                }
            }
            _ => None,
        };
        instances.push(PreparedInstance {
            features,
            mask: inst.mask.clone(),
            pixel_height: inst.pixel_height() as f64,
            gt_height: gt_h,
            class_id: inst.class_id,
            source_supervised_class: source_classes
                .map(|s| s.contains(&inst.class_id))
                .unwrap_or(true),
        });
    }

    Ok(PreparedSample {
        id: sample.id.clone(),
        image_f32: sample.image.clone(),
        image: to_precision(&sample.image),
        sem_input: to_precision(&sem),
        depth: sample.depth.as_ref().map(|d| {
            (
                d.values.mapv(|v| F::from_f64(v as f64)),
                d.valid_mask.clone(),
            )
        }),
        instances,
        fy: sample.intrinsics.fy,
    })
}

impl<F: Scalar> TrainData<F> {
    /// Loads the train split of both domains under `root` and runs all
    /// static preparation.
    pub fn prepare(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train_ids = load_split(root, "train")?;
        let source_raw = load_dataset(root, Domain::Source)?;
        let target_raw = load_dataset(root, Domain::Target)?;
        let source_samples =
            crate::data::filter_split(source_raw.samples, &train_ids);
        let target_samples =
            crate::data::filter_split(target_raw.samples, &train_ids);
        Self::from_samples(&source_samples, &target_samples, cfg)
    }

    /// Prepares in-memory samples; `source`/`target` must be non-empty.
    pub fn from_samples(
        source: &[DomainSample],
        target: &[DomainSample],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data(format!(
                "training needs samples in both domains, got {} source and {} target",
                source.len(),
                target.len()
            )));
        }
        for s in source {
            if s.depth.is_none() {
                return Err(Error::Data(format!(
                    "source sample {} has no depth map",
                    s.id
                )));
            }
        }
        let mut dropped = 0usize;
        // First pass over source alone decides which classes have
        // source supervision.
        let mut prepared_source = Vec::with_capacity(source.len());
        for s in source {
            prepared_source.push(prepare_sample::<F>(s, cfg, None, &mut dropped)?);
        }
        let source_classes: BTreeSet<u8> = prepared_source
            .iter()
            .flat_map(|s| s.instances.iter())
            .filter(|i| i.gt_height.is_some())
            .map(|i| i.class_id)
            .collect();
        let mut prepared_target = Vec::with_capacity(target.len());
        for t in target {
            prepared_target.push(prepare_sample::<F>(
                t,
                cfg,
                Some(&source_classes),
                &mut dropped,
            )?);
        }
        Ok(TrainData {
            source: prepared_source,
            target: prepared_target,
            source_classes,
            dropped_source_instances: dropped,
        })
    }
}
