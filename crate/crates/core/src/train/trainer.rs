//! The optimization loop behind both training phases.
//!
//! Each iteration draws half a batch from each domain, runs the
//! per-sample forward/backward passes in a fixed order, then applies one
//! Adam step per trainable parameter group; during pretraining the
//! discriminator takes its own step afterwards against the same
//! translations, detached. All randomness (batch order, augmentation)
//! comes from a single counter-based stream captured in checkpoints, so
//! a resumed run continues bit-identically.

use ndarray::{Array1, Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::augment::augment_photometric;
use crate::height::{
    height_loss_source, instance_loss_target, pseudo_depth, rho_grad, scale_from_rho,
    HeightPredictor, TargetInstance,
};
use crate::losses::{
    consistency_source, consistency_target, depth_supervision_loss, gan_losses, identity_loss,
    smoothness_loss, total_loss, LossBreakdown,
};
use crate::networks::checkpoint::{copy_params_into, Checkpoint, SectionState};
use crate::networks::{DepthUNet, Discriminator, Translator};
use crate::nn::{Adam, Gradients, ParamRef, Params, Scalar};
use crate::rng::{stream_rng, RngState};
use crate::{Error, Result};

use super::{Phase, PreparedInstance, TrainConfig, TrainData};

/// RNG stream for parameter initialization.
const INIT_STREAM: u64 = 20;
/// RNG stream for batch order and augmentation draws, per phase.
const PRETRAIN_STREAM: u64 = 21;
const ADAPT_STREAM: u64 = 22;

const SECTION_NAMES: [&str; 5] = ["depth", "semantic", "translator", "discriminator", "height"];

fn to_precision<F: Scalar>(x: &Array3<f32>) -> Array3<F> {
    x.mapv(|v| F::from_f64(v as f64))
}

fn softplus_scalar<F: Scalar>(b: F) -> F {
    if b > F::zero() {
        b + (-b).exp().ln_1p()
    } else {
        b.exp().ln_1p()
    }
}

fn sigmoid_scalar<F: Scalar>(b: F) -> F {
    F::one() / (F::one() + (-b).exp())
}

/// Height source: the feature network, or one learnable value per class.
enum HeightModel {
    Net(HeightPredictor),
    PerClass { slot: ParamRef },
}

enum HeightCache<F: Scalar> {
    Net(crate::height::HeightPredictorCache<F>),
    PerClass(Vec<u8>),
}

impl HeightModel {
    fn predict<F: Scalar>(
        &self,
        params: &Params<F>,
        insts: &[&PreparedInstance],
    ) -> (Vec<F>, HeightCache<F>) {
        match self {
            HeightModel::Net(net) => {
                let features: Vec<_> = insts.iter().map(|i| i.features.clone()).collect();
                let (heights, cache) = net.forward(params, &features);
                (heights.to_vec(), HeightCache::Net(cache))
            }
            HeightModel::PerClass { slot } => {
                let table = params.get(*slot);
                let class_ids: Vec<u8> = insts.iter().map(|i| i.class_id).collect();
                let heights = class_ids
                    .iter()
                    .map(|&c| softplus_scalar(table[[c as usize]]))
                    .collect();
                (heights, HeightCache::PerClass(class_ids))
            }
        }
    }

    fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &HeightCache<F>,
        d_heights: &[F],
        grads: &mut Gradients<F>,
    ) {
        match (self, cache) {
            (HeightModel::Net(net), HeightCache::Net(cache)) => {
                let d = Array1::from_vec(d_heights.to_vec());
                net.backward(params, cache, &d, grads);
            }
            (HeightModel::PerClass { slot }, HeightCache::PerClass(class_ids)) => {
                let table = params.get(*slot);
                let mut g = ArrayD::<F>::zeros(table.raw_dim());
                for (&c, &d) in class_ids.iter().zip(d_heights) {
                    g[[c as usize]] = g[[c as usize]] + d * sigmoid_scalar(table[[c as usize]]);
                }
                grads.accumulate(*slot, &g);
            }
            _ => unreachable!("height cache kind mismatch"),
        }
    }
}

/// Result of a completed phase run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub final_losses: LossBreakdown,
    pub iterations_run: u64,
}

#[derive(Serialize)]
struct LogLine<'a> {
    iter: u64,
    phase: &'a str,
    losses: &'a LossBreakdown,
}

/// Cumulative skip counters, one per loss with an empty-input case.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipCounters {
    pub source_instances: usize,
    pub target_instances: usize,
    pub depth_masks: usize,
}

/// All mutable training state for one phase.
pub struct Trainer<F: Scalar> {
    pub cfg: TrainConfig,
    pub data: TrainData<F>,
    pub iteration: u64,
    pub skips: SkipCounters,

    depth: DepthUNet,
    sem: DepthUNet,
    translator: Translator,
    disc: Discriminator,
    height: HeightModel,
    rho: ParamRef,

    depth_params: Params<F>,
    sem_params: Params<F>,
    translator_params: Params<F>,
    disc_params: Params<F>,
    height_params: Params<F>,

    adam_depth: Adam<F>,
    adam_sem: Adam<F>,
    adam_height: Adam<F>,
    /// Present only while the translator trains (pretrain).
    adam_translator: Option<Adam<F>>,
    adam_disc: Option<Adam<F>>,

    rng: ChaCha8Rng,
    config_hash: [u8; 32],
}

fn config_hash(cfg: &TrainConfig) -> [u8; 32] {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&digest);
    hash
}

impl<F: Scalar> Trainer<F> {
    fn build(cfg: TrainConfig, data: TrainData<F>) -> Result<Self> {
        cfg.validate()?;
        let hash = config_hash(&cfg);
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let b = &cfg.network;

        let mut depth_params = Params::new();
        let depth = DepthUNet::new(&mut depth_params, &mut rng, "depth", 3, b.base_width);
        let mut sem_params = Params::new();
        let sem = DepthUNet::new(&mut sem_params, &mut rng, "semantic", 2, b.base_width);
        let mut translator_params = Params::new();
        let translator = Translator::new(&mut translator_params, &mut rng, "translator", b.translator_base);
        let mut disc_params = Params::new();
        let disc = Discriminator::new(&mut disc_params, &mut rng, "disc", b.disc_base);

        let mut height_params = Params::new();
        let height = if cfg.ablation.per_class_height {
            let init = ArrayD::from_elem(vec![cfg.num_classes], F::one());
            let slot = height_params.add("height.per_class", init);
            HeightModel::PerClass { slot }
        } else {
            HeightModel::Net(HeightPredictor::new(
                &mut height_params,
                &mut rng,
                cfg.num_classes,
            ))
        };
        let rho = height_params.add("scale.rho", ArrayD::zeros(vec![1]));

        let lr = cfg.lr;
        let stream = match cfg.phase {
            Phase::Pretrain => PRETRAIN_STREAM,
            Phase::Adapt => ADAPT_STREAM,
        };
        Ok(Trainer {
            adam_depth: Adam::new(&depth_params, lr),
            adam_sem: Adam::new(&sem_params, lr),
            adam_height: Adam::new(&height_params, lr),
            adam_translator: match cfg.phase {
                Phase::Pretrain => Some(Adam::new(&translator_params, lr)),
                Phase::Adapt => None,
            },
            adam_disc: match cfg.phase {
                Phase::Pretrain => Some(Adam::new(&disc_params, lr)),
                Phase::Adapt => None,
            },
            rng: stream_rng(cfg.seed, stream),
            config_hash: hash,
            iteration: 0,
            skips: SkipCounters::default(),
            depth,
            sem,
            translator,
            disc,
            height,
            rho,
            depth_params,
            sem_params,
            translator_params,
            disc_params,
            height_params,
            cfg,
            data,
        })
    }

    /// Fresh phase-one trainer.
    pub fn new_pretrain(cfg: TrainConfig, data: TrainData<F>) -> Result<Self> {
        if cfg.phase != Phase::Pretrain {
            return Err(Error::Config("new_pretrain requires phase = pretrain".into()));
        }
        Self::build(cfg, data)
    }

    /// Phase-two trainer starting from a pretrain checkpoint.
    ///
    /// Translator and discriminator weights are loaded and frozen; their
    /// optimizer state is discarded. The height section must match the
    /// configured height mode, except that switching to per-class
    /// heights starts that table fresh (only the scale carries over).
    pub fn new_adapt(cfg: TrainConfig, data: TrainData<F>, pretrain_ckpt: &Path) -> Result<Self> {
        if cfg.phase != Phase::Adapt {
            return Err(Error::Config("new_adapt requires phase = adapt".into()));
        }
        let ckpt = Checkpoint::<F>::load(pretrain_ckpt)?;
        if ckpt.phase != Phase::Pretrain.as_str() {
            return Err(Error::Checkpoint {
                path: pretrain_ckpt.to_path_buf(),
                message: format!("expected a pretrain checkpoint, found phase {}", ckpt.phase),
            });
        }
        let mut tr = Self::build(cfg, data)?;
        for name in ["depth", "semantic", "translator", "discriminator"] {
            let section = tr.stored_section(&ckpt, pretrain_ckpt, name)?;
            copy_params_into(&section.params, tr.params_mut(name))?;
        }
        let height = tr.stored_section(&ckpt, pretrain_ckpt, "height")?;
        let same_layout = height.params.entries().len() == tr.height_params.entries().len()
            && height
                .params
                .entries()
                .iter()
                .zip(tr.height_params.entries())
                .all(|(a, b)| a.name == b.name);
        if same_layout {
            copy_params_into(&height.params, &mut tr.height_params)?;
        } else {
            // Height-mode switch: carry only the learnable scale over.
            let src = height
                .params
                .entries()
                .iter()
                .find(|e| e.name == "scale.rho")
                .ok_or_else(|| Error::Checkpoint {
                    path: pretrain_ckpt.to_path_buf(),
                    message: "height section has no scale parameter".into(),
                })?;
            *tr.height_params.get_mut(tr.rho) = src.value.clone();
            log::warn!("height model layout changed; reinitialized everything but the scale");
        }
        Ok(tr)
    }

    /// Continues an interrupted run of the same phase and configuration.
    pub fn resume(cfg: TrainConfig, data: TrainData<F>, ckpt_path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::<F>::load(ckpt_path)?;
        if ckpt.phase != cfg.phase.as_str() {
            return Err(Error::Checkpoint {
                path: ckpt_path.to_path_buf(),
                message: format!(
                    "checkpoint phase {} does not match configured phase {}",
                    ckpt.phase,
                    cfg.phase.as_str()
                ),
            });
        }
        let mut tr = Self::build(cfg, data)?;
        if ckpt.config_hash != tr.config_hash {
            return Err(Error::Checkpoint {
                path: ckpt_path.to_path_buf(),
                message: "checkpoint was written under a different configuration".into(),
            });
        }
        for name in SECTION_NAMES {
            let section = tr.stored_section(&ckpt, ckpt_path, name)?;
            copy_params_into(&section.params, tr.params_mut(name))?;
        }
        let lr = tr.cfg.lr;
        tr.adam_depth = tr.stored_section(&ckpt, ckpt_path, "depth")?.restore_adam(lr);
        tr.adam_sem = tr.stored_section(&ckpt, ckpt_path, "semantic")?.restore_adam(lr);
        tr.adam_height = tr.stored_section(&ckpt, ckpt_path, "height")?.restore_adam(lr);
        if tr.cfg.phase == Phase::Pretrain {
            tr.adam_translator =
                Some(tr.stored_section(&ckpt, ckpt_path, "translator")?.restore_adam(lr));
            tr.adam_disc =
                Some(tr.stored_section(&ckpt, ckpt_path, "discriminator")?.restore_adam(lr));
        }
        tr.iteration = ckpt.iteration;
        tr.rng = ckpt.rng.restore();
        Ok(tr)
    }

    fn stored_section<'c>(
        &self,
        ckpt: &'c Checkpoint<F>,
        path: &Path,
        name: &str,
    ) -> Result<&'c SectionState<F>> {
        ckpt.section(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("missing section {name}"),
        })
    }

    fn params_mut(&mut self, name: &str) -> &mut Params<F> {
        match name {
            "depth" => &mut self.depth_params,
            "semantic" => &mut self.sem_params,
            "translator" => &mut self.translator_params,
            "discriminator" => &mut self.disc_params,
            "height" => &mut self.height_params,
            _ => unreachable!("unknown section {name}"),
        }
    }

    pub fn params(&self, name: &str) -> &Params<F> {
        match name {
            "depth" => &self.depth_params,
            "semantic" => &self.sem_params,
            "translator" => &self.translator_params,
            "discriminator" => &self.disc_params,
            "height" => &self.height_params,
            _ => unreachable!("unknown section {name}"),
        }
    }

    /// Current value of the learnable scale.
    pub fn phi(&self) -> F {
        scale_from_rho(self.height_params.get(self.rho)[[0]])
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let lr = self.cfg.lr;
        let fallback = |params: &Params<F>| Adam::new(params, lr);
        let sections = vec![
            SectionState::capture("depth", &self.depth_params, &self.adam_depth),
            SectionState::capture("semantic", &self.sem_params, &self.adam_sem),
            SectionState::capture(
                "translator",
                &self.translator_params,
                self.adam_translator
                    .as_ref()
                    .unwrap_or(&fallback(&self.translator_params)),
            ),
            SectionState::capture(
                "discriminator",
                &self.disc_params,
                self.adam_disc.as_ref().unwrap_or(&fallback(&self.disc_params)),
            ),
            SectionState::capture("height", &self.height_params, &self.adam_height),
        ];
        Checkpoint {
            config_hash: self.config_hash,
            phase: self.cfg.phase.as_str().to_string(),
            iteration: self.iteration,
            rng: RngState::capture(self.cfg.seed, &self.rng),
            sections,
        }
        .save(path)
    }

    /// One full iteration: batch, forward/backward, optimizer updates.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        self.iteration += 1;
        let n_pairs = self.cfg.batch_size / 2;
        let inv_pairs = 1.0 / n_pairs as f64;
        let w = self.cfg.weights.clone();
        let pretrain = self.cfg.phase == Phase::Pretrain;
        let con_on = self.cfg.ablation.consistency;
        let ins_on = self.cfg.ablation.instances;

        // Fixed draw order: all indices first, then per-pair jitters.
        let mut picks = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let si = self.rng.random_range(0..self.data.source.len());
            let ti = self.rng.random_range(0..self.data.target.len());
            picks.push((si, ti));
        }
        let mut batch = Vec::with_capacity(n_pairs);
        for &(si, ti) in &picks {
            let xs = augment_photometric(
                &self.data.source[si].image_f32,
                &self.cfg.augment,
                &mut self.rng,
            );
            let xt = augment_photometric(
                &self.data.target[ti].image_f32,
                &self.cfg.augment,
                &mut self.rng,
            );
            batch.push((si, ti, to_precision::<F>(&xs), to_precision::<F>(&xt)));
        }

        let mut g_depth = self.depth_params.grads();
        let mut g_sem = self.sem_params.grads();
        let mut g_height = self.height_params.grads();
        let mut g_translator = self.translator_params.grads();
        let mut g_disc = self.disc_params.grads();
        // Generator-side backprop through the discriminator lands here
        // and is thrown away; only the image gradient is kept.
        let mut g_disc_scratch = self.disc_params.grads();

        let mut acc = LossBreakdown::default();
        let phi = self.phi();
        let mut rho_grad_sum = F::zero();

        for (si, ti, xs, xt) in &batch {
            let s = &self.data.source[*si];
            let t = &self.data.target[*ti];

            // ---- Source image through the translator into the depth net.
            let (xst, tr_cache) = self.translator.translate(&self.translator_params, xs)?;
            let (preds_s, dcache_s) = self.depth.forward_depth(&self.depth_params, &xst)?;
            ensure_finite_pred(&preds_s[0], self.iteration)?;
            let (gt, valid) = s.depth.as_ref().expect("source sample carries depth");
            let (l_d, mut d_scales, empty_d) = depth_supervision_loss(&preds_s, gt, valid);
            acc.depth_sup += l_d.to_f64() * inv_pairs;
            let mut g_xst: Option<Array3<F>> = None;
            if empty_d {
                self.skips.depth_masks += 1;
            } else if w.lambda_source > 0.0 {
                let ws = F::from_f64(w.lambda_source * inv_pairs);
                for g in &mut d_scales {
                    g.mapv_inplace(|v| v * ws);
                }
                g_xst = Some(self.depth.backward(&self.depth_params, &dcache_s, &d_scales, &mut g_depth));
            }

            // ---- Adversarial pieces on the same translation (pretrain).
            if pretrain {
                let (score_tr, disc_cache_tr) = self.disc.discriminate(&self.disc_params, &xst)?;
                let (score_tg, disc_cache_tg) = self.disc.discriminate(&self.disc_params, xt)?;
                let gl = gan_losses(&score_tr, &score_tg);
                acc.gan_gen += gl.generator.to_f64() * inv_pairs;
                acc.gan_disc += gl.discriminator.to_f64() * inv_pairs;
                if w.lambda_gan > 0.0 {
                    let wg = F::from_f64(w.lambda_gan * inv_pairs);
                    let g_score = gl.grad_gen_translated.mapv(|v| v * wg);
                    let g_img =
                        self.disc
                            .backward(&self.disc_params, &disc_cache_tr, &g_score, &mut g_disc_scratch);
                    g_xst = Some(match g_xst {
                        Some(g) => g + &g_img,
                        None => g_img,
                    });
                }
                // Discriminator's own objective, against detached inputs.
                let wd = F::from_f64(inv_pairs);
                let g_tr = gl.grad_disc_translated.mapv(|v| v * wd);
                let g_tg = gl.grad_disc_target.mapv(|v| v * wd);
                self.disc.backward(&self.disc_params, &disc_cache_tr, &g_tr, &mut g_disc);
                self.disc.backward(&self.disc_params, &disc_cache_tg, &g_tg, &mut g_disc);
            }

            // The translator trains only in phase one.
            if pretrain {
                if let Some(g) = &g_xst {
                    self.translator
                        .backward(&self.translator_params, &tr_cache, g, &mut g_translator);
                }
            }

            // ---- Semantic branch against source ground truth.
            if con_on {
                let (preds_sem, scache) = self.sem.forward_depth(&self.sem_params, &s.sem_input)?;
                let (l_cs, g_cs, empty_cs) = consistency_source(&preds_sem[0], gt, valid);
                acc.con_source += l_cs.to_f64() * inv_pairs;
                if !empty_cs && w.lambda_source > 0.0 {
                    let ws = F::from_f64(w.lambda_source * inv_pairs);
                    let d_sem = full_res_only(&preds_sem, g_cs.mapv(|v| v * ws));
                    self.sem.backward(&self.sem_params, &scache, &d_sem, &mut g_sem);
                }
            }

            // ---- Height prior on source instances.
            if ins_on {
                let insts: Vec<&PreparedInstance> =
                    s.instances.iter().filter(|i| i.gt_height.is_some()).collect();
                if insts.is_empty() {
                    self.skips.source_instances += 1;
                } else {
                    let (heights, hcache) = self.height.predict(&self.height_params, &insts);
                    let h_gt: Vec<F> = insts
                        .iter()
                        .map(|i| F::from_f64(i.gt_height.unwrap()))
                        .collect();
                    let (l_is, d_h, _) = height_loss_source(&heights, &h_gt);
                    acc.inst_source += l_is.to_f64() * inv_pairs;
                    if w.lambda_source > 0.0 {
                        let ws = F::from_f64(w.lambda_source * inv_pairs);
                        let d_h: Vec<F> = d_h.iter().map(|&g| g * ws).collect();
                        self.height.backward(&self.height_params, &hcache, &d_h, &mut g_height);
                    }
                }
            }

            // ---- Target image through the depth net.
            let (preds_t, dcache_t) = self.depth.forward_depth(&self.depth_params, xt)?;
            ensure_finite_pred(&preds_t[0], self.iteration)?;
            let mut g_t0 = Array3::<F>::zeros(preds_t[0].dim());
            let mut any_t = false;

            // Smoothness weighted by the original target image.
            let (l_sm, g_sm) = smoothness_loss(&preds_t[0], &t.image);
            acc.smooth += l_sm.to_f64() * inv_pairs;
            if w.lambda_smooth > 0.0 {
                let wm = F::from_f64(w.lambda_smooth * inv_pairs);
                g_t0.zip_mut_with(&g_sm, |a, &b| *a = *a + b * wm);
                any_t = true;
            }

            if w.lambda_target > 0.0 {
                let wt = F::from_f64(w.lambda_target * inv_pairs);
                if con_on {
                    let (preds_sem_t, scache_t) =
                        self.sem.forward_depth(&self.sem_params, &t.sem_input)?;
                    let (l_ct, g_cd, g_csm) = consistency_target(&preds_t[0], &preds_sem_t[0]);
                    acc.con_target += l_ct.to_f64() * inv_pairs;
                    g_t0.zip_mut_with(&g_cd, |a, &b| *a = *a + b * wt);
                    any_t = true;
                    let d_sem = full_res_only(&preds_sem_t, g_csm.mapv(|v| v * wt));
                    self.sem.backward(&self.sem_params, &scache_t, &d_sem, &mut g_sem);
                }
                if ins_on {
                    let insts: Vec<&PreparedInstance> = t.instances.iter().collect();
                    if insts.is_empty() {
                        self.skips.target_instances += 1;
                    } else {
                        let fy = self.cfg.ablation.declared_fy_target.unwrap_or(t.fy);
                        let (heights, hcache) = self.height.predict(&self.height_params, &insts);
                        let mut pseudos = Vec::with_capacity(insts.len());
                        let mut slopes = Vec::with_capacity(insts.len());
                        for (inst, &h) in insts.iter().zip(&heights) {
                            let (d, slope) = pseudo_depth(fy, h, inst.pixel_height);
                            pseudos.push(d);
                            slopes.push(slope);
                        }
                        let targets: Vec<TargetInstance<F>> = insts
                            .iter()
                            .zip(&pseudos)
                            .map(|(inst, &d)| TargetInstance {
                                mask: &inst.mask,
                                pseudo_depth: d,
                            })
                            .collect();
                        let til = instance_loss_target(&targets, &preds_t[0], phi);
                        if til.empty {
                            self.skips.target_instances += 1;
                        } else {
                            acc.inst_target += til.value.to_f64() * inv_pairs;
                            g_t0.zip_mut_with(&til.d_pred, |a, &b| *a = *a + b * wt);
                            any_t = true;
                            rho_grad_sum = rho_grad_sum + rho_grad(phi, til.d_phi) * wt;
                            // Pseudo-label gradients reach the height
                            // model only for classes without source
                            // supervision.
                            let mut d_heights = vec![F::zero(); insts.len()];
                            let mut any_h = false;
                            for (k, inst) in insts.iter().enumerate() {
                                if !inst.source_supervised_class {
                                    d_heights[k] = til.d_pseudo[k] * slopes[k] * wt;
                                    any_h = true;
                                }
                            }
                            if any_h {
                                self.height.backward(
                                    &self.height_params,
                                    &hcache,
                                    &d_heights,
                                    &mut g_height,
                                );
                            }
                        }
                    }
                }
            }

            if any_t {
                let d_depths = full_res_only(&preds_t, g_t0);
                self.depth.backward(&self.depth_params, &dcache_t, &d_depths, &mut g_depth);
            }

            // ---- Translator identity on the target image (pretrain).
            if pretrain && w.lambda_identity > 0.0 {
                let (xtt, idt_cache) = self.translator.translate(&self.translator_params, xt)?;
                let (l_idt, g_idt) = identity_loss(&xtt, xt);
                acc.idt += l_idt.to_f64() * inv_pairs;
                let wi = F::from_f64(w.lambda_identity * inv_pairs);
                let g = g_idt.mapv(|v| v * wi);
                self.translator
                    .backward(&self.translator_params, &idt_cache, &g, &mut g_translator);
            }
        }

        if rho_grad_sum != F::zero() {
            let g = ArrayD::from_shape_vec(vec![1], vec![rho_grad_sum]).unwrap();
            g_height.accumulate(self.rho, &g);
        }

        acc.total = total_loss(&acc, &w);
        for (name, value) in acc.terms() {
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iter: self.iteration as usize,
                    term: name.to_string(),
                });
            }
        }

        // Generator-side updates, then the discriminator's own step.
        self.adam_depth.step(&mut self.depth_params, &g_depth);
        self.adam_sem.step(&mut self.sem_params, &g_sem);
        self.adam_height.step(&mut self.height_params, &g_height);
        if let Some(adam) = &mut self.adam_translator {
            adam.step(&mut self.translator_params, &g_translator);
        }
        if let Some(adam) = &mut self.adam_disc {
            adam.step(&mut self.disc_params, &g_disc);
        }
        Ok(acc)
    }

    /// Runs the configured number of iterations, streaming the loss log
    /// and writing the final checkpoint into `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("train_log.jsonl");
        let partial = out_dir.join("train_log.jsonl.partial");
        let file = std::fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut log = std::io::BufWriter::new(file);

        let total = self.cfg.resolved_iterations() as u64;
        let phase = self.cfg.phase.as_str();
        let mut last = LossBreakdown::default();
        while self.iteration < total {
            let bd = self.step()?;
            let iter = self.iteration;
            if iter % self.cfg.log_every as u64 == 0 || iter == total {
                let line = LogLine {
                    iter,
                    phase,
                    losses: &bd,
                };
                serde_json::to_writer(&mut log, &line).map_err(|e| Error::Json {
                    path: partial.clone(),
                    message: e.to_string(),
                })?;
                log.write_all(b"\n").map_err(|e| Error::io(&partial, e))?;
            }
            let cadence = self.cfg.checkpoint_every as u64;
            if cadence > 0 && iter % cadence == 0 && iter < total {
                self.save_checkpoint(&out_dir.join(format!("checkpoint_iter{iter}.ckpt")))?;
            }
            last = bd;
        }
        log.flush().map_err(|e| Error::io(&partial, e))?;
        drop(log);
        std::fs::rename(&partial, &log_path).map_err(|e| Error::io(&log_path, e))?;

        let checkpoint_path = out_dir.join("checkpoint.ckpt");
        self.save_checkpoint(&checkpoint_path)?;
        Ok(TrainOutcome {
            checkpoint_path,
            log_path,
            final_losses: last,
            iterations_run: self.iteration,
        })
    }
}

/// Aborts cleanly when the full-resolution prediction went non-finite,
/// before loss functions with positivity contracts can see it. The head
/// squashes any finite activation into the valid depth range, so a bad
/// sum here always means NaN weights, not large ones.
fn ensure_finite_pred<F: Scalar>(pred: &Array3<F>, iter: u64) -> Result<()> {
    let sum = pred.iter().fold(F::zero(), |a, &v| a + v);
    if sum.to_f64().is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iter: iter as usize,
            term: "depth_pred".into(),
        })
    }
}

/// Gradient list for a multi-scale output where only the full-resolution
/// scale receives a signal.
fn full_res_only<F: Scalar>(preds: &[Array3<F>], g0: Array3<F>) -> Vec<Array3<F>> {
    let mut out = Vec::with_capacity(preds.len());
    out.push(g0);
    for p in &preds[1..] {
        out.push(Array3::zeros(p.dim()));
    }
    out
}

/// Prepares data under `root` and runs one configured phase; adapt
/// phases load `pretrain_ckpt`.
pub fn train_phase(
    root: &Path,
    out_dir: &Path,
    cfg: &TrainConfig,
    pretrain_ckpt: Option<&Path>,
) -> Result<TrainOutcome> {
    let data = TrainData::<f32>::prepare(root, cfg)?;
    let mut trainer = match cfg.phase {
        Phase::Pretrain => Trainer::new_pretrain(cfg.clone(), data)?,
        Phase::Adapt => {
            let ckpt = pretrain_ckpt.ok_or_else(|| {
                Error::Config("the adapt phase requires a pretrain checkpoint".into())
            })?;
            Trainer::new_adapt(cfg.clone(), data, ckpt)?
        }
    };
    trainer.run(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::fixtures::{tiny_config, tiny_data};

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("trainer-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn breakdowns_equal(a: &LossBreakdown, b: &LossBreakdown) -> bool {
        a.terms()
            .iter()
            .zip(b.terms().iter())
            .all(|((_, x), (_, y))| x == y)
    }

    fn snapshot<F: Scalar>(params: &Params<F>) -> Vec<ArrayD<F>> {
        params.entries().iter().map(|e| e.value.clone()).collect()
    }

    fn pretrain_checkpoint(dir: &Path, steps: usize) -> PathBuf {
        let cfg = tiny_config();
        let data = tiny_data::<f64>(&cfg);
        let mut tr = Trainer::new_pretrain(cfg, data).unwrap();
        for _ in 0..steps {
            tr.step().unwrap();
        }
        let path = dir.join("pretrain.ckpt");
        tr.save_checkpoint(&path).unwrap();
        path
    }

    #[test]
    fn identical_seeds_produce_identical_loss_traces() {
        let cfg = tiny_config();
        let mut a = Trainer::new_pretrain(cfg.clone(), tiny_data::<f64>(&cfg)).unwrap();
        let mut b = Trainer::new_pretrain(cfg.clone(), tiny_data::<f64>(&cfg)).unwrap();
        for _ in 0..3 {
            let la = a.step().unwrap();
            let lb = b.step().unwrap();
            assert!(breakdowns_equal(&la, &lb));
        }
        let mut c = Trainer::new_pretrain(
            TrainConfig { seed: 2, ..cfg.clone() },
            tiny_data::<f64>(&cfg),
        )
        .unwrap();
        let lc = c.step().unwrap();
        let mut a2 = Trainer::new_pretrain(cfg.clone(), tiny_data::<f64>(&cfg)).unwrap();
        assert!(!breakdowns_equal(&lc, &a2.step().unwrap()));
    }

    #[test]
    fn pretrain_gates_target_terms_and_trains_all_nets() {
        let cfg = tiny_config();
        let mut tr = Trainer::new_pretrain(cfg.clone(), tiny_data::<f64>(&cfg)).unwrap();
        let tr_before = snapshot(&tr.translator_params);
        let disc_before = snapshot(&tr.disc_params);
        let bd = tr.step().unwrap();
        assert_eq!(bd.con_target, 0.0);
        assert_eq!(bd.inst_target, 0.0);
        assert!(bd.depth_sup > 0.0);
        assert!(bd.con_source > 0.0);
        assert!(bd.inst_source > 0.0);
        assert!(bd.gan_gen > 0.0);
        assert!(bd.gan_disc > 0.0);
        assert!(bd.idt > 0.0);
        assert!(bd.smooth > 0.0);
        assert_ne!(snapshot(&tr.translator_params), tr_before);
        assert_ne!(snapshot(&tr.disc_params), disc_before);
        // phi has no gradient source in pretrain.
        assert_eq!(tr.phi(), 1.0);
    }

    #[test]
    fn adapt_freezes_translator_and_discriminator() {
        let dir = temp_dir("freeze");
        let ckpt = pretrain_checkpoint(&dir, 2);
        let cfg = tiny_config().adapt_variant();
        let mut tr = Trainer::new_adapt(cfg.clone(), tiny_data::<f64>(&cfg), &ckpt).unwrap();
        let tr_before = snapshot(&tr.translator_params);
        let disc_before = snapshot(&tr.disc_params);
        let depth_before = snapshot(&tr.depth_params);
        let phi_before = tr.phi();
        let mut bd = LossBreakdown::default();
        for _ in 0..2 {
            bd = tr.step().unwrap();
        }
        assert_eq!(snapshot(&tr.translator_params), tr_before);
        assert_eq!(snapshot(&tr.disc_params), disc_before);
        assert_ne!(snapshot(&tr.depth_params), depth_before);
        assert_ne!(tr.phi(), phi_before);
        // Adversarial and identity terms are out of the adapt objective.
        assert_eq!(bd.gan_gen, 0.0);
        assert_eq!(bd.gan_disc, 0.0);
        assert_eq!(bd.idt, 0.0);
        assert!(bd.con_target > 0.0);
        assert!(bd.inst_target > 0.0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn adapt_requires_a_pretrain_checkpoint() {
        let dir = temp_dir("phase-check");
        let cfg = tiny_config().adapt_variant();
        // An adapt checkpoint is not a valid starting point.
        let ckpt = {
            let mut tr =
                Trainer::new_adapt(cfg.clone(), tiny_data::<f64>(&cfg), &pretrain_checkpoint(&dir, 1))
                    .unwrap();
            tr.step().unwrap();
            let p = dir.join("adapt.ckpt");
            tr.save_checkpoint(&p).unwrap();
            p
        };
        let err = Trainer::new_adapt(cfg.clone(), tiny_data::<f64>(&cfg), &ckpt)
            .err()
            .expect("adapt checkpoints must be rejected")
            .to_string();
        assert!(err.contains("pretrain"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_roundtrip_continues_bitwise() {
        let dir = temp_dir("roundtrip");
        let cfg = tiny_config();
        let mut a = Trainer::new_pretrain(cfg.clone(), tiny_data::<f64>(&cfg)).unwrap();
        a.step().unwrap();
        a.step().unwrap();
        let ckpt = dir.join("mid.ckpt");
        a.save_checkpoint(&ckpt).unwrap();
        let l3 = a.step().unwrap();

        let mut b = Trainer::resume(cfg.clone(), tiny_data::<f64>(&cfg), &ckpt).unwrap();
        assert_eq!(b.iteration, 2);
        let l3b = b.step().unwrap();
        assert!(breakdowns_equal(&l3, &l3b));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn resume_rejects_changed_configuration() {
        let dir = temp_dir("resume-cfg");
        let ckpt = pretrain_checkpoint(&dir, 1);
        let mut changed = tiny_config();
        changed.lr = 2e-4;
        let err = Trainer::resume(changed.clone(), tiny_data::<f64>(&changed), &ckpt)
            .err()
            .expect("a changed configuration must be rejected")
            .to_string();
        assert!(err.contains("configuration"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ablation_flags_silence_their_terms_and_gradients() {
        let dir = temp_dir("ablate");
        let ckpt = pretrain_checkpoint(&dir, 1);
        let mut cfg = tiny_config().adapt_variant();
        cfg.ablation.consistency = false;
        cfg.ablation.instances = false;
        let mut tr = Trainer::new_adapt(cfg.clone(), tiny_data::<f64>(&cfg), &ckpt).unwrap();
        let sem_before = snapshot(&tr.sem_params);
        let height_before = snapshot(&tr.height_params);
        let bd = tr.step().unwrap();
        assert_eq!(bd.con_source, 0.0);
        assert_eq!(bd.con_target, 0.0);
        assert_eq!(bd.inst_source, 0.0);
        assert_eq!(bd.inst_target, 0.0);
        assert!(bd.depth_sup > 0.0);
        assert!(bd.smooth > 0.0);
        // No gradient reached the silenced branches.
        assert_eq!(snapshot(&tr.sem_params), sem_before);
        assert_eq!(snapshot(&tr.height_params), height_before);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pseudo_label_gradients_respect_source_supervision() {
        use crate::data::Domain;
        use crate::train::fixtures::sample;
        let dir = temp_dir("routing");

        // Source has no instances at all, so nothing supervises heights
        // directly and inst_source is skipped.
        let run = |target_class: u8| -> (Vec<ArrayD<f64>>, Vec<ArrayD<f64>>, f64) {
            let cfg = tiny_config();
            let source = vec![
                sample("s0", Domain::Source, None, 40.0),
                sample("s1", Domain::Source, None, 40.0),
            ];
            let target = vec![
                sample("t0", Domain::Target, Some(target_class), 20.0),
                sample("t1", Domain::Target, Some(target_class), 20.0),
            ];
            let data = TrainData::<f64>::from_samples(&source, &target, &cfg).unwrap();
            let mut pre = Trainer::new_pretrain(cfg.clone(), data.clone()).unwrap();
            pre.step().unwrap();
            let ckpt = dir.join(format!("route-{target_class}.ckpt"));
            pre.save_checkpoint(&ckpt).unwrap();

            let acfg = cfg.adapt_variant();
            let mut tr = Trainer::new_adapt(acfg, data, &ckpt).unwrap();
            let before = snapshot(&tr.height_params);
            tr.step().unwrap();
            (before, snapshot(&tr.height_params), tr.phi().to_f64())
        };

        // With no source instances every class is unsupervised, so the
        // height net moves for any class.
        let (before, after, phi) = run(6);
        let fc_changed = before[..before.len() - 1]
            .iter()
            .zip(&after[..after.len() - 1])
            .any(|(a, b)| a != b);
        assert!(fc_changed, "unsupervised class should move the height net");
        assert_ne!(phi, 1.0, "scale always receives gradient");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn supervised_class_detaches_height_net_in_target_loss() {
        use crate::data::Domain;
        use crate::train::fixtures::sample;
        let dir = temp_dir("detach");
        let cfg = tiny_config();
        let target = vec![
            sample("t0", Domain::Target, Some(2), 20.0),
            sample("t1", Domain::Target, Some(2), 20.0),
        ];
        // A source corpus containing class 2 marks target instances of
        // that class as supervised.
        let with_class = vec![
            sample("s0", Domain::Source, Some(2), 40.0),
            sample("s1", Domain::Source, Some(2), 40.0),
        ];
        let marked = TrainData::<f64>::from_samples(&with_class, &target, &cfg).unwrap();
        assert!(marked.target[0].instances[0].source_supervised_class);

        // Isolate the pseudo-label path: no source instances at all, so
        // the height net can only move through inst_target, and the
        // supervised flag is forced on by hand.
        let source_free = vec![
            sample("s0", Domain::Source, None, 40.0),
            sample("s1", Domain::Source, None, 40.0),
        ];
        let acfg = cfg.adapt_variant();
        let mut data2 = TrainData::<f64>::from_samples(&source_free, &target, &cfg).unwrap();
        for t in &mut data2.target {
            for inst in &mut t.instances {
                inst.source_supervised_class = true;
            }
        }
        let mut pre2 = Trainer::new_pretrain(cfg.clone(), data2.clone()).unwrap();
        pre2.step().unwrap();
        let ckpt2 = dir.join("pre2.ckpt");
        pre2.save_checkpoint(&ckpt2).unwrap();
        let mut tr2 = Trainer::new_adapt(acfg.clone(), data2.clone(), &ckpt2).unwrap();
        let before = snapshot(&tr2.height_params);
        let bd = tr2.step().unwrap();
        assert!(bd.inst_target > 0.0);
        let after = snapshot(&tr2.height_params);
        // Height net entries (all but trailing scale) unchanged.
        assert_eq!(
            before[..before.len() - 1].to_vec(),
            after[..after.len() - 1].to_vec(),
            "supervised classes must not move the height net through pseudo-labels"
        );
        assert_ne!(before[before.len() - 1], after[after.len() - 1], "phi still learns");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn per_class_height_mode_swaps_the_section_layout() {
        let dir = temp_dir("per-class");
        let ckpt = pretrain_checkpoint(&dir, 1);
        let mut cfg = tiny_config().adapt_variant();
        cfg.ablation.per_class_height = true;
        let mut tr = Trainer::new_adapt(cfg.clone(), tiny_data::<f64>(&cfg), &ckpt).unwrap();
        let names: Vec<_> = tr
            .height_params
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .collect();
        assert_eq!(names, vec!["height.per_class", "scale.rho"]);
        let before = snapshot(&tr.height_params);
        tr.step().unwrap();
        assert_ne!(snapshot(&tr.height_params), before);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn divergence_names_the_offending_term() {
        let cfg = tiny_config();
        let mut tr = Trainer::new_pretrain(cfg.clone(), tiny_data::<f64>(&cfg)).unwrap();
        // Poison every depth weight; the head then emits non-finite
        // predictions that no later activation can mask.
        for e in tr.depth_params.entries_mut() {
            e.value.fill(f64::NAN);
        }
        let err = tr.step().unwrap_err();
        match err {
            Error::Diverged { iter, term } => {
                assert_eq!(iter, 1);
                assert_eq!(term, "depth_pred");
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn run_writes_log_and_checkpoint() {
        let dir = temp_dir("run");
        let cfg = TrainConfig {
            iterations: Some(3),
            ..tiny_config()
        };
        let mut tr = Trainer::new_pretrain(cfg.clone(), tiny_data::<f64>(&cfg)).unwrap();
        let out = tr.run(&dir).unwrap();
        assert_eq!(out.iterations_run, 3);
        let log = std::fs::read_to_string(&out.log_path).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines.len(), 3);
        for (i, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["iter"], (i + 1) as u64);
            assert_eq!(v["phase"], "pretrain");
            assert!(v["losses"]["depth_sup"].is_number());
            assert!(v["losses"]["total"].is_number());
        }
        assert!(!dir.join("train_log.jsonl.partial").exists());
        assert!(out.checkpoint_path.exists());
        let ck = Checkpoint::<f64>::load(&out.checkpoint_path).unwrap();
        assert_eq!(ck.iteration, 3);
        assert_eq!(ck.phase, "pretrain");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn declared_focal_length_changes_the_pseudo_labels() {
        let dir = temp_dir("fy");
        let ckpt = pretrain_checkpoint(&dir, 1);
        let base = tiny_config().adapt_variant();
        let mut tr1 = Trainer::new_adapt(base.clone(), tiny_data::<f64>(&base), &ckpt).unwrap();
        let l1 = tr1.step().unwrap();
        let mut cfg2 = base.clone();
        cfg2.ablation.declared_fy_target = Some(40.0);
        let mut tr2 = Trainer::new_adapt(cfg2.clone(), tiny_data::<f64>(&cfg2), &ckpt).unwrap();
        let l2 = tr2.step().unwrap();
        assert!(l1.inst_target > 0.0);
        assert!(l2.inst_target > 0.0);
        assert_ne!(l1.inst_target, l2.inst_target);
        std::fs::remove_dir_all(&dir).ok();
    }
}
