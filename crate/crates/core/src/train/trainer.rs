use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::detect::{
    detect_crude_gradient, detect_crude_psnr, gamma_schedule, gradient_deficit, quality_deficit, EmaTracker,
    FailureType, RefinementStack,
};
use super::model::{Gradients, Model, Optimizer};
use super::view::{backward_view, render_view, ViewRender};
use crate::anchors::{grow_anchors, prune_anchors, DensifyStats};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::loss::{ms_ssim, psnr, ssim, total_loss};
use crate::math::{adam_step, AdamState};
use crate::render::{Camera, Image};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Coarse,
    Fine,
    Refine,
    Done,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Coarse => 1,
            Stage::Fine => 2,
            Stage::Refine => 3,
            Stage::Done => 4,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        [Stage::Coarse, Stage::Fine, Stage::Refine, Stage::Done].get(n.checked_sub(1)? as usize).copied()
    }
}

/// Position in the schedule: the stage and the number of iterations of it
/// already completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub stage: Stage,
    pub iteration: u64,
}

/// The two crude-view detectors and their call counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrudeViewDetector {
    pub psnr: EmaTracker,
    pub grad: EmaTracker,
    pub calls: u64,
}

impl CrudeViewDetector {
    pub fn new(momentum: Real) -> Self {
        Self {
            psnr: EmaTracker::new(momentum),
            grad: EmaTracker::new(momentum),
            calls: 0,
        }
    }

    /// Runs both detectors on one rendered view and records flags in `stack`
    /// unless `suppress` is set. Returns (quality flag, gradient flag).
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        &mut self,
        stack: &mut RefinementStack,
        camera_id: usize,
        view_psnr: Real,
        grad_norm: Real,
        gamma: Real,
        iteration: u64,
        suppress: bool,
    ) -> (bool, bool) {
        self.calls += 1;
        let q = detect_crude_psnr(&mut self.psnr, view_psnr, gamma);
        let g = detect_crude_gradient(&mut self.grad, grad_norm, gamma);
        if suppress {
            return (false, false);
        }
        if q.flagged {
            let t = q.threshold.expect("flag implies threshold");
            stack.update(camera_id, FailureType::Quality, quality_deficit(view_psnr, t), iteration);
        }
        if g.flagged {
            let t = g.threshold.expect("flag implies threshold");
            stack.update(camera_id, FailureType::Gradient, gradient_deficit(grad_norm, t), iteration);
        }
        (q.flagged, g.flagged)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: Stage,
    pub iteration: u64,
    pub frame: usize,
    pub camera_id: usize,
    pub time: Real,
    pub loss: Real,
    pub l1: Real,
    pub ssim: Real,
    pub tv: Real,
    pub vol: Real,
    pub psnr: Real,
    pub anchors: usize,
    pub gaussians: usize,
    pub flag_quality: bool,
    pub flag_gradient: bool,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,stage,iteration,frame,camera_id,time,loss,l1,ssim,tv,vol,psnr,anchors,gaussians,flag_quality,flag_gradient";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage.number(),
            self.iteration,
            self.frame,
            self.camera_id,
            self.time,
            self.loss,
            self.l1,
            self.ssim,
            self.tv,
            self.vol,
            self.psnr,
            self.anchors,
            self.gaussians,
            self.flag_quality as u8,
            self.flag_gradient as u8
        )
    }
}

/// Per-frame evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub camera_id: usize,
    pub time: Real,
    pub psnr: Real,
    pub ssim: Real,
    pub ms_ssim: Option<Real>,
}

/// Complete training state; everything here is persisted in checkpoints.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    pub stats: DensifyStats,
    pub detector: CrudeViewDetector,
    pub stack: RefinementStack,
    pub cursor: Cursor,
    /// Total optimization steps taken.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Cameras used by the dataset, kept for rendering without the images.
    pub cameras: Vec<(usize, Camera)>,
    /// Mean flagged-view PSNR before and after stage 3.
    pub refine_psnr: (Option<Real>, Option<Real>),
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(&dataset.points, dataset.bbox_min, dataset.bbox_max, &config.model, &mut rng)?;
        let optimizer = Optimizer::new(&model);
        let stats = DensifyStats::new(model.anchors.len(), model.k(), 0);
        let cameras = dataset
            .camera_ids()
            .into_iter()
            .map(|id| (id, dataset.camera(id).expect("id from dataset").clone()))
            .collect();
        Ok(Self {
            detector: CrudeViewDetector::new(config.detect.momentum),
            config,
            model,
            optimizer,
            stats,
            stack: RefinementStack::default(),
            cursor: Cursor {
                stage: Stage::Coarse,
                iteration: 0,
            },
            step: 0,
            rng,
            cameras,
            refine_psnr: (None, None),
        })
    }

    pub fn stage_length(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Coarse => self.config.stage1_iterations,
            Stage::Fine => self.config.stage2_iterations,
            Stage::Refine => self.config.stage3_iterations,
            Stage::Done => 0,
        }
    }

    /// Whether renders go through the deformation field.
    pub fn deformation_active(&self) -> bool {
        self.cursor.stage > Stage::Coarse
    }

    pub fn camera(&self, camera_id: usize) -> Option<&Camera> {
        self.cameras.iter().find(|(id, _)| *id == camera_id).map(|(_, c)| c)
    }

    /// Renders the current model.
    pub fn render(&self, camera: &Camera, t: Real) -> Result<ViewRender> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("render time {t} outside [0, 1]")));
        }
        let time = self.deformation_active().then_some(t);
        render_view(&self.model, camera, time, self.config.background)
    }

    pub fn render_image(&self, camera: &Camera, t: Real) -> Result<Image> {
        Ok(self.render(camera, t)?.output.image)
    }

    /// Scores every frame of `dataset` (or the listed subset).
    pub fn evaluate(&self, dataset: &Dataset, frames: Option<&[usize]>) -> Result<Vec<FrameScore>> {
        let all: Vec<usize> = (0..dataset.frames.len()).collect();
        let idx = frames.unwrap_or(&all);
        idx.iter()
            .map(|&i| {
                let f = &dataset.frames[i];
                let img = self.render_image(&f.camera, f.time)?;
                Ok(FrameScore {
                    frame: i,
                    camera_id: f.camera_id,
                    time: f.time,
                    psnr: psnr(&img, &f.image)?,
                    ssim: ssim(&img, &f.image)?,
                    ms_ssim: ms_ssim(&img, &f.image).ok(),
                })
            })
            .collect()
    }

    pub fn mean_psnr(&self, dataset: &Dataset, frames: Option<&[usize]>) -> Result<Real> {
        let s = self.evaluate(dataset, frames)?;
        Ok(s.iter().map(|f| f.psnr).sum::<Real>() / s.len().max(1) as Real)
    }

    /// Frames of every camera currently in the refinement stack.
    pub fn flagged_frames(&self, dataset: &Dataset) -> Vec<usize> {
        (0..dataset.frames.len())
            .filter(|&i| self.stack.get(dataset.frames[i].camera_id).is_some())
            .collect()
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        for (id, cam) in &self.cameras {
            match dataset.camera(*id) {
                Some(c) if c.width == cam.width && c.height == cam.height => {}
                _ => return Err(Error::Contract(format!("dataset does not match the trained camera {id}"))),
            }
        }
        Ok(())
    }

    /// Moves to the next stage. Entering stage 3 with an empty stack skips it.
    fn advance_stage(&mut self, dataset: &Dataset) -> Result<()> {
        let next = match self.cursor.stage {
            Stage::Coarse => Stage::Fine,
            Stage::Fine => Stage::Refine,
            Stage::Refine | Stage::Done => Stage::Done,
        };
        if self.cursor.stage == Stage::Refine {
            let frames = self.flagged_frames(dataset);
            self.refine_psnr.1 = Some(self.mean_psnr(dataset, Some(&frames))?);
            log::info!(
                "stage 3 done: flagged-view PSNR {:.3} -> {:.3} dB",
                self.refine_psnr.0.unwrap_or(Real::NAN),
                self.refine_psnr.1.unwrap_or(Real::NAN)
            );
        }
        self.cursor = Cursor { stage: next, iteration: 0 };
        self.stats.reset(self.model.anchors.len(), 0);
        if next == Stage::Refine {
            if self.stack.is_empty() {
                log::info!("refinement stack is empty; skipping stage 3");
                self.cursor.stage = Stage::Done;
            } else {
                let frames = self.flagged_frames(dataset);
                self.refine_psnr.0 = Some(self.mean_psnr(dataset, Some(&frames))?);
                log::info!(
                    "stage 3: {} flagged cameras, flagged-view PSNR {:.3} dB",
                    self.stack.len(),
                    self.refine_psnr.0.unwrap_or(Real::NAN)
                );
            }
        }
        Ok(())
    }

    fn sample_frame(&mut self, dataset: &Dataset) -> usize {
        match self.cursor.stage {
            Stage::Refine => {
                let cam = self.stack.sample(&mut self.rng).expect("stage 3 runs with a non-empty stack");
                let frames = dataset.frames_of(cam);
                frames[self.rng.random_range(0..frames.len())]
            }
            _ => self.rng.random_range(0..dataset.frames.len()),
        }
    }

    fn learning_rate_step(&self) -> u64 {
        match self.cursor.stage {
            Stage::Coarse => 0,
            Stage::Fine => self.cursor.iteration,
            Stage::Refine | Stage::Done => self.config.lr_decay_steps(),
        }
    }

    /// Runs one optimization step of the current stage. Returns `None` when
    /// training is finished.
    pub fn step(&mut self, dataset: &Dataset) -> Result<Option<MetricsRow>> {
        while self.cursor.stage != Stage::Done && self.cursor.iteration >= self.stage_length(self.cursor.stage) {
            self.advance_stage(dataset)?;
        }
        if self.cursor.stage == Stage::Done {
            return Ok(None);
        }
        let stage = self.cursor.stage;
        let frame_idx = self.sample_frame(dataset);
        let frame = &dataset.frames[frame_idx];
        let deform = stage != Stage::Coarse;
        let it = self.cursor.iteration;
        let fail = move |what: String| Error::Numeric(format!("stage {} iteration {it}: {what}", stage.number()));

        let view = render_view(&self.model, &frame.camera, deform.then_some(frame.time), self.config.background)?;
        let field = deform.then_some(&self.model.field);
        let loss = match total_loss(view.image(), &frame.image, field, view.gaussians(), &self.config.loss) {
            Ok(l) => l,
            Err(Error::Numeric(m)) => return Err(fail(m)),
            Err(e) => return Err(e),
        };
        let view_psnr = psnr(view.image(), &frame.image)?;
        let mut grads = Gradients::zeros(&self.model);
        if let Some(df) = &loss.d_field {
            grads.field.iter_mut().zip(df).for_each(|(g, d)| *g += d);
        }
        let gstats = backward_view(&self.model, &view, &frame.camera, &loss.d_image, &loss.d_scales, &mut grads)?;

        let k = self.model.k();
        for (local, &ai) in view.visible.iter().enumerate() {
            for slot in 0..k {
                let gi = local * k + slot;
                if let Some(n) = gstats.viewspace[gi] {
                    self.stats.record_gradient(ai, slot, n);
                }
                self.stats.record_opacity(ai, view.canonical[gi].opacity);
            }
        }

        self.apply_gradients(&grads, deform).map_err(|e| match e {
            Error::Numeric(m) => fail(m),
            e => e,
        })?;
        self.model.check_finite().map_err(|_| fail("parameters became non-finite".into()))?;

        let (mut fq, mut fg) = (false, false);
        if stage == Stage::Fine {
            let d = &self.config.detect;
            let gamma = gamma_schedule(d.gamma_start, d.gamma_end, self.cursor.iteration, self.config.stage2_iterations);
            let suppress = self.cursor.iteration < d.warmup;
            (fq, fg) = self.detector.observe(
                &mut self.stack,
                frame.camera_id,
                view_psnr,
                gstats.mean_viewspace,
                gamma,
                self.cursor.iteration,
                suppress,
            );
        }

        let row = MetricsRow {
            step: self.step,
            stage,
            iteration: self.cursor.iteration,
            frame: frame_idx,
            camera_id: frame.camera_id,
            time: frame.time,
            loss: loss.value,
            l1: loss.color.l1,
            ssim: loss.color.ssim,
            tv: loss.tv,
            vol: loss.vol,
            psnr: view_psnr,
            anchors: self.model.anchors.len(),
            gaussians: view.gaussians().len(),
            flag_quality: fq,
            flag_gradient: fg,
        };
        self.cursor.iteration += 1;
        self.step += 1;
        self.densify();
        Ok(Some(row))
    }

    fn apply_gradients(&mut self, g: &Gradients, deform: bool) -> Result<()> {
        let lrs = &self.config.lr;
        let step = self.learning_rate_step();
        let max = self.config.lr_decay_steps();
        let lr = |p: super::config::LrPair| p.schedule(max).value(step);
        let m = &mut self.model;
        let o = &mut self.optimizer;

        let fdim = m.feature_dim();
        let k = m.k();
        let mut feature: Vec<Real> = m.anchors.iter().flat_map(|a| a.feature.iter().copied()).collect();
        adam_step(&mut feature, &g.feature, &mut o.feature, lr(lrs.feature))?;
        let mut offsets: Vec<Real> = m.anchors.iter().flat_map(|a| a.offsets.iter().flatten().copied()).collect();
        adam_step(&mut offsets, &g.offsets, &mut o.offsets, lr(lrs.offsets))?;
        let mut log_scale: Vec<Real> = m.anchors.iter().flat_map(|a| a.scale.map(Real::ln)).collect();
        adam_step(&mut log_scale, &g.log_scale, &mut o.anchor_scale, lr(lrs.anchor_scale))?;
        for (i, a) in m.anchors.iter_mut().enumerate() {
            a.feature.copy_from_slice(&feature[i * fdim..(i + 1) * fdim]);
            for (s, o) in a.offsets.iter_mut().enumerate() {
                let b = (i * k + s) * 3;
                *o = [offsets[b], offsets[b + 1], offsets[b + 2]];
            }
            a.scale = [0, 1, 2].map(|j| log_scale[i * 3 + j].exp());
        }

        let step_net = |net: &mut crate::math::Mlp, grads: &[Real], state: &mut AdamState, rate: Real| {
            adam_step(net.params_mut(), grads, state, rate)
        };
        step_net(&mut m.heads.opacity, &g.heads.opacity, &mut o.opacity_head, lr(lrs.opacity_head))?;
        step_net(&mut m.heads.color, &g.heads.color, &mut o.color_head, lr(lrs.color_head))?;
        step_net(&mut m.heads.scale, &g.heads.scale, &mut o.scale_head, lr(lrs.covariance_head))?;
        step_net(&mut m.heads.rotation, &g.heads.rotation, &mut o.rotation_head, lr(lrs.covariance_head))?;
        if deform {
            adam_step(m.field.params_mut(), &g.field, &mut o.grid, lr(lrs.grid))?;
            let d = lr(lrs.decoder);
            step_net(&mut m.decoders.fuser, &g.decoders.fuser, &mut o.fuser, d)?;
            step_net(&mut m.decoders.position, &g.decoders.position, &mut o.position_decoder, d)?;
            step_net(&mut m.decoders.rotation, &g.decoders.rotation, &mut o.rotation_decoder, d)?;
            step_net(&mut m.decoders.scale, &g.decoders.scale, &mut o.scale_decoder, d)?;
        }
        Ok(())
    }

    /// Growth and pruning at the scheduled per-stage iterations.
    fn densify(&mut self) {
        let d = self.config.densify;
        let (grow, prune) = d.active(self.cursor.iteration);
        if !grow && !prune {
            return;
        }
        let (tau_g, tau_a) = if self.cursor.stage == Stage::Refine {
            (d.refine_grad_threshold, d.refine_opacity_threshold)
        } else {
            (d.grad_threshold, d.opacity_threshold)
        };
        let m = &mut self.model;
        let (fdim, k) = (m.feature_dim(), m.k());
        let grown = if grow {
            grow_anchors(&m.anchors, &self.stats, m.voxel_size, tau_g, &mut m.next_anchor_id)
        } else {
            Vec::new()
        };
        let before = m.anchors.len();
        if prune && !self.stats.is_empty() {
            let keep = prune_anchors(&m.anchors, &self.stats, tau_a);
            // never prune the scene away entirely
            if !keep.is_empty() && keep.len() < m.anchors.len() {
                let old = std::mem::take(&mut m.anchors);
                m.anchors = keep.iter().map(|&i| old[i].clone()).collect();
                self.optimizer.retain_anchors(&keep, fdim, k);
            }
        }
        let pruned = before - m.anchors.len();
        if !grown.is_empty() {
            self.optimizer.push_anchors(grown.len(), fdim, k);
            m.anchors.extend(grown.iter().cloned());
        }
        if !grown.is_empty() || pruned > 0 {
            log::debug!(
                "stage {} iteration {}: grew {}, pruned {}, {} anchors",
                self.cursor.stage.number(),
                self.cursor.iteration,
                grown.len(),
                pruned,
                m.anchors.len()
            );
        }
        self.stats.reset(m.anchors.len(), self.cursor.iteration);
    }

    /// Steps until the current stage is `stage` no longer.
    fn run_while(&mut self, dataset: &Dataset, stage: Stage, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<()> {
        self.check_dataset(dataset)?;
        loop {
            while self.cursor.stage != Stage::Done && self.cursor.iteration >= self.stage_length(self.cursor.stage) {
                if self.cursor.stage != stage {
                    break;
                }
                self.advance_stage(dataset)?;
            }
            if self.cursor.stage != stage {
                return Ok(());
            }
            if let Some(row) = self.step(dataset)? {
                on_row(&row);
            }
        }
    }

    /// Static training on all timestamps without deformation.
    pub fn run_stage1_coarse(&mut self, dataset: &Dataset) -> Result<()> {
        self.run_while(dataset, Stage::Coarse, &mut |_| {})
    }

    /// Deformation training with crude-view detection; returns the stack.
    pub fn run_stage2_fine(&mut self, dataset: &Dataset) -> Result<&RefinementStack> {
        self.run_while(dataset, Stage::Fine, &mut |_| {})?;
        Ok(&self.stack)
    }

    /// Training focused on the flagged cameras.
    pub fn run_stage3_refine(&mut self, dataset: &Dataset) -> Result<()> {
        self.run_while(dataset, Stage::Refine, &mut |_| {})
    }

    /// Runs to completion. `on_stage_end` is called after every finished stage
    /// with the stage that just ended.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        on_row: &mut dyn FnMut(&MetricsRow),
        on_stage_end: &mut dyn FnMut(&Trainer, Stage) -> Result<()>,
    ) -> Result<()> {
        while self.cursor.stage != Stage::Done {
            let stage = self.cursor.stage;
            self.run_while(dataset, stage, on_row)?;
            on_stage_end(self, stage)?;
        }
        Ok(())
    }
}
