//! Patch sampling, the optimization loop, evaluation and baking.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_view, Scene, TrainConfig};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::field::{render_rays_on_tape, RadianceField, RenderSettings};
use crate::geometry::{generate_rays, RgbdFrame, RigidRotation, Vec3};
use crate::net::{self, NetConfig, NetParams};
use crate::objectives::{
    batch_perceptual_loss, depth_error, psnr, render_loss, ssim, total_loss_on_tape,
    FeatureExtractor, GradientPyramid, Patch, PatchBatch,
};
use crate::sparse::quantize;

/// Learning rate during 1-based `epoch`: divided by ten after each decay epoch.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = config.decay_epochs.iter().filter(|&&d| epoch > d).count();
    config.lr * 0.1f64.powi(decays as i32)
}

/// `patches_per_view` uniformly placed square patches from every seen view.
/// Depth targets are ray distances.
pub fn sample_patch_batch(
    scene: &Scene,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PatchBatch> {
    sample_frames(&scene.seen, config, rng)
}

fn sample_frames(
    frames: &[RgbdFrame],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PatchBatch> {
    let size = config.patch_size;
    if size == 0 || config.patches_per_view == 0 {
        return Err(Error::invalid(
            "patch size and patches per view must be positive",
        ));
    }
    let n = frames.len() * config.patches_per_view * size * size;
    let mut batch = PatchBatch {
        size,
        patches: Vec::new(),
        rays: Vec::with_capacity(n),
        color: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        depth_valid: Vec::with_capacity(n),
    };
    for (view, frame) in frames.iter().enumerate() {
        let cam = &frame.camera;
        if cam.width < size || cam.height < size {
            return Err(Error::invalid(format!(
                "view {view} is {}x{}, smaller than the {size}x{size} patch",
                cam.height, cam.width
            )));
        }
        for _ in 0..config.patches_per_view {
            let row = rng.gen_range(0..=cam.height - size);
            let col = rng.gen_range(0..=cam.width - size);
            batch.patches.push(Patch { view, row, col });
            let pixels: Vec<(usize, usize)> = (0..size)
                .flat_map(|r| (0..size).map(move |c| (row + r, col + c)))
                .collect();
            batch.rays.extend(generate_rays(cam, &pixels)?);
            for &(r, c) in &pixels {
                let px = frame.rgb.pixel(r, c);
                batch.color.push([px[0], px[1], px[2]]);
                match frame.depth_at(r, c) {
                    Some(z) => {
                        batch.depth.push(z / cam.z_per_distance(r, c));
                        batch.depth_valid.push(true);
                    }
                    None => {
                        batch.depth.push(0.0);
                        batch.depth_valid.push(false);
                    }
                }
            }
        }
    }
    Ok(batch)
}

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One step with decoupled weight decay.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::invalid(
                "optimizer state does not match the parameter count",
            ));
        }
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * config.weight_decay;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
        Ok(())
    }
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: u64,
    pub epoch: usize,
    pub scene: String,
    pub lr: f64,
    pub loss: f64,
    /// Per stage, coarse to fine.
    pub render_loss: Vec<f64>,
    pub percep_loss: Vec<f64>,
    pub augmented: bool,
    /// Voxels of the finest stage.
    pub voxels: usize,
}

/// Novel-view metrics averaged over a scene's held-out views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub scene: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_error: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
    pub params: NetParams,
    pub adam: AdamState,
    pub rng: RngState,
}

pub struct Trainer {
    net: NetConfig,
    config: TrainConfig,
    params: NetParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: u64,
    extractor: Arc<dyn FeatureExtractor>,
}

impl Trainer {
    pub fn new(net: NetConfig, config: TrainConfig) -> Result<Self> {
        let params = NetParams::init(&net, config.seed)?;
        let adam = AdamState::new(params.count());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::assemble(net, config, params, adam, rng, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let rng = ckpt.rng.restore();
        Self::assemble(
            ckpt.net,
            ckpt.config,
            ckpt.params,
            ckpt.adam,
            rng,
            ckpt.step,
        )
    }

    fn assemble(
        net: NetConfig,
        config: TrainConfig,
        params: NetParams,
        adam: AdamState,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self> {
        net.validate()?;
        config.validate()?;
        config.loss.validate(net.decoder_channels.len())?;
        if adam.m.len() != params.count() || adam.v.len() != params.count() {
            return Err(Error::invalid(
                "optimizer state does not match the parameter count",
            ));
        }
        let extractor: Arc<dyn FeatureExtractor> =
            Arc::new(GradientPyramid::new(config.loss.percep_levels));
        Ok(Self {
            net,
            config,
            params,
            adam,
            rng,
            step,
            extractor,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Replaces the perceptual feature extractor.
    pub fn with_extractor(mut self, extractor: Arc<dyn FeatureExtractor>) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn into_params(self) -> NetParams {
        self.params
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One optimization step on the next scene in round-robin order.
    pub fn step(&mut self, scenes: &[Scene]) -> Result<StepRecord> {
        if scenes.is_empty() {
            return Err(Error::invalid("no scenes to train on"));
        }
        let index = (self.step % scenes.len() as u64) as usize;
        let scene = &scenes[index];
        scene.validate()?;
        let epoch = (self.step / scenes.len() as u64) as usize + 1;
        let lr = lr_at_epoch(&self.config, epoch);

        let mut cloud = scene.fused_cloud();
        if cloud.is_empty() {
            return Err(Error::invalid(format!(
                "scene {} has no valid depth in its seen views",
                scene.id
            )));
        }
        let augmented = self.rng.gen::<f64>() < self.config.augment_prob;
        let rotated_frames;
        let frames: &[RgbdFrame] = if augmented {
            let angle = self.rng.gen_range(0.0..2.0 * PI);
            let pivot = cloud.centroid().unwrap_or_else(Vec3::zeros);
            let rot = RigidRotation::new(angle, Vec3::z(), pivot)?;
            cloud
                .positions
                .iter_mut()
                .for_each(|p| *p = rot.apply_point(p));
            rotated_frames = scene
                .seen
                .iter()
                .map(|f| RgbdFrame {
                    camera: rot.apply_camera(&f.camera),
                    ..f.clone()
                })
                .collect::<Vec<_>>();
            &rotated_frames
        } else {
            &scene.seen
        };
        let batch = Arc::new(sample_frames(frames, &self.config, &mut self.rng)?);
        let input = quantize(&cloud, self.config.voxel_size)?;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = net::forward(&mut tape, &input, &bound, &self.net, self.config.voxel_size)?;
        let rays = Arc::new(batch.rays.clone());
        let mut preds = Vec::with_capacity(out.stages.len());
        for stage in &out.stages {
            let geom = Arc::new(stage.geometry(self.config.voxel_size, Vec3::zeros())?);
            let settings = self.stage_settings(stage.stride);
            preds.push(render_rays_on_tape(
                &mut tape,
                stage.feats,
                geom,
                rays.clone(),
                &settings,
            )?);
        }
        let loss = total_loss_on_tape(
            &mut tape,
            &preds,
            &batch,
            &self.config.loss,
            &self.extractor,
        )?;
        let value = tape.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at step {} on scene {}",
                self.step + 1,
                scene.id
            )));
        }
        let mut render = Vec::with_capacity(preds.len());
        let mut percep = Vec::with_capacity(preds.len());
        for &p in &preds {
            let t: &Tensor = tape.value(p);
            render.push(render_loss(t, &batch, self.config.loss.lambda_depth)?);
            percep.push(if self.config.loss.lambda_percep > 0.0 {
                batch_perceptual_loss(t, &batch, self.extractor.as_ref())?
            } else {
                0.0
            });
        }
        let grads = tape.backward(loss)?;
        let grad = bound.flat_grad(&tape, &grads);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient at step {} on scene {}",
                self.step + 1,
                scene.id
            )));
        }
        let mut flat = self.params.flat();
        self.adam.update(&mut flat, &grad, lr, &self.config)?;
        self.params.set_flat(&flat)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch,
            scene: scene.id.clone(),
            lr,
            loss: value,
            render_loss: render,
            percep_loss: percep,
            augmented,
            voxels: out.finest().coords.len(),
        })
    }

    fn stage_settings(&self, stride: i32) -> RenderSettings {
        let mut s = self.config.render_settings(stride);
        s.shift = self.net.density_shift;
        s
    }

    /// Steps until `config.epochs` epochs are complete, evaluating
    /// `validation` after every epoch. Records are appended to `log`.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        validation: Option<&Scene>,
        log: &mut TrainLog,
    ) -> Result<()> {
        let total = self.config.epochs as u64 * scenes.len() as u64;
        self.run_until(total, scenes, validation, log)
    }

    /// Like [`Trainer::run`] but stops once `steps` steps are done in total.
    pub fn run_until(
        &mut self,
        steps: u64,
        scenes: &[Scene],
        validation: Option<&Scene>,
        log: &mut TrainLog,
    ) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::invalid("no scenes to train on"));
        }
        let start = Instant::now();
        let per_epoch = scenes.len() as u64;
        while self.step < steps {
            let rec = self.step(scenes)?;
            log.steps.push(rec);
            if self.step % per_epoch == 0 {
                if let Some(val) = validation {
                    let epoch = (self.step / per_epoch) as usize;
                    log.evals.push(self.evaluate(val, epoch)?);
                }
            }
        }
        log.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }

    fn evaluate(&self, scene: &Scene, epoch: usize) -> Result<EvalRecord> {
        let field = bake(&self.params, &self.net, scene, &self.config)?;
        let metrics = evaluate_views(&field, &scene.novel, &self.render_settings_for(&field))?;
        let n = metrics.len().max(1) as f64;
        let depths: Vec<f64> = metrics.iter().filter_map(|m| m.depth_error).collect();
        Ok(EvalRecord {
            epoch,
            step: self.step,
            scene: scene.id.clone(),
            psnr: metrics.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: metrics.iter().map(|m| m.ssim).sum::<f64>() / n,
            depth_error: (!depths.is_empty())
                .then(|| depths.iter().sum::<f64>() / depths.len() as f64),
        })
    }

    /// Render settings matching a baked field of this trainer.
    pub fn render_settings_for(&self, field: &RadianceField) -> RenderSettings {
        self.stage_settings(field.stride())
    }
}

/// Trains one shared parameter set on all `scenes` from scratch.
pub fn train(
    scenes: &[Scene],
    net: &NetConfig,
    config: &TrainConfig,
) -> Result<(NetParams, TrainLog)> {
    let mut trainer = Trainer::new(net.clone(), config.clone())?;
    let mut log = TrainLog::default();
    trainer.run(scenes, None, &mut log)?;
    Ok((trainer.into_params(), log))
}

/// One network pass on the fused seen views; the finest stage becomes the
/// explicit field.
pub fn bake(
    params: &NetParams,
    net: &NetConfig,
    scene: &Scene,
    config: &TrainConfig,
) -> Result<RadianceField> {
    let input = scene.input_tensor(config.voxel_size)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = net::forward(&mut tape, &input, &bound, net, config.voxel_size)?;
    out.finest()
        .to_field(&tape, config.voxel_size, Vec3::zeros())
}

/// Image metrics of one rendered view against its captured frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub depth_error: Option<f64>,
}

pub fn view_metrics(
    rgb: &crate::raster::Image,
    depth: &crate::raster::Image,
    gt: &RgbdFrame,
) -> Result<ViewMetrics> {
    let mask: Vec<bool> = (0..gt.camera.height)
        .flat_map(|r| (0..gt.camera.width).map(move |c| (r, c)))
        .map(|(r, c)| gt.depth_at(r, c).is_some())
        .collect();
    Ok(ViewMetrics {
        psnr: psnr(rgb, &gt.rgb)?,
        ssim: ssim(rgb, &gt.rgb)?,
        depth_error: depth_error(depth, &gt.depth, &mask)?,
    })
}

/// Renders `field` from every frame's camera and scores it against the frame.
pub fn evaluate_views(
    field: &RadianceField,
    frames: &[RgbdFrame],
    settings: &RenderSettings,
) -> Result<Vec<ViewMetrics>> {
    frames
        .iter()
        .map(|f| {
            let (rgb, depth) = render_view(field, &f.camera, settings)?;
            view_metrics(&rgb, &depth, f)
        })
        .collect()
}
