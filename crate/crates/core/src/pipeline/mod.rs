//! Scenes, synthetic data, training, baking and checkpoints.

mod synth;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{render_opacity, render_rays, RadianceField, RenderSettings};
use crate::geometry::{
    all_pixels, backproject_frame, generate_rays, Camera, PointCloud, RgbdFrame,
};
use crate::objectives::LossConfig;
use crate::raster::Image;
use crate::sparse::{quantize, SparseTensor};

/// Opacity below which a rendered pixel has no depth.
pub const MIN_DEPTH_OPACITY: f64 = 0.5;

pub use synth::{
    build_field, generate_synthetic_scene, max_pairwise_overlap, view_overlap, SynthObject,
    SynthSpec, GT_DENSITY,
};
pub use train::{
    bake, evaluate_views, lr_at_epoch, sample_patch_batch, train, view_metrics, AdamState,
    Checkpoint, EvalRecord, RngState, StepRecord, TrainLog, Trainer, ViewMetrics,
};

/// A captured scene: seen views feed the network, novel views are held out.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seen: Vec<RgbdFrame>,
    pub novel: Vec<RgbdFrame>,
    pub ground_truth: Option<RadianceField>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.seen.is_empty() {
            return Err(Error::invalid(format!(
                "scene {} has no seen views",
                self.id
            )));
        }
        for f in self.seen.iter().chain(&self.novel) {
            f.validate()?;
        }
        Ok(())
    }

    /// Back-projection of every seen view into one colored cloud.
    pub fn fused_cloud(&self) -> PointCloud {
        let mut cloud = PointCloud::default();
        for f in &self.seen {
            cloud.extend(&backproject_frame(f));
        }
        cloud
    }

    /// Quantized network input of the fused seen views.
    pub fn input_tensor(&self, voxel_size: f64) -> Result<SparseTensor> {
        let cloud = self.fused_cloud();
        if cloud.is_empty() {
            return Err(Error::invalid(format!(
                "scene {} has no valid depth in its seen views",
                self.id
            )));
        }
        quantize(&cloud, voxel_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is divided by ten.
    pub decay_epochs: Vec<usize>,
    pub patches_per_view: usize,
    pub patch_size: usize,
    pub voxel_size: f64,
    pub augment_prob: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Ray sampling range shared by every view.
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 240,
            lr: 1e-3,
            decay_epochs: vec![120, 200],
            patches_per_view: 2,
            patch_size: 40,
            voxel_size: 4e-3,
            augment_prob: 0.5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            near: 0.1,
            far: 4.0,
            background: [1.0; 3],
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if let Some(&last) = self.decay_epochs.iter().max() {
            if self.epochs <= last {
                return Err(Error::invalid(format!(
                    "epochs ({}) must exceed the last decay epoch ({last})",
                    self.epochs
                )));
            }
        }
        if self.patch_size < 1 << self.loss.percep_levels {
            return Err(Error::invalid(format!(
                "patch size {} is below the perceptual minimum {}",
                self.patch_size,
                1usize << self.loss.percep_levels
            )));
        }
        if self.patches_per_view == 0 {
            return Err(Error::invalid("need at least one patch per view"));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::invalid(
                "augmentation probability must lie in [0, 1]",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "Adam epsilon must be positive and weight decay non-negative",
            ));
        }
        self.render_settings(1).validate()
    }

    /// Render settings for a field at `stride`: half-cell steps.
    pub fn render_settings(&self, stride: i32) -> RenderSettings {
        let mut s = RenderSettings::for_cell(self.voxel_size * stride as f64, self.near, self.far);
        s.background = self.background;
        s
    }
}

/// RGB and camera-z depth of a field seen by `camera`. Depth is the
/// opacity-normalized termination distance converted to z; pixels whose
/// accumulated opacity is below one half get depth 0 (invalid).
pub fn render_view(
    field: &RadianceField,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(Image, Image)> {
    camera.validate()?;
    let rays = generate_rays(camera, &all_pixels(camera))?;
    let out = render_rays(field, &rays, settings)?;
    let opacity = render_opacity(field, &rays, settings)?;
    let mut rgb = Image::new(camera.width, camera.height, 3);
    let mut depth = Image::new(camera.width, camera.height, 1);
    for ((ray, v), acc) in rays.iter().zip(&out).zip(opacity) {
        let (row, col) = ray.pixel;
        rgb.pixel_mut(row, col).copy_from_slice(&v[..3]);
        if acc >= MIN_DEPTH_OPACITY {
            depth.set(row, col, 0, v[3] / acc * camera.z_per_distance(row, col));
        }
    }
    Ok((rgb, depth))
}
