//! Training losses and image/depth evaluation metrics.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::raster::Image;

pub const PSNR_CAP: f64 = 99.0;
const NORMALIZE_EPS: f64 = 1e-10;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const BLUR: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_depth: f64,
    pub lambda_percep: f64,
    /// Coarse to fine.
    pub lambda_stage: Vec<f64>,
    /// Pyramid levels of the perceptual feature extractor.
    pub percep_levels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_depth: 0.1,
            lambda_percep: 0.01,
            lambda_stage: vec![0.25, 0.5, 1.0],
            percep_levels: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, stages: usize) -> Result<()> {
        let weights = [self.lambda_depth, self.lambda_percep];
        if weights
            .iter()
            .chain(&self.lambda_stage)
            .any(|&w| !(w >= 0.0 && w.is_finite()))
        {
            return Err(Error::invalid(
                "loss weights must be finite and non-negative",
            ));
        }
        if self.lambda_stage.len() != stages {
            return Err(Error::invalid(format!(
                "{} stage weights for {stages} network stages",
                self.lambda_stage.len()
            )));
        }
        if self.percep_levels == 0 {
            return Err(Error::invalid(
                "the perceptual extractor needs at least one level",
            ));
        }
        Ok(())
    }
}

/// Square pixel block of one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patch {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

/// Square patches of equal size with their rays and supervision, patch by
/// patch, pixels row-major inside each patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub size: usize,
    pub patches: Vec<Patch>,
    pub rays: Vec<Ray>,
    pub color: Vec<[f64; 3]>,
    /// Target termination distance along each ray.
    pub depth: Vec<f64>,
    pub depth_valid: Vec<bool>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.patches.len() * self.size * self.size;
        if self.rays.len() != n
            || self.color.len() != n
            || self.depth.len() != n
            || self.depth_valid.len() != n
        {
            return Err(Error::invalid(format!(
                "patch batch of {} patches of size {} needs {n} rays and targets",
                self.patches.len(),
                self.size
            )));
        }
        Ok(())
    }
}

fn check_pred(pred: &Tensor, batch: &PatchBatch) -> Result<()> {
    batch.validate()?;
    if pred.shape() != (batch.len(), 4) {
        return Err(Error::invalid(format!(
            "predictions {:?} do not match {} rays x [r, g, b, depth]",
            pred.shape(),
            batch.len()
        )));
    }
    Ok(())
}

/// Color MSE over all rays plus `lambda_depth` times depth MSE over rays with
/// valid depth. `pred` rows are `[r, g, b, depth]`.
pub fn render_loss(pred: &Tensor, batch: &PatchBatch, lambda_depth: f64) -> Result<f64> {
    check_pred(pred, batch)?;
    let n = batch.len();
    let mut color = 0.0;
    let mut depth = 0.0;
    let mut valid = 0usize;
    for i in 0..n {
        let p = pred.row(i);
        for c in 0..3 {
            color += (p[c] - batch.color[i][c]).powi(2);
        }
        if batch.depth_valid[i] {
            depth += (p[3] - batch.depth[i]).powi(2);
            valid += 1;
        }
    }
    let color = if n == 0 { 0.0 } else { color / (3 * n) as f64 };
    let depth = if valid == 0 {
        0.0
    } else {
        depth / valid as f64
    };
    Ok(color + lambda_depth * depth)
}

struct RenderLossOp {
    batch: Arc<PatchBatch>,
    lambda_depth: f64,
}

impl Op for RenderLossOp {
    fn name(&self) -> &'static str {
        "render_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let pred = inputs[0];
        let b = &self.batch;
        let n = b.len();
        let valid = b.depth_valid.iter().filter(|&&v| v).count();
        let g = grad.data()[0];
        let mut d = Tensor::zeros(n, 4);
        let cs = if n == 0 {
            0.0
        } else {
            2.0 * g / (3 * n) as f64
        };
        let ds = if valid == 0 {
            0.0
        } else {
            2.0 * g * self.lambda_depth / valid as f64
        };
        for i in 0..n {
            let p = pred.row(i);
            let row = &mut d.data_mut()[i * 4..i * 4 + 4];
            for c in 0..3 {
                row[c] = cs * (p[c] - b.color[i][c]);
            }
            if b.depth_valid[i] {
                row[3] = ds * (p[3] - b.depth[i]);
            }
        }
        Ok(vec![Some(d)])
    }
}

pub fn render_loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    batch: &Arc<PatchBatch>,
    lambda_depth: f64,
) -> Result<Var> {
    let value = render_loss(tape.value(pred), batch, lambda_depth)?;
    Ok(tape.record(
        RenderLossOp {
            batch: batch.clone(),
            lambda_depth,
        },
        &[pred],
        Tensor::scalar(value),
    ))
}

/// Features of one extractor layer: `positions x channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub positions: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Fixed multi-layer feature extractor for square RGB patches
/// (`size * size * 3` values, row-major, channels last).
pub trait FeatureExtractor: Send + Sync {
    fn min_size(&self) -> usize;
    fn layer_weights(&self) -> Vec<f64>;
    fn extract(&self, patch: &[f64], size: usize) -> Result<Vec<FeatureMap>>;
    /// Gradient w.r.t. the patch of `sum_l <grads[l], features_l>`.
    fn vjp(&self, patch: &[f64], size: usize, grads: &[FeatureMap]) -> Result<Vec<f64>>;
}

/// Sparse matrix rows: `(input index, weight)` per output value.
#[derive(Debug)]
struct LinearLayer {
    positions: usize,
    rows: Vec<Vec<(u32, f64)>>,
}

/// Blur-and-downsample pyramid with luminance and finite-difference
/// gradient features at every level. The map is linear, so it is tabulated
/// once per patch size from impulse responses.
pub struct GradientPyramid {
    levels: usize,
    cache: Mutex<HashMap<usize, Arc<Vec<LinearLayer>>>>,
}

impl GradientPyramid {
    pub fn new(levels: usize) -> Self {
        Self {
            levels: levels.max(1),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn blur_down(img: &[f64], size: usize) -> (Vec<f64>, usize) {
        let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
        let mut tmp = vec![0.0; size * size];
        for r in 0..size {
            for c in 0..size {
                tmp[r * size + c] = (0..5)
                    .map(|k| BLUR[k] * img[r * size + clamp(c as isize + k as isize - 2)])
                    .sum();
            }
        }
        let half = size / 2;
        let mut out = vec![0.0; half * half];
        for r in 0..half {
            for c in 0..half {
                out[r * half + c] = (0..5)
                    .map(|k| BLUR[k] * tmp[clamp(2 * r as isize + k as isize - 2) * size + 2 * c])
                    .sum();
            }
        }
        (out, half)
    }

    fn features(&self, patch: &[f64], size: usize) -> Vec<FeatureMap> {
        let mut lum: Vec<f64> = patch
            .chunks(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        let mut s = size;
        let mut out = Vec::with_capacity(self.levels);
        for _ in 0..self.levels {
            let (next, ns) = Self::blur_down(&lum, s);
            lum = next;
            s = ns;
            let mut values = Vec::with_capacity(s * s * 3);
            for r in 0..s {
                for c in 0..s {
                    let v = lum[r * s + c];
                    let gx = if c + 1 < s {
                        lum[r * s + c + 1] - v
                    } else {
                        0.0
                    };
                    let gy = if r + 1 < s {
                        lum[(r + 1) * s + c] - v
                    } else {
                        0.0
                    };
                    values.extend_from_slice(&[v, gx, gy]);
                }
            }
            out.push(FeatureMap {
                positions: s * s,
                channels: 3,
                values,
            });
        }
        out
    }

    fn layers(&self, size: usize) -> Arc<Vec<LinearLayer>> {
        let mut cache = self.cache.lock().expect("extractor cache lock");
        cache
            .entry(size)
            .or_insert_with(|| {
                let n = size * size * 3;
                let mut impulse = vec![0.0; n];
                let shapes = self.features(&impulse, size);
                let mut layers: Vec<LinearLayer> = shapes
                    .iter()
                    .map(|f| LinearLayer {
                        positions: f.positions,
                        rows: vec![Vec::new(); f.values.len()],
                    })
                    .collect();
                for j in 0..n {
                    impulse[j] = 1.0;
                    for (layer, f) in layers.iter_mut().zip(self.features(&impulse, size)) {
                        for (i, v) in f.values.iter().enumerate() {
                            if *v != 0.0 {
                                layer.rows[i].push((j as u32, *v));
                            }
                        }
                    }
                    impulse[j] = 0.0;
                }
                Arc::new(layers)
            })
            .clone()
    }

    fn check(&self, patch: &[f64], size: usize) -> Result<()> {
        if size < self.min_size() {
            return Err(Error::invalid(format!(
                "patch size {size} is below the extractor minimum {}",
                self.min_size()
            )));
        }
        if patch.len() != size * size * 3 {
            return Err(Error::invalid("patch data does not match its size"));
        }
        Ok(())
    }
}

impl FeatureExtractor for GradientPyramid {
    fn min_size(&self) -> usize {
        1 << self.levels
    }

    fn layer_weights(&self) -> Vec<f64> {
        vec![1.0; self.levels]
    }

    fn extract(&self, patch: &[f64], size: usize) -> Result<Vec<FeatureMap>> {
        self.check(patch, size)?;
        Ok(self
            .layers(size)
            .iter()
            .map(|l| FeatureMap {
                positions: l.positions,
                channels: 3,
                values: l
                    .rows
                    .iter()
                    .map(|row| row.iter().map(|&(j, w)| w * patch[j as usize]).sum())
                    .collect(),
            })
            .collect())
    }

    fn vjp(&self, patch: &[f64], size: usize, grads: &[FeatureMap]) -> Result<Vec<f64>> {
        self.check(patch, size)?;
        let layers = self.layers(size);
        if grads.len() != layers.len() {
            return Err(Error::invalid(
                "one gradient map per extractor layer is required",
            ));
        }
        let mut out = vec![0.0; patch.len()];
        for (l, g) in layers.iter().zip(grads) {
            for (row, gv) in l.rows.iter().zip(&g.values) {
                for &(j, w) in row {
                    out[j as usize] += w * gv;
                }
            }
        }
        Ok(out)
    }
}

fn normalize_rows(f: &FeatureMap) -> Vec<f64> {
    let mut out = f.values.clone();
    for row in out.chunks_mut(f.channels) {
        let n = (row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
        for v in row {
            *v /= n;
        }
    }
    out
}

/// Loss and its gradient w.r.t. `pred` for one patch pair.
fn perceptual_patch(
    pred: &[f64],
    gt: &[f64],
    size: usize,
    extractor: &dyn FeatureExtractor,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let fp = extractor.extract(pred, size)?;
    let fg = extractor.extract(gt, size)?;
    let weights = extractor.layer_weights();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(fp.len());
    for ((a, b), w) in fp.iter().zip(&fg).zip(&weights) {
        let (na, nb) = (normalize_rows(a), normalize_rows(b));
        let scale = w / a.positions as f64;
        loss += scale
            * na.iter()
                .zip(&nb)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
        if want_grad {
            // through y / sqrt(|y|^2 + eps): g / n - y (y . g) / n^3
            let mut g = vec![0.0; a.values.len()];
            for p in 0..a.positions {
                let s = p * a.channels..(p + 1) * a.channels;
                let y = &a.values[s.clone()];
                let n2 = y.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS;
                let n = n2.sqrt();
                let gh: Vec<f64> = na[s.clone()]
                    .iter()
                    .zip(&nb[s.clone()])
                    .map(|(x, y)| 2.0 * scale * (x - y))
                    .collect();
                let dot: f64 = y.iter().zip(&gh).map(|(a, b)| a * b).sum();
                for ((dst, yv), gv) in g[s].iter_mut().zip(y).zip(&gh) {
                    *dst = gv / n - yv * dot / (n2 * n);
                }
            }
            grads.push(FeatureMap {
                positions: a.positions,
                channels: a.channels,
                values: g,
            });
        }
    }
    let grad = if want_grad {
        Some(extractor.vjp(pred, size, &grads)?)
    } else {
        None
    };
    Ok((loss, grad))
}

/// Perceptual distance between two square RGB patches (`size * size * 3`).
pub fn perceptual_loss(
    pred: &[f64],
    gt: &[f64],
    size: usize,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "perceptual loss needs equally sized patches",
        ));
    }
    Ok(perceptual_patch(pred, gt, size, extractor, false)?.0)
}

fn patch_colors(values: impl Fn(usize) -> [f64; 3], start: usize, size: usize) -> Vec<f64> {
    (start..start + size * size).flat_map(values).collect()
}

/// Mean perceptual loss over the patches of a batch.
pub fn batch_perceptual_loss(
    pred: &Tensor,
    batch: &PatchBatch,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    check_pred(pred, batch)?;
    let area = batch.size * batch.size;
    let mut total = 0.0;
    for p in 0..batch.patches.len() {
        let a = patch_colors(
            |i| [pred.row(i)[0], pred.row(i)[1], pred.row(i)[2]],
            p * area,
            batch.size,
        );
        let b = patch_colors(|i| batch.color[i], p * area, batch.size);
        total += perceptual_loss(&a, &b, batch.size, extractor)?;
    }
    Ok(if batch.patches.is_empty() {
        0.0
    } else {
        total / batch.patches.len() as f64
    })
}

struct PerceptualOp {
    batch: Arc<PatchBatch>,
    extractor: Arc<dyn FeatureExtractor>,
}

impl Op for PerceptualOp {
    fn name(&self) -> &'static str {
        "perceptual_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let pred = inputs[0];
        let b = &self.batch;
        let area = b.size * b.size;
        let scale = grad.data()[0] / b.patches.len().max(1) as f64;
        let mut d = Tensor::zeros(pred.rows(), 4);
        for p in 0..b.patches.len() {
            let a = patch_colors(
                |i| [pred.row(i)[0], pred.row(i)[1], pred.row(i)[2]],
                p * area,
                b.size,
            );
            let t = patch_colors(|i| b.color[i], p * area, b.size);
            let g = perceptual_patch(&a, &t, b.size, self.extractor.as_ref(), true)?
                .1
                .unwrap_or_default();
            for (k, px) in g.chunks(3).enumerate() {
                let row = p * area + k;
                for c in 0..3 {
                    d.data_mut()[row * 4 + c] = scale * px[c];
                }
            }
        }
        Ok(vec![Some(d)])
    }
}

pub fn perceptual_loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    batch: &Arc<PatchBatch>,
    extractor: &Arc<dyn FeatureExtractor>,
) -> Result<Var> {
    let value = batch_perceptual_loss(tape.value(pred), batch, extractor.as_ref())?;
    Ok(tape.record(
        PerceptualOp {
            batch: batch.clone(),
            extractor: extractor.clone(),
        },
        &[pred],
        Tensor::scalar(value),
    ))
}

/// `sum_s lambda_stage[s] * (render_s + lambda_percep * percep_s)` over
/// per-stage predictions (`rays x [r, g, b, depth]`), coarse to fine.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    stage_preds: &[Var],
    batch: &Arc<PatchBatch>,
    config: &LossConfig,
    extractor: &Arc<dyn FeatureExtractor>,
) -> Result<Var> {
    config.validate(stage_preds.len())?;
    let mut terms = Vec::new();
    let mut weights = Vec::new();
    for (&pred, &ls) in stage_preds.iter().zip(&config.lambda_stage) {
        terms.push(render_loss_on_tape(tape, pred, batch, config.lambda_depth)?);
        weights.push(ls);
        if config.lambda_percep > 0.0 {
            terms.push(perceptual_loss_on_tape(tape, pred, batch, extractor)?);
            weights.push(ls * config.lambda_percep);
        }
    }
    tape.weighted_sum(&terms, &weights)
}

/// Plain-value counterpart of [`total_loss_on_tape`].
pub fn total_loss(
    stage_preds: &[Tensor],
    batch: &PatchBatch,
    config: &LossConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    config.validate(stage_preds.len())?;
    let mut total = 0.0;
    for (pred, &ls) in stage_preds.iter().zip(&config.lambda_stage) {
        let mut stage = render_loss(pred, batch, config.lambda_depth)?;
        if config.lambda_percep > 0.0 {
            stage += config.lambda_percep * batch_perceptual_loss(pred, batch, extractor)?;
        }
        total += ls * stage;
    }
    Ok(total)
}

fn check_images(pred: &Image, gt: &Image) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            gt.height(),
            gt.width(),
            gt.channels()
        )));
    }
    if pred.data().is_empty() {
        return Err(Error::invalid("images are empty"));
    }
    Ok(())
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_images(pred, gt)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio for unit peak value, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged
/// over all full-window positions and channels.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_images(pred, gt)?;
    let (h, w, ch) = (pred.height(), pred.width(), pred.channels());
    if h < 11 || w < 11 {
        return Err(Error::invalid(format!(
            "SSIM needs at least 11x11 pixels, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for r in 0..=h - 11 {
            for q in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i] * win[j];
                        let x = pred.get(r + i, q + j, c);
                        let y = gt.get(r + i, q + j, c);
                        mx += k * x;
                        my += k * y;
                        sxx += k * x * x;
                        syy += k * y * y;
                        sxy += k * x * y;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean squared depth error over `mask`; `None` when no pixel is valid.
pub fn depth_error(pred: &Image, gt: &Image, mask: &[bool]) -> Result<Option<f64>> {
    check_images(pred, gt)?;
    if pred.channels() != 1 || mask.len() != pred.data().len() {
        return Err(Error::invalid(
            "depth error needs single-channel maps and one mask entry per pixel",
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &m) in pred.data().iter().zip(gt.data()).zip(mask) {
        if m {
            sum += (a - b).powi(2);
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, patches: usize, size: usize) -> PatchBatch {
        let n = patches * size * size;
        PatchBatch {
            size,
            patches: (0..patches)
                .map(|v| Patch {
                    view: v,
                    row: 0,
                    col: 0,
                })
                .collect(),
            rays: (0..n)
                .map(|i| Ray {
                    origin: Vec3::zeros(),
                    direction: Vec3::z(),
                    pixel: (i / size, i % size),
                })
                .collect(),
            color: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
            depth: (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
            depth_valid: (0..n).map(|_| rng.gen_bool(0.7)).collect(),
        }
    }

    fn exact_pred(b: &PatchBatch) -> Tensor {
        let data = (0..b.len())
            .flat_map(|i| [b.color[i][0], b.color[i][1], b.color[i][2], b.depth[i]])
            .collect();
        Tensor::from_vec(b.len(), 4, data).unwrap()
    }

    fn noisy_pred(rng: &mut ChaCha8Rng, b: &PatchBatch) -> Tensor {
        let mut t = exact_pred(b);
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        t
    }

    #[test]
    fn render_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(&mut rng, 2, 3);
        assert_eq!(render_loss(&exact_pred(&b), &b, 0.1).unwrap(), 0.0);

        let two = PatchBatch {
            size: 1,
            patches: vec![
                Patch {
                    view: 0,
                    row: 0,
                    col: 0,
                },
                Patch {
                    view: 0,
                    row: 0,
                    col: 1,
                },
            ],
            rays: b.rays[..2].to_vec(),
            color: vec![[0.0, 0.5, 1.0], [1.0, 1.0, 1.0]],
            depth: vec![1.0, 2.0],
            depth_valid: vec![true, false],
        };
        let pred = Tensor::from_vec(2, 4, vec![0.1, 0.5, 0.7, 1.5, 1.0, 0.8, 1.0, 9.0]).unwrap();
        // colors: (0.01 + 0 + 0.09 + 0 + 0.04 + 0) / 6; depth: 0.25 / 1
        let want = 0.14 / 6.0 + 0.5 * 0.25;
        assert!((render_loss(&pred, &two, 0.5).unwrap() - want).abs() < 1e-15);

        let mut invalid = two.clone();
        invalid.depth_valid = vec![false, false];
        assert_eq!(
            render_loss(&pred, &invalid, 0.5).unwrap(),
            render_loss(&pred, &invalid, 0.0).unwrap()
        );
        assert!((render_loss(&pred, &invalid, 0.5).unwrap() - 0.14 / 6.0).abs() < 1e-15);

        let short = Tensor::zeros(1, 4);
        assert!(render_loss(&short, &two, 0.5).is_err());
    }

    fn fd_check(f: impl Fn(&Tensor) -> f64, analytic: &Tensor, at: &Tensor, tol: f64) {
        let eps = 1e-6;
        for i in 0..at.len() {
            let mut p = at.clone();
            p.data_mut()[i] += eps;
            let fp = f(&p);
            p.data_mut()[i] -= 2.0 * eps;
            let fm = f(&p);
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= tol * (1.0 + a.abs()),
                "entry {i}: {a} vs {numeric}"
            );
        }
    }

    fn tape_grad(build: impl Fn(&mut Tape, Var) -> Var, at: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.param(at.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss).unwrap().get(x).unwrap().clone()
    }

    #[test]
    fn render_loss_gradient_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Arc::new(batch(&mut rng, 2, 3));
        let pred = noisy_pred(&mut rng, &b);
        let g = tape_grad(|t, x| render_loss_on_tape(t, x, &b, 0.3).unwrap(), &pred);
        fd_check(|p| render_loss(p, &b, 0.3).unwrap(), &g, &pred, 1e-5);
        for i in 0..b.len() {
            if !b.depth_valid[i] {
                assert_eq!(g.row(i)[3], 0.0);
            }
        }
    }

    #[test]
    fn extractor_is_linear_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = GradientPyramid::new(3);
        let size = 12;
        let x: Vec<f64> = (0..size * size * 3).map(|_| rng.gen()).collect();
        let direct = ex.features(&x, size);
        let tabulated = ex.extract(&x, size).unwrap();
        for (a, b) in direct.iter().zip(&tabulated) {
            assert_eq!(a.positions, b.positions);
            for (u, v) in a.values.iter().zip(&b.values) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        let g: Vec<FeatureMap> = direct
            .iter()
            .map(|f| FeatureMap {
                values: (0..f.values.len())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
                ..f.clone()
            })
            .collect();
        let lhs: f64 = direct
            .iter()
            .zip(&g)
            .map(|(f, g)| {
                f.values
                    .iter()
                    .zip(&g.values)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        let back = ex.vjp(&x, size, &g).unwrap();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!(
            [
                direct[0].positions,
                direct[1].positions,
                direct[2].positions
            ],
            [36, 9, 1]
        );
    }

    #[test]
    fn perceptual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = GradientPyramid::new(3);
        let size = 8;
        let a: Vec<f64> = (0..size * size * 3).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..size * size * 3).map(|_| rng.gen()).collect();
        assert_eq!(perceptual_loss(&a, &a, size, &ex).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, size, &ex).unwrap();
        let ba = perceptual_loss(&b, &a, size, &ex).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-15);
        let flat = vec![0.4; size * size * 3];
        let noisy: Vec<f64> = flat
            .iter()
            .map(|v| v + rng.gen_range(-0.05..0.05))
            .collect();
        assert!(perceptual_loss(&flat, &noisy, size, &ex).unwrap() > 0.0);
        assert!(perceptual_loss(&a[..48], &b[..48], 4, &ex).is_err());
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Arc::new(batch(&mut rng, 2, 8));
        let pred = noisy_pred(&mut rng, &b);
        let ex: Arc<dyn FeatureExtractor> = Arc::new(GradientPyramid::new(3));
        let g = tape_grad(
            |t, x| perceptual_loss_on_tape(t, x, &b, &ex).unwrap(),
            &pred,
        );
        fd_check(
            |p| batch_perceptual_loss(p, &b, ex.as_ref()).unwrap(),
            &g,
            &pred,
            1e-5,
        );
    }

    #[test]
    fn total_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = Arc::new(batch(&mut rng, 1, 8));
        let ex: Arc<dyn FeatureExtractor> = Arc::new(GradientPyramid::new(3));
        let p1 = noisy_pred(&mut rng, &b);
        let p2 = noisy_pred(&mut rng, &b);
        let single = LossConfig {
            lambda_stage: vec![1.0],
            lambda_percep: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(
            total_loss(&[p1.clone()], &b, &single, ex.as_ref()).unwrap(),
            render_loss(&p1, &b, single.lambda_depth).unwrap()
        );
        let zero = LossConfig {
            lambda_stage: vec![0.0, 0.0],
            ..LossConfig::default()
        };
        assert_eq!(
            total_loss(&[p1.clone(), p2.clone()], &b, &zero, ex.as_ref()).unwrap(),
            0.0
        );

        let two = LossConfig {
            lambda_stage: vec![0.3, 0.7],
            lambda_percep: 0.2,
            lambda_depth: 0.1,
            percep_levels: 3,
        };
        let stage = |p: &Tensor| {
            render_loss(p, &b, 0.1).unwrap()
                + 0.2 * batch_perceptual_loss(p, &b, ex.as_ref()).unwrap()
        };
        let want = 0.3 * stage(&p1) + 0.7 * stage(&p2);
        let got = total_loss(&[p1.clone(), p2.clone()], &b, &two, ex.as_ref()).unwrap();
        assert!((got - want).abs() < 1e-14);

        let mut tape = Tape::new();
        let v1 = tape.constant(p1.clone());
        let v2 = tape.constant(p2.clone());
        let t = total_loss_on_tape(&mut tape, &[v1, v2], &b, &two, &ex).unwrap();
        assert!((tape.value(t).item().unwrap() - want).abs() < 1e-14);

        // linear in each stage weight
        let doubled = LossConfig {
            lambda_stage: vec![0.6, 0.7],
            ..two.clone()
        };
        let d = total_loss(&[p1.clone(), p2.clone()], &b, &doubled, ex.as_ref()).unwrap();
        assert!((d - got - 0.3 * stage(&p1)).abs() < 1e-14);
        assert!(total_loss(&[p1], &b, &two, ex.as_ref()).is_err());
    }

    #[test]
    fn image_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen()).collect();
        let a = Image::from_data(16, 16, 3, data).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let shifted =
            Image::from_data(16, 16, 3, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&shifted, &a).unwrap() - 20.0).abs() < 1e-9);
        let noisy = Image::from_data(
            16,
            16,
            3,
            a.data()
                .iter()
                .map(|v| v + rng.gen_range(-0.3..0.3))
                .collect(),
        )
        .unwrap();
        let s = ssim(&noisy, &a).unwrap();
        assert!(s < 1.0 && s > -1.0);
        assert!(ssim(&Image::new(8, 8, 3), &Image::new(8, 8, 3)).is_err());

        let d = Image::from_data(4, 4, 1, (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let d2 = Image::from_data(4, 4, 1, d.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((depth_error(&d2, &d, &[true; 16]).unwrap().unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(depth_error(&d2, &d, &[false; 16]).unwrap(), None);
    }
}
