//! Ray marching, alpha compositing and the matching gradients.

use std::sync::Arc;

use rayon::prelude::*;

use super::sh::{sh_basis, sh_basis_unchecked, sh_logits, SH_BASIS, SH_COEFFS};
use super::{
    Corners, FieldGeometry, RadianceField, RenderSettings, ABSENT, DENSITY_CHANNEL, FIELD_CHANNELS,
};
use crate::autodiff::{sigmoid, softplus, Op, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{all_pixels, generate_rays};
use crate::geometry::{Camera, Ray, Vec3};
use crate::raster::Image;

/// Rays per parallel work item when rendering.
const RAY_CHUNK: usize = 64;
/// Fixed number of partial gradient buffers, independent of the thread count.
const GRAD_CHUNKS: usize = 8;
const MIN_RAYS_PER_GRAD_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct RayResult {
    pub color: [f64; 3],
    /// Expected termination distance along the ray.
    pub depth: f64,
    /// Per-sample `T_i * alpha_i`.
    pub weights: Vec<f64>,
    /// Transmittance left after the last sample.
    pub transmittance: f64,
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    corners: Corners,
    present: bool,
    sigma: f64,
    alpha: f64,
    /// Transmittance in front of this sample.
    trans: f64,
    color: [f64; 3],
    dist: f64,
}

const NO_CORNERS: Corners = Corners {
    rows: [ABSENT; 8],
    weights: [0.0; 8],
};

/// Samples along one ray, with colors and transmittances filled in.
fn march(
    geom: &FieldGeometry,
    feats: &[f64],
    ray: &Ray,
    basis: &[f64; SH_BASIS],
    settings: &RenderSettings,
    out: &mut Vec<Sample>,
) {
    out.clear();
    let n = settings.sample_count();
    let span = geom
        .support()
        .and_then(|b| b.intersect(&ray.origin, &ray.direction));
    let empty_sigma = softplus(settings.empty_density + settings.shift);
    let mut trans = 1.0;
    for i in 0..n {
        let t = settings.sample_distance(i);
        let inside = span.is_some_and(|(a, b)| t >= a && t <= b);
        let corners = if inside {
            geom.corners(&(ray.origin + t * ray.direction))
        } else {
            NO_CORNERS
        };
        let present = inside && corners.any_present();
        let (sigma, color) = if present {
            let mut k = [0.0; SH_COEFFS];
            let mut raw = 0.0;
            for (&r, &w) in corners.rows.iter().zip(&corners.weights) {
                if r == ABSENT {
                    raw += w * settings.empty_density;
                    continue;
                }
                let f = &feats[r as usize * FIELD_CHANNELS..(r as usize + 1) * FIELD_CHANNELS];
                for (a, v) in k.iter_mut().zip(f) {
                    *a += w * v;
                }
                raw += w * f[DENSITY_CHANNEL];
            }
            (
                softplus(raw + settings.shift),
                sh_logits(&k, basis).map(sigmoid),
            )
        } else {
            (empty_sigma, [0.5; 3])
        };
        let alpha = -(-sigma * settings.step).exp_m1();
        out.push(Sample {
            corners,
            present,
            sigma,
            alpha,
            trans,
            color,
            dist: t,
        });
        trans *= 1.0 - alpha;
    }
}

fn final_transmittance(samples: &[Sample]) -> f64 {
    samples.last().map_or(1.0, |s| s.trans * (1.0 - s.alpha))
}

/// Composited `[r, g, b, depth]` of marched samples.
fn accumulate(samples: &[Sample], background: &[f64; 3]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for s in samples {
        let w = s.trans * s.alpha;
        for c in 0..3 {
            out[c] += w * s.color[c];
        }
        out[3] += w * s.dist;
    }
    let t_end = final_transmittance(samples);
    for c in 0..3 {
        out[c] += t_end * background[c];
    }
    out
}

/// Alpha compositing of explicit per-sample densities, colors and distances.
pub fn composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    dists: &[f64],
    step: f64,
    background: [f64; 3],
) -> Result<RayResult> {
    if sigmas.len() != colors.len() || sigmas.len() != dists.len() {
        return Err(Error::invalid(
            "composite needs one color and distance per density",
        ));
    }
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut weights = Vec::with_capacity(sigmas.len());
    for ((&sigma, c), &d) in sigmas.iter().zip(colors).zip(dists) {
        let alpha = -(-sigma * step).exp_m1();
        let w = trans * alpha;
        for ch in 0..3 {
            color[ch] += w * c[ch];
        }
        depth += w * d;
        weights.push(w);
        trans *= 1.0 - alpha;
    }
    for ch in 0..3 {
        color[ch] += trans * background[ch];
    }
    Ok(RayResult {
        color,
        depth,
        weights,
        transmittance: trans,
    })
}

pub fn render_ray(
    field: &RadianceField,
    ray: &Ray,
    settings: &RenderSettings,
) -> Result<RayResult> {
    settings.validate()?;
    let basis = sh_basis(&ray.direction)?;
    let mut samples = Vec::new();
    march(
        field.geometry(),
        field.feats(),
        ray,
        &basis,
        settings,
        &mut samples,
    );
    let acc = accumulate(&samples, &settings.background);
    Ok(RayResult {
        color: [acc[0], acc[1], acc[2]],
        depth: acc[3],
        weights: samples.iter().map(|s| s.trans * s.alpha).collect(),
        transmittance: final_transmittance(&samples),
    })
}

fn check_rays(rays: &[Ray]) -> Result<()> {
    for r in rays {
        let n = r.direction.norm();
        if !((n - 1.0).abs() <= 1e-6) || !r.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "ray at pixel {:?} needs a finite origin and unit direction",
                r.pixel
            )));
        }
    }
    Ok(())
}

fn render_batch(
    geom: &FieldGeometry,
    feats: &[f64],
    rays: &[Ray],
    settings: &RenderSettings,
) -> Vec<[f64; 4]> {
    rays.par_chunks(RAY_CHUNK)
        .flat_map_iter(|chunk| {
            let mut samples = Vec::new();
            chunk
                .iter()
                .map(|ray| {
                    let basis = sh_basis_unchecked(&ray.direction);
                    march(geom, feats, ray, &basis, settings, &mut samples);
                    accumulate(&samples, &settings.background)
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `[r, g, b, depth]` per ray, rendered in parallel.
pub fn render_rays(
    field: &RadianceField,
    rays: &[Ray],
    settings: &RenderSettings,
) -> Result<Vec<[f64; 4]>> {
    settings.validate()?;
    check_rays(rays)?;
    Ok(render_batch(
        field.geometry(),
        field.feats(),
        rays,
        settings,
    ))
}

/// Accumulated opacity `1 - T` per ray.
pub fn render_opacity(
    field: &RadianceField,
    rays: &[Ray],
    settings: &RenderSettings,
) -> Result<Vec<f64>> {
    settings.validate()?;
    check_rays(rays)?;
    let geom = field.geometry();
    Ok(rays
        .par_chunks(RAY_CHUNK)
        .flat_map_iter(|chunk| {
            let mut samples = Vec::new();
            chunk
                .iter()
                .map(|ray| {
                    let basis = sh_basis_unchecked(&ray.direction);
                    march(geom, field.feats(), ray, &basis, settings, &mut samples);
                    1.0 - final_transmittance(&samples)
                })
                .collect::<Vec<_>>()
        })
        .collect())
}

/// RGB image and ray-distance depth image seen by `camera`.
pub fn render_image(
    field: &RadianceField,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(Image, Image)> {
    camera.validate()?;
    let rays = generate_rays(camera, &all_pixels(camera))?;
    let out = render_rays(field, &rays, settings)?;
    let mut rgb = Image::new(camera.width, camera.height, 3);
    let mut depth = Image::new(camera.width, camera.height, 1);
    for (ray, v) in rays.iter().zip(&out) {
        let (row, col) = ray.pixel;
        rgb.pixel_mut(row, col).copy_from_slice(&v[..3]);
        depth.set(row, col, 0, v[3]);
    }
    Ok((rgb, depth))
}

/// Gradient of the loss w.r.t. the feature rows touched by one ray.
fn ray_backward(
    samples: &[Sample],
    basis: &[f64; SH_BASIS],
    settings: &RenderSettings,
    g: &[f64],
    grad: &mut [f64],
) {
    let g_c = [g[0], g[1], g[2]];
    let g_d = g[3];
    let dot = |c: &[f64; 3]| g_c[0] * c[0] + g_c[1] * c[1] + g_c[2] * c[2];
    let t_end = final_transmittance(samples);
    // suffix sums over samples behind the current one, background included
    let mut tail_c = t_end * dot(&settings.background);
    let mut tail_d = 0.0;
    for s in samples.iter().rev() {
        let w = s.trans * s.alpha;
        let t_next = s.trans * (1.0 - s.alpha);
        let here_c = dot(&s.color);
        if s.present {
            let d_sigma =
                settings.step * (t_next * (here_c + g_d * s.dist) - (tail_c + g_d * tail_d));
            let d_raw = d_sigma * -(-s.sigma).exp_m1();
            let d_logit = [0, 1, 2].map(|c| g_c[c] * w * s.color[c] * (1.0 - s.color[c]));
            for (&r, &cw) in s.corners.rows.iter().zip(&s.corners.weights) {
                if r == ABSENT || cw == 0.0 {
                    continue;
                }
                let row = &mut grad[r as usize * FIELD_CHANNELS..(r as usize + 1) * FIELD_CHANNELS];
                for c in 0..3 {
                    let scale = cw * d_logit[c];
                    for (dst, b) in row[c * SH_BASIS..(c + 1) * SH_BASIS].iter_mut().zip(basis) {
                        *dst += scale * b;
                    }
                }
                row[DENSITY_CHANNEL] += cw * d_raw;
            }
        }
        tail_c += w * here_c;
        tail_d += w * s.dist;
    }
}

/// Fused render of a batch of rays: feature rows in, `[r, g, b, depth]` rows out.
struct RenderOp {
    geometry: Arc<FieldGeometry>,
    rays: Arc<Vec<Ray>>,
    settings: RenderSettings,
}

impl Op for RenderOp {
    fn name(&self) -> &'static str {
        "render_rays"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let feats = inputs[0];
        let size = feats.len();
        let chunks = GRAD_CHUNKS
            .min(self.rays.len().div_ceil(MIN_RAYS_PER_GRAD_CHUNK))
            .max(1);
        let per = self.rays.len().div_ceil(chunks).max(1);
        let partials: Vec<Vec<f64>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; size];
                let mut samples = Vec::new();
                let lo = (c * per).min(self.rays.len());
                let hi = ((c + 1) * per).min(self.rays.len());
                for (i, ray) in self.rays[lo..hi].iter().enumerate() {
                    let g = grad.row(lo + i);
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let basis = sh_basis_unchecked(&ray.direction);
                    march(
                        &self.geometry,
                        feats.data(),
                        ray,
                        &basis,
                        &self.settings,
                        &mut samples,
                    );
                    ray_backward(&samples, &basis, &self.settings, g, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = partials.into_iter();
        let mut out = total.next().unwrap_or_else(|| vec![0.0; size]);
        for p in total {
            for (a, b) in out.iter_mut().zip(&p) {
                *a += b;
            }
        }
        Ok(vec![Some(Tensor::from_vec(
            feats.rows(),
            feats.cols(),
            out,
        )?)])
    }
}

/// Records a fused differentiable render of `rays` through the field whose
/// feature rows (`len x 28`) are the tape value `feats`. Output is `rays x 4`.
pub fn render_rays_on_tape(
    tape: &mut Tape,
    feats: Var,
    geometry: Arc<FieldGeometry>,
    rays: Arc<Vec<Ray>>,
    settings: &RenderSettings,
) -> Result<Var> {
    settings.validate()?;
    check_rays(&rays)?;
    let value = tape.value(feats);
    if value.shape() != (geometry.len(), FIELD_CHANNELS) {
        return Err(Error::invalid(format!(
            "render expects {} x {FIELD_CHANNELS} features, got {:?}",
            geometry.len(),
            value.shape()
        )));
    }
    let out = render_batch(&geometry, value.data(), &rays, settings);
    let data = out.into_iter().flatten().collect();
    let value = Tensor::from_vec(rays.len(), 4, data)?;
    Ok(tape.record(
        RenderOp {
            geometry,
            rays,
            settings: settings.clone(),
        },
        &[feats],
        value,
    ))
}

/// Trilinear gather of feature columns `lo..hi` at fixed sample corners.
/// Absent corners contribute `empty` (only meaningful for the density column).
pub struct InterpolateOp {
    corners: Arc<Vec<Corners>>,
    lo: usize,
    hi: usize,
}

impl InterpolateOp {
    fn forward(&self, feats: &Tensor, empty: f64) -> Tensor {
        let width = self.hi - self.lo;
        let mut out = Tensor::zeros(self.corners.len(), width);
        for (s, c) in self.corners.iter().enumerate() {
            let dst = &mut out.data_mut()[s * width..(s + 1) * width];
            for (&r, &w) in c.rows.iter().zip(&c.weights) {
                if r == ABSENT {
                    for v in dst.iter_mut() {
                        *v += w * empty;
                    }
                    continue;
                }
                for (v, f) in dst.iter_mut().zip(&feats.row(r as usize)[self.lo..self.hi]) {
                    *v += w * f;
                }
            }
        }
        out
    }
}

impl Op for InterpolateOp {
    fn name(&self) -> &'static str {
        "interpolate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let feats = inputs[0];
        let width = self.hi - self.lo;
        let mut d = Tensor::zeros(feats.rows(), feats.cols());
        let cols = feats.cols();
        for (s, c) in self.corners.iter().enumerate() {
            let g = grad.row(s);
            for (&r, &w) in c.rows.iter().zip(&c.weights) {
                if r == ABSENT {
                    continue;
                }
                let base = r as usize * cols + self.lo;
                for (dst, gv) in d.data_mut()[base..base + width].iter_mut().zip(g) {
                    *dst += w * gv;
                }
            }
        }
        Ok(vec![Some(d)])
    }
}

/// Sigmoid of SH logits: `samples x 27` coefficients to `samples x 3` colors.
pub struct ShColorOp {
    basis: Arc<Vec<[f64; SH_BASIS]>>,
}

impl Op for ShColorOp {
    fn name(&self) -> &'static str {
        "sh_color"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut d = Tensor::zeros(inputs[0].rows(), SH_COEFFS);
        for (s, basis) in self.basis.iter().enumerate() {
            let (c, g) = (output.row(s), grad.row(s));
            let row = &mut d.data_mut()[s * SH_COEFFS..(s + 1) * SH_COEFFS];
            for ch in 0..3 {
                let dl = g[ch] * c[ch] * (1.0 - c[ch]);
                for (dst, b) in row[ch * SH_BASIS..(ch + 1) * SH_BASIS]
                    .iter_mut()
                    .zip(basis)
                {
                    *dst = dl * b;
                }
            }
        }
        Ok(vec![Some(d)])
    }
}

/// Compositing of `samples x 1` densities and `samples x 3` colors into
/// `rays x 4`, with a fixed number of samples per ray.
pub struct CompositeOp {
    per_ray: usize,
    dists: Arc<Vec<f64>>,
    step: f64,
    background: [f64; 3],
}

impl CompositeOp {
    fn forward(&self, sigma: &Tensor, colors: &Tensor) -> Result<Tensor> {
        let rays = if self.per_ray == 0 {
            0
        } else {
            sigma.rows() / self.per_ray
        };
        let mut data = Vec::with_capacity(rays * 4);
        for r in 0..rays {
            let span = r * self.per_ray..(r + 1) * self.per_ray;
            let cols: Vec<[f64; 3]> = span
                .clone()
                .map(|s| [0, 1, 2].map(|c| colors.row(s)[c]))
                .collect();
            let res = composite(
                &sigma.data()[span.clone()],
                &cols,
                &self.dists[span],
                self.step,
                self.background,
            )?;
            data.extend_from_slice(&[res.color[0], res.color[1], res.color[2], res.depth]);
        }
        Tensor::from_vec(rays, 4, data)
    }
}

impl Op for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (sigma, colors) = (inputs[0], inputs[1]);
        let mut d_sigma = Tensor::zeros(sigma.rows(), 1);
        let mut d_color = Tensor::zeros(colors.rows(), 3);
        for r in 0..grad.rows() {
            let g = grad.row(r);
            let base = r * self.per_ray;
            let mut trans = vec![1.0; self.per_ray + 1];
            let mut alpha = vec![0.0; self.per_ray];
            for i in 0..self.per_ray {
                alpha[i] = -(-sigma.data()[base + i] * self.step).exp_m1();
                trans[i + 1] = trans[i] * (1.0 - alpha[i]);
            }
            let dot = |c: &[f64]| g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
            let mut tail_c = trans[self.per_ray] * dot(&self.background);
            let mut tail_d = 0.0;
            for i in (0..self.per_ray).rev() {
                let c = colors.row(base + i);
                let dist = self.dists[base + i];
                let w = trans[i] * alpha[i];
                d_sigma.data_mut()[base + i] =
                    self.step * (trans[i + 1] * (dot(c) + g[3] * dist) - (tail_c + g[3] * tail_d));
                for ch in 0..3 {
                    d_color.data_mut()[(base + i) * 3 + ch] = w * g[ch];
                }
                tail_c += w * dot(c);
                tail_d += w * dist;
            }
        }
        Ok(vec![Some(d_sigma), Some(d_color)])
    }
}

/// Same result as [`render_rays_on_tape`], recorded as separate
/// interpolation, activation, SH color and compositing steps.
pub fn render_rays_composed(
    tape: &mut Tape,
    feats: Var,
    geometry: Arc<FieldGeometry>,
    rays: &[Ray],
    settings: &RenderSettings,
) -> Result<Var> {
    settings.validate()?;
    check_rays(rays)?;
    let n = settings.sample_count();
    let mut corners = Vec::with_capacity(rays.len() * n);
    let mut basis = Vec::with_capacity(rays.len() * n);
    let mut dists = Vec::with_capacity(rays.len() * n);
    for ray in rays {
        let b = sh_basis_unchecked(&ray.direction);
        for i in 0..n {
            let t = settings.sample_distance(i);
            let p: Vec3 = ray.origin + t * ray.direction;
            corners.push(geometry.corners(&p));
            basis.push(b);
            dists.push(t);
        }
    }
    let corners = Arc::new(corners);
    let k_op = InterpolateOp {
        corners: corners.clone(),
        lo: 0,
        hi: SH_COEFFS,
    };
    let raw_op = InterpolateOp {
        corners,
        lo: DENSITY_CHANNEL,
        hi: FIELD_CHANNELS,
    };
    let k_val = k_op.forward(tape.value(feats), 0.0);
    let raw_val = raw_op.forward(tape.value(feats), settings.empty_density);
    let k = tape.record(k_op, &[feats], k_val);
    let raw = tape.record(raw_op, &[feats], raw_val);
    let sigma = tape.shifted_softplus(raw, settings.shift);

    let basis = Arc::new(basis);
    let kv = tape.value(k);
    let mut colors = Tensor::zeros(kv.rows(), 3);
    for (s, b) in basis.iter().enumerate() {
        let c = sh_logits(kv.row(s), b).map(sigmoid);
        colors.data_mut()[s * 3..s * 3 + 3].copy_from_slice(&c);
    }
    let colors = tape.record(ShColorOp { basis }, &[k], colors);

    let op = CompositeOp {
        per_ray: n,
        dists: Arc::new(dists),
        step: settings.step,
        background: settings.background,
    };
    let value = op.forward(tape.value(sigma), tape.value(colors))?;
    Ok(tape.record(op, &[sigma, colors], value))
}
