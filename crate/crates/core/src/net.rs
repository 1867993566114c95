//! Sparse encoder-decoder mapping a colored voxel tensor to radiance fields
//! at several resolutions.
//!
//! Layout for `E` encoder stages and `E - 1` decoder stages:
//!
//! * stem: 3x3x3 convolution from RGB, then ReLU;
//! * encoder stage 0: residual blocks at the input resolution;
//! * encoder stage `i > 0`: 2x2x2 stride-2 convolution, ReLU, residual blocks;
//! * decoder stage `j`: generative 2x2x2 transposed convolution, ReLU,
//!   concatenation with the encoder features of the same stride (zeros where
//!   the encoder has no voxel), residual blocks (the first one projects the
//!   concatenated width), a 1x1 head to 28 field channels, optional pruning.

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{
    prune_mask, FieldGeometry, InputProximity, PruneConfig, RadianceField, DEFAULT_SHIFT,
    DENSITY_CHANNEL, FIELD_CHANNELS, SH_BASIS,
};
use crate::geometry::Vec3;
use crate::sparse::{CoordSet, KernelMap, SparseTensor};

const RESIDUAL_KERNEL: usize = 3;
const DOWN_KERNEL: usize = 2;
const UP_KERNEL: usize = 2;
/// Head weights start small so the initial field is nearly transparent.
const HEAD_INIT_SCALE: f64 = 0.1;

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of network forward passes run on the current thread.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: usize,
    /// Highest SH degree the heads may use (0 or 2); unused coefficients are held at zero.
    pub sh_degree: usize,
    pub pruning: bool,
    pub prune: PruneConfig,
    /// Softplus shift used to turn predicted raw density into opacity.
    pub density_shift: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32, 64, 128],
            decoder_channels: vec![128, 64, 32],
            blocks: 1,
            sh_degree: 2,
            pruning: false,
            prune: PruneConfig::new(0.01, 0.05),
            density_shift: DEFAULT_SHIFT,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let e = self.encoder_channels.len();
        if e < 2 {
            return Err(Error::invalid(
                "the network needs at least two encoder stages",
            ));
        }
        if self.decoder_channels.len() + 1 != e {
            return Err(Error::invalid(format!(
                "{} decoder stages for {e} encoder stages; need one fewer",
                self.decoder_channels.len()
            )));
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .any(|&c| c == 0)
        {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.blocks == 0 {
            return Err(Error::invalid(
                "each stage needs at least one residual block",
            ));
        }
        if !matches!(self.sh_degree, 0 | 2) {
            return Err(Error::invalid(format!(
                "SH degree must be 0 or 2, got {}",
                self.sh_degree
            )));
        }
        if !self.density_shift.is_finite() {
            return Err(Error::invalid("density shift must be finite"));
        }
        self.prune.validate()
    }

    /// Strides of the decoder outputs, coarse to fine.
    pub fn stage_strides(&self) -> Vec<i32> {
        let e = self.encoder_channels.len();
        (0..e - 1).map(|j| 1 << (e - 2 - j)).collect()
    }

    /// Every parameter's name and shape in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let k3 = RESIDUAL_KERNEL.pow(3);
        let kd = DOWN_KERNEL.pow(3);
        let ku = UP_KERNEL.pow(3);
        let enc = &self.encoder_channels;
        let dec = &self.decoder_channels;
        let mut out = vec![("stem.w".to_string(), (k3 * 3, enc[0]))];
        for (i, &c) in enc.iter().enumerate() {
            if i > 0 {
                out.push((format!("enc{i}.down.w"), (kd * enc[i - 1], c)));
            }
            for b in 0..self.blocks {
                out.push((format!("enc{i}.res{b}.conv1.w"), (k3 * c, c)));
                out.push((format!("enc{i}.res{b}.conv2.w"), (k3 * c, c)));
            }
        }
        for (j, &c) in dec.iter().enumerate() {
            let c_in = if j == 0 {
                enc[enc.len() - 1]
            } else {
                dec[j - 1]
            };
            let skip = enc[enc.len() - 2 - j];
            out.push((format!("dec{j}.up.w"), (ku * c_in, c)));
            for b in 0..self.blocks {
                let width = if b == 0 { c + skip } else { c };
                out.push((format!("dec{j}.res{b}.conv1.w"), (k3 * width, c)));
                out.push((format!("dec{j}.res{b}.conv2.w"), (k3 * c, c)));
                if b == 0 {
                    out.push((format!("dec{j}.res{b}.proj.w"), (width, c)));
                }
            }
            out.push((format!("dec{j}.head.w"), (c, FIELD_CHANNELS)));
            out.push((format!("dec{j}.head.b"), (1, FIELD_CHANNELS)));
        }
        out
    }

    /// Channel multipliers that zero the SH coefficients above `sh_degree`.
    fn head_mask(&self) -> Option<Vec<f64>> {
        (self.sh_degree == 0).then(|| {
            (0..FIELD_CHANNELS)
                .map(|c| {
                    if c == DENSITY_CHANNEL || c % SH_BASIS == 0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
    }
}

/// Named network parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl NetParams {
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, (rows, cols)) in config.param_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(rows, cols)
            } else {
                let mut bound = (3.0 / rows as f64).sqrt();
                if name.ends_with("head.w") {
                    bound *= HEAD_INIT_SCALE;
                }
                let data = (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::from_vec(rows, cols, data)?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    /// Parameters with explicit values; order and shapes must match `config`.
    pub fn from_named(config: &NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let shapes = config.param_shapes();
        if named.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter arrays, got {}",
                shapes.len(),
                named.len()
            )));
        }
        for ((name, t), (want, shape)) in named.iter().zip(&shapes) {
            if name != want || t.shape() != *shape {
                return Err(Error::invalid(format!(
                    "parameter {name} {:?} does not match expected {want} {shape:?}",
                    t.shape()
                )));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.count() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} values, need {}",
                values.len(),
                self.count()
            )));
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        BoundParams {
            index: self
                .names
                .iter()
                .cloned()
                .enumerate()
                .map(|(i, n)| (n, i))
                .collect(),
            vars,
        }
    }
}

/// Tape handles of a parameter set.
pub struct BoundParams {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in flat parameter order; zeros where none arrived.
    pub fn flat_grad(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        self.vars
            .iter()
            .flat_map(|&v| grads.get_or_zeros(v, tape.value(v).shape()).into_data())
            .collect()
    }
}

/// One decoder output: field features on the tape plus their coordinates.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub coords: Arc<CoordSet>,
    /// `coords.len() x 28` raw field features.
    pub feats: Var,
    pub stride: i32,
}

impl StageOutput {
    pub fn geometry(&self, voxel_size: f64, origin: Vec3) -> Result<FieldGeometry> {
        FieldGeometry::new(self.coords.clone(), voxel_size, origin)
    }

    /// Detached copy of this stage as an explicit field.
    pub fn to_field(&self, tape: &Tape, voxel_size: f64, origin: Vec3) -> Result<RadianceField> {
        RadianceField::from_geometry(
            Arc::new(self.geometry(voxel_size, origin)?),
            tape.value(self.feats).data().to_vec(),
        )
    }
}

pub struct NetOutput {
    /// Coordinates of each encoder stage, fine to coarse.
    pub encoder_coords: Vec<Arc<CoordSet>>,
    /// Decoder outputs, coarse to fine.
    pub stages: Vec<StageOutput>,
}

impl NetOutput {
    pub fn finest(&self) -> &StageOutput {
        self.stages.last().expect("at least one decoder stage")
    }
}

fn conv(
    tape: &mut Tape,
    x: Var,
    params: &BoundParams,
    name: &str,
    map: &Arc<KernelMap>,
) -> Result<Var> {
    let w = params.var(name)?;
    tape.sparse_conv(x, w, None, map.clone())
}

fn residual(
    tape: &mut Tape,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    map: &Arc<KernelMap>,
    proj: Option<&Arc<KernelMap>>,
) -> Result<Var> {
    let h = conv(tape, x, params, &format!("{prefix}.conv1.w"), map)?;
    let h = tape.relu(h);
    let h = conv(tape, h, params, &format!("{prefix}.conv2.w"), map)?;
    let skip = match proj {
        Some(p) => conv(tape, x, params, &format!("{prefix}.proj.w"), p)?,
        None => x,
    };
    let sum = tape.add(h, skip)?;
    Ok(tape.relu(sum))
}

/// Runs the network on a stride-1 RGB tensor whose voxels measure `voxel_size`.
pub fn forward(
    tape: &mut Tape,
    input: &SparseTensor,
    params: &BoundParams,
    config: &NetConfig,
    voxel_size: f64,
) -> Result<NetOutput> {
    config.validate()?;
    if input.is_empty() {
        return Err(Error::invalid("network input has no voxels"));
    }
    if input.channels() != 3 || input.stride() != 1 {
        return Err(Error::invalid(format!(
            "network input must be stride 1 with 3 channels, got stride {} with {}",
            input.stride(),
            input.channels()
        )));
    }
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
    let e = config.encoder_channels.len();

    let coords0 = input.coord_set().clone();
    let x = tape.constant(Tensor::from_vec(input.len(), 3, input.feats().to_vec())?);
    let same0 = Arc::new(KernelMap::conv(&coords0, &coords0, RESIDUAL_KERNEL)?);
    let h = conv(tape, x, params, "stem.w", &same0)?;
    let mut h = tape.relu(h);

    let mut encoder_coords = vec![coords0.clone()];
    let mut encoder_feats = Vec::with_capacity(e);
    let mut same_map = same0;
    for i in 0..e {
        if i > 0 {
            let prev = encoder_coords[i - 1].clone();
            let next = Arc::new(prev.downsample(2)?);
            let down = Arc::new(KernelMap::conv(&prev, &next, DOWN_KERNEL)?);
            let d = conv(tape, h, params, &format!("enc{i}.down.w"), &down)?;
            h = tape.relu(d);
            same_map = Arc::new(KernelMap::conv(&next, &next, RESIDUAL_KERNEL)?);
            encoder_coords.push(next);
        }
        for b in 0..config.blocks {
            h = residual(tape, h, params, &format!("enc{i}.res{b}"), &same_map, None)?;
        }
        encoder_feats.push(h);
    }

    let input_centers: Vec<Vec3> = if config.pruning {
        (0..coords0.len())
            .map(|r| coords0.center(r, voxel_size, &Vec3::zeros()))
            .collect()
    } else {
        Vec::new()
    };
    let head_mask = config.head_mask();
    let mut coords = encoder_coords[e - 1].clone();
    let mut stages = Vec::with_capacity(e - 1);
    for j in 0..e - 1 {
        let finer = Arc::new(coords.generate(UP_KERNEL, 2)?);
        let up = Arc::new(KernelMap::transposed(&coords, &finer, UP_KERNEL)?);
        let u = conv(tape, h, params, &format!("dec{j}.up.w"), &up)?;
        let u = tape.relu(u);

        let skip_level = e - 2 - j;
        let skip_coords = &encoder_coords[skip_level];
        let rows: Vec<Option<u32>> = finer
            .coords()
            .iter()
            .map(|c| skip_coords.row_of(c).map(|r| r as u32))
            .collect();
        let mut x = tape.concat_gather(u, encoder_feats[skip_level], Arc::new(rows))?;

        let same = Arc::new(KernelMap::conv(&finer, &finer, RESIDUAL_KERNEL)?);
        let point = Arc::new(KernelMap::conv(&finer, &finer, 1)?);
        for b in 0..config.blocks {
            let proj = (b == 0).then_some(&point);
            x = residual(tape, x, params, &format!("dec{j}.res{b}"), &same, proj)?;
        }
        let hw = params.var(&format!("dec{j}.head.w"))?;
        let hb = params.var(&format!("dec{j}.head.b"))?;
        let mut out = tape.sparse_conv(x, hw, Some(hb), point)?;
        if let Some(mask) = &head_mask {
            out = tape.scale_columns(out, mask.clone())?;
        }

        let stride = finer.stride();
        let mut stage_coords = finer;
        if config.pruning {
            // the distance threshold grows with the stage's cell size
            let prune = PruneConfig {
                tau_dist: config.prune.tau_dist * stride as f64,
                ..config.prune.clone()
            };
            let prox = InputProximity::new(input_centers.iter().copied(), prune.tau_dist);
            let value = tape.value(out);
            let raw: Vec<f64> = (0..value.rows())
                .map(|r| value.row(r)[DENSITY_CHANNEL])
                .collect();
            let origin = Vec3::zeros();
            let centers: Vec<Vec3> = (0..stage_coords.len())
                .map(|r| stage_coords.center(r, voxel_size, &origin))
                .collect();
            let cell = voxel_size * stride as f64;
            let keep = prune_mask(
                &raw,
                &centers,
                &prox,
                &prune,
                0.5 * cell,
                config.density_shift,
            );
            // a stage is never pruned to nothing
            if keep.iter().any(|k| !k) && keep.iter().any(|&k| k) {
                let kept: Vec<u32> = (0..keep.len() as u32)
                    .filter(|&r| keep[r as usize])
                    .collect();
                let kept = Arc::new(kept);
                out = tape.gather_rows(out, kept.clone())?;
                x = tape.gather_rows(x, kept)?;
                stage_coords = Arc::new(stage_coords.select(&keep));
            }
        }
        stages.push(StageOutput {
            coords: stage_coords.clone(),
            feats: out,
            stride,
        });
        coords = stage_coords;
        h = x;
    }
    Ok(NetOutput {
        encoder_coords,
        stages,
    })
}
