use std::sync::Arc;

use rayon::prelude::*;

use super::{kernel_offsets, CoordSet, KernelMap, SparseTensor};
use crate::error::{Error, Result};

// Rows per rayon task; small feature widths make per-row tasks too fine.
const ROW_CHUNK: usize = 64;

/// Dense kernel weights laid out `[offset][c_in][c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvWeights {
    pub fn new(
        kernel: usize,
        c_in: usize,
        c_out: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let volume = kernel.pow(3);
        if weights.len() != volume * c_in * c_out {
            return Err(Error::invalid(format!(
                "kernel weights have {} values, expected {volume}x{c_in}x{c_out}",
                weights.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != c_out) {
            return Err(Error::invalid("bias length must equal output channels"));
        }
        if weights
            .iter()
            .chain(bias.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("convolution weights".into()));
        }
        Ok(Self {
            kernel,
            c_in,
            c_out,
            weights,
            bias,
        })
    }

    /// Identity-like `1x1x1` kernel.
    pub fn identity(channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        Self {
            kernel: 1,
            c_in: channels,
            c_out: channels,
            weights: w,
            bias: None,
        }
    }
}

/// `out[j] = bias + sum over (k, i) of W[k]^T x[i]`, reduced in output-major order.
pub(crate) fn conv_forward(
    map: &KernelMap,
    x: &[f64],
    c_in: usize,
    w: &[f64],
    c_out: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; map.n_out() * c_out];
    if c_out == 0 {
        return out;
    }
    let by_out = map.by_out();
    out.par_chunks_mut(c_out * ROW_CHUNK)
        .enumerate()
        .for_each(|(chunk, block)| {
            for (r, acc) in block.chunks_mut(c_out).enumerate() {
                let j = chunk * ROW_CHUNK + r;
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                for &(k, i) in by_out.row(j) {
                    let xr = &x[i as usize * c_in..(i as usize + 1) * c_in];
                    let wk = &w[k as usize * c_in * c_out..(k as usize + 1) * c_in * c_out];
                    for (c, &xv) in xr.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wr = &wk[c * c_out..(c + 1) * c_out];
                        for (a, &wv) in acc.iter_mut().zip(wr) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        });
    out
}

/// Gradient with respect to the input rows, reduced in input-major order.
pub(crate) fn conv_input_grad(
    map: &KernelMap,
    g: &[f64],
    c_out: usize,
    w: &[f64],
    c_in: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; map.n_in() * c_in];
    if c_in == 0 {
        return dx;
    }
    // per-offset transpose so the inner loop is a contiguous axpy
    let slab = c_in * c_out;
    let mut wt = vec![0.0; w.len()];
    for k in 0..w.len() / slab.max(1) {
        for c in 0..c_in {
            for o in 0..c_out {
                wt[k * slab + o * c_in + c] = w[k * slab + c * c_out + o];
            }
        }
    }
    let by_in = map.by_in();
    dx.par_chunks_mut(c_in * ROW_CHUNK)
        .enumerate()
        .for_each(|(chunk, block)| {
            for (r, acc) in block.chunks_mut(c_in).enumerate() {
                let i = chunk * ROW_CHUNK + r;
                for &(k, j) in by_in.row(i) {
                    let gr = &g[j as usize * c_out..(j as usize + 1) * c_out];
                    let wk = &wt[k as usize * slab..(k as usize + 1) * slab];
                    for (o, &gv) in gr.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        for (a, &wv) in acc.iter_mut().zip(&wk[o * c_in..(o + 1) * c_in]) {
                            *a += gv * wv;
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient with respect to the kernel, one independent slab per offset.
pub(crate) fn conv_weight_grad(
    map: &KernelMap,
    x: &[f64],
    c_in: usize,
    g: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let slab = c_in * c_out;
    let mut dw = vec![0.0; map.volume() * slab];
    if slab == 0 {
        return dw;
    }
    dw.par_chunks_mut(slab).enumerate().for_each(|(k, acc)| {
        for &(i, j) in map.pairs(k) {
            let xr = &x[i as usize * c_in..(i as usize + 1) * c_in];
            let gr = &g[j as usize * c_out..(j as usize + 1) * c_out];
            for (c, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (a, &gv) in acc[c * c_out..(c + 1) * c_out].iter_mut().zip(gr) {
                    *a += xv * gv;
                }
            }
        }
    });
    dw
}

fn check_channels(input: &SparseTensor, w: &ConvWeights, kernel: usize) -> Result<()> {
    if w.c_in != input.channels() {
        return Err(Error::invalid(format!(
            "weights expect {} input channels, tensor has {}",
            w.c_in,
            input.channels()
        )));
    }
    if w.kernel != kernel {
        return Err(Error::invalid(format!(
            "weights are for kernel {}, requested {kernel}",
            w.kernel
        )));
    }
    Ok(())
}

/// Sparse convolution. Stride 1 keeps the coordinate set; stride 2 maps onto
/// the downsampled coordinates and doubles the tensor stride.
pub fn sparse_conv(
    input: &SparseTensor,
    w: &ConvWeights,
    kernel: usize,
    stride: i32,
) -> Result<SparseTensor> {
    check_channels(input, w, kernel)?;
    if !(stride == 1 || stride == 2) {
        return Err(Error::invalid(format!(
            "convolution stride must be 1 or 2, got {stride}"
        )));
    }
    let out = if stride == 1 {
        input.coord_set().clone()
    } else {
        Arc::new(input.coord_set().downsample(stride)?)
    };
    let map = KernelMap::conv(input.coord_set(), &out, kernel)?;
    let feats = conv_forward(
        &map,
        input.feats(),
        w.c_in,
        &w.weights,
        w.c_out,
        w.bias.as_deref(),
    );
    SparseTensor::from_set(out, feats, w.c_out)
}

/// Up-sampling transposed convolution that creates every coordinate reached
/// by the kernel offsets at the finer stride.
pub fn generative_transposed_conv(
    input: &SparseTensor,
    w: &ConvWeights,
    kernel: usize,
    up: i32,
) -> Result<SparseTensor> {
    check_channels(input, w, kernel)?;
    kernel_offsets(kernel)?;
    let out = Arc::new(input.coord_set().generate(kernel, up)?);
    let map = KernelMap::transposed(input.coord_set(), &out, kernel)?;
    let feats = conv_forward(
        &map,
        input.feats(),
        w.c_in,
        &w.weights,
        w.c_out,
        w.bias.as_deref(),
    );
    SparseTensor::from_set(out, feats, w.c_out)
}

pub fn prune_layer(input: &SparseTensor, keep: &[bool]) -> Result<SparseTensor> {
    if keep.len() != input.len() {
        return Err(Error::invalid(format!(
            "prune mask has {} entries for {} rows",
            keep.len(),
            input.len()
        )));
    }
    let set: CoordSet = input.coord_set().select(keep);
    let c = input.channels();
    let feats = keep
        .iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .flat_map(|(r, _)| input.feats()[r * c..(r + 1) * c].iter().copied())
        .collect();
    SparseTensor::from_set(Arc::new(set), feats, c)
}
