use super::{Coord, CoordSet, SparseTensor};
use crate::error::{Error, Result};

/// Offsets of a `kernel^3` cube: centered for odd sizes, `[0, kernel)` for even.
pub fn kernel_offsets(kernel: usize) -> Result<Vec<Coord>> {
    if kernel == 0 {
        return Err(Error::invalid("kernel size must be at least 1"));
    }
    let k = kernel as i32;
    let lo = if k % 2 == 1 { -(k - 1) / 2 } else { 0 };
    let mut out = Vec::with_capacity(kernel * kernel * kernel);
    for x in lo..lo + k {
        for y in lo..lo + k {
            for z in lo..lo + k {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Row lists driving one sparse (transposed) convolution.
///
/// `pairs[k]` holds `(input row, output row)` for kernel offset `offsets[k]`.
/// The output-major and input-major views fix the reduction order of the
/// forward and input-gradient passes.
#[derive(Clone, Debug)]
pub struct KernelMap {
    offsets: Vec<Coord>,
    pairs: Vec<Vec<(u32, u32)>>,
    n_in: usize,
    n_out: usize,
    by_out: Csr,
    by_in: Csr,
}

/// Compressed rows of `(offset index, partner row)` entries.
#[derive(Clone, Debug)]
pub(crate) struct Csr {
    starts: Vec<u32>,
    entries: Vec<(u32, u32)>,
}

impl Csr {
    #[inline]
    pub(crate) fn row(&self, r: usize) -> &[(u32, u32)] {
        &self.entries[self.starts[r] as usize..self.starts[r + 1] as usize]
    }

    fn transpose(&self, n_cols: usize) -> Csr {
        let mut counts = vec![0u32; n_cols + 1];
        for &(_, c) in &self.entries {
            counts[c as usize + 1] += 1;
        }
        for i in 0..n_cols {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut entries = vec![(0, 0); self.entries.len()];
        for r in 0..self.starts.len() - 1 {
            for &(k, c) in self.row(r) {
                let slot = &mut fill[c as usize];
                entries[*slot as usize] = (k, r as u32);
                *slot += 1;
            }
        }
        Csr { starts, entries }
    }
}

impl KernelMap {
    /// `input_row_of(out_row, offset)` resolves the partner of each output row.
    fn build(
        offsets: Vec<Coord>,
        n_in: usize,
        output: &CoordSet,
        input_row_of: impl Fn(&Coord, &Coord) -> Option<usize>,
    ) -> Self {
        let n_out = output.len();
        let mut starts = Vec::with_capacity(n_out + 1);
        let mut entries = Vec::new();
        starts.push(0u32);
        for c in output.coords() {
            for (k, d) in offsets.iter().enumerate() {
                if let Some(i) = input_row_of(c, d) {
                    entries.push((k as u32, i as u32));
                }
            }
            starts.push(entries.len() as u32);
        }
        let by_out = Csr { starts, entries };
        let by_in = by_out.transpose(n_in);
        let mut pairs = vec![Vec::new(); offsets.len()];
        for j in 0..n_out {
            for &(k, i) in by_out.row(j) {
                pairs[k as usize].push((i, j as u32));
            }
        }
        Self {
            offsets,
            pairs,
            n_in,
            n_out,
            by_out,
            by_in,
        }
    }

    /// Convolution map: input `i` feeds output `j` under offset `d` when
    /// `coord_in[i] = coord_out[j] + input_stride * d`.
    pub fn conv(input: &CoordSet, output: &CoordSet, kernel: usize) -> Result<Self> {
        if output.stride() % input.stride() != 0 {
            return Err(Error::invalid(format!(
                "output stride {} is not a multiple of input stride {}",
                output.stride(),
                input.stride()
            )));
        }
        let s = input.stride();
        Ok(Self::build(
            kernel_offsets(kernel)?,
            input.len(),
            output,
            |c, d| input.row_of(&[c[0] + s * d[0], c[1] + s * d[1], c[2] + s * d[2]]),
        ))
    }

    /// Transposed-convolution map: input `i` scatters into output `j` under
    /// offset `d` when `coord_out[j] = coord_in[i] + output_stride * d`.
    pub fn transposed(input: &CoordSet, output: &CoordSet, kernel: usize) -> Result<Self> {
        if input.stride() % output.stride() != 0 {
            return Err(Error::invalid(format!(
                "input stride {} is not a multiple of output stride {}",
                input.stride(),
                output.stride()
            )));
        }
        let s = output.stride();
        Ok(Self::build(
            kernel_offsets(kernel)?,
            input.len(),
            output,
            |c, d| input.row_of(&[c[0] - s * d[0], c[1] - s * d[1], c[2] - s * d[2]]),
        ))
    }

    pub fn offsets(&self) -> &[Coord] {
        &self.offsets
    }

    /// `(input row, output row)` pairs under offset index `k`.
    pub fn pairs(&self, k: usize) -> &[(u32, u32)] {
        &self.pairs[k]
    }

    pub fn volume(&self) -> usize {
        self.offsets.len()
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn pair_count(&self) -> usize {
        self.by_out.entries.len()
    }

    pub(crate) fn by_out(&self) -> &Csr {
        &self.by_out
    }

    pub(crate) fn by_in(&self) -> &Csr {
        &self.by_in
    }
}

/// Kernel map of a stride-`stride` convolution from `input` onto `out_coords`.
pub fn build_kernel_map(
    input: &SparseTensor,
    out_coords: &[Coord],
    kernel: usize,
    stride: i32,
) -> Result<KernelMap> {
    if stride < 1 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let out = CoordSet::new(out_coords.to_vec(), input.stride() * stride)?;
    KernelMap::conv(input.coord_set(), &out, kernel)
}

/// Kernel map of an up-sampling transposed convolution onto `out_coords`.
pub fn build_transposed_kernel_map(
    input: &SparseTensor,
    out_coords: &[Coord],
    kernel: usize,
    up: i32,
) -> Result<KernelMap> {
    if up < 1 || input.stride() % up != 0 {
        return Err(Error::invalid(
            "input stride must be divisible by the up-sampling factor",
        ));
    }
    let out = CoordSet::new(out_coords.to_vec(), input.stride() / up)?;
    KernelMap::transposed(input.coord_set(), &out, kernel)
}
