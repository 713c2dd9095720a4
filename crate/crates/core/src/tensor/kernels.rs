//! Raw numeric kernels over flat row-major buffers.
//!
//! Shapes are validated by the callers in `ops`; these functions assume
//! consistent dimensions.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if kernel == 0 || stride == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Input coordinate touched by output position `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Cross-correlation: `y[n,o,p,q] = Σ k[o,c,i,j] · x[n,c,p·s+i−pad,q·s+j−pad]`.
pub(crate) fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let ybase = (n * g.out_channels + o) * plane_out;
            for c in 0..g.in_channels {
                let xbase = (n * g.in_channels + c) * plane_in;
                let kbase = (o * g.in_channels + c) * g.k_h * g.k_w;
                for i in 0..g.k_h {
                    for j in 0..g.k_w {
                        let kv = k[kbase + i * g.k_w + j];
                        if kv == 0.0 {
                            continue;
                        }
                        for p in 0..g.out_h {
                            let Some(h) = g.src(p, i, g.in_h) else { continue };
                            let xrow = xbase + h * g.in_w;
                            let yrow = ybase + p * g.out_w;
                            for q in 0..g.out_w {
                                if let Some(w) = g.src(q, j, g.in_w) {
                                    y[yrow + q] += kv * x[xrow + w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of `conv2d` with respect to its input: maps an output-shaped
/// buffer back onto the input grid.
pub(crate) fn conv2d_transpose(gy: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0; g.batch * g.in_channels * g.in_h * g.in_w];
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let ybase = (n * g.out_channels + o) * plane_out;
            for c in 0..g.in_channels {
                let xbase = (n * g.in_channels + c) * plane_in;
                let kbase = (o * g.in_channels + c) * g.k_h * g.k_w;
                for i in 0..g.k_h {
                    for j in 0..g.k_w {
                        let kv = k[kbase + i * g.k_w + j];
                        if kv == 0.0 {
                            continue;
                        }
                        for p in 0..g.out_h {
                            let Some(h) = g.src(p, i, g.in_h) else { continue };
                            let xrow = xbase + h * g.in_w;
                            let yrow = ybase + p * g.out_w;
                            for q in 0..g.out_w {
                                if let Some(w) = g.src(q, j, g.in_w) {
                                    gx[xrow + w] += kv * gy[yrow + q];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint of `conv2d` with respect to its kernel.
pub(crate) fn conv2d_kernel_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gk = vec![0.0; g.out_channels * g.in_channels * g.k_h * g.k_w];
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let ybase = (n * g.out_channels + o) * plane_out;
            for c in 0..g.in_channels {
                let xbase = (n * g.in_channels + c) * plane_in;
                let kbase = (o * g.in_channels + c) * g.k_h * g.k_w;
                for i in 0..g.k_h {
                    for j in 0..g.k_w {
                        let mut acc = 0.0;
                        for p in 0..g.out_h {
                            let Some(h) = g.src(p, i, g.in_h) else { continue };
                            let xrow = xbase + h * g.in_w;
                            let yrow = ybase + p * g.out_w;
                            for q in 0..g.out_w {
                                if let Some(w) = g.src(q, j, g.in_w) {
                                    acc += gy[yrow + q] * x[xrow + w];
                                }
                            }
                        }
                        gk[kbase + i * g.k_w + j] += acc;
                    }
                }
            }
        }
    }
    gk
}

/// Row strides for a shape, row-major.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Maps a flat index in `big` onto the flat index in `small`, where `small`
/// has the same rank with some axes of extent 1 (or is rank 0).
fn reduced_index(mut idx: usize, big: &[usize], small: &[usize], small_strides: &[usize]) -> usize {
    if small.is_empty() {
        return 0;
    }
    let mut out = 0;
    for d in (0..big.len()).rev() {
        let coord = idx % big[d];
        idx /= big[d];
        if small[d] != 1 {
            out += coord * small_strides[d];
        }
    }
    out
}

pub(crate) fn broadcast_to(src: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let total: usize = to.iter().product();
    if from.is_empty() || src.len() == 1 {
        return vec![src[0]; total];
    }
    let fs = strides(from);
    (0..total).map(|i| src[reduced_index(i, to, from, &fs)]).collect()
}

pub(crate) fn sum_to(src: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let total: usize = to.iter().product();
    if to.is_empty() {
        return vec![src.iter().sum()];
    }
    let ts = strides(to);
    let mut out = vec![0.0; total];
    for (i, v) in src.iter().enumerate() {
        out[reduced_index(i, from, to, &ts)] += v;
    }
    out
}

/// Row-wise log-softmax over the trailing axis, stabilized by max-subtraction.
pub(crate) fn log_softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
        // The max term contributes exactly 1; ln_1p keeps tiny tails accurate.
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let log_norm = rest.ln_1p();
        out.extend(row.iter().map(|v| (v - max) - log_norm));
    }
    out
}
