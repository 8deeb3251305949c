//! Slice-level forward and backward kernels.
//!
//! Shapes are validated by callers; these functions only index.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Accumulates `da += g · bᵀ` and `db += aᵀ · g`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(da) = da {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (d, gv) in dbrow.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Per-row layer normalization. Returns `(output, xhat, rstd)`; `None` when
/// some row has `variance + eps == 0`.
pub fn layer_norm(
    h: &[f64],
    gamma: &[f64],
    beta: &[f64],
    dim: usize,
    eps: f64,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let rows = h.len() / dim;
    let mut out = vec![0.0; h.len()];
    let mut xhat = vec![0.0; h.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let x = &h[r * dim..(r + 1) * dim];
        let mean = x.iter().sum::<f64>() / dim as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let denom = var + eps;
        if denom <= 0.0 {
            return None;
        }
        let rs = 1.0 / denom.sqrt();
        rstd[r] = rs;
        for d in 0..dim {
            let xh = (x[d] - mean) * rs;
            xhat[r * dim + d] = xh;
            out[r * dim + d] = xh * gamma[d] + beta[d];
        }
    }
    Some((out, xhat, rstd))
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    g: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    dim: usize,
    dh: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let rows = g.len() / dim;
    if let Some(dgamma) = dgamma {
        for r in 0..rows {
            for d in 0..dim {
                dgamma[d] += g[r * dim + d] * xhat[r * dim + d];
            }
        }
    }
    if let Some(dbeta) = dbeta {
        for r in 0..rows {
            for d in 0..dim {
                dbeta[d] += g[r * dim + d];
            }
        }
    }
    if let Some(dh) = dh {
        let mut dxhat = vec![0.0; dim];
        for r in 0..rows {
            let off = r * dim;
            for d in 0..dim {
                dxhat[d] = g[off + d] * gamma[d];
            }
            let mean_dx = dxhat.iter().sum::<f64>() / dim as f64;
            let mean_dx_xhat = dxhat
                .iter()
                .zip(&xhat[off..off + dim])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / dim as f64;
            for d in 0..dim {
                dh[off + d] += rstd[r] * (dxhat[d] - mean_dx - xhat[off + d] * mean_dx_xhat);
            }
        }
    }
}

/// Geometry of a grouped 1-D convolution over a `[T × C_in]` sequence with
/// a `[C_out × C_in/G × k]` kernel and zero "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub time: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    fn pad(&self) -> isize {
        (self.kernel as isize - 1) / 2
    }
}

pub fn conv1d_grouped(h: &[f64], w: &[f64], geo: ConvGeometry) -> Vec<f64> {
    let ConvGeometry {
        time,
        c_in,
        c_out,
        kernel,
        ..
    } = geo;
    let ipg = geo.in_per_group();
    let opg = geo.out_per_group();
    let pad = geo.pad();
    let mut out = vec![0.0; time * c_out];
    for t in 0..time {
        for o in 0..c_out {
            let base_in = (o / opg) * ipg;
            let mut acc = 0.0;
            for ci in 0..ipg {
                let wrow = &w[(o * ipg + ci) * kernel..(o * ipg + ci + 1) * kernel];
                for (j, wv) in wrow.iter().enumerate() {
                    let src = t as isize + j as isize - pad;
                    if src < 0 || src >= time as isize {
                        continue;
                    }
                    acc += wv * h[src as usize * c_in + base_in + ci];
                }
            }
            out[t * c_out + o] = acc;
        }
    }
    out
}

pub fn conv1d_grouped_backward(
    h: &[f64],
    w: &[f64],
    g: &[f64],
    geo: ConvGeometry,
    mut dh: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let ConvGeometry {
        time,
        c_in,
        c_out,
        kernel,
        ..
    } = geo;
    let ipg = geo.in_per_group();
    let opg = geo.out_per_group();
    let pad = geo.pad();
    for t in 0..time {
        for o in 0..c_out {
            let go = g[t * c_out + o];
            if go == 0.0 {
                continue;
            }
            let base_in = (o / opg) * ipg;
            for ci in 0..ipg {
                let widx = (o * ipg + ci) * kernel;
                for j in 0..kernel {
                    let src = t as isize + j as isize - pad;
                    if src < 0 || src >= time as isize {
                        continue;
                    }
                    let hidx = src as usize * c_in + base_in + ci;
                    if let Some(dh) = dh.as_deref_mut() {
                        dh[hidx] += go * w[widx + j];
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx + j] += go * h[hidx];
                    }
                }
            }
        }
    }
}

pub fn softmax_rows(x: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(dim).zip(out.chunks_mut(dim)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

pub fn log_sum_exp_rows(x: &[f64], dim: usize) -> Vec<f64> {
    x.chunks(dim)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}
