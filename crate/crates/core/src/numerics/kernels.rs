//! Forward and backward kernels on raw slices.
//!
//! Every differentiable primitive used by the model has a forward routine here
//! and a matching backward routine taking the upstream cotangent. The tape in
//! [`super::tape`] only wires these together.

/// `c = a · b (+ c if accumulate)` for row-major `a: [m,k]`, `b: [k,n]`.
/// Transposed operands are expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the caller guarantees that `a` and `b` cover every element
    // addressed by the given strides and that `c` holds an `m × n` block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = x W + b` with `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(n, d_in, d_out, x, (d_in as isize, 1), w, (d_out as isize, 1), &mut y, true);
    y
}

/// Gradients of `linear_forward` given `dy: [n, d_out]`; returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * d_in];
    // dx = dy · Wᵀ
    gemm(n, d_out, d_in, dy, (d_out as isize, 1), w, (1, d_out as isize), &mut dx, false);
    let mut dw = vec![0.0; d_in * d_out];
    // dW = xᵀ · dy
    gemm(d_in, n, d_out, x, (1, d_in as isize), dy, (d_out as isize, 1), &mut dw, false);
    let mut db = vec![0.0; d_out];
    for row in dy.chunks_exact(d_out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

/// Softmax over consecutive chunks of `group` values, max-subtracted.
pub fn softmax_forward(x: &[f64], group: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for chunk in y.chunks_exact_mut(group) {
        let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in chunk.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in chunk.iter_mut() {
            *v /= sum;
        }
    }
    y
}

pub fn softmax_backward(y: &[f64], dy: &[f64], group: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yc, dyc), dxc) in y.chunks_exact(group).zip(dy.chunks_exact(group)).zip(dx.chunks_exact_mut(group)) {
        let inner: f64 = yc.iter().zip(dyc).map(|(a, b)| a * b).sum();
        for ((d, yv), g) in dxc.iter_mut().zip(yc).zip(dyc) {
            *d = yv * (g - inner);
        }
    }
    dx
}

/// Saved statistics for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_forward(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, LayerNormCache) {
    let d = gamma.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (xs[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            let dxh = g[j] * gamma[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let is = cache.inv_std[r];
        for j in 0..d {
            let dxh = g[j] * gamma[j];
            dx[r * d + j] = is * (dxh - sum_dxh / d as f64 - xh[j] * sum_dxh_xh / d as f64);
        }
    }
    (dx, dgamma, dbeta)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-head scaled dot-product attention over a fused `[n, 3d]` QKV block.
/// Returns the concatenated head outputs `[n, d]` and the attention
/// probabilities `[heads, n, n]`.
pub fn attention_forward(qkv: &[f64], n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let q = &qkv[i * stride + qo..i * stride + qo + dh];
            for j in 0..n {
                let k = &qkv[j * stride + ko..j * stride + ko + dh];
                p[i * n + j] = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
        }
        let soft = softmax_forward(p, n);
        p.copy_from_slice(&soft);
        for i in 0..n {
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n {
                let a = p[i * n + j];
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                for (acc, vv) in o.iter_mut().zip(v) {
                    *acc += a * vv;
                }
            }
        }
    }
    (out, probs)
}

pub fn attention_backward(qkv: &[f64], probs: &[f64], dout: &[f64], n: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut dqkv = vec![0.0; n * stride];
    let mut dp = vec![0.0; n * n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let p = &probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let g = &dout[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n {
                let a = p[i * n + j];
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                dp[i * n + j] = g.iter().zip(v).map(|(x, y)| x * y).sum();
                let dv = &mut dqkv[j * stride + vo..j * stride + vo + dh];
                for (acc, gv) in dv.iter_mut().zip(g) {
                    *acc += a * gv;
                }
            }
        }
        let ds = softmax_backward(p, &dp, n);
        for i in 0..n {
            for j in 0..n {
                let s = ds[i * n + j] * scale;
                if s == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    let qv = qkv[i * stride + qo + c];
                    let kv = qkv[j * stride + ko + c];
                    dqkv[i * stride + qo + c] += s * kv;
                    dqkv[j * stride + ko + c] += s * qv;
                }
            }
        }
    }
    dqkv
}

/// Bilinear interpolation weights for a continuous pixel-coordinate point.
///
/// Pixel `(row i, col j)` covers `[j, j+1) × [i, i+1)` with its center at
/// `(j + 0.5, i + 0.5)`. Returns the four neighbour cells `(row, col)` with
/// their weights and the weight derivatives w.r.t. `x` and `y`; cells may lie
/// outside the map and must then be treated as zero.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    pub cells: [(isize, isize); 4],
    pub weights: [f64; 4],
    pub dweights_dx: [f64; 4],
    pub dweights_dy: [f64; 4],
}

pub fn bilinear_taps(x: f64, y: f64) -> BilinearTaps {
    let xs = x - 0.5;
    let ys = y - 0.5;
    let x0 = xs.floor();
    let y0 = ys.floor();
    let fx = xs - x0;
    let fy = ys - y0;
    let (c0, r0) = (x0 as isize, y0 as isize);
    BilinearTaps {
        cells: [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)],
        weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dweights_dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dweights_dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    }
}

/// Geometry of one pyramid level inside a flattened `[Σ H_l·W_l, C]` value block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    /// First row of this level in the flattened block.
    pub start: usize,
}

/// Dimensions of one deformable sampling call.
#[derive(Clone, Copy, Debug)]
pub struct MsdaDims {
    pub queries: usize,
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
}

/// Counts of work performed by a deformable sampling pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    /// Number of bilinear samples taken.
    pub samples: usize,
    /// Number of in-bounds pixel reads.
    pub pixel_reads: usize,
}

/// Deformable sampling core: for each query `q`, head `m`, level `l` and point `k`,
/// reads `value` bilinearly at `ref_q · (W_l, H_l) + offset_{qmlk}` and
/// accumulates it with weight `A_{qmlk}` into head `m`'s channel block.
///
/// Layouts: `offsets: [Q, M·L·K·2]` ordered `(m, l, k, xy)`,
/// `weights: [Q, M·L·K]`, `refs: [Q, 2]` as normalized `(x, y)`.
pub fn msda_sample_forward(
    value: &[f64],
    levels: &[LevelShape],
    offsets: &[f64],
    weights: &[f64],
    refs: &[f64],
    dims: MsdaDims,
) -> (Vec<f64>, SampleStats) {
    let MsdaDims { queries, channels, heads, points } = dims;
    let nl = levels.len();
    let dh = channels / heads;
    let slots = heads * nl * points;
    let mut out = vec![0.0; queries * channels];
    let mut stats = SampleStats::default();
    for q in 0..queries {
        let (rx, ry) = (refs[2 * q], refs[2 * q + 1]);
        for m in 0..heads {
            let o = &mut out[q * channels + m * dh..q * channels + (m + 1) * dh];
            for (l, lv) in levels.iter().enumerate() {
                for k in 0..points {
                    let slot = (m * nl + l) * points + k;
                    let a = weights[q * slots + slot];
                    let x = rx * lv.width as f64 + offsets[(q * slots + slot) * 2];
                    let y = ry * lv.height as f64 + offsets[(q * slots + slot) * 2 + 1];
                    let taps = bilinear_taps(x, y);
                    stats.samples += 1;
                    for t in 0..4 {
                        let (r, c) = taps.cells[t];
                        if r < 0 || c < 0 || r >= lv.height as isize || c >= lv.width as isize {
                            continue;
                        }
                        stats.pixel_reads += 1;
                        let row = lv.start + r as usize * lv.width + c as usize;
                        let w = a * taps.weights[t];
                        let v = &value[row * channels + m * dh..row * channels + (m + 1) * dh];
                        for (acc, vv) in o.iter_mut().zip(v) {
                            *acc += w * vv;
                        }
                    }
                }
            }
        }
    }
    (out, stats)
}

/// Gradients of [`msda_sample_forward`]: `(d_value, d_offsets, d_weights, d_refs)`.
#[allow(clippy::too_many_arguments)]
pub fn msda_sample_backward(
    value: &[f64],
    levels: &[LevelShape],
    offsets: &[f64],
    weights: &[f64],
    refs: &[f64],
    dims: MsdaDims,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let MsdaDims { queries, channels, heads, points } = dims;
    let nl = levels.len();
    let dh = channels / heads;
    let slots = heads * nl * points;
    let mut d_value = vec![0.0; value.len()];
    let mut d_offsets = vec![0.0; offsets.len()];
    let mut d_weights = vec![0.0; weights.len()];
    let mut d_refs = vec![0.0; refs.len()];
    for q in 0..queries {
        let (rx, ry) = (refs[2 * q], refs[2 * q + 1]);
        for m in 0..heads {
            let g = &dout[q * channels + m * dh..q * channels + (m + 1) * dh];
            for (l, lv) in levels.iter().enumerate() {
                for k in 0..points {
                    let slot = (m * nl + l) * points + k;
                    let a = weights[q * slots + slot];
                    let x = rx * lv.width as f64 + offsets[(q * slots + slot) * 2];
                    let y = ry * lv.height as f64 + offsets[(q * slots + slot) * 2 + 1];
                    let taps = bilinear_taps(x, y);
                    let (mut g_s, mut g_x, mut g_y) = (0.0, 0.0, 0.0);
                    for t in 0..4 {
                        let (r, c) = taps.cells[t];
                        if r < 0 || c < 0 || r >= lv.height as isize || c >= lv.width as isize {
                            continue;
                        }
                        let row = lv.start + r as usize * lv.width + c as usize;
                        let base = row * channels + m * dh;
                        let v = &value[base..base + dh];
                        let gv: f64 = g.iter().zip(v).map(|(p, s)| p * s).sum();
                        g_s += taps.weights[t] * gv;
                        g_x += taps.dweights_dx[t] * gv;
                        g_y += taps.dweights_dy[t] * gv;
                        let w = a * taps.weights[t];
                        for (acc, gg) in d_value[base..base + dh].iter_mut().zip(g) {
                            *acc += w * gg;
                        }
                    }
                    d_weights[q * slots + slot] += g_s;
                    d_offsets[(q * slots + slot) * 2] += a * g_x;
                    d_offsets[(q * slots + slot) * 2 + 1] += a * g_y;
                    d_refs[2 * q] += a * g_x * lv.width as f64;
                    d_refs[2 * q + 1] += a * g_y * lv.height as f64;
                }
            }
        }
    }
    (d_value, d_offsets, d_weights, d_refs)
}
