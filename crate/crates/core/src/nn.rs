//! Small numerical building blocks shared by the stage-2 and stage-3 networks:
//! named parameter tensors and their binary format, im2col convolution,
//! bilinear resizing, and the Adam optimizer.
//!
//! Images are stored channel-first (`C × H × W`, row-major) as `f64`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::io;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &str = "PLNN";
pub const PARAMS_VERSION: u8 = 1;

/// A named, shaped parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Symmetric uniform initialization with variance `1 / fan_in`.
    pub fn uniform(name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        let mut t = Self::zeros(name, shape);
        for v in &mut t.data {
            *v = rng.random_range(-bound..bound);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Writes tensors as `PLNN`: magic, version, u32 tensor count, then per
/// tensor a u32 name length, the UTF-8 name, u32 rank and u32 dimensions,
/// followed by every tensor's `f32` payload in table order.
pub fn save_params(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut bytes = io::encode_header(PARAMS_MAGIC, Some(PARAMS_VERSION), &[tensors.len()]);
    for t in tensors {
        bytes.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(t.name.as_bytes());
        bytes.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in tensors {
        for &v in &t.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    io::write_bytes(path, &bytes)
}

pub fn load_params(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = io::read_bytes(path)?;
    let (dims, mut rest) = io::decode_header(path, &bytes, PARAMS_MAGIC, Some(PARAMS_VERSION), 1)?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let take_u32 = |rest: &mut &[u8]| -> Result<usize> {
        if rest.len() < 4 {
            return Err(malformed("layer table ends early".into()));
        }
        let v = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        *rest = &rest[4..];
        Ok(v)
    };
    let mut table = Vec::with_capacity(dims[0]);
    for _ in 0..dims[0] {
        let len = take_u32(&mut rest)?;
        if rest.len() < len {
            return Err(malformed("layer name runs past the end of the file".into()));
        }
        let name = std::str::from_utf8(&rest[..len])
            .map_err(|_| malformed("layer name is not UTF-8".into()))?
            .to_string();
        rest = &rest[len..];
        let rank = take_u32(&mut rest)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut rest)?);
        }
        table.push((name, shape));
    }
    let expected: usize = table
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum::<usize>()
        * 4;
    if rest.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: rest.len(),
        });
    }
    if rest.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: payload has {} bytes but the layer table declares {expected}",
            path.display(),
            rest.len()
        )));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let data = rest[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        rest = &rest[4 * n..];
        out.push(Tensor { name, shape, data });
    }
    Ok(out)
}

/// Looks up tensors by name and checks their shapes against `expected`.
pub fn match_params(path: &Path, loaded: Vec<Tensor>, expected: &[Tensor]) -> Result<Vec<Tensor>> {
    if loaded.len() != expected.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} tensors stored, {} expected",
            path.display(),
            loaded.len(),
            expected.len()
        )));
    }
    for (got, want) in loaded.iter().zip(expected) {
        if got.name != want.name || got.shape != want.shape {
            return Err(Error::DimensionMismatch(format!(
                "{}: tensor {} {:?} does not match expected {} {:?}",
                path.display(),
                got.name,
                got.shape,
                want.name,
                want.shape
            )));
        }
    }
    Ok(loaded)
}

/// `C = A·B + beta·C` with explicit (row, column) strides for `A` and `B`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides));
    assert!(b.len() >= span(k, n, b_strides));
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kernel, self.kernel]
    }
}

fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let mut cols = vec![0.0; g.rows() * p];
    for ci in 0..g.cin {
        let plane = &input[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[oy * ow + ox] = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let mut out = vec![0.0; g.cin * g.height * g.width];
    for ci in 0..g.cin {
        let plane = &mut out[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            plane[y as usize * g.width + x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward pass. Returns the `cout × OH × OW` output and the im2col buffer
/// needed by [`conv_backward`] (empty for pointwise convolutions).
pub fn conv_forward(g: &ConvGeom, weight: &[f64], bias: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(input.len(), g.cin * g.height * g.width);
    assert_eq!(weight.len(), g.cout * g.rows());
    let p = g.positions();
    let mut out = vec![0.0; g.cout * p];
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    let r = g.rows();
    if g.is_pointwise() {
        gemm(g.cout, r, p, weight, (r, 1), input, (p, 1), 1.0, &mut out);
        (out, Vec::new())
    } else {
        let cols = im2col(g, input);
        gemm(g.cout, r, p, weight, (r, 1), &cols, (p, 1), 1.0, &mut out);
        (out, cols)
    }
}

/// Backward pass: accumulates into `grad_weight`/`grad_bias` and returns the
/// input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    g: &ConvGeom,
    weight: &[f64],
    input: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let p = g.positions();
    let r = g.rows();
    let cols = if g.is_pointwise() { input } else { cols };
    for (co, row) in grad_out.chunks_exact(p).enumerate() {
        grad_bias[co] += row.iter().sum::<f64>();
    }
    // dW (cout × r) += dOut (cout × p) · colsᵀ (p × r)
    gemm(g.cout, p, r, grad_out, (p, 1), cols, (1, p), 1.0, grad_weight);
    if !need_input {
        return None;
    }
    // dCols (r × p) = Wᵀ (r × cout) · dOut (cout × p)
    let mut dcols = vec![0.0; r * p];
    gemm(r, g.cout, p, weight, (1, r), grad_out, (p, 1), 0.0, &mut dcols);
    Some(if g.is_pointwise() { dcols } else { col2im(g, &dcols) })
}

/// Precomputed bilinear interpolation taps along one axis
/// (half-pixel centres, edges clamped).
#[derive(Debug, Clone)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut taps = Taps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for o in 0..dst {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(if hi == lo { 0.0 } else { s - lo as f64 });
        }
        taps
    }
}

/// Bilinear resize of a `C × h × w` image to `C × H × W`.
#[derive(Debug, Clone)]
pub struct Bilinear {
    pub channels: usize,
    pub src: (usize, usize),
    pub dst: (usize, usize),
    rows: Taps,
    cols: Taps,
}

impl Bilinear {
    pub fn new(channels: usize, src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            channels,
            src,
            dst,
            rows: Taps::new(src.0, dst.0),
            cols: Taps::new(src.1, dst.1),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let (h, w) = self.src;
        let (hh, ww) = self.dst;
        let mut out = vec![0.0; self.channels * hh * ww];
        for c in 0..self.channels {
            let plane = &input[c * h * w..(c + 1) * h * w];
            let dst = &mut out[c * hh * ww..(c + 1) * hh * ww];
            for y in 0..hh {
                let (y0, y1, ly) = (self.rows.lo[y], self.rows.hi[y], self.rows.frac[y]);
                for x in 0..ww {
                    let (x0, x1, lx) = (self.cols.lo[x], self.cols.hi[x], self.cols.frac[x]);
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bottom = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    dst[y * ww + x] = top * (1.0 - ly) + bottom * ly;
                }
            }
        }
        out
    }

    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        let (h, w) = self.src;
        let (hh, ww) = self.dst;
        let mut grad = vec![0.0; self.channels * h * w];
        for c in 0..self.channels {
            let plane = &mut grad[c * h * w..(c + 1) * h * w];
            let src = &grad_out[c * hh * ww..(c + 1) * hh * ww];
            for y in 0..hh {
                let (y0, y1, ly) = (self.rows.lo[y], self.rows.hi[y], self.rows.frac[y]);
                for x in 0..ww {
                    let (x0, x1, lx) = (self.cols.lo[x], self.cols.hi[x], self.cols.frac[x]);
                    let g = src[y * ww + x];
                    plane[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                    plane[y0 * w + x1] += g * (1.0 - ly) * lx;
                    plane[y1 * w + x0] += g * ly * (1.0 - lx);
                    plane[y1 * w + x1] += g * ly * lx;
                }
            }
        }
        grad
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Adam with a constant step size.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(step_size: f64, params: &[Tensor]) -> Self {
        Self {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (w, &gi)) in p.data.iter_mut().zip(g).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *w -= self.step_size * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Accumulates `src` into `dst` tensor by tensor.
pub fn add_grads(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

pub fn scale_grads(grads: &mut [Vec<f64>], k: f64) {
    for g in grads {
        for v in g.iter_mut() {
            *v *= k;
        }
    }
}

pub fn zero_grads(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|p| vec![0.0; p.len()]).collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)` (0 when both vanish).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn naive_conv(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.cout * oh * ow];
        for co in 0..g.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..g.cin {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let y = (oy * g.stride + ky) as isize - g.pad as isize;
                                let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                                if y < 0 || xx < 0 || y >= g.height as isize || xx >= g.width as isize {
                                    continue;
                                }
                                let wi = ((co * g.cin + ci) * g.kernel + ky) * g.kernel + kx;
                                acc += w[wi] * x[(ci * g.height + y as usize) * g.width + xx as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = seed::rng(3);
        for (kernel, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let g = ConvGeom {
                cin: 3,
                cout: 4,
                kernel,
                stride,
                pad,
                height: 7,
                width: 6,
            };
            let w = random(g.cout * g.rows(), &mut rng);
            let b = random(g.cout, &mut rng);
            let x = random(g.cin * 42, &mut rng);
            let (out, _) = conv_forward(&g, &w, &b, &x);
            let want = naive_conv(&g, &w, &b, &x);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = seed::rng(4);
        let g = ConvGeom {
            cin: 2,
            cout: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
            height: 5,
            width: 6,
        };
        let w = random(g.cout * g.rows(), &mut rng);
        let b = random(g.cout, &mut rng);
        let x = random(g.cin * 30, &mut rng);
        let probe = random(g.cout * g.positions(), &mut rng);
        let loss = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            conv_forward(&g, w, b, x).0.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let (_, cols) = conv_forward(&g, &w, &b, &x);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let gx = conv_backward(&g, &w, &x, &cols, &probe, &mut gw, &mut gb, true).unwrap();
        let h = 1e-6;
        let fd = |f: &dyn Fn(usize, f64) -> f64, n: usize| -> Vec<f64> {
            (0..n).map(|i| (f(i, h) - f(i, -h)) / (2.0 * h)).collect()
        };
        let fw = fd(
            &|i, d| {
                let mut w2 = w.clone();
                w2[i] += d;
                loss(&w2, &b, &x)
            },
            w.len(),
        );
        let fx = fd(
            &|i, d| {
                let mut x2 = x.clone();
                x2[i] += d;
                loss(&w, &b, &x2)
            },
            x.len(),
        );
        assert!(relative_error(&gw, &fw) < 1e-8);
        assert!(relative_error(&gx, &fx) < 1e-8);
        let total: f64 = probe.chunks_exact(g.positions()).map(|r| r.iter().sum::<f64>()).sum();
        assert!((gb.iter().sum::<f64>() - total).abs() < 1e-12);
    }

    #[test]
    fn bilinear_matches_half_pixel_reference() {
        // 2 → 4 upsampling: outputs sit at source coordinates -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        let up = Bilinear::new(1, (1, 2), (1, 4));
        let out = up.forward(&[0.0, 1.0]);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
        let same = Bilinear::new(2, (3, 3), (3, 3));
        let x: Vec<f64> = (0..18).map(|v| v as f64).collect();
        assert_eq!(same.forward(&x), x);
    }

    #[test]
    fn bilinear_backward_is_the_adjoint() {
        let mut rng = seed::rng(5);
        let up = Bilinear::new(2, (3, 4), (7, 9));
        let x = random(24, &mut rng);
        let y = random(2 * 63, &mut rng);
        let lhs: f64 = up.forward(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = up.backward(&y).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn params_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.plnn");
        let mut rng = seed::rng(6);
        let tensors = vec![
            Tensor::uniform("conv1.weight", &[4, 2, 3, 3], 18, &mut rng),
            Tensor::zeros("conv1.bias", &[4]),
        ];
        save_params(&path, &tensors).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in loaded.iter().zip(&tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Truncated { .. })));
        std::fs::write(&path, b"PLNX\x01").unwrap();
        assert!(matches!(load_params(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn adam_first_step_moves_by_the_step_size() {
        let mut p = vec![Tensor::zeros("w", &[3])];
        let mut opt = Adam::new(0.01, &p);
        opt.step(&mut p, &[vec![2.0, -0.5, 0.0]]);
        assert!((p[0].data[0] + 0.01).abs() < 1e-9);
        assert!((p[0].data[1] - 0.01).abs() < 1e-9);
        assert_eq!(p[0].data[2], 0.0);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[1001.0, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
