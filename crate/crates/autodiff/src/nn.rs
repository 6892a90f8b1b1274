//! Neural-network layers as tape operations. Feature maps are `[n, c, h, w]`.

use crate::tape::Var;
use crate::tensor::Tensor;

/// `c[m,n] = a[m,k] * b[k,n] + beta * c`; all row-major unless transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked below against the strides used.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.rows() * cols];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D convolution with a square `[c_out, c_in, k, k]` kernel and bias `[c_out]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        assert_eq!(x.ndim(), 4, "conv2d input must be [n, c, h, w]");
        let (n, c_in, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (c_out, k) = (w.dim(0), w.dim(2));
        assert_eq!(w.shape(), &[c_out, c_in, k, k], "conv2d weight shape");
        assert_eq!(bias.value().shape(), &[c_out], "conv2d bias shape");
        let g = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, cols) = (g.rows(), g.cols());
        let b = bias.value();
        let mut out = vec![0.0; n * c_out * cols];
        let mut saved_cols = Vec::with_capacity(n);
        let in_stride = c_in * h * wd;
        for i in 0..n {
            let col = im2col(&x.data()[i * in_stride..(i + 1) * in_stride], &g);
            let dst = &mut out[i * c_out * cols..(i + 1) * c_out * cols];
            for (o, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(b.data()[o]);
            }
            gemm(c_out, rows, cols, w.data(), false, &col, false, 1.0, dst);
            saved_cols.push(col);
        }
        let value = Tensor::new(&[n, c_out, g.h_out, g.w_out], out);
        self.tape.op(
            &[self, weight, bias],
            value,
            Box::new(move |ctx| {
                let w = &ctx.inputs[1];
                let gy = ctx.grad.data();
                let mut dw = vec![0.0; c_out * rows];
                let mut db = vec![0.0; c_out];
                let mut dx = ctx.need[0].then(|| vec![0.0; n * in_stride]);
                let mut dcol = vec![0.0; rows * cols];
                for i in 0..n {
                    let gyi = &gy[i * c_out * cols..(i + 1) * c_out * cols];
                    if ctx.need[1] {
                        gemm(c_out, cols, rows, gyi, false, &saved_cols[i], true, 1.0, &mut dw);
                    }
                    for (o, chunk) in gyi.chunks(cols).enumerate() {
                        db[o] += chunk.iter().sum::<f64>();
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, c_out, cols, w.data(), true, gyi, false, 0.0, &mut dcol);
                        col2im(&dcol, &g, &mut dx[i * in_stride..(i + 1) * in_stride]);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(ctx.inputs[0].shape(), d)),
                    ctx.need[1].then(|| Tensor::new(w.shape(), dw)),
                    ctx.need[2].then(|| Tensor::new(&[c_out], db)),
                ]
            }),
        )
    }

    /// Group normalisation with per-channel affine `gamma`, `beta`.
    pub fn group_norm(self, gamma: Var<'t>, beta: Var<'t>, groups: usize, eps: f64) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "group_norm input must be [n, c, h, w]");
        let (n, c) = (x.dim(0), x.dim(1));
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let hw = x.dim(2) * x.dim(3);
        let per_group = c / groups * hw;
        let (gm, bt) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; n * groups];
        for i in 0..n {
            for gi in 0..groups {
                let start = (i * c + gi * c / groups) * hw;
                let slice = &x.data()[start..start + per_group];
                let mean = slice.iter().sum::<f64>() / per_group as f64;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i * groups + gi] = is;
                for (d, s) in xhat[start..start + per_group].iter_mut().zip(slice) {
                    *d = (s - mean) * is;
                }
            }
        }
        let out = Tensor::from_fn(x.shape(), |idx| {
            let ch = (idx / hw) % c;
            xhat[idx] * gm.data()[ch] + bt.data()[ch]
        });
        self.tape.op(
            &[self, gamma, beta],
            out,
            Box::new(move |ctx| {
                let gy = ctx.grad.data();
                let gm = &ctx.inputs[1];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (idx, (&g, &xh)) in gy.iter().zip(&xhat).enumerate() {
                    let ch = (idx / hw) % c;
                    dgamma[ch] += g * xh;
                    dbeta[ch] += g;
                }
                let dx = ctx.need[0].then(|| {
                    let mut dx = vec![0.0; gy.len()];
                    for i in 0..n {
                        for gi in 0..groups {
                            let start = (i * c + gi * c / groups) * hw;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in start..start + per_group {
                                let ch = (j / hw) % c;
                                let d = gy[j] * gm.data()[ch];
                                sum_d += d;
                                sum_dx += d * xhat[j];
                            }
                            let m = per_group as f64;
                            let is = inv_std[i * groups + gi];
                            for j in start..start + per_group {
                                let ch = (j / hw) % c;
                                let d = gy[j] * gm.data()[ch];
                                dx[j] = is * (d - sum_d / m - xhat[j] * sum_dx / m);
                            }
                        }
                    }
                    Tensor::new(ctx.inputs[0].shape(), dx)
                });
                vec![
                    dx,
                    ctx.need[1].then(|| Tensor::new(&[c], dgamma)),
                    ctx.need[2].then(|| Tensor::new(&[c], dbeta)),
                ]
            }),
        )
    }

    /// `[n, i] x [o, i]^T + [o] -> [n, o]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        assert_eq!(x.ndim(), 2, "linear input must be [n, i]");
        let (n, i) = (x.dim(0), x.dim(1));
        let o = w.dim(0);
        assert_eq!(w.shape(), &[o, i], "linear weight shape");
        assert_eq!(b.shape(), &[o], "linear bias shape");
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        gemm(n, i, o, x.data(), false, w.data(), true, 1.0, &mut out);
        self.tape.op(
            &[self, weight, bias],
            Tensor::new(&[n, o], out),
            Box::new(move |ctx| {
                let gy = ctx.grad.data();
                let (x, w) = (&ctx.inputs[0], &ctx.inputs[1]);
                let dx = ctx.need[0].then(|| {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, gy, false, w.data(), false, 0.0, &mut dx);
                    Tensor::new(&[n, i], dx)
                });
                let dw = ctx.need[1].then(|| {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, gy, true, x.data(), false, 0.0, &mut dw);
                    Tensor::new(&[o, i], dw)
                });
                let db = ctx.need[2].then(|| {
                    let mut db = vec![0.0; o];
                    for row in gy.chunks(o) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    Tensor::new(&[o], db)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let s = self.shape();
        let (n, c) = (s[0], s[1]);
        self.reshape(&[n, c, s[2] * s[3]]).mean_axis(2).reshape(&[n, c])
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let out = Tensor::from_fn(&[n, c, h2, w2], |idx| {
            let plane = idx / (h2 * w2);
            let y = (idx / w2) % h2;
            let xx = idx % w2;
            x.data()[plane * h * w + (y / 2) * w + xx / 2]
        });
        self.tape.op(
            &[self],
            out,
            Box::new(move |ctx| {
                let mut g = vec![0.0; n * c * h * w];
                for (idx, &gv) in ctx.grad.data().iter().enumerate() {
                    let plane = idx / (h2 * w2);
                    let y = (idx / w2) % h2;
                    let xx = idx % w2;
                    g[plane * h * w + (y / 2) * w + xx / 2] += gv;
                }
                vec![Some(Tensor::new(&[n, c, h, w], g))]
            }),
        )
    }

    /// Bilinear crop-and-resize of boxes into `size x size` cells.
    ///
    /// `rois` holds `(batch_index, [x1, y1, x2, y2])` in input-image pixels;
    /// `scale` maps them onto this feature map (`1 / stride`). Each output
    /// cell averages `samples x samples` bilinear taps.
    pub fn roi_align(self, rois: &[(usize, [f64; 4])], size: usize, scale: f64, samples: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        // Per output cell: list of (flat spatial index, weight) shared by all channels.
        let mut taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(rois.len() * size * size);
        let norm = 1.0 / (samples * samples) as f64;
        for &(b, bx) in rois {
            assert!(b < n, "roi batch index {b} out of range");
            let x1 = bx[0] * scale - 0.5;
            let y1 = bx[1] * scale - 0.5;
            let bw = ((bx[2] - bx[0]) * scale).max(1e-6) / size as f64;
            let bh = ((bx[3] - bx[1]) * scale).max(1e-6) / size as f64;
            for py in 0..size {
                for px in 0..size {
                    let mut cell = Vec::with_capacity(samples * samples * 4);
                    for sy in 0..samples {
                        for sx in 0..samples {
                            let yy = y1 + bh * (py as f64 + (sy as f64 + 0.5) / samples as f64);
                            let xx = x1 + bw * (px as f64 + (sx as f64 + 0.5) / samples as f64);
                            bilinear_taps(yy, xx, h, w, norm, |pos, wt| cell.push((b * h * w + pos, wt)));
                        }
                    }
                    taps.push(cell);
                }
            }
        }
        let r = rois.len();
        let cells = size * size;
        let mut out = vec![0.0; r * c * cells];
        for ri in 0..r {
            for cell in 0..cells {
                for &(pos, wt) in &taps[ri * cells + cell] {
                    let (b, sp) = (pos / (h * w), pos % (h * w));
                    for ch in 0..c {
                        out[(ri * c + ch) * cells + cell] += wt * x.data()[(b * c + ch) * h * w + sp];
                    }
                }
            }
        }
        self.tape.op(
            &[self],
            Tensor::new(&[r, c, size, size], out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; n * c * h * w];
                let gy = ctx.grad.data();
                for ri in 0..r {
                    for cell in 0..cells {
                        for &(pos, wt) in &taps[ri * cells + cell] {
                            let (b, sp) = (pos / (h * w), pos % (h * w));
                            for ch in 0..c {
                                g[(b * c + ch) * h * w + sp] += wt * gy[(ri * c + ch) * cells + cell];
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], g))]
            }),
        )
    }

    /// `sum_i weights[i] * CE(softmax(logits[i]), labels[i])` over `[n, k]` logits.
    pub fn softmax_cross_entropy(self, labels: &[usize], weights: &[f64]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "logits must be [n, k]");
        let (n, k) = (x.dim(0), x.dim(1));
        assert_eq!(labels.len(), n, "one label per row");
        assert_eq!(weights.len(), n, "one weight per row");
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            assert!(labels[i] < k, "label {} out of range for {k} classes", labels[i]);
            let row = &x.data()[i * k..(i + 1) * k];
            let p = softmax(row);
            total += weights[i] * -(p[labels[i]].max(f64::MIN_POSITIVE)).ln();
            probs[i * k..(i + 1) * k].copy_from_slice(&p);
        }
        let labels = labels.to_vec();
        let weights = weights.to_vec();
        self.tape.op(
            &[self],
            Tensor::scalar(total),
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let mut d = probs.clone();
                for i in 0..n {
                    d[i * k + labels[i]] -= 1.0;
                    for v in &mut d[i * k..(i + 1) * k] {
                        *v *= g * weights[i];
                    }
                }
                vec![Some(Tensor::new(&[n, k], d))]
            }),
        )
    }
}

impl<'t> Var<'t> {
    /// `d/dr sum_i weights[i] * CE(softmax(r * logits[i]), labels[i])` at
    /// `r = 1`, differentiable in the logits.
    pub fn softmax_ce_scale_derivative(self, labels: &[usize], weights: &[f64]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "logits must be [n, k]");
        let (n, k) = (x.dim(0), x.dim(1));
        assert_eq!(labels.len(), n, "one label per row");
        assert_eq!(weights.len(), n, "one weight per row");
        let mut total = 0.0;
        let mut grad = vec![0.0; n * k];
        for i in 0..n {
            assert!(labels[i] < k, "label {} out of range for {k} classes", labels[i]);
            let z = &x.data()[i * k..(i + 1) * k];
            let p = softmax(z);
            let zbar: f64 = p.iter().zip(z).map(|(p, z)| p * z).sum();
            let mut d = 0.0;
            for c in 0..k {
                let y = if c == labels[i] { 1.0 } else { 0.0 };
                d += (p[c] - y) * z[c];
                grad[i * k + c] = weights[i] * ((p[c] - y) + p[c] * (z[c] - zbar));
            }
            total += weights[i] * d;
        }
        self.tape.op(
            &[self],
            Tensor::scalar(total),
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::new(&[n, k], grad.iter().map(|v| v * g).collect()))]
            }),
        )
    }
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, weight: f64, mut emit: impl FnMut(usize, f64)) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    emit(y0 * w + x0, weight * hy * hx);
    emit(y0 * w + x1, weight * hy * lx);
    emit(y1 * w + x0, weight * ly * hx);
    emit(y1 * w + x1, weight * ly * lx);
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
