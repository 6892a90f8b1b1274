//! Elementwise, reduction and shape operations on [`Var`].
//!
//! Binary operations accept operands of identical shape, or a one-element
//! operand on either side which is broadcast.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::tape::Var;
use crate::tensor::Tensor;

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let value = x.value().map(f);
    x.tape.op(
        &[x],
        value,
        Box::new(move |ctx| {
            let input = &ctx.inputs[0];
            let g = Tensor::from_fn(input.shape(), |i| {
                ctx.grad.data()[i] * df(input.data()[i], ctx.output.data()[i])
            });
            vec![Some(g)]
        }),
    )
}

/// Reduce a broadcast gradient back onto a one-element operand.
fn unbroadcast(g: Tensor, target_shape: &[usize]) -> Tensor {
    if g.shape() == target_shape {
        g
    } else {
        Tensor::new(target_shape, vec![g.sum()])
    }
}

fn binary<'t>(
    a: Var<'t>,
    b: Var<'t>,
    f: impl Fn(f64, f64) -> f64,
    // (upstream, a, b) -> (d/da, d/db)
    df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
) -> Var<'t> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = match (av.numel(), bv.numel()) {
        _ if av.shape() == bv.shape() => av.shape().to_vec(),
        (1, _) => bv.shape().to_vec(),
        (_, 1) => av.shape().to_vec(),
        _ => panic!("binary op shape mismatch: {:?} vs {:?}", av.shape(), bv.shape()),
    };
    let n: usize = out_shape.iter().product();
    let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
    let value = Tensor::from_fn(&out_shape, |i| f(pick(&av, i), pick(&bv, i)));
    a.tape.op(
        &[a, b],
        value,
        Box::new(move |ctx| {
            let (av, bv) = (&ctx.inputs[0], &ctx.inputs[1]);
            let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for i in 0..n {
                let (da, db) = df(ctx.grad.data()[i], pick(av, i), pick(bv, i));
                ga[i] = da;
                gb[i] = db;
            }
            let shape = ctx.output.shape();
            vec![
                ctx.need[0].then(|| unbroadcast(Tensor::new(shape, ga), av.shape())),
                ctx.need[1].then(|| unbroadcast(Tensor::new(shape, gb), bv.shape())),
            ]
        }),
    )
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        binary(self, rhs, |a, b| a + b, |g, _, _| (g, g))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        binary(self, rhs, |a, b| a - b, |g, _, _| (g, -g))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        binary(self, rhs, |a, b| a * b, |g, a, b| (g * b, g * a))
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self::Output {
        binary(self, rhs, |a, b| a / b, |g, a, b| (g / b, -g * a / (b * b)))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self::Output {
        unary(self, |x| -x, |_, _| -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self::Output {
        unary(self, move |x| x + rhs, |_, _| 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self::Output {
        unary(self, move |x| x - rhs, |_, _| 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self::Output {
        unary(self, move |x| x * rhs, move |_, _| rhs)
    }
}

impl<'t> Var<'t> {
    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Identity in the forward pass; blocks gradients.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    /// Identity in the forward pass; multiplies the gradient by `-scale`.
    pub fn grad_reverse(self, scale: f64) -> Var<'t> {
        unary(self, |x| x, move |_, _| -scale)
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.op(
            &[self],
            value,
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum() * (1.0 / n)
    }

    /// Mean over `axis`, keeping it as a length-1 dimension.
    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let (outer, len, inner) = x.axis_split(axis);
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.tape.op(
            &[self],
            Tensor::new(&shape, out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            g[base + i] = ctx.grad.data()[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = (*self.value()).clone().reshape(shape);
        self.tape.op(
            &[self],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (outer, full, inner) = x.axis_split(axis);
        assert!(start + len <= full, "narrow out of range");
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        self.tape.op(
            &[self],
            Tensor::new(&shape, out),
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&ctx.grad.data()[src..src + len * inner]);
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    /// Rows `indices` of the leading axis, in order (repeats allowed).
    pub fn index_select(self, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let rows = x.dim(0);
        let row_len = x.numel() / rows.max(1);
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &r in indices {
            assert!(r < rows, "index {r} out of range for {rows} rows");
            out.extend_from_slice(&x.data()[r * row_len..(r + 1) * row_len]);
        }
        let indices = indices.to_vec();
        self.tape.op(
            &[self],
            Tensor::new(&shape, out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                for (k, &r) in indices.iter().enumerate() {
                    let src = &ctx.grad.data()[k * row_len..(k + 1) * row_len];
                    for (d, s) in g.data_mut()[r * row_len..(r + 1) * row_len].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean of the `k` largest entries of each row of a `[rows, n]` tensor.
    ///
    /// Ties are broken by lower index. The gradient flows only into the
    /// selected entries.
    pub fn topk_mean(self, k: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "topk_mean expects [rows, n]");
        let (rows, n) = (x.dim(0), x.dim(1));
        assert!(k >= 1 && k <= n, "k={k} out of range 1..={n}");
        let mut selected = Vec::with_capacity(rows * k);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let top = &order[..k];
            out.push(top.iter().map(|&i| row[i]).sum::<f64>() / k as f64);
            selected.extend(top.iter().map(|&i| r * n + i));
        }
        self.tape.op(
            &[self],
            Tensor::new(&[rows], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                for (j, &flat) in selected.iter().enumerate() {
                    g.data_mut()[flat] += ctx.grad.data()[j / k] / k as f64;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Normalise `[n, c, ...]` to unit L2 norm along axis 1 at every position.
    pub fn l2_normalize_channels(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (outer, c, inner) = x.axis_split(1);
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for ch in 0..c {
                for i in 0..inner {
                    let v = x.data()[(o * c + ch) * inner + i];
                    norms[o * inner + i] += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = (*v + eps).sqrt());
        let out = Tensor::from_fn(x.shape(), |idx| {
            let o = idx / (c * inner);
            let i = idx % inner;
            x.data()[idx] / norms[o * inner + i]
        });
        self.tape.op(
            &[self],
            out,
            Box::new(move |ctx| {
                // d(x/|x|) = (g - y (g.y)) / |x|
                let y = ctx.output;
                let mut dot = vec![0.0; outer * inner];
                for o in 0..outer {
                    for ch in 0..c {
                        for i in 0..inner {
                            let idx = (o * c + ch) * inner + i;
                            dot[o * inner + i] += ctx.grad.data()[idx] * y.data()[idx];
                        }
                    }
                }
                let g = Tensor::from_fn(y.shape(), |idx| {
                    let o = idx / (c * inner);
                    let i = idx % inner;
                    let p = o * inner + i;
                    (ctx.grad.data()[idx] - y.data()[idx] * dot[p]) / norms[p]
                });
                vec![Some(g)]
            }),
        )
    }

    /// Convex mix `lambda * self + (1 - lambda) * other`.
    ///
    /// Mixing a node with itself is the identity, value and gradient alike.
    pub fn mix(self, other: Var<'t>, lambda: f64) -> Var<'t> {
        if self.same_node(&other) {
            return self;
        }
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mix shape mismatch");
        let value = a.zip_map(&b, |x, y| lambda * x + (1.0 - lambda) * y);
        self.tape.op(
            &[self, other],
            value,
            Box::new(move |ctx| {
                vec![
                    ctx.need[0].then(|| ctx.grad.scale(lambda)),
                    ctx.need[1].then(|| ctx.grad.scale(1.0 - lambda)),
                ]
            }),
        )
    }
}

/// Concatenate along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of nothing");
    let tape = parts[0].tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let first = values[0].shape().to_vec();
    let (outer, _, inner) = values[0].axis_split(axis);
    let lens: Vec<usize> = values
        .iter()
        .map(|v| {
            assert_eq!(v.ndim(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in v.shape().iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch on axis {d}");
            }
            v.dim(axis)
        })
        .collect();
    let total: usize = lens.iter().sum();
    let mut shape = first.clone();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            let base = o * len * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
    }
    tape.op(
        parts,
        Tensor::new(&shape, out),
        Box::new(move |ctx| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut offset = 0;
            for o in 0..outer {
                let _ = o;
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad.data()[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&ctx.inputs)
                .zip(&ctx.need)
                .map(|((g, input), &need)| need.then(|| Tensor::new(input.shape(), g)))
                .collect()
        }),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
