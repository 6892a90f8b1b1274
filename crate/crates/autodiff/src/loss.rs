//! Bridges per-sample scalar losses written against [`Real`] onto the tape.

use crate::real::{Dual, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// A loss evaluated independently on each row of an `[n, N]` input.
pub trait SampleLoss<const N: usize> {
    /// Loss of row `row` given its `N` inputs.
    fn eval<R: Real>(&self, row: usize, x: [R; N]) -> R;
}

/// Value and gradient of one row, by forward-mode differentiation.
pub fn value_and_grad<const N: usize, L: SampleLoss<N>>(loss: &L, row: usize, x: [f64; N]) -> (f64, [f64; N]) {
    let d = loss.eval(row, crate::real::seed(x));
    (d.re, d.eps)
}

/// Derivative of `loss(row, r * x)` with respect to `r` at `r = 1`, and the
/// gradient of that derivative with respect to `x`.
pub fn scale_derivative_and_grad<const N: usize, L: SampleLoss<N>>(
    loss: &L,
    row: usize,
    x: [f64; N],
) -> (f64, [f64; N]) {
    type Inner = Dual<f64, 1>;
    // r = 1 + e (inner tangent); outer tangents track x.
    let r = Inner::variable(1.0, 0);
    let scaled: [Dual<Inner, N>; N] = std::array::from_fn(|k| {
        let mut d = Dual::<Inner, N>::constant(Inner::constant(x[k]) * r);
        d.eps[k] = r;
        d
    });
    let out = loss.eval(row, scaled);
    let grad = std::array::from_fn(|k| out.eps[k].eps[0]);
    (out.re.eps[0], grad)
}

impl<'t> Var<'t> {
    /// `sum_i loss(i, self[i, ..])` for an `[n, N]` input.
    pub fn sample_loss<const N: usize, L: SampleLoss<N> + 'static>(self, loss: L) -> Var<'t> {
        let x = self.value();
        let n = check_rows::<N>(&x);
        let mut total = 0.0;
        let mut grad = vec![0.0; n * N];
        for i in 0..n {
            let (v, g) = value_and_grad(&loss, i, row::<N>(&x, i));
            total += v;
            grad[i * N..(i + 1) * N].copy_from_slice(&g);
        }
        self.tape.op(
            &[self],
            Tensor::scalar(total),
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::new(&[n, N], grad.iter().map(|v| v * g).collect()))]
            }),
        )
    }

    /// `d/dr sum_i loss(i, r * self[i, ..])` at `r = 1`, differentiable in `self`.
    pub fn sample_loss_scale_derivative<const N: usize, L: SampleLoss<N> + 'static>(self, loss: L) -> Var<'t> {
        let x = self.value();
        let n = check_rows::<N>(&x);
        let mut total = 0.0;
        let mut grad = vec![0.0; n * N];
        for i in 0..n {
            let (v, g) = scale_derivative_and_grad(&loss, i, row::<N>(&x, i));
            total += v;
            grad[i * N..(i + 1) * N].copy_from_slice(&g);
        }
        self.tape.op(
            &[self],
            Tensor::scalar(total),
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::new(&[n, N], grad.iter().map(|v| v * g).collect()))]
            }),
        )
    }
}

fn check_rows<const N: usize>(x: &Tensor) -> usize {
    assert!(
        x.ndim() == 2 && x.dim(1) == N,
        "sample loss expects [n, {N}], got {:?}",
        x.shape()
    );
    x.dim(0)
}

fn row<const N: usize>(x: &Tensor, i: usize) -> [f64; N] {
    std::array::from_fn(|k| x.data()[i * N + k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    struct Cubic;
    impl SampleLoss<2> for Cubic {
        fn eval<R: Real>(&self, row: usize, x: [R; 2]) -> R {
            x[0] * x[0] * x[1] * (row as f64 + 1.0)
        }
    }

    #[test]
    fn sample_loss_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let l = x.sample_loss(Cubic);
        assert_eq!(l.item(), 2.0 + 72.0);
        let g = tape.backward(l);
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 1.0, 48.0, 18.0]);
    }

    #[test]
    fn scale_derivative_of_cubic() {
        // L(r) = (r a)^2 (r b) = r^3 a^2 b, dL/dr|1 = 3 a^2 b,
        // d/da = 6ab, d/db = 3a^2.
        let (d, g) = scale_derivative_and_grad(&Cubic, 0, [2.0, 5.0]);
        assert_eq!(d, 60.0);
        assert_eq!(g, [60.0, 12.0]);
    }
}
