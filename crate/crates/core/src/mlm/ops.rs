//! Forward and backward kernels shared by the encoder.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, NdFloat, Zip};

pub(crate) fn cst<A: NdFloat>(x: f64) -> A {
    A::from(x).expect("constant representable")
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// `c += a · b`
pub(crate) fn matmul_acc<A: NdFloat>(a: &ArrayView2<A>, b: &ArrayView2<A>, c: &mut ArrayViewMut2<A>) {
    general_mat_mul(A::one(), a, b, A::one(), c);
}

/// `x · w + b` with `w` stored as (in, out).
pub(crate) fn dense<A: NdFloat>(x: &ArrayView2<A>, w: &Array2<A>, b: &Array1<A>) -> Array2<A> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub(crate) fn dense_backward<A: NdFloat>(
    x: &ArrayView2<A>,
    dy: &ArrayView2<A>,
    w: &Array2<A>,
    dw: &mut Array2<A>,
    db: &mut Array1<A>,
) -> Array2<A> {
    matmul_acc(&x.t(), dy, &mut dw.view_mut());
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct NormCache<A> {
    pub xhat: Array2<A>,
    pub inv_std: Array1<A>,
}

pub(crate) fn layer_norm<A: NdFloat>(
    x: &ArrayView2<A>,
    gamma: &Array1<A>,
    beta: &Array1<A>,
) -> (Array2<A>, NormCache<A>) {
    let n = cst::<A>(x.ncols() as f64);
    let eps = cst::<A>(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.fold(A::zero(), |acc, &v| acc + v * v) / n;
        let s = A::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * s);
        *istd = s;
    }
    let mut y = &xhat * gamma;
    y += beta;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<A: NdFloat>(
    dy: &ArrayView2<A>,
    cache: &NormCache<A>,
    gamma: &Array1<A>,
    dgamma: &mut Array1<A>,
    dbeta: &mut Array1<A>,
) -> Array2<A> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let n = cst::<A>(dy.ncols() as f64);
    let mut dx = dy * gamma;
    for ((mut row, xhat), &istd) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_d = row.sum();
        let sum_dx = row.iter().zip(xhat.iter()).fold(A::zero(), |acc, (&d, &x)| acc + d * x);
        Zip::from(&mut row).and(&xhat).for_each(|d, &x| {
            *d = istd / n * (n * *d - sum_d - x * sum_dx);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<A: NdFloat>(x: &Array2<A>) -> Array2<A> {
    let (c, k, half) = (cst::<A>(GELU_C), cst::<A>(GELU_K), cst::<A>(0.5));
    x.mapv(|v| half * v * (A::one() + (c * (v + k * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward<A: NdFloat>(x: &Array2<A>, dy: &ArrayView2<A>) -> Array2<A> {
    let (c, k, half, three) = (cst::<A>(GELU_C), cst::<A>(GELU_K), cst::<A>(0.5), cst::<A>(3.0));
    let mut dx = Array2::zeros(x.raw_dim());
    Zip::from(&mut dx).and(x).and(dy).for_each(|out, &v, &d| {
        let t = (c * (v + k * v * v * v)).tanh();
        let grad = half * (A::one() + t) + half * v * (A::one() - t * t) * c * (A::one() + three * k * v * v);
        *out = d * grad;
    });
    dx
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows<A: NdFloat>(x: &mut Array2<A>) {
    for mut row in x.rows_mut() {
        let max = row.fold(A::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Gradient through a row-wise softmax given its output `p`.
pub(crate) fn softmax_backward<A: NdFloat>(p: &Array2<A>, dp: &Array2<A>) -> Array2<A> {
    let mut ds = Array2::zeros(p.raw_dim());
    for ((mut out, prow), drow) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = prow
            .iter()
            .zip(drow.iter())
            .fold(A::zero(), |acc, (&a, &b)| acc + a * b);
        Zip::from(&mut out).and(&prow).and(&drow).for_each(|o, &pv, &dv| {
            *o = pv * (dv - dot);
        });
    }
    ds
}
