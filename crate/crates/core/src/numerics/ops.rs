//! Dense kernels with hand-derived backward passes.
//!
//! Matrices are row-major. Batched layers take inputs shaped `batch × in`
//! and weights shaped `out × in`.

use super::param::ParamBlock;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c = beta * c + op(a) * op(b)` where `op` optionally transposes.
///
/// `a` is stored `ar × ac` and `b` is stored `br × bc` (before transposition).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f64],
    ar: usize,
    ac: usize,
    trans_a: bool,
    b: &[f64],
    br: usize,
    bc: usize,
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(c.len(), m * n, "gemm output size");
    assert_eq!(a.len(), ar * ac);
    assert_eq!(b.len(), br * bc);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    // SAFETY: the slices cover exactly the strided regions checked above.
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

/// Matrix product `op(a) · op(b)` for 2-D tensors.
pub fn matmul(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (m, k) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (k2, n) = if trans_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        a.data(),
        a.rows(),
        a.cols(),
        trans_a,
        b.data(),
        b.rows(),
        b.cols(),
        trans_b,
        0.0,
        out.data_mut(),
    );
    Ok(out)
}

/// Single-vector affine map `W x + b` with `W: m×n`, `b: m`, `x: n`.
pub fn affine(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, n) = (w.rows(), w.cols());
    if w.shape().len() != 2 || b.shape() != [m] || x.shape() != [n] {
        let wb = [w.shape(), b.shape()].concat();
        return Err(Error::dim("affine", &wb, x.shape()));
    }
    let mut out = b.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o += dot(w.row(i), x.data());
    }
    out.ensure_finite("affine")?;
    Ok(out)
}

/// Backward of [`affine`]: accumulates `dW += g xᵀ`, `db += g`, returns `Wᵀ g`.
pub fn affine_backward(
    w: &Tensor,
    x: &Tensor,
    grad_out: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Result<Tensor> {
    let (m, n) = (w.rows(), w.cols());
    if grad_out.shape() != [m] || x.shape() != [n] {
        return Err(Error::dim("affine_backward", w.shape(), grad_out.shape()));
    }
    let mut dx = Tensor::zeros(&[n]);
    for i in 0..m {
        let g = grad_out.data()[i];
        db.data_mut()[i] += g;
        let wrow = w.row(i);
        let dwrow = dw.row_mut(i);
        for j in 0..n {
            dwrow[j] += g * x.data()[j];
        }
        axpy(g, wrow, dx.data_mut());
    }
    Ok(dx)
}

/// Batched affine: `x: B×in`, weights `out×in`, bias `out` → `B×out`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.cols() != w.cols() || b.len() != w.rows() {
        return Err(Error::dim("linear_forward", x.shape(), w.shape()));
    }
    let (batch, out) = (x.rows(), w.rows());
    let mut y = Tensor::zeros(&[batch, out]);
    for r in 0..batch {
        y.row_mut(r).copy_from_slice(b.data());
    }
    gemm(
        x.data(),
        batch,
        x.cols(),
        false,
        w.data(),
        out,
        w.cols(),
        true,
        1.0,
        y.data_mut(),
    );
    Ok(y)
}

/// Backward of [`linear_forward`]; accumulates into the weight and bias grads.
pub fn linear_backward(
    x: &Tensor,
    w: &mut ParamBlock,
    b: &mut ParamBlock,
    grad_out: &Tensor,
) -> Tensor {
    let (batch, out) = (grad_out.rows(), grad_out.cols());
    let inp = x.cols();
    gemm(
        grad_out.data(),
        batch,
        out,
        true,
        x.data(),
        batch,
        inp,
        false,
        1.0,
        w.grad.data_mut(),
    );
    let db = b.grad.data_mut();
    for r in 0..batch {
        for (d, g) in db.iter_mut().zip(grad_out.row(r)) {
            *d += g;
        }
    }
    let mut dx = Tensor::zeros(&[batch, inp]);
    gemm(
        grad_out.data(),
        batch,
        out,
        false,
        w.value.data(),
        out,
        inp,
        false,
        0.0,
        dx.data_mut(),
    );
    dx
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_tensor(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// `s(1−s)·upstream` given the forward output `s`.
pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Tensor {
    let mut g = upstream.clone();
    for (gi, &s) in g.data_mut().iter_mut().zip(output.data()) {
        *gi *= s * (1.0 - s);
    }
    g
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
    if super::kinks::is_recording() {
        super::kinks::observe(x.data().iter().map(|&v| v > 0.0));
    }
}

/// Masks `grad` where the forward output was not positive.
pub fn relu_backward_inplace(output: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn affine_identity() {
        let y = affine(
            &Tensor::eye(2),
            &Tensor::zeros(&[2]),
            &Tensor::vector(vec![3.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_hand_product() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let y = affine(&w, &b, &Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0, 1.0]);
    }

    #[test]
    fn affine_zero_weight_returns_bias() {
        let b = Tensor::vector(vec![5.0, 5.0]).unwrap();
        let y = affine(
            &Tensor::zeros(&[2, 3]),
            &b,
            &Tensor::vector(vec![7.0, -1.0, 2.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let err = affine(&Tensor::eye(2), &Tensor::zeros(&[2]), &Tensor::zeros(&[3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(1000.0);
        assert!(s > 1.0 - 1e-12 && s <= 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_abs_diff_eq!(sigmoid(3f64.ln()), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn linear_batch_matches_per_row_affine() {
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let y = linear_forward(&x, &w, &b).unwrap();
        for r in 0..2 {
            let yr = affine(&w, &b, &Tensor::vector(x.row(r).to_vec()).unwrap()).unwrap();
            for (a, e) in y.row(r).iter().zip(yr.data()) {
                assert_abs_diff_eq!(a, e, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let ata = matmul(&a, true, &a, false).unwrap();
        assert_eq!(ata.shape(), &[3, 3]);
        assert_eq!(ata.get2(0, 0), 17.0);
        let aat = matmul(&a, false, &a, true).unwrap();
        assert_eq!(aat.data(), &[14., 32., 32., 77.]);
    }
}
