use alloc::format;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

fn zip_with(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.same_shape(b, op)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape.clone(), data).checked(op)
}

fn map(a: &Tensor, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let data = a.data.iter().map(|&x| f(x)).collect();
    Tensor::from_parts(a.shape.clone(), data).checked(op)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    map(a, "scale", |x| x * factor)
}

/// `max(x, 0)`.
pub fn relu(a: &Tensor) -> Result<Tensor> {
    map(a, "relu", |x| if x > 0.0 { x } else { 0.0 })
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    map(a, "sigmoid", sigmoid_scalar)
}

pub fn softplus(a: &Tensor) -> Result<Tensor> {
    map(a, "softplus", softplus_scalar)
}

/// Logistic function, branching on sign so `exp` never overflows.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` with linear and exponential tails past |x| = 30.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", format!("{:?} × {:?}", a.shape, b.shape)));
    }
    let mut out = alloc::vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::from_parts(alloc::vec![m, n], out).checked("matmul")
}

/// Accumulates `a[m,k] × b[k,n]` into `out[m,n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `[m,k] × [k] → [m]`.
pub fn matvec(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matvec")?;
    if x.rank() != 1 || x.len() != k {
        return Err(shape_err("matvec", format!("{:?} × {:?}", a.shape, x.shape)));
    }
    let out = (0..m).map(|i| dot_slices(&a.data[i * k..(i + 1) * k], &x.data)).collect();
    Tensor::from_parts(alloc::vec![m], out).checked("matvec")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = as_matrix(a, "transpose")?;
    let mut out = alloc::vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(alloc::vec![n, m], out))
}

pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("dot", format!("{:?} · {:?}", a.shape, b.shape)));
    }
    finite(dot_slices(&a.data, &b.data), "dot")
}

/// Plain dot product of two equal-length slices.
pub fn elementwise_dot(a: &[f64], b: &[f64]) -> f64 {
    dot_slices(a, b)
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

pub fn sum(a: &Tensor) -> Result<f64> {
    finite(a.data.iter().sum(), "sum")
}

pub fn mean(a: &Tensor) -> Result<f64> {
    finite(a.data.iter().sum::<f64>() / a.len() as f64, "mean")
}

/// Divides each row of an `[N,D]` matrix by `‖row‖₂ + eps`.
pub fn l2norm_rows(a: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d) = as_matrix(a, "l2norm_rows")?;
    let mut out = a.data.clone();
    for row in out.chunks_exact_mut(d).take(n) {
        let denom = libm::sqrt(dot_slices(row, row)) + eps;
        if denom > 0.0 {
            row.iter_mut().for_each(|v| *v /= denom);
        }
    }
    Tensor::from_parts(a.shape.clone(), out).checked("l2norm_rows")
}

/// Vector-Jacobian product of [`l2norm_rows`], with `eps` held constant.
///
/// For `y = x / (‖x‖ + ε)`: `∂L/∂x = g/(‖x‖+ε) − x·(x·g) / (‖x‖·(‖x‖+ε)²)`.
/// A zero row has no direction and gets `g/ε`.
pub fn l2norm_rows_backward(x: &Tensor, grad_out: &Tensor, eps: f64) -> Result<Tensor> {
    x.same_shape(grad_out, "l2norm_rows_backward")?;
    let (_, d) = as_matrix(x, "l2norm_rows_backward")?;
    let mut out = alloc::vec![0.0; x.len()];
    for ((xr, gr), or) in x.data.chunks_exact(d).zip(grad_out.data.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
        let norm = libm::sqrt(dot_slices(xr, xr));
        let denom = norm + eps;
        if denom == 0.0 {
            continue;
        }
        let proj = if norm > 0.0 { dot_slices(xr, gr) / (norm * denom * denom) } else { 0.0 };
        for ((o, &xv), &gv) in or.iter_mut().zip(xr).zip(gr) {
            *o = gv / denom - xv * proj;
        }
    }
    Tensor::from_parts(x.shape.clone(), out).checked("l2norm_rows_backward")
}

/// Scales row `i` of an `[N,D]` matrix by `s[i]`.
pub fn mul_rows(a: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, d) = as_matrix(a, "mul_rows")?;
    if s.rank() != 1 || s.len() != n {
        return Err(shape_err("mul_rows", format!("{:?} rows vs scales {:?}", a.shape, s.shape)));
    }
    let mut out = a.data.clone();
    for (row, &f) in out.chunks_exact_mut(d).zip(&s.data) {
        row.iter_mut().for_each(|v| *v *= f);
    }
    Tensor::from_parts(a.shape.clone(), out).checked("mul_rows")
}

/// Mean over the spatial extent of a `C×H×W` map, giving `[C]`.
pub fn global_avg_pool(a: &Tensor) -> Result<Tensor> {
    let fs = a.feature_shape()?;
    let area = fs.h * fs.w;
    let out: Vec<f64> = a.data.chunks_exact(area).map(|ch| ch.iter().sum::<f64>() / area as f64).collect();
    Tensor::from_parts(alloc::vec![fs.c], out).checked("global_avg_pool")
}

/// Softmax cross-entropy of a logit vector against a class index, computed
/// through a max-shifted log-sum-exp. Returns the loss and the softmax.
pub fn cross_entropy_logits(logits: &Tensor, label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.rank() != 1 {
        return Err(shape_err("cross_entropy_logits", format!("expected a vector, got {:?}", logits.shape)));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|&l| libm::exp(l - max)).collect();
    let total: f64 = exps.iter().sum();
    let loss = max + libm::log(total) - logits.data[label];
    let probs = exps.into_iter().map(|e| e / total).collect();
    Ok((finite(loss, "cross_entropy_logits")?, probs))
}

pub(crate) fn as_matrix(a: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *a.shape.as_slice() {
        [m, n] => Ok((m, n)),
        _ => Err(shape_err(op, format!("expected a matrix, got {:?}", a.shape))),
    }
}

fn finite(v: f64, op: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn scalar_functions_at_zero() {
        assert!((softplus_scalar(0.0) - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }

    #[test]
    fn softplus_tails_are_finite_and_dominate_identity() {
        for &x in &[-1e6, -40.0, -30.0, -1.0, 0.0, 1.0, 29.9, 30.0, 30.1, 1e6] {
            let s = softplus_scalar(x);
            assert!(s.is_finite());
            assert!(s >= 0.0);
            assert!(s >= x);
        }
        assert!((softplus_scalar(-40.0) - libm::exp(-40.0)).abs() < 1e-30);
    }

    #[test]
    fn l2norm_of_three_four() {
        let t = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let n = l2norm_rows(&t, 0.0).unwrap();
        assert_eq!(n.data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2norm_zero_row_stays_zero() {
        let t = Tensor::zeros(&[2, 3]);
        let n = l2norm_rows(&t, 1e-8).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, probs) = cross_entropy_logits(&Tensor::full(&[4], 0.3), 2).unwrap();
        assert!((loss - libm::log(4.0)).abs() < 1e-15);
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(cross_entropy_logits(&Tensor::zeros(&[4]), 4).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-2.0, -2.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn elementwise_rejects_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
        assert!(dot(&a, &b).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let a = Tensor::full(&[2], f64::MAX);
        assert_eq!(add(&a, &a), Err(Error::NonFinite("add")));
    }
}
