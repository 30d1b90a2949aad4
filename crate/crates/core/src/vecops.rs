//! Flat `f64` vector helpers.
//!
//! Parameter vectors, gradients and updates are all plain `Vec<f64>` of the
//! model dimension `d`; these helpers keep the arithmetic in one place so
//! every call site sums in the same order (bit-for-bit reproducibility).

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn zeros(d: usize) -> Vec<f64> {
    vec![0.0; d]
}

/// `y += alpha * x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(v: &mut [f64], alpha: f64) {
    for x in v.iter_mut() {
        *x *= alpha;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `v = beta * v + u`, the momentum accumulation step. Kept as a single
/// helper so strategies that must match bit-for-bit share one op order.
pub fn momentum_step(v: &mut [f64], beta: f64, u: &[f64]) {
    debug_assert_eq!(v.len(), u.len());
    for (vi, ui) in v.iter_mut().zip(u) {
        *vi = beta * *vi + ui;
    }
}

/// Mean of equally weighted vectors, summed in slice order.
pub fn mean(vs: &[&[f64]]) -> Vec<f64> {
    assert!(!vs.is_empty());
    let mut out = vs[0].to_vec();
    for v in &vs[1..] {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += x;
        }
    }
    scale(&mut out, 1.0 / vs.len() as f64);
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
