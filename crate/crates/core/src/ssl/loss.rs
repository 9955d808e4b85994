//! Normalized-feature distances: the cross-view loss between the two student
//! outputs and the cross-model loss between a student output and the
//! (constant) teacher output for the same view.

use crate::nn::{FeatureMap, Scalar};

/// Added to every norm in a denominator so zero vectors never divide by zero.
pub const NORM_EPS: f64 = 1e-12;

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// `‖â − b̂‖² = 2 − 2⟨a,b⟩/((‖a‖+ε)(‖b‖+ε))`, in `[0, 4]`.
pub fn normalized_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    assert_eq!(a.len(), b.len(), "feature lengths differ");
    let eps = F::lit(NORM_EPS);
    let two = F::lit(2.0);
    two - two * dot(a, b) / ((norm(a) + eps) * (norm(b) + eps))
}

/// Loss and its gradient with respect to `a` (and `b` when `grad_b`).
pub fn normalized_distance_grad<F: Scalar>(a: &[F], b: &[F], grad_b: bool) -> (F, Vec<F>, Option<Vec<F>>) {
    let eps = F::lit(NORM_EPS);
    let two = F::lit(2.0);
    let (ra, rb) = (norm(a), norm(b));
    if ra < eps || rb < eps {
        log::warn!("near-zero feature norm in normalized distance (possible collapse)");
    }
    let (na, nb) = (ra + eps, rb + eps);
    let s = dot(a, b);
    let loss = two - two * s / (na * nb);
    // d/da [s/(na·nb)] = b/(na·nb) − s/(na²·nb)·a/‖a‖
    let side = |x: &[F], y: &[F], nx: F, ny: F, rx: F| -> Vec<F> {
        let c1 = -two / (nx * ny);
        let c2 = if rx > F::zero() {
            two * s / (nx * nx * ny * rx)
        } else {
            F::zero()
        };
        x.iter().zip(y).map(|(&xv, &yv)| c1 * yv + c2 * xv).collect()
    };
    let da = side(a, b, na, nb, ra);
    let db = grad_b.then(|| side(b, a, nb, na, rb));
    (loss, da, db)
}

pub fn cross_view_loss<F: Scalar>(q1: &[F], q2: &[F]) -> F {
    normalized_distance(q1, q2)
}

pub fn cross_model_loss<F: Scalar>(q2: &[F], z2: &[F]) -> F {
    normalized_distance(q2, z2)
}

/// Batch-mean loss over the columns of two `[d][n]` blocks.
pub struct BatchLoss<F> {
    pub per_sample: Vec<F>,
    pub mean: F,
    /// Gradient of `mean` with respect to the first block.
    pub grad_a: FeatureMap<F>,
    /// Gradient with respect to the second block; `None` when that block is
    /// a stop-gradient constant.
    pub grad_b: Option<FeatureMap<F>>,
}

pub fn batch_normalized_distance<F: Scalar>(a: &FeatureMap<F>, b: &FeatureMap<F>, grad_b: bool) -> BatchLoss<F> {
    assert_eq!((a.c, a.n), (b.c, b.n), "batch loss shapes");
    let (d, n) = (a.c, a.n);
    let inv_n = F::one() / F::from_usize(n).unwrap();
    let mut per_sample = Vec::with_capacity(n);
    let mut ga = FeatureMap::zeros(d, n, 1, 1);
    let mut gb = grad_b.then(|| FeatureMap::zeros(d, n, 1, 1));
    for i in 0..n {
        let (l, da, db) = normalized_distance_grad(&a.column(i), &b.column(i), grad_b);
        per_sample.push(l);
        for k in 0..d {
            ga.data[k * n + i] = da[k] * inv_n;
        }
        if let (Some(g), Some(db)) = (gb.as_mut(), db) {
            for k in 0..d {
                g.data[k * n + i] = db[k] * inv_n;
            }
        }
    }
    let mean = per_sample.iter().copied().sum::<F>() * inv_n;
    BatchLoss {
        per_sample,
        mean,
        grad_a: ga,
        grad_b: gb,
    }
}

/// Cross-view term: both arguments are student outputs, both get gradients.
pub fn batch_cross_view<F: Scalar>(q1: &FeatureMap<F>, q2: &FeatureMap<F>) -> BatchLoss<F> {
    batch_normalized_distance(q1, q2, true)
}

/// Cross-model term: the teacher output is a constant (stop-gradient).
pub fn batch_cross_model<F: Scalar>(q: &FeatureMap<F>, z_teacher: &FeatureMap<F>) -> BatchLoss<F> {
    batch_normalized_distance(q, z_teacher, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert!(cross_view_loss(&[2.0f64, 0.0], &[1.0, 0.0]).abs() < 1e-9);
        assert!((cross_view_loss(&[1.0, 0.0], &[0.0, 1.0]) - 2.0f64).abs() < 1e-9);
        assert!((cross_view_loss(&[1.0, 0.0], &[-3.0, 0.0]) - 4.0f64).abs() < 1e-9);
        assert!(cross_model_loss(&[0.6f64, 0.8], &[0.6, 0.8]).abs() < 1e-9);
        assert!((cross_model_loss(&[1.0, 1.0], &[1.0, -1.0]) - 2.0f64).abs() < 1e-9);
    }

    #[test]
    fn zero_vector_is_guarded() {
        let l: f64 = cross_view_loss(&[0.0, 0.0], &[1.0, 0.0]);
        assert_eq!(l, 2.0);
        let (l, da, db) = normalized_distance_grad(&[0.0f64, 0.0], &[1.0, 0.0], true);
        assert!(l.is_finite() && da.iter().all(|v| v.is_finite()));
        assert!(db.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let a = [0.3f64, -1.1, 0.7];
        let b = [1.2f64, 0.4, -0.5];
        let (_, da, db) = normalized_distance_grad(&a, &b, true);
        let db = db.unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = a;
            p[i] += h;
            let mut m = a;
            m[i] -= h;
            let fd = (normalized_distance(&p, &b) - normalized_distance(&m, &b)) / (2.0 * h);
            assert!((fd - da[i]).abs() < 1e-8);
            let mut p = b;
            p[i] += h;
            let mut m = b;
            m[i] -= h;
            let fd = (normalized_distance(&a, &p) - normalized_distance(&a, &m)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_model_keeps_teacher_constant() {
        let q = FeatureMap::from_columns(2, 2, vec![1.0f64, 0.5, -0.3, 2.0]);
        let z = FeatureMap::from_columns(2, 2, vec![0.2f64, 1.0, 1.0, -1.0]);
        let l = batch_cross_model(&q, &z);
        assert!(l.grad_b.is_none());
        let manual = (cross_model_loss(&[1.0, -0.3], &[0.2, 1.0]) + cross_model_loss(&[0.5, 2.0], &[1.0, -1.0])) / 2.0;
        assert!((l.mean - manual).abs() < 1e-15);
    }
}
