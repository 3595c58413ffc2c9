//! Dense kernels: Householder QR, Haar-random semi-orthogonal matrices and
//! orthogonal projection onto a row space.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::{Dist, RngState};

/// Row-major dense matrix of `f64`.
pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

/// Householder QR of a square or tall matrix. Returns the first `k` columns
/// of `Q` and the signs of `R`'s diagonal.
fn householder_q(a: &Matrix, k: usize) -> (Matrix, Vec<f64>) {
    let (m, n) = a.dim();
    let mut r = a.clone();
    let mut reflectors: Vec<Vector> = Vec::with_capacity(n);
    let mut diag_sign = Vec::with_capacity(n);

    for j in 0..n.min(m) {
        let x = r.slice(s![j.., j]).to_owned();
        let norm_x = x.dot(&x).sqrt();
        let mut v = x;
        let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
        v[0] -= alpha;
        let v_norm = v.dot(&v).sqrt();
        if v_norm > 0.0 {
            v /= v_norm;
            let mut block = r.slice_mut(s![j.., j..]);
            let proj = v.dot(&block);
            for (i, vi) in v.iter().enumerate() {
                block.row_mut(i).scaled_add(-2.0 * vi, &proj);
            }
        }
        diag_sign.push(if r[[j, j]] < 0.0 { -1.0 } else { 1.0 });
        reflectors.push(v);
    }

    // Q[:, :k] = H_0 H_1 ... H_{n-1} I[:, :k]
    let mut q = Array2::<f64>::eye(m).slice(s![.., ..k]).to_owned();
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        let mut block = q.slice_mut(s![j.., ..]);
        let proj = v.dot(&block);
        for (i, vi) in v.iter().enumerate() {
            block.row_mut(i).scaled_add(-2.0 * vi, &proj);
        }
    }
    (q, diag_sign)
}

/// Sample `M` (`d x d_prime`) as the first `d_prime` columns of a Haar-random
/// orthogonal matrix: QR of a Gaussian matrix with `R`'s diagonal made positive.
pub fn sample_semi_orthogonal(d: usize, d_prime: usize, rng: &mut RngState) -> Result<Matrix> {
    if d_prime == 0 || d_prime > d {
        return Err(Error::Dimension(format!(
            "semi-orthogonal matrix needs 1 <= d' <= d, got d={d}, d'={d_prime}"
        )));
    }
    let g = rng.draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, d, d)?;
    let (mut q, signs) = householder_q(&g, d_prime);
    for (mut col, sign) in q.columns_mut().into_iter().zip(signs) {
        col *= sign;
    }
    Ok(q)
}

/// Orthonormal basis for the row space of a full-row-rank matrix.
#[derive(Clone, Debug)]
pub struct RowspaceProjector {
    basis: Matrix,
}

impl RowspaceProjector {
    /// Modified Gram-Schmidt over the rows of `w`.
    pub fn new(w: ArrayView2<'_, f64>) -> Result<Self> {
        let (k, d) = w.dim();
        if k == 0 || k > d {
            return Err(Error::DegenerateBasis(format!(
                "row space basis needs 1 <= k <= d, got {k}x{d}"
            )));
        }
        let mut basis = w.to_owned();
        for i in 0..k {
            let original = basis.row(i).dot(&basis.row(i)).sqrt();
            for j in 0..i {
                let (done, mut rest) = basis.view_mut().split_at(ndarray::Axis(0), i);
                let mut row = rest.row_mut(0);
                let c = row.dot(&done.row(j));
                row.scaled_add(-c, &done.row(j));
            }
            let residual = basis.row(i).dot(&basis.row(i)).sqrt();
            if !(original > 0.0) || residual <= 1e-10 * original {
                return Err(Error::DegenerateBasis(format!(
                    "row {i} is (numerically) in the span of the previous rows"
                )));
            }
            basis.row_mut(i).mapv_inplace(|x| x / residual);
        }
        Ok(Self { basis })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, w: ArrayView1<'_, f64>) -> Vector {
        let coeffs = self.basis.dot(&w);
        self.basis.t().dot(&coeffs)
    }
}

/// `P_W w`: orthogonal projection of `w` onto the span of `W`'s rows.
pub fn project_onto_rowspace(w: ArrayView1<'_, f64>, rows: ArrayView2<'_, f64>) -> Result<Vector> {
    if w.len() != rows.ncols() {
        return Err(Error::Shape(format!(
            "vector of length {} cannot be projected onto rows of length {}",
            w.len(),
            rows.ncols()
        )));
    }
    Ok(RowspaceProjector::new(rows)?.project(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_abs(m: &Matrix) -> f64 {
        m.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        let gram = m.t().dot(m);
        max_abs(&(gram - Array2::<f64>::eye(m.ncols())))
    }

    fn det(mut a: Matrix) -> f64 {
        // Gaussian elimination with partial pivoting.
        let n = a.nrows();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs()))
                .unwrap();
            if p != c {
                for k in 0..n {
                    a.swap([p, k], [c, k]);
                }
                det = -det;
            }
            det *= a[[c, c]];
            for r in c + 1..n {
                let f = a[[r, c]] / a[[c, c]];
                for k in c..n {
                    a[[r, k]] -= f * a[[c, k]];
                }
            }
        }
        det
    }

    /// `W^T (W W^T)^{-1} W w` by explicit normal equations.
    fn normal_equations_projection(w: &Vector, rows: &Matrix) -> Vector {
        let k = rows.nrows();
        let mut gram = rows.dot(&rows.t());
        let mut rhs = rows.dot(w);
        for c in 0..k {
            for r in c + 1..k {
                let f = gram[[r, c]] / gram[[c, c]];
                for j in c..k {
                    gram[[r, j]] -= f * gram[[c, j]];
                }
                rhs[r] -= f * rhs[c];
            }
        }
        let mut coef = Array1::zeros(k);
        for r in (0..k).rev() {
            let mut acc = rhs[r];
            for j in r + 1..k {
                acc -= gram[[r, j]] * coef[j];
            }
            coef[r] = acc / gram[[r, r]];
        }
        rows.t().dot(&coef)
    }

    #[test]
    fn semi_orthogonal_small_cases() {
        let mut rng = RngState::new(5);
        let m = sample_semi_orthogonal(4, 2, &mut rng).unwrap();
        assert_eq!(m.dim(), (4, 2));
        assert!(orthonormality_error(&m) < 1e-10);

        let q = sample_semi_orthogonal(3, 3, &mut rng).unwrap();
        assert!((det(q).abs() - 1.0).abs() < 1e-10);

        assert!(matches!(
            sample_semi_orthogonal(3, 4, &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn semi_orthogonal_sweep() {
        let mut total = 0.0;
        let mut count = 0usize;
        for seed in 0..200 {
            let mut rng = RngState::new(seed);
            let m = sample_semi_orthogonal(100, 50, &mut rng).unwrap();
            let gram = m.t().dot(&m);
            for i in 0..50 {
                for j in i + 1..50 {
                    total += gram[[i, j]].abs();
                    count += 1;
                }
            }
            assert!(orthonormality_error(&m) < 1e-10);
        }
        assert!(total / (count as f64) < 1e-10);
    }

    #[test]
    fn haar_first_entry_is_symmetric() {
        // Sign correction makes the distribution of M[0,0] symmetric about 0.
        let mut positive = 0;
        for seed in 0..400 {
            let mut rng = RngState::new(seed);
            let m = sample_semi_orthogonal(5, 1, &mut rng).unwrap();
            if m[[0, 0]] > 0.0 {
                positive += 1;
            }
        }
        assert!((150..=250).contains(&positive), "{positive}");
    }

    #[test]
    fn projection_fixed_points() {
        let mut rng = RngState::new(9);
        let rows = rng
            .draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, 2, 6)
            .unwrap();
        let first = rows.row(0).to_owned();
        let p = project_onto_rowspace(first.view(), rows.view()).unwrap();
        assert!(max_abs(&(p - &first).insert_axis(ndarray::Axis(0))) < 1e-12);

        let rows = ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let orth = ndarray::array![0.0, 0.0, 3.0];
        let p = project_onto_rowspace(orth.view(), rows.view()).unwrap();
        assert!(p.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn projection_matches_normal_equations() {
        let mut rng = RngState::new(21);
        for _ in 0..50 {
            let rows = rng
                .draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, 2, 100)
                .unwrap();
            let w = rng
                .draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, 1, 100)
                .unwrap()
                .row(0)
                .to_owned();
            let fast = project_onto_rowspace(w.view(), rows.view()).unwrap();
            let slow = normal_equations_projection(&w, &rows);
            let err = (&fast - &slow).iter().fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn rank_deficient_rows_rejected() {
        let rows = ndarray::array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]];
        let w = ndarray::array![1.0, 1.0, 1.0];
        assert!(matches!(
            project_onto_rowspace(w.view(), rows.view()),
            Err(Error::DegenerateBasis(_))
        ));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_contracting(
            seed in any::<u64>(), k in 1usize..4, extra in 0usize..6
        ) {
            let d = k + extra + 1;
            let mut rng = RngState::new(seed);
            let rows = rng.draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, k, d).unwrap();
            let w = rng.draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, 1, d).unwrap().row(0).to_owned();
            let p = project_onto_rowspace(w.view(), rows.view()).unwrap();
            let pp = project_onto_rowspace(p.view(), rows.view()).unwrap();
            let diff = (&pp - &p).iter().fold(0.0f64, |a, b| a.max(b.abs()));
            prop_assert!(diff < 1e-10);
            prop_assert!(p.dot(&p).sqrt() <= w.dot(&w).sqrt() + 1e-12);
            // Residual is orthogonal to every row.
            let residual = &w - &p;
            for r in rows.rows() {
                prop_assert!(residual.dot(&r).abs() < 1e-9);
            }
        }

        #[test]
        fn semi_orthogonal_property(seed in any::<u64>(), d in 1usize..12, frac in 0.0f64..1.0) {
            let d_prime = 1 + ((d - 1) as f64 * frac) as usize;
            let mut rng = RngState::new(seed);
            let m = sample_semi_orthogonal(d, d_prime, &mut rng).unwrap();
            prop_assert!(orthonormality_error(&m) < 1e-10);
        }
    }
}
