//! Plain-slice vector helpers used outside the tape: normalization and
//! cosine similarity.

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

pub fn norm(v: &[f64]) -> f64 {
    kernels::dot(v, v).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    kernels::dot(a, b)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("cannot normalize a zero-norm vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine with a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarities between the rows of `a` (n×d) and `b` (m×d).
pub fn cosine_sim_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!("cosine matrix of {:?} and {:?}", a.shape(), b.shape())));
    }
    let na: Vec<Vec<f64>> = (0..a.rows()).map(|r| l2_normalize(a.row_slice(r))).collect::<Result<_>>()?;
    let nb: Vec<Vec<f64>> = (0..b.rows()).map(|r| l2_normalize(b.row_slice(r))).collect::<Result<_>>()?;
    let mut out = Tensor::zeros(a.rows(), b.rows());
    for (i, x) in na.iter().enumerate() {
        for (j, y) in nb.iter().enumerate() {
            out.set(i, j, dot(x, y).clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn self_similarity_is_one() {
        let v = [0.3, -2.0, 5.5];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(cosine_sim(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn matrix_matches_pairwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gen = |r: usize| {
            let d: Vec<f64> = (0..r * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(r, 3, d).unwrap()
        };
        let (a, b) = (gen(4), gen(5));
        let m = cosine_sim_matrix(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let (x, y) = (a.row_slice(i), b.row_slice(j));
                let mut d = 0.0;
                let mut nx = 0.0;
                let mut ny = 0.0;
                for k in 0..3 {
                    d += x[k] * y[k];
                    nx += x[k] * x[k];
                    ny += y[k] * y[k];
                }
                assert!((m.get(i, j) - d / (nx.sqrt() * ny.sqrt())).abs() < 1e-12);
            }
        }
    }
}
