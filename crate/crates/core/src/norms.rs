//! FeatureNorm (centering followed by L2 row normalization) and the
//! PairNorm baselines, applied to the final layer of each time step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Guard for zero rows and zero mean-square scales.
pub const NORM_EPS: f64 = 1e-12;

/// Which normalization layer a model applies at each step's final layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NormKind {
    None,
    /// Center, then L2-normalize each row.
    FeatureNorm,
    /// Reversed order (normalize, then center); comparison variant only.
    FeatureNormNc,
    /// Center, then rescale the whole matrix so the mean squared row norm
    /// equals `s^2`.
    PairNorm { s: f64 },
    /// Center, then scale each row individually to norm `s`.
    PairNormSi { s: f64 },
}

impl NormKind {
    /// Parse the config key: `none | fn | fn-nc | pn | pn-si`.
    pub fn parse(name: &str, s: f64) -> Result<NormKind> {
        if s <= 0.0 {
            return Err(Error::Validation(format!("norm scale {s} must be > 0")));
        }
        match name {
            "none" => Ok(NormKind::None),
            "fn" => Ok(NormKind::FeatureNorm),
            "fn-nc" => Ok(NormKind::FeatureNormNc),
            "pn" => Ok(NormKind::PairNorm { s }),
            "pn-si" => Ok(NormKind::PairNormSi { s }),
            other => Err(Error::Validation(format!(
                "unknown norm kind {other:?} (expected none|fn|fn-nc|pn|pn-si)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::FeatureNorm => "fn",
            NormKind::FeatureNormNc => "fn-nc",
            NormKind::PairNorm { .. } => "pn",
            NormKind::PairNormSi { .. } => "pn-si",
        }
    }
}

/// Subtract the column mean from every row.
pub fn center(tape: &mut Tape, z: &Tensor) -> Result<Tensor> {
    let n = z.rows();
    if n == 0 {
        return Err(Error::Validation("center of empty matrix".into()));
    }
    // column means via (1/n) 1ᵀ Z, subtracted through the broadcast add
    let ones = Tensor::from_values(1, n, vec![1.0 / n as f64; n])?;
    let mean = tape.matmul(&ones, z)?;
    let neg_mean = tape.scale(&mean, -1.0)?;
    tape.add(z, &neg_mean)
}

/// Row-wise division by `max(norm, eps)`.
pub fn l2_row_normalize(tape: &mut Tape, z: &Tensor, eps: f64) -> Result<Tensor> {
    tape.l2_row_normalize(z, eps)
}

/// Center, then push every row onto the unit hypersphere.
pub fn feature_norm(tape: &mut Tape, z: &Tensor) -> Result<Tensor> {
    let centered = center(tape, z)?;
    l2_row_normalize(tape, &centered, NORM_EPS)
}

/// Reversed-order variant: normalize rows first, then center.
pub fn feature_norm_nc(tape: &mut Tape, z: &Tensor) -> Result<Tensor> {
    let normalized = l2_row_normalize(tape, z, NORM_EPS)?;
    center(tape, &normalized)
}

/// PairNorm: center, then scale the whole matrix so the mean squared row
/// norm equals `s^2`.
pub fn pair_norm(tape: &mut Tape, z: &Tensor, s: f64) -> Result<Tensor> {
    let n = z.rows();
    let centered = center(tape, z)?;
    let sq = tape.hadamard(&centered, &centered)?;
    let total = tape.sum(&sq)?;
    let mean_sq = tape.scale(&total, 1.0 / n as f64)?;
    let guarded = tape.affine(&mean_sq, 1.0, NORM_EPS)?;
    let inv_rms = tape.powf(&guarded, -0.5)?;
    let factor = tape.scale(&inv_rms, s)?;
    tape.mul_scalar(&centered, &factor)
}

/// PairNorm-SI: center, then scale each row individually to norm `s`.
pub fn pair_norm_si(tape: &mut Tape, z: &Tensor, s: f64) -> Result<Tensor> {
    let centered = center(tape, z)?;
    let unit = l2_row_normalize(tape, &centered, NORM_EPS)?;
    tape.scale(&unit, s)
}

/// Apply the configured normalization.
pub fn apply(tape: &mut Tape, z: &Tensor, kind: NormKind) -> Result<Tensor> {
    match kind {
        NormKind::None => Ok(z.clone()),
        NormKind::FeatureNorm => feature_norm(tape, z),
        NormKind::FeatureNormNc => feature_norm_nc(tape, z),
        NormKind::PairNorm { s } => pair_norm(tape, z, s),
        NormKind::PairNormSi { s } => pair_norm_si(tape, z, s),
    }
}

/// Value-only FeatureNorm over a row-major buffer; used by the scaling
/// smoke test, which times the layer in isolation.
pub fn feature_norm_values(data: &mut [f64], rows: usize, cols: usize) {
    assert_eq!(data.len(), rows * cols);
    if rows == 0 {
        return;
    }
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += data[r * cols + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run<F: FnOnce(&mut Tape) -> Result<Tensor>>(f: F) -> Tensor {
        let mut tape = Tape::new();
        f(&mut tape).unwrap()
    }

    #[test]
    fn center_examples() {
        let z = Tensor::from_values(2, 1, vec![-1.0, 1.0]).unwrap();
        let c = run(|t| center(t, &z));
        assert_eq!(*c.values(), vec![-1.0, 1.0]);

        let z = Tensor::from_values(2, 1, vec![3.0, 5.0]).unwrap();
        let c = run(|t| center(t, &z));
        assert_eq!(*c.values(), vec![-1.0, 1.0]);
    }

    #[test]
    fn center_zeroes_column_sums() {
        let mut data = Vec::new();
        let mut x = 0.37_f64;
        for _ in 0..40 {
            x = (x * 997.0 + 0.1).fract();
            data.push(x * 10.0 - 5.0);
        }
        let z = Tensor::from_values(10, 4, data).unwrap();
        let c = run(|t| center(t, &z));
        for col in 0..4 {
            let s: f64 = (0..10).map(|r| c.values()[r * 4 + col]).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let z = Tensor::from_values(1, 2, vec![3.0, 4.0]).unwrap();
        let y = run(|t| l2_row_normalize(t, &z, NORM_EPS));
        assert!((y.values()[0] - 0.6).abs() < 1e-15);
        assert!((y.values()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_rows_unchanged() {
        let z = Tensor::from_values(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let y = run(|t| l2_row_normalize(t, &z, NORM_EPS));
        assert_eq!(*y.values(), *z.values());
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let z = Tensor::from_values(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let y = run(|t| l2_row_normalize(t, &z, NORM_EPS));
        assert_eq!(*y.values(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn feature_norm_unit_rows() {
        let z = Tensor::from_values(3, 2, vec![3.0, 4.0, 0.0, 5.0, -3.0, 4.0]).unwrap();
        let y = run(|t| feature_norm(t, &z));
        for r in 0..3 {
            let norm: f64 = y.values()[r * 2..r * 2 + 2]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_norm_degenerate_constant_input() {
        let z = Tensor::from_values(3, 2, vec![2.0; 6]).unwrap();
        let y = run(|t| feature_norm(t, &z));
        assert!(y.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pair_norm_mean_square_is_s_squared() {
        let mut data = Vec::new();
        let mut x = 0.5_f64;
        for _ in 0..60 {
            x = (x * 31.7 + 0.11).fract();
            data.push(x * 4.0 - 2.0);
        }
        let z = Tensor::from_values(12, 5, data).unwrap();
        for s in [1.0, 2.5] {
            let y = run(|t| pair_norm(t, &z, s));
            let ms: f64 = y.values().iter().map(|v| v * v).sum::<f64>() / 12.0;
            assert!((ms - s * s).abs() < 1e-10, "ms={ms} s2={}", s * s);
        }
    }

    #[test]
    fn pair_norm_si_with_unit_scale_equals_feature_norm() {
        let z = Tensor::from_values(3, 2, vec![3.0, 4.0, 0.0, 5.0, -3.0, 4.0]).unwrap();
        let a = run(|t| pair_norm_si(t, &z, 1.0));
        let b = run(|t| feature_norm(t, &z));
        assert_eq!(*a.values(), *b.values());
    }

    #[test]
    fn distance_similarity_identity_on_unit_rows() {
        let z = Tensor::from_values(4, 3, vec![
            0.3, -1.2, 0.5, 2.0, 0.1, -0.4, -0.7, 0.9, 1.1, 0.0, 0.2, -2.2,
        ])
        .unwrap();
        let y = run(|t| feature_norm(t, &z)).to_matrix();
        for i in 0..4 {
            for j in 0..4 {
                let lhs = y.row_dist_sq(i, j) + 2.0 * y.row_dot(i, j);
                assert!((lhs - 2.0).abs() < 1e-12);
            }
        }
    }

    /// Re-applying the norm only re-centers by the (small) residual mean;
    /// the drift scales like that mean, around 1e-2 for random inputs.
    #[test]
    fn feature_norm_nearly_idempotent() {
        let mut data = Vec::new();
        let mut x = 0.21_f64;
        for _ in 0..64 {
            x = (x * 167.3 + 0.07).fract();
            data.push(x * 6.0 - 3.0);
        }
        let z = Tensor::from_values(8, 8, data).unwrap();
        let once = run(|t| feature_norm(t, &z));
        let twice = run(|t| feature_norm(t, &once));
        let drift: f64 = once
            .values()
            .iter()
            .zip(twice.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 0.1, "drift={drift}");
        // the second application still lands on the unit sphere
        for r in 0..8 {
            let norm: f64 = twice.values()[r * 8..(r + 1) * 8]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        /// Brute-force pairwise identity: for unit-row Z,
        /// sum over all ordered pairs of squared distance equals
        /// 2n^2 - 2 * ||sum_i z_i||^2.
        #[test]
        fn total_distance_identity(
            rows in 2usize..30,
            seed in 0u64..500,
        ) {
            let cols = 4;
            let mut x = (seed as f64 + 1.0) / 501.0;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                x = (x * 139.0 + 0.173).fract();
                data.push(x * 8.0 - 4.0);
            }
            let z = Tensor::from_values(rows, cols, data).unwrap();
            let mut tape = Tape::new();
            let y = feature_norm(&mut tape, &z).unwrap().to_matrix();

            let mut brute = 0.0;
            for i in 0..rows {
                for j in 0..rows {
                    brute += y.row_dist_sq(i, j);
                }
            }
            let mut colsum = vec![0.0; cols];
            for i in 0..rows {
                for (c, v) in colsum.iter_mut().enumerate() {
                    *v += y.get(i, c);
                }
            }
            let closed = 2.0 * (rows * rows) as f64
                - 2.0 * colsum.iter().map(|v| v * v).sum::<f64>();
            let denom = brute.abs().max(1.0);
            prop_assert!((brute - closed).abs() / denom < 1e-9);
        }
    }
}
