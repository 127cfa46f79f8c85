//! Frozen toy text encoder with an exact vector-Jacobian product.
//!
//! For an input sequence `s_1..s_L` (context rows followed by one class or
//! domain token `q = s_L`):
//!
//! ```text
//! a = sum_m w_m s_m          positional pooling, w > 0, sum w = 1
//! h = q * a                  elementwise gate by the final token
//! z = P h + b                frozen affine map to the feature space
//! g = z / |z|                unit-norm text feature
//! ```
//!
//! The gate lets a context shared by all classes act differently on each class
//! token, which a purely additive pooling cannot do once features are
//! normalized.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::{purpose, KeyedStream};

pub const BIAS_STD: f64 = 0.01;
pub const MIN_FEATURE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTextEncoder {
    positional_weights: DVector<f64>,
    /// D x d.
    projection: DMatrix<f64>,
    bias: DVector<f64>,
}

impl FrozenTextEncoder {
    pub fn new(input_len: usize, d: usize, dim: usize, seed: u64) -> Result<Self> {
        if input_len < 2 {
            return Err(Error::invalid(format!(
                "encoder input length must be at least 2, got {input_len}"
            )));
        }
        if d == 0 || dim == 0 {
            return Err(Error::invalid("encoder widths d and D must be positive"));
        }

        let mut stream = KeyedStream::new(seed, purpose::ENCODER_POSITIONAL, 0);
        let raw: Vec<f64> = (0..input_len).map(|_| stream.uniform_range(0.5, 1.5)).collect();
        let total: f64 = raw.iter().sum();
        let positional_weights = DVector::from_iterator(input_len, raw.iter().map(|w| w / total));

        let mut stream = KeyedStream::new(seed, purpose::ENCODER_PROJECTION, 0);
        let mut gaussian = DMatrix::zeros(dim, d);
        for i in 0..dim {
            for j in 0..d {
                gaussian[(i, j)] = stream.normal();
            }
        }
        let projection = if d == dim {
            haar_orthogonal(gaussian)
        } else {
            gaussian / (d as f64).sqrt()
        };

        let mut stream = KeyedStream::new(seed, purpose::ENCODER_BIAS, 0);
        let bias = DVector::from_vec(stream.normal_vec(dim, BIAS_STD));

        Ok(Self {
            positional_weights,
            projection,
            bias,
        })
    }

    pub fn from_parts(
        positional_weights: DVector<f64>,
        projection: DMatrix<f64>,
        bias: DVector<f64>,
    ) -> Result<Self> {
        if positional_weights.len() < 2 {
            return Err(Error::invalid("encoder input length must be at least 2"));
        }
        if positional_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("positional weights must be strictly positive"));
        }
        if (positional_weights.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("positional weights must sum to 1"));
        }
        if bias.len() != projection.nrows() || projection.ncols() == 0 {
            return Err(Error::invalid("bias length must match projection rows"));
        }
        Ok(Self {
            positional_weights,
            projection,
            bias,
        })
    }

    pub fn input_len(&self) -> usize {
        self.positional_weights.len()
    }

    /// Token embedding width.
    pub fn d(&self) -> usize {
        self.projection.ncols()
    }

    /// Feature width.
    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn positional_weights(&self) -> &DVector<f64> {
        &self.positional_weights
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn encode(&self, seq: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.forward(seq)?.feature)
    }

    /// Gradient of `upstream . encode(seq)` with respect to every row of `seq`.
    pub fn encode_vjp(&self, seq: &DMatrix<f64>, upstream: &DVector<f64>) -> Result<DMatrix<f64>> {
        let fwd = self.forward(seq)?;
        self.backward(seq, &fwd, upstream)
    }

    pub(crate) fn forward(&self, seq: &DMatrix<f64>) -> Result<Forward> {
        self.check_seq(seq)?;
        let last = seq.nrows() - 1;
        // a = seq^T w, q = last row
        let pooled: DVector<f64> = seq.tr_mul(&self.positional_weights);
        let query: DVector<f64> = seq.row(last).transpose();
        let gated = query.component_mul(&pooled);
        let z = &self.projection * gated + &self.bias;
        let norm = z.norm();
        if !(norm >= MIN_FEATURE_NORM) {
            return Err(Error::DegenerateFeature { norm });
        }
        Ok(Forward {
            feature: z / norm,
            norm,
            pooled,
            query,
        })
    }

    pub(crate) fn backward(
        &self,
        seq: &DMatrix<f64>,
        fwd: &Forward,
        upstream: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        if upstream.len() != self.dim() {
            return Err(Error::invalid(format!(
                "upstream length {} does not match feature width {}",
                upstream.len(),
                self.dim()
            )));
        }
        let g = &fwd.feature;
        // d(z/|z|)^T u = (u - g (g.u)) / |z|
        let dz = (upstream - g * g.dot(upstream)) / fwd.norm;
        let dh = self.projection.tr_mul(&dz);
        let d_pooled = dh.component_mul(&fwd.query);
        let d_query = dh.component_mul(&fwd.pooled);

        let mut grad = &self.positional_weights * d_pooled.transpose();
        let last = seq.nrows() - 1;
        let mut row = grad.row_mut(last);
        row += d_query.transpose();
        Ok(grad)
    }

    fn check_seq(&self, seq: &DMatrix<f64>) -> Result<()> {
        if seq.nrows() != self.input_len() || seq.ncols() != self.d() {
            return Err(Error::invalid(format!(
                "sequence is {} x {}, encoder expects {} x {}",
                seq.nrows(),
                seq.ncols(),
                self.input_len(),
                self.d()
            )));
        }
        Ok(())
    }
}

pub(crate) struct Forward {
    pub feature: DVector<f64>,
    norm: f64,
    pooled: DVector<f64>,
    query: DVector<f64>,
}

/// Q factor of a square Gaussian matrix with column signs fixed by diag(R),
/// which makes the result Haar-distributed.
fn haar_orthogonal(gaussian: DMatrix<f64>) -> DMatrix<f64> {
    let qr = gaussian.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_seq(rows: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut s = KeyedStream::new(seed, "test-seq", 0);
        DMatrix::from_fn(rows, d, |_, _| s.normal())
    }

    #[test]
    fn orthogonal_projection_when_square() {
        let enc = FrozenTextEncoder::new(17, 64, 64, 3).unwrap();
        let p = enc.projection();
        let err = (p.transpose() * p - DMatrix::<f64>::identity(64, 64)).abs().max();
        assert!(err < 1e-10, "max |P^T P - I| = {err}");
    }

    #[test]
    fn positional_weights_are_normalized() {
        let enc = FrozenTextEncoder::new(17, 8, 4, 5).unwrap();
        let w = enc.positional_weights();
        assert!(w.iter().all(|x| *x > 0.0));
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert_eq!(enc.projection().shape(), (4, 8));
    }

    #[test]
    fn seeding() {
        let a = FrozenTextEncoder::new(17, 64, 64, 3).unwrap();
        assert_eq!(a, FrozenTextEncoder::new(17, 64, 64, 3).unwrap());
        let b = FrozenTextEncoder::new(17, 64, 64, 4).unwrap();
        assert_ne!(a.positional_weights(), b.positional_weights());
    }

    #[test]
    fn bad_dimensions() {
        assert!(FrozenTextEncoder::new(1, 4, 4, 0).is_err());
        assert!(FrozenTextEncoder::new(3, 0, 4, 0).is_err());
        assert!(FrozenTextEncoder::new(3, 4, 0, 0).is_err());
    }

    #[test]
    fn encode_is_unit_norm() {
        let enc = FrozenTextEncoder::new(5, 8, 6, 1).unwrap();
        for seed in 0..20 {
            let g = enc.encode(&random_seq(5, 8, seed)).unwrap();
            assert!((g.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_position_sensitive() {
        // Two-token instance: swapping rows changes both the pooled vector and the gate.
        let enc = FrozenTextEncoder::new(2, 3, 3, 9).unwrap();
        let w = enc.positional_weights();
        assert_ne!(w[0], w[1]);
        let seq = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.3, -0.2, 0.8, 0.4]);
        let swapped = DMatrix::from_row_slice(2, 3, &[-0.2, 0.8, 0.4, 1.0, 0.5, -0.3]);
        let (a, b) = (enc.encode(&seq).unwrap(), enc.encode(&swapped).unwrap());
        assert!((a - b).amax() > 1e-3);
    }

    #[test]
    fn wrong_input_len() {
        let enc = FrozenTextEncoder::new(5, 8, 8, 1).unwrap();
        assert!(matches!(
            enc.encode(&random_seq(4, 8, 0)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(enc.encode(&random_seq(5, 7, 0)).is_err());
    }

    #[test]
    fn degenerate_feature_is_an_error() {
        let enc = FrozenTextEncoder::from_parts(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::identity(3, 3),
            DVector::zeros(3),
        )
        .unwrap();
        let zeros = DMatrix::zeros(2, 3);
        assert!(matches!(enc.encode(&zeros), Err(Error::DegenerateFeature { .. })));
        let up = DVector::from_element(3, 1.0);
        assert!(matches!(
            enc.encode_vjp(&zeros, &up),
            Err(Error::DegenerateFeature { .. })
        ));
    }

    #[test]
    fn vjp_zero_and_linear_in_upstream() {
        let enc = FrozenTextEncoder::new(5, 8, 8, 2).unwrap();
        let seq = random_seq(5, 8, 1);
        let zero = enc.encode_vjp(&seq, &DVector::zeros(8)).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let mut s = KeyedStream::new(4, "up", 0);
        let u = DVector::from_vec(s.normal_vec(8, 1.0));
        let g1 = enc.encode_vjp(&seq, &u).unwrap();
        let g2 = enc.encode_vjp(&seq, &(&u * 2.0)).unwrap();
        assert!((g2 - g1 * 2.0).amax() < 1e-15);
    }
}
