//! The fixed random half of the network: input-to-hidden weights and the
//! elementwise nonlinearity.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matmul;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    /// `1 / (1 + e^-z)`, range (0, 1).
    #[default]
    #[serde(alias = "logistic")]
    Sigmoid,
    Tanh,
    Relu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [ActivationKind::Sigmoid, ActivationKind::Tanh, ActivationKind::Relu];

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(z),
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::Relu => z.max(0.0),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ActivationKind::Sigmoid => 0,
            ActivationKind::Tanh => 1,
            ActivationKind::Relu => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu => "relu",
        })
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" | "logistic" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "relu" => Ok(ActivationKind::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

/// Logistic sigmoid, evaluated so that `exp` never overflows.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activation of a pre-activation matrix.
pub fn apply_activation(kind: ActivationKind, z: &Matrix) -> Matrix {
    z.map(|v| kind.apply(v))
}

/// Hidden-unit outputs, `M x K`, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations(Matrix);

impl Activations {
    pub fn new(a: Matrix) -> Self {
        Activations(a)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Number of hidden units `M`.
    pub fn units(&self) -> usize {
        self.0.rows()
    }

    /// Number of samples `K`.
    pub fn samples(&self) -> usize {
        self.0.cols()
    }
}

/// Random input-to-hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    weights: Matrix,
    activation: ActivationKind,
    seed: u64,
    weight_low: f64,
    weight_high: f64,
}

impl HiddenLayer {
    /// Draws an `(fan_out * num_inputs) x num_inputs` weight matrix with
    /// independent `Uniform[low, high)` entries from a ChaCha8 stream seeded
    /// with `seed`, filled row by row.
    ///
    /// ```
    /// use elm_lda::hidden::{ActivationKind, HiddenLayer};
    /// let layer = HiddenLayer::init(784, 1, -0.5, 0.5, ActivationKind::Sigmoid, 7).unwrap();
    /// assert_eq!(layer.weights().shape(), (784, 784));
    /// ```
    pub fn init(
        num_inputs: usize,
        fan_out: usize,
        low: f64,
        high: f64,
        activation: ActivationKind,
        seed: u64,
    ) -> Result<Self> {
        if num_inputs == 0 || fan_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden layer needs num_inputs >= 1 and fan_out >= 1 (got {num_inputs}, {fan_out})"
            )));
        }
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(Error::InvalidArgument(format!(
                "weight range [{low}, {high}] must be finite with low < high"
            )));
        }
        let units = fan_out
            .checked_mul(num_inputs)
            .ok_or_else(|| Error::InvalidArgument("hidden layer size overflows".into()))?;
        let dist = Uniform::new(low, high).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = dist.sample_iter(&mut rng).take(units * num_inputs).collect();
        Ok(HiddenLayer {
            weights: Matrix::new(units, num_inputs, data)?,
            activation,
            seed,
            weight_low: low,
            weight_high: high,
        })
    }

    /// Layer with caller-supplied weights; `seed` is recorded as 0.
    pub fn from_weights(weights: Matrix, activation: ActivationKind) -> Self {
        let (lo, hi) = weights
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        HiddenLayer {
            weights,
            activation,
            seed: 0,
            weight_low: lo,
            weight_high: hi,
        }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weight_range(&self) -> (f64, f64) {
        (self.weight_low, self.weight_high)
    }

    pub fn num_inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_units(&self) -> usize {
        self.weights.rows()
    }

    /// `g(W1 X)` for inputs `x` with one sample per column.
    pub fn forward(&self, x: &Matrix) -> Result<Activations> {
        if x.rows() != self.weights.cols() {
            return Err(Error::DimensionMismatch {
                op: "forward_hidden",
                lhs: self.weights.shape(),
                rhs: x.shape(),
            });
        }
        let mut z = matmul(&self.weights, x)?;
        let kind = self.activation;
        z.map_in_place(|v| kind.apply(v));
        Ok(Activations(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(ActivationKind::Tanh.apply(0.0), 0.0);
        assert_eq!(ActivationKind::Relu.apply(-3.0), 0.0);
        assert_eq!(ActivationKind::Relu.apply(2.5), 2.5);
    }

    #[test]
    fn sigmoid_extremes_are_clean() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(!sigmoid(-1e308).is_nan());
        // Symmetry of the two branches.
        for &z in &[0.1, 3.0, 20.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn init_shape_and_range() {
        let layer = HiddenLayer::init(784, 1, -0.5, 0.5, ActivationKind::Sigmoid, 11).unwrap();
        assert_eq!(layer.weights().shape(), (784, 784));
        assert!(layer.weights().as_slice().iter().all(|&w| (-0.5..=0.5).contains(&w)));
        let layer = HiddenLayer::init(3, 4, 0.0, 1.0, ActivationKind::Tanh, 1).unwrap();
        assert_eq!(layer.num_units(), 12);
    }

    #[test]
    fn init_is_deterministic() {
        let a = HiddenLayer::init(20, 3, -0.5, 0.5, ActivationKind::Sigmoid, 99).unwrap();
        let b = HiddenLayer::init(20, 3, -0.5, 0.5, ActivationKind::Sigmoid, 99).unwrap();
        let c = HiddenLayer::init(20, 3, -0.5, 0.5, ActivationKind::Sigmoid, 100).unwrap();
        assert_eq!(a.weights().checksum(), b.weights().checksum());
        assert_ne!(a.weights().checksum(), c.weights().checksum());
    }

    #[test]
    fn init_mean_converges() {
        // 1000 x 1000 = 10^6 draws; standard error of the mean is ~2.9e-4.
        let layer = HiddenLayer::init(1000, 1, -0.5, 0.5, ActivationKind::Sigmoid, 5).unwrap();
        let w = layer.weights().as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn init_rejects_bad_arguments() {
        assert!(HiddenLayer::init(0, 1, -0.5, 0.5, ActivationKind::Sigmoid, 0).is_err());
        assert!(HiddenLayer::init(4, 0, -0.5, 0.5, ActivationKind::Sigmoid, 0).is_err());
        assert!(HiddenLayer::init(4, 1, 0.5, 0.5, ActivationKind::Sigmoid, 0).is_err());
        assert!(HiddenLayer::init(4, 1, f64::NAN, 0.5, ActivationKind::Sigmoid, 0).is_err());
    }

    #[test]
    fn zero_weights_give_half() {
        let layer = HiddenLayer::from_weights(Matrix::zeros(3, 2), ActivationKind::Sigmoid);
        let x = Matrix::from_rows(&[[1.0, -4.0, 9.0, 0.0], [2.0, 3.0, -1.0, 5.0]]).unwrap();
        let a = layer.forward(&x).unwrap();
        assert!(a.matrix().as_slice().iter().all(|&v| v == 0.5));

        let layer = HiddenLayer::from_weights(Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), ActivationKind::Sigmoid);
        let a = layer.forward(&Matrix::zeros(2, 1)).unwrap();
        assert_eq!(a.matrix().as_slice(), &[0.5]);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let layer = HiddenLayer::init(3, 1, -0.5, 0.5, ActivationKind::Sigmoid, 3).unwrap();
        let layer = HiddenLayer::from_weights(
            Matrix::from_fn(4, 3, |i, j| layer.weights()[(i % 3, j)] * (1.0 + i as f64)),
            ActivationKind::Sigmoid,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::from_fn(3, 5, |_, _| rng.random_range(-2.0..2.0));
        let a = layer.forward(&x).unwrap();
        for m in 0..4 {
            for k in 0..5 {
                let mut z = 0.0;
                for l in 0..3 {
                    z += layer.weights()[(m, l)] * x[(l, k)];
                }
                let want = 1.0 / (1.0 + (-z).exp());
                assert!((a.matrix()[(m, k)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_dimension_mismatch() {
        let layer = HiddenLayer::init(3, 2, -0.5, 0.5, ActivationKind::Relu, 0).unwrap();
        assert!(matches!(
            layer.forward(&Matrix::zeros(4, 2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn parse_and_codes_round_trip() {
        for k in ActivationKind::ALL {
            assert_eq!(k.to_string().parse::<ActivationKind>().unwrap(), k);
            assert_eq!(ActivationKind::from_code(k.code()), Some(k));
        }
        assert!("softplus".parse::<ActivationKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn column_batching_is_exact(k1 in 1usize..6, k2 in 1usize..6, seed in any::<u64>(), act in 0u8..3) {
            let kind = ActivationKind::from_code(act).unwrap();
            let layer = HiddenLayer::init(5, 2, -0.5, 0.5, kind, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x1 = Matrix::from_fn(5, k1, |_, _| rng.random_range(-3.0..3.0));
            let x2 = Matrix::from_fn(5, k2, |_, _| rng.random_range(-3.0..3.0));
            let joint = layer.forward(&x1.hstack(&x2).unwrap()).unwrap();
            let split = layer.forward(&x1).unwrap().into_matrix().hstack(layer.forward(&x2).unwrap().matrix()).unwrap();
            prop_assert_eq!(joint.matrix(), &split);
        }

        #[test]
        fn outputs_respect_range_and_order(z in proptest::collection::vec(-50.0..50.0f64, 2..20), act in 0u8..3) {
            let kind = ActivationKind::from_code(act).unwrap();
            let zm = Matrix::new(1, z.len(), z.clone()).unwrap();
            let a = apply_activation(kind, &zm);
            for (i, &v) in a.as_slice().iter().enumerate() {
                match kind {
                    ActivationKind::Sigmoid => prop_assert!((0.0..=1.0).contains(&v)),
                    ActivationKind::Tanh => prop_assert!((-1.0..=1.0).contains(&v)),
                    ActivationKind::Relu => prop_assert!(v >= 0.0),
                }
                for (j, &w) in a.as_slice().iter().enumerate() {
                    if z[i] <= z[j] {
                        prop_assert!(v <= w);
                    }
                }
            }
        }
    }
}
