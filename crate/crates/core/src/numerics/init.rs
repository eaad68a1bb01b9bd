use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Matrix, Vector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamShape {
    /// `rows × cols` weight; fan-in is `cols`.
    Weight { rows: usize, cols: usize },
    Bias { len: usize },
}

pub enum Param {
    Weight(Matrix),
    Bias(Vector),
}

impl Param {
    pub fn into_matrix(self) -> Option<Matrix> {
        match self {
            Param::Weight(m) => Some(m),
            Param::Bias(_) => None,
        }
    }

    pub fn into_vector(self) -> Option<Vector> {
        match self {
            Param::Bias(v) => Some(v),
            Param::Weight(_) => None,
        }
    }
}

/// He initialization: weights ~ N(0, 2/fan_in), biases zero.
pub fn init_param<R: Rng + ?Sized>(shape: ParamShape, rng: &mut R) -> Result<Param> {
    match shape {
        ParamShape::Weight { rows, cols } => {
            if rows == 0 || cols == 0 {
                return Err(Error::shape("init_param", format!("{rows}x{cols}"), "positive dimensions"));
            }
            let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Ok(Param::Weight(Matrix::from_vec(rows, cols, data)?))
        }
        ParamShape::Bias { len } => {
            if len == 0 {
                return Err(Error::shape("init_param", "bias of length 0", "positive length"));
            }
            Ok(Param::Bias(Vector::zeros(len)))
        }
    }
}

pub fn init_param_seeded(shape: ParamShape, seed: u64) -> Result<Param> {
    init_param(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}
