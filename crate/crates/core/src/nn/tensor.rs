use rand_distr::{Distribution, Normal};

use crate::rng;
use crate::{Error, Result};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.05;

/// Dense row-major array of `f64`, rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 3 || shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "bad tensor shape {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidParameter(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()]).expect("valid shape")
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor::new(vec![data.len()], data).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a new shape of equal size.
    pub fn reshaped(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// I.i.d. `N(0, 0.05^2)` entries drawn from the ChaCha8 stream for `seed`.
pub fn init_normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng::stage_rng(seed, "init_normal");
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}
