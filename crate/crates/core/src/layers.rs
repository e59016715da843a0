//! Parameterized layers registered in a [`Params`] store.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamId, Params, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialized convolution with zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = he_normal(&[out_c, in_c, kernel, kernel], fan_in, rng);
        Self {
            weight: params.add(format!("{name}.weight"), weight),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[out_c])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, fan_in: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self::with_std(params, name, fan_in, out, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn with_std(
        params: &mut Params,
        name: &str,
        fan_in: usize,
        out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..out * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            weight: params.add(
                format!("{name}.weight"),
                Tensor::new(&[out, fan_in], data).expect("shape"),
            ),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, b)
    }
}

pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}
