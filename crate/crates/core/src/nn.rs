//! Parameterized layers over the tensor graph. Each layer owns parameter ids
//! in a shared [`ParamStore`]; weights use He-uniform initialization and
//! biases start at zero.

use auscult_tensor::{BufferId, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.add_param(&format!("{name}.weight"), he_uniform(&[d_out, d_in], d_in, rng))?;
        let b = if bias {
            Some(store.add_param(&format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        (stride, dilation, padding): (usize, usize, usize),
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add_param(&format!("{name}.weight"), he_uniform(&[c_out, c_in, kernel], c_in * kernel, rng))?;
        let b = if bias {
            Some(store.add_param(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            stride,
            dilation,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.conv1d(x, w, b, self.stride, self.dilation, self.padding)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add_param(
            &format!("{name}.weight"),
            he_uniform(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
        )?;
        let b = if bias {
            Some(store.add_param(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?)
        } else {
            None
        };
        Ok(Self { w, b, stride, padding })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.conv2d(x, w, b, self.stride, self.padding)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full(&[c], T::one()))?,
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[c], T::one()))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.batch_norm(store, x, gamma, beta, self.running_mean, self.running_var)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full(&[c], T::one()))?,
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}
