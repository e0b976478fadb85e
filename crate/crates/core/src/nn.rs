//! Parameterised layers built on the autograd [`Graph`].

use rand::Rng;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::params::{kaiming, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Dense layer, weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming(&[in_features, out_features], in_features, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])));
        Self { weight, bias, in_features, out_features }
    }

    /// Same as [`Linear::new`] with all weights zero.
    pub fn zeros<F: Scalar>(store: &mut ParamStore<F>, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_features, out_features]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), kaiming(&[cout, cin, kernel, kernel], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, spec: Conv2dSpec { stride, pad: kernel / 2 } }
    }

    /// A convolution whose weights start at zero.
    pub fn zeros<F: Scalar>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, kernel, kernel]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, spec: Conv2dSpec { stride: 1, pad: kernel / 2 } }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses the largest group count not above 8 that divides `channels`.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let groups = (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[channels], F::one()));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gm, bt, self.groups, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[dim], F::one()));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, Some(gm), Some(bt), 1e-5)
    }
}
