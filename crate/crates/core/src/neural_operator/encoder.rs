//! EDSR-baseline style feature encoder without the upsampling tail.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// `head -> n x (conv, relu, conv, scaled residual) -> conv`, plus a global
/// skip from the head. Spatial size is preserved.
#[derive(Clone, Debug)]
pub struct Encoder {
    head: Conv2d,
    blocks: Vec<ResBlock>,
    body_tail: Conv2d,
    res_scale: f64,
    channels: usize,
}

impl Encoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        blocks: usize,
        res_scale: f64,
        rng: &mut R,
    ) -> Self {
        let head = Conv2d::new(store, &format!("{prefix}.head"), in_channels, channels, 3, 1, rng);
        let blocks = (0..blocks)
            .map(|i| ResBlock {
                conv1: Conv2d::new(store, &format!("{prefix}.blocks.{i}.conv1"), channels, channels, 3, 1, rng),
                conv2: Conv2d::new(store, &format!("{prefix}.blocks.{i}.conv2"), channels, channels, 3, 1, rng),
            })
            .collect();
        let body_tail = Conv2d::new(store, &format!("{prefix}.body_tail"), channels, channels, 3, 1, rng);
        Self { head, blocks, body_tail, res_scale, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `x` is `[b, 3, h, w]`; returns `[b, channels, h, w]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let head = self.head.forward(g, x);
        let mut h = head;
        for b in &self.blocks {
            let r = b.conv1.forward(g, h);
            let r = g.relu(r);
            let r = b.conv2.forward(g, r);
            let r = if self.res_scale == 1.0 { r } else { g.scale(r, self.res_scale) };
            h = g.add(h, r);
        }
        let body = self.body_tail.forward(g, h);
        g.add(body, head)
    }
}
