//! Patch discriminator: a 70×70-receptive-field convolutional critic that
//! emits a grid of unbounded real/fake scores for the least-squares loss.
//!
//! Fixed recipe over the configured width progression: three stride-2
//! layers, one stride-1 layer, then a stride-1 single-channel projection —
//! all kernel 4, the first layer unnormalised.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Graph, ParamGroup, ParamStore};
use crate::tape::{conv_out_size, Var};

use super::layers::{Act, Conv2d, ConvBlock, LEAKY_SLOPE};
use super::NetworkError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// 3 for plain critics, 10 when conditioned on the one-hot class.
    pub in_channels: usize,
    /// Channel progression of the four hidden layers.
    pub widths: Vec<usize>,
}

impl DiscriminatorSpec {
    pub fn new(in_channels: usize, widths: Vec<usize>) -> Self {
        DiscriminatorSpec { in_channels, widths }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.widths.len() != 4 {
            return Err(NetworkError::BadSpec(format!(
                "discriminator expects 4 widths, got {}",
                self.widths.len()
            )));
        }
        if !matches!(self.in_channels, 3 | 10) {
            return Err(NetworkError::BadSpec(format!(
                "discriminator in_channels must be 3 or 10, got {}",
                self.in_channels
            )));
        }
        Ok(())
    }

    /// Score-map side length for a square input, by convolution arithmetic.
    pub fn output_size(&self, input: usize) -> usize {
        let mut n = input;
        for stride in [2, 2, 2, 1, 1] {
            n = conv_out_size(n, 4, stride, 1);
        }
        n
    }

    /// Every layer needs at least 2 pixels per side to pad and convolve;
    /// that bounds the smallest usable input.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<(), NetworkError> {
        let mut sizes = (h, w);
        for stride in [2, 2, 2, 1, 1] {
            if sizes.0 < 2 || sizes.1 < 2 {
                return Err(NetworkError::BadSpec(format!(
                    "discriminator input {h}×{w} collapses below 2×2 inside the conv stack"
                )));
            }
            sizes = (
                conv_out_size(sizes.0, 4, stride, 1),
                conv_out_size(sizes.1, 4, stride, 1),
            );
        }
        Ok(())
    }
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 3,
            widths: vec![64, 128, 256, 512],
        }
    }
}

pub struct PatchDiscriminator {
    pub spec: DiscriminatorSpec,
    stem: Conv2d,
    blocks: Vec<ConvBlock>,
    out: Conv2d,
}

impl PatchDiscriminator {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: DiscriminatorSpec,
        group: ParamGroup,
    ) -> Self {
        let w = &spec.widths;
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), spec.in_channels, w[0], 4, 2, 1, group);
        let mut blocks = Vec::new();
        for i in 1..4 {
            let stride = if i < 3 { 2 } else { 1 };
            blocks.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.block{i}"),
                w[i - 1],
                w[i],
                4,
                stride,
                1,
                true,
                Act::LeakyRelu,
                group,
            ));
        }
        let out = Conv2d::new(store, rng, &format!("{name}.out"), w[3], 1, 4, 1, 1, group);
        PatchDiscriminator {
            spec,
            stem,
            blocks,
            out,
        }
    }

    /// `(N,C,H,W) → (N,1,h,w)` patch score map.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NetworkError> {
        let shape = g.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(NetworkError::Shape {
                context: "discriminator input".into(),
                expected: vec![0, self.spec.in_channels, 0, 0],
                got: shape,
            });
        }
        self.spec.check_input_size(shape[2], shape[3])?;
        let mut h = self.stem.forward(g, x);
        h = g.tape.leaky_relu(h, LEAKY_SLOPE);
        for block in &self.blocks {
            h = block.forward(g, h);
        }
        Ok(self.out.forward(g, h))
    }
}
