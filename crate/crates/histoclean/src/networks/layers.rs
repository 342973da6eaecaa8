//! Building blocks: convolutions with reflection padding, transposed
//! convolutions, instance normalisation and the conv-norm-act block.
//!
//! Weights start from N(0, 0.02²), biases at zero, instance-norm scales at
//! one. Parameters register in construction order, so a (spec, seed) pair
//! pins every initial value.

use rand::Rng;

use crate::params::{normal_init, Graph, ParamGroup, ParamId, ParamStore};
use crate::tape::Var;

use ndarray::{ArrayD, IxDyn};

pub(crate) const WEIGHT_STD: f32 = 0.02;
pub(crate) const LEAKY_SLOPE: f32 = 0.2;

pub(crate) struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            normal_init(rng, &[cout, cin, k, k], WEIGHT_STD),
            group,
        );
        let b = store.add(
            format!("{name}.b"),
            ArrayD::zeros(IxDyn(&[cout])),
            group,
        );
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let xp = g.tape.pad_reflect(x, self.pad);
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.tape.conv2d(xp, w, b, self.stride)
    }
}

pub(crate) struct ConvTranspose2d {
    w: ParamId,
    b: ParamId,
}

impl ConvTranspose2d {
    /// Kernel 4, stride 2, padding 1: exact 2× spatial upsampling.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            normal_init(rng, &[cin, cout, 4, 4], WEIGHT_STD),
            group,
        );
        let b = store.add(
            format!("{name}.b"),
            ArrayD::zeros(IxDyn(&[cout])),
            group,
        );
        ConvTranspose2d { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.tape.conv_transpose2d(x, w, b, 2, 1)
    }
}

pub(crate) struct InstanceNorm2d {
    gamma: ParamId,
    beta: ParamId,
}

impl InstanceNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize, group: ParamGroup) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[ch]), 1.0f32),
            group,
        );
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[ch])), group);
        InstanceNorm2d { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.instance_norm(x, gamma, beta)
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Act {
    LeakyRelu,
    Relu,
}

impl Act {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Act::LeakyRelu => g.tape.leaky_relu(x, LEAKY_SLOPE),
            Act::Relu => g.tape.relu(x),
        }
    }
}

/// conv → instance norm → activation.
pub(crate) struct ConvBlock {
    conv: Conv2d,
    norm: Option<InstanceNorm2d>,
    act: Act,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        norm: bool,
        act: Act,
        group: ParamGroup,
    ) -> Self {
        let conv = Conv2d::new(store, rng, name, cin, cout, k, stride, pad, group);
        let norm = norm.then(|| InstanceNorm2d::new(store, &format!("{name}.norm"), cout, group));
        ConvBlock { conv, norm, act }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut y = self.conv.forward(g, x);
        if let Some(norm) = &self.norm {
            y = norm.forward(g, y);
        }
        self.act.apply(g, y)
    }
}
