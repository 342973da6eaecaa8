//! UNet generators, with optional additive attention gates on the skip
//! connections.
//!
//! `depth` counts the stride-2 downsamplings; skip features are taken at
//! every resolution above the bottleneck. The decoder upsamples with
//! transposed convolutions, gates the skip when the attention-UNet arch is
//! selected, concatenates and refines. The feature map after the last
//! up-block — the generator's penultimate layer — is returned alongside the
//! image so per-pixel heads can consume it at full resolution.

use rand::Rng;

use crate::params::{Graph, ParamGroup, ParamStore};
use crate::tape::Var;

use super::heads::RgbProjector;
use super::layers::{Act, Conv2d, ConvBlock, ConvTranspose2d};
use super::{GenArch, GeneratorSpec, NetworkError};

struct DownStage {
    conv1: ConvBlock,
    conv2: ConvBlock,
}

impl DownStage {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        DownStage {
            conv1: ConvBlock::new(
                store,
                rng,
                &format!("{name}.conv1"),
                cin,
                cout,
                3,
                stride,
                1,
                true,
                Act::LeakyRelu,
                group,
            ),
            conv2: ConvBlock::new(
                store,
                rng,
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                1,
                1,
                true,
                Act::LeakyRelu,
                group,
            ),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        self.conv2.forward(g, y)
    }
}

/// Additive attention gate: the skip is re-weighted by a per-pixel score
/// computed from the skip and the upsampled gating signal.
struct AttentionGate {
    wx: Conv2d,
    wg: Conv2d,
    psi: Conv2d,
}

impl AttentionGate {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        ch: usize,
        group: ParamGroup,
    ) -> Self {
        let hidden = (ch / 2).max(1);
        AttentionGate {
            wx: Conv2d::new(store, rng, &format!("{name}.wx"), ch, hidden, 1, 1, 0, group),
            wg: Conv2d::new(store, rng, &format!("{name}.wg"), ch, hidden, 1, 1, 0, group),
            psi: Conv2d::new(store, rng, &format!("{name}.psi"), hidden, 1, 1, 1, 0, group),
        }
    }

    fn forward(&self, g: &mut Graph, skip: Var, gating: Var) -> Var {
        let xs = self.wx.forward(g, skip);
        let gs = self.wg.forward(g, gating);
        let sum = g.tape.add(xs, gs);
        let act = g.tape.relu(sum);
        let score = self.psi.forward(g, act);
        let gate = g.tape.sigmoid(score);
        g.tape.mul_broadcast_channel(skip, gate)
    }
}

struct UpStage {
    up: ConvTranspose2d,
    gate: Option<AttentionGate>,
    conv1: ConvBlock,
    conv2: ConvBlock,
}

pub(crate) struct Unet {
    encs: Vec<DownStage>,
    bottleneck: DownStage,
    ups: Vec<UpStage>,
}

impl Unet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: &GeneratorSpec,
        group: ParamGroup,
    ) -> Self {
        let ch = |level: usize| spec.base_width << level;
        let mut encs = Vec::new();
        for level in 0..spec.depth {
            let cin = if level == 0 { spec.in_channels } else { ch(level - 1) };
            let stride = if level == 0 { 1 } else { 2 };
            encs.push(DownStage::new(
                store,
                rng,
                &format!("{name}.enc{level}"),
                cin,
                ch(level),
                stride,
                group,
            ));
        }
        let bottleneck = DownStage::new(
            store,
            rng,
            &format!("{name}.bottleneck"),
            ch(spec.depth - 1),
            ch(spec.depth),
            2,
            group,
        );
        let mut ups = Vec::new();
        for level in (0..spec.depth).rev() {
            let prev = ch(level + 1);
            let cur = ch(level);
            let uname = format!("{name}.dec{level}");
            ups.push(UpStage {
                up: ConvTranspose2d::new(store, rng, &format!("{uname}.up"), prev, cur, group),
                gate: matches!(spec.arch, GenArch::AttentionUnet).then(|| {
                    AttentionGate::new(store, rng, &format!("{uname}.gate"), cur, group)
                }),
                conv1: ConvBlock::new(
                    store,
                    rng,
                    &format!("{uname}.conv1"),
                    2 * cur,
                    cur,
                    3,
                    1,
                    1,
                    true,
                    Act::Relu,
                    group,
                ),
                conv2: ConvBlock::new(
                    store,
                    rng,
                    &format!("{uname}.conv2"),
                    cur,
                    cur,
                    3,
                    1,
                    1,
                    true,
                    Act::Relu,
                    group,
                ),
            });
        }
        Unet {
            encs,
            bottleneck,
            ups,
        }
    }

    /// Runs the body and returns the full-resolution penultimate features.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.encs.len());
        let mut h = x;
        for enc in &self.encs {
            h = enc.forward(g, h);
            skips.push(h);
        }
        h = self.bottleneck.forward(g, h);
        for (up, &skip) in self.ups.iter().zip(skips.iter().rev()) {
            let upsampled = up.up.forward(g, h);
            let gated = match &up.gate {
                Some(gate) => gate.forward(g, skip, upsampled),
                None => skip,
            };
            let cat = g.tape.concat_channels(&[upsampled, gated]);
            let y = up.conv1.forward(g, cat);
            h = up.conv2.forward(g, y);
        }
        h
    }
}

/// The generator's image head. For the attention variants the translated
/// image is the RGB projection of the penultimate features everywhere, so
/// there is a single output path shared with the cycle.
pub(crate) enum OutputHead {
    Conv(Conv2d),
    Proj(RgbProjector),
}

/// Either translation network, `G_AB` or `G_BA`.
pub struct Generator {
    pub spec: GeneratorSpec,
    body: Unet,
    head: OutputHead,
}

/// Translated image plus the penultimate feature map the attention head and
/// RGB projector consume.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorOutput {
    pub image: Var,
    pub penultimate: Var,
}

impl Generator {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: GeneratorSpec,
        projector_head: bool,
        group: ParamGroup,
    ) -> Self {
        let body = Unet::new(store, rng, name, &spec, group);
        let head = if projector_head {
            OutputHead::Proj(RgbProjector::new(
                store,
                rng,
                &format!("{name}.proj_rgb"),
                spec.base_width,
                group,
            ))
        } else {
            OutputHead::Conv(Conv2d::new(
                store,
                rng,
                &format!("{name}.out"),
                spec.base_width,
                3,
                3,
                1,
                1,
                group,
            ))
        };
        Generator { spec, body, head }
    }

    /// The shared RGB projector, when this generator uses one.
    pub fn projector(&self) -> Option<&RgbProjector> {
        match &self.head {
            OutputHead::Proj(p) => Some(p),
            OutputHead::Conv(_) => None,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<GeneratorOutput, NetworkError> {
        let shape = g.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(NetworkError::Shape {
                context: "generator input".into(),
                expected: vec![0, self.spec.in_channels, 0, 0],
                got: shape,
            });
        }
        let div = 1 << self.spec.depth;
        if shape[2] % div != 0 || shape[3] % div != 0 || shape[2] < 2 * div || shape[3] < 2 * div {
            return Err(NetworkError::BadSpatialSize {
                h: shape[2],
                w: shape[3],
                depth: self.spec.depth,
            });
        }
        let penultimate = self.body.forward(g, x);
        let image = match &self.head {
            OutputHead::Conv(conv) => {
                let y = conv.forward(g, penultimate);
                g.tape.tanh(y)
            }
            OutputHead::Proj(proj) => proj.forward(g, penultimate),
        };
        Ok(GeneratorOutput { image, penultimate })
    }
}
