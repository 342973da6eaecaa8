//! Per-pixel heads over the generator's penultimate features and the
//! weak-label classifier.

use rand::Rng;

use crate::params::{Graph, ParamGroup, ParamStore};
use crate::tape::Var;

use super::layers::{Act, Conv2d, ConvBlock, WEIGHT_STD};
use super::NetworkError;

/// Per-pixel attention head α: two affine maps with a rectifier between,
/// then a sigmoid, applied independently at each spatial position.
pub struct AttentionHead {
    in_width: usize,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl AttentionHead {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_width: usize,
        group: ParamGroup,
    ) -> Self {
        let hidden = (in_width / 2).max(1);
        AttentionHead {
            in_width,
            fc1: Conv2d::new(store, rng, &format!("{name}.fc1"), in_width, hidden, 1, 1, 0, group),
            fc2: Conv2d::new(store, rng, &format!("{name}.fc2"), hidden, 1, 1, 1, 0, group),
        }
    }

    /// `(N,F,H,W) → (N,1,H,W)` with values strictly inside (0,1).
    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var, NetworkError> {
        let shape = g.tape.value(features).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_width {
            return Err(NetworkError::Shape {
                context: "attention head input".into(),
                expected: vec![0, self.in_width, 0, 0],
                got: shape,
            });
        }
        let h = self.fc1.forward(g, features);
        let h = g.tape.relu(h);
        let score = self.fc2.forward(g, h);
        Ok(g.tape.sigmoid(score))
    }
}

/// Position-wise affine map from the penultimate features to RGB, squashed
/// by tanh. In the attention variants this *is* the translated image.
pub struct RgbProjector {
    in_width: usize,
    proj: Conv2d,
}

impl RgbProjector {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_width: usize,
        group: ParamGroup,
    ) -> Self {
        RgbProjector {
            in_width,
            proj: Conv2d::new(store, rng, name, in_width, 3, 1, 1, 0, group),
        }
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Var {
        let shape = g.tape.value(features).shape();
        assert_eq!(
            shape[1], self.in_width,
            "rgb projector: feature width mismatch"
        );
        let y = self.proj.forward(g, features);
        g.tape.tanh(y)
    }

    /// Checked variant used by the public forward contract.
    pub fn project(&self, g: &mut Graph, features: Var) -> Result<Var, NetworkError> {
        let shape = g.tape.value(features).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_width {
            return Err(NetworkError::Shape {
                context: "rgb projector input".into(),
                expected: vec![0, self.in_width, 0, 0],
                got: shape,
            });
        }
        Ok(self.forward(g, features))
    }
}

/// Spec for the auxiliary weak-label classifier: a stride-2 conv stack to a
/// globally pooled vector, then an affine map to the class logits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassifierSpec {
    pub widths: Vec<usize>,
    pub n_classes: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            widths: vec![16, 32, 64, 128],
            n_classes: crate::data::NUM_CLASSES,
        }
    }
}

/// The auxiliary convolutional network C.
pub struct Classifier {
    pub spec: ClassifierSpec,
    convs: Vec<ConvBlock>,
    fc_w: crate::params::ParamId,
    fc_b: crate::params::ParamId,
}

impl Classifier {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: ClassifierSpec,
        group: ParamGroup,
    ) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in spec.widths.iter().enumerate() {
            convs.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.conv{i}"),
                cin,
                w,
                3,
                2,
                1,
                false,
                Act::LeakyRelu,
                group,
            ));
            cin = w;
        }
        let fc_w = store.add(
            format!("{name}.fc.w"),
            crate::params::normal_init(rng, &[spec.n_classes, cin], WEIGHT_STD),
            group,
        );
        let fc_b = store.add(
            format!("{name}.fc.b"),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[spec.n_classes])),
            group,
        );
        Classifier {
            spec,
            convs,
            fc_w,
            fc_b,
        }
    }

    /// Logits of a pre-masked (or raw) image batch.
    pub fn logits(&self, g: &mut Graph, image: Var) -> Var {
        let mut h = image;
        for conv in &self.convs {
            h = conv.forward(g, h);
        }
        let pooled = g.tape.global_avg_pool(h);
        let w = g.param(self.fc_w);
        let b = g.param(self.fc_b);
        g.tape.linear(pooled, w, b)
    }

    /// Classifies `image ⊙ mask`, the mask broadcast over RGB.
    pub fn classify(&self, g: &mut Graph, image: Var, mask: Var) -> Result<Var, NetworkError> {
        let ishape = g.tape.value(image).shape().to_vec();
        let mshape = g.tape.value(mask).shape().to_vec();
        if ishape.len() != 4
            || mshape.len() != 4
            || mshape[1] != 1
            || ishape[0] != mshape[0]
            || ishape[2..] != mshape[2..]
        {
            return Err(NetworkError::Shape {
                context: "classifier image/mask".into(),
                expected: ishape,
                got: mshape,
            });
        }
        let mut sizes = (ishape[2], ishape[3]);
        for _ in &self.convs {
            if sizes.0 < 2 || sizes.1 < 2 {
                return Err(NetworkError::BadSpec(format!(
                    "classifier input {}×{} collapses below 2×2 inside the conv stack",
                    ishape[2], ishape[3]
                )));
            }
            sizes = ((sizes.0 + 1) / 2, (sizes.1 + 1) / 2);
        }
        let masked = g.tape.mul_broadcast_channel(image, mask);
        Ok(self.logits(g, masked))
    }
}
