//! Generators, discriminators, per-pixel heads, the weak-label classifier
//! and the one-hot condition encoding.

mod discriminator;
mod heads;
mod layers;
mod unet;

pub use discriminator::{DiscriminatorSpec, PatchDiscriminator};
pub use heads::{AttentionHead, Classifier, ClassifierSpec, RgbProjector};
pub use unet::{Generator, GeneratorOutput};

use ndarray::{Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NUM_CLASSES;
use crate::derive_seed;
use crate::params::{ParamGroup, ParamStore};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{context}: expected shape {expected:?} (0 = any), got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input {h}×{w} not compatible with depth {depth} (must be a multiple of 2^depth and at least 2^(depth+1))")]
    BadSpatialSize { h: usize, w: usize, depth: usize },
    #[error("label {0} outside [0,6]")]
    LabelOutOfRange(usize),
    #[error("invalid spec: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenArch {
    #[serde(rename = "unet")]
    Unet,
    #[serde(rename = "attention_unet")]
    AttentionUnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub arch: GenArch,
    /// 3 for plain inputs, 4 with the attention/noise channel, 10 conditioned.
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl GeneratorSpec {
    pub fn new(arch: GenArch, in_channels: usize, base_width: usize, depth: usize) -> Self {
        GeneratorSpec {
            arch,
            in_channels,
            base_width,
            depth,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if !matches!(self.in_channels, 3 | 4 | 10) {
            return Err(NetworkError::BadSpec(format!(
                "generator in_channels must be 3, 4 or 10, got {}",
                self.in_channels
            )));
        }
        if self.base_width < 2 {
            return Err(NetworkError::BadSpec("base_width must be at least 2".into()));
        }
        if self.depth == 0 {
            return Err(NetworkError::BadSpec("depth must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            arch: GenArch::Unet,
            in_channels: 3,
            base_width: 32,
            depth: 4,
        }
    }
}

/// One-hot condition plane: channel `label` is all ones. `(7,H,W)`.
pub fn encode_condition(label: usize, height: usize, width: usize) -> Result<ArrayD<f32>, NetworkError> {
    if label >= NUM_CLASSES {
        return Err(NetworkError::LabelOutOfRange(label));
    }
    let mut out = Array4::<f32>::zeros((1, NUM_CLASSES, height, width));
    out.index_axis_mut(ndarray::Axis(0), 0)
        .index_axis_mut(ndarray::Axis(0), label)
        .fill(1.0);
    Ok(out.index_axis_move(ndarray::Axis(0), 0).into_dyn())
}

/// Batched one-hot condition planes: `(N,7,H,W)`.
pub fn batch_condition(
    labels: &[usize],
    height: usize,
    width: usize,
) -> Result<Array4<f32>, NetworkError> {
    let mut out = Array4::<f32>::zeros((labels.len(), NUM_CLASSES, height, width));
    for (i, &label) in labels.iter().enumerate() {
        if label >= NUM_CLASSES {
            return Err(NetworkError::LabelOutOfRange(label));
        }
        out.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), label)
            .fill(1.0);
    }
    Ok(out)
}

/// Architecture of a full model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpecs {
    pub g_ab: GeneratorSpec,
    pub g_ba: GeneratorSpec,
    pub d_a: DiscriminatorSpec,
    pub d_b: DiscriminatorSpec,
    /// Attention head over `g_AB`'s penultimate features; when set, `G_AB`
    /// outputs through the shared RGB projector.
    pub attention: bool,
    /// Weak-label classifier C.
    pub classifier: Option<ClassifierSpec>,
}

impl ModelSpecs {
    pub fn validate(&self) -> Result<(), NetworkError> {
        self.g_ab.validate()?;
        self.g_ba.validate()?;
        self.d_a.validate()?;
        self.d_b.validate()?;
        if self.classifier.is_some() && !self.attention {
            return Err(NetworkError::BadSpec(
                "the classifier requires the attention head".into(),
            ));
        }
        Ok(())
    }
}

/// All networks of one variant plus their shared parameter store.
pub struct Models {
    pub store: ParamStore,
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: PatchDiscriminator,
    pub d_b: PatchDiscriminator,
    pub attention: Option<AttentionHead>,
    pub classifier: Option<Classifier>,
    pub specs: ModelSpecs,
}

impl Models {
    /// Instantiates every network. Parameter names, shapes and initial
    /// values are a pure function of `(specs, seed)`.
    pub fn build(specs: ModelSpecs, seed: u64) -> Result<Models, NetworkError> {
        specs.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        let g_ab = Generator::new(
            &mut store,
            &mut rng,
            "g_ab",
            specs.g_ab,
            specs.attention,
            ParamGroup::Generator,
        );
        let g_ba = Generator::new(
            &mut store,
            &mut rng,
            "g_ba",
            specs.g_ba,
            false,
            ParamGroup::Generator,
        );
        let d_a = PatchDiscriminator::new(
            &mut store,
            &mut rng,
            "d_a",
            specs.d_a.clone(),
            ParamGroup::Discriminator,
        );
        let d_b = PatchDiscriminator::new(
            &mut store,
            &mut rng,
            "d_b",
            specs.d_b.clone(),
            ParamGroup::Discriminator,
        );
        let attention = specs.attention.then(|| {
            AttentionHead::new(
                &mut store,
                &mut rng,
                "attn",
                specs.g_ab.base_width,
                ParamGroup::Generator,
            )
        });
        let classifier = specs.classifier.clone().map(|spec| {
            Classifier::new(&mut store, &mut rng, "cls", spec, ParamGroup::Generator)
        });
        Ok(Models {
            store,
            g_ab,
            g_ba,
            d_a,
            d_b,
            attention,
            classifier,
            specs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Graph;
    use ndarray::{Array4, IxDyn};
    use rand::Rng;

    fn small_specs(attention: bool) -> ModelSpecs {
        ModelSpecs {
            g_ab: GeneratorSpec::new(GenArch::Unet, 3, 8, 2),
            g_ba: GeneratorSpec::new(GenArch::Unet, if attention { 4 } else { 3 }, 8, 2),
            d_a: DiscriminatorSpec::new(3, vec![8, 16, 32, 64]),
            d_b: DiscriminatorSpec::new(3, vec![8, 16, 32, 64]),
            attention,
            classifier: attention.then(ClassifierSpec::default),
        }
    }

    fn random_input(rng: &mut impl Rng, n: usize, c: usize, hw: usize) -> ArrayD<f32> {
        ArrayD::from_shape_fn(IxDyn(&[n, c, hw, hw]), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn condition_encoding_is_one_hot() {
        let enc = encode_condition(3, 16, 16).unwrap();
        assert_eq!(enc.shape(), &[7, 16, 16]);
        for y in 0..16 {
            for x in 0..16 {
                let sum: f32 = (0..7).map(|k| enc[[k, y, x]]).sum();
                assert_eq!(sum, 1.0, "per-pixel channel sum must be 1");
                assert_eq!(enc[[3, y, x]], 1.0);
            }
        }
        assert!(matches!(
            encode_condition(7, 4, 4),
            Err(NetworkError::LabelOutOfRange(7))
        ));
    }

    #[test]
    fn generator_contract_shapes_hold_for_both_archs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for arch in [GenArch::Unet, GenArch::AttentionUnet] {
            let mut specs = small_specs(false);
            specs.g_ab.arch = arch;
            let models = Models::build(specs, 7).unwrap();
            let mut g = Graph::inference(&models.store);
            let x = g.tape.constant(random_input(&mut rng, 2, 3, 16));
            let out = models.g_ab.forward(&mut g, x).unwrap();
            assert_eq!(g.tape.value(out.image).shape(), &[2, 3, 16, 16]);
            assert_eq!(g.tape.value(out.penultimate).shape(), &[2, 8, 16, 16]);
            assert!(
                g.tape.value(out.image).iter().all(|v| v.abs() < 1.0),
                "tanh keeps pixels strictly inside (-1,1)"
            );
        }
    }

    #[test]
    fn channel_mismatches_are_rejected_both_ways() {
        let models = Models::build(small_specs(true), 3).unwrap();
        let mut g = Graph::inference(&models.store);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        // g_ba expects 4 channels in the attention wiring.
        let three = g.tape.constant(random_input(&mut rng, 1, 3, 16));
        assert!(models.g_ba.forward(&mut g, three).is_err());
        let four = g.tape.constant(random_input(&mut rng, 1, 4, 16));
        assert!(models.g_ba.forward(&mut g, four).is_ok());
        // And the unconditioned g_ab rejects 4 channels.
        let four2 = g.tape.constant(random_input(&mut rng, 1, 4, 16));
        assert!(models.g_ab.forward(&mut g, four2).is_err());
    }

    #[test]
    fn indivisible_spatial_sizes_are_rejected() {
        let models = Models::build(small_specs(false), 3).unwrap();
        let mut g = Graph::inference(&models.store);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = g
            .tape
            .constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 18, 18]), |_| {
                rng.random_range(-1.0f32..1.0)
            }));
        assert!(matches!(
            models.g_ab.forward(&mut g, x),
            Err(NetworkError::BadSpatialSize { .. })
        ));
    }

    #[test]
    fn attention_head_is_half_at_zero_weights_and_permutation_equivariant() {
        let mut models = Models::build(small_specs(true), 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let feats_arr = random_input(&mut rng, 1, 8, 8);

        // Zero the head: sigmoid(0) = 0.5 everywhere.
        for name in ["attn.fc1.w", "attn.fc1.b", "attn.fc2.w", "attn.fc2.b"] {
            let id = models.store.find(name).unwrap();
            models.store.value_mut(id).fill(0.0);
        }
        {
            let mut g = Graph::inference(&models.store);
            let feats = g.tape.constant(feats_arr.clone());
            let m = models.attention.as_ref().unwrap().forward(&mut g, feats).unwrap();
            assert_eq!(g.tape.value(m).shape(), &[1, 1, 8, 8]);
            assert!(g.tape.value(m).iter().all(|&v| (v - 0.5).abs() < 1e-7));
        }

        // Re-randomise and check spatial permutation equivariance.
        let rebuilt = Models::build(small_specs(true), 6).unwrap();
        let head = rebuilt.attention.as_ref().unwrap();
        let mut g = Graph::inference(&rebuilt.store);
        let feats = g.tape.constant(feats_arr.clone());
        let m = head.forward(&mut g, feats).unwrap();
        let base = g.tape.value(m).clone();
        // Permute positions: reverse both spatial axes.
        let mut permuted = feats_arr.clone();
        permuted.invert_axis(ndarray::Axis(2));
        permuted.invert_axis(ndarray::Axis(3));
        let feats_p = g.tape.constant(permuted);
        let m_p = head.forward(&mut g, feats_p).unwrap();
        let mut expect = base.clone();
        expect.invert_axis(ndarray::Axis(2));
        expect.invert_axis(ndarray::Axis(3));
        assert_eq!(
            g.tape.value(m_p),
            &expect,
            "per-pixel head must commute with spatial permutations"
        );
    }

    #[test]
    fn projector_outputs_zero_for_zero_weights_and_permutes() {
        let mut models = Models::build(small_specs(true), 8).unwrap();
        for name in ["g_ab.proj_rgb.w", "g_ab.proj_rgb.b"] {
            let id = models.store.find(name).unwrap();
            models.store.value_mut(id).fill(0.0);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let feats_arr = random_input(&mut rng, 1, 8, 8);
        let mut g = Graph::inference(&models.store);
        let feats = g.tape.constant(feats_arr.clone());
        let proj = models.g_ab.projector().unwrap();
        let y = proj.project(&mut g, feats).unwrap();
        assert_eq!(g.tape.value(y).shape(), &[1, 3, 8, 8]);
        assert!(g.tape.value(y).iter().all(|&v| v == 0.0), "tanh(0) = 0");

        let fresh = Models::build(small_specs(true), 10).unwrap();
        let proj = fresh.g_ab.projector().unwrap();
        let mut g = Graph::inference(&fresh.store);
        let feats = g.tape.constant(feats_arr.clone());
        let y = proj.project(&mut g, feats).unwrap();
        let base = g.tape.value(y).clone();
        let mut permuted = feats_arr;
        permuted.invert_axis(ndarray::Axis(3));
        let fp = g.tape.constant(permuted);
        let yp = proj.project(&mut g, fp).unwrap();
        let mut expect = base;
        expect.invert_axis(ndarray::Axis(3));
        assert_eq!(g.tape.value(yp), &expect);
    }

    #[test]
    fn discriminator_score_map_follows_convolution_arithmetic() {
        // Independent oracle: chain the output-size recurrence by hand.
        let arith = |mut n: usize| {
            for stride in [2usize, 2, 2, 1, 1] {
                n = (n + 2 - 4) / stride + 1;
            }
            n
        };
        assert_eq!(arith(128), 14);
        let spec = DiscriminatorSpec::default();
        assert_eq!(spec.output_size(128), 14);

        let models = Models::build(
            ModelSpecs {
                d_b: DiscriminatorSpec::new(3, vec![8, 16, 32, 64]),
                ..small_specs(false)
            },
            11,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::inference(&models.store);
        let x = g.tape.constant(random_input(&mut rng, 2, 3, 64));
        let scores = models.d_b.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(scores).shape(), &[2, 1, arith(64), arith(64)]);
    }

    #[test]
    fn conditioned_discriminator_takes_ten_channels() {
        let mut specs = small_specs(false);
        specs.d_a = DiscriminatorSpec::new(10, vec![8, 16, 32, 64]);
        let models = Models::build(specs, 13).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let mut g = Graph::inference(&models.store);
        let x = g.tape.constant(random_input(&mut rng, 1, 10, 32));
        assert!(models.d_a.forward(&mut g, x).is_ok());
        let bad = g.tape.constant(random_input(&mut rng, 1, 3, 32));
        assert!(models.d_a.forward(&mut g, bad).is_err());
    }

    #[test]
    fn discriminator_batches_are_order_preserving() {
        let models = Models::build(small_specs(false), 15).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let x1 = random_input(&mut rng, 1, 3, 32);
        let x2 = random_input(&mut rng, 1, 3, 32);
        let mut batch = Array4::<f32>::zeros((2, 3, 32, 32));
        batch
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&x1.view().into_dimensionality::<ndarray::Ix4>().unwrap().index_axis(ndarray::Axis(0), 0));
        batch
            .index_axis_mut(ndarray::Axis(0), 1)
            .assign(&x2.view().into_dimensionality::<ndarray::Ix4>().unwrap().index_axis(ndarray::Axis(0), 0));
        let mut g = Graph::inference(&models.store);
        let bv = g.tape.constant(batch.into_dyn());
        let sb = models.d_b.forward(&mut g, bv).unwrap();
        let x1v = g.tape.constant(x1);
        let s1 = models.d_b.forward(&mut g, x1v).unwrap();
        let x2v = g.tape.constant(x2);
        let s2 = models.d_b.forward(&mut g, x2v).unwrap();
        let batch_scores = g.tape.value(sb);
        let row0 = batch_scores.index_axis(ndarray::Axis(0), 0);
        let row1 = batch_scores.index_axis(ndarray::Axis(0), 1);
        assert_eq!(row0, g.tape.value(s1).index_axis(ndarray::Axis(0), 0));
        assert_eq!(row1, g.tape.value(s2).index_axis(ndarray::Axis(0), 0));
    }

    #[test]
    fn classifier_mask_identity_and_annihilation() {
        let models = Models::build(small_specs(true), 17).unwrap();
        let classifier = models.classifier.as_ref().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);
        let image_arr = random_input(&mut rng, 2, 3, 16);
        let mut g = Graph::inference(&models.store);
        let image = g.tape.constant(image_arr.clone());
        let ones = g.tape.constant(ArrayD::from_elem(IxDyn(&[2, 1, 16, 16]), 1.0f32));
        let zeros = g.tape.constant(ArrayD::zeros(IxDyn(&[2, 1, 16, 16])));

        let with_ones = classifier.classify(&mut g, image, ones).unwrap();
        let raw = classifier.logits(&mut g, image);
        assert_eq!(g.tape.value(with_ones), g.tape.value(raw));
        assert_eq!(g.tape.value(raw).shape(), &[2, 7]);

        let with_zeros = classifier.classify(&mut g, image, zeros).unwrap();
        let zero_img = g.tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 16, 16])));
        let of_zero = classifier.logits(&mut g, zero_img);
        assert_eq!(g.tape.value(with_zeros), g.tape.value(of_zero));

        let bad_mask = g.tape.constant(ArrayD::zeros(IxDyn(&[2, 1, 8, 8])));
        assert!(classifier.classify(&mut g, image, bad_mask).is_err());
    }

    #[test]
    fn parameter_shapes_are_a_pure_function_of_the_spec() {
        let a = Models::build(small_specs(true), 1).unwrap();
        let b = Models::build(small_specs(true), 2).unwrap();
        assert_eq!(a.store.shapes(), b.store.shapes());
        assert_eq!(a.store.parameter_count(), b.store.parameter_count());
        // Same seed reproduces values bit-for-bit.
        let c = Models::build(small_specs(true), 1).unwrap();
        assert_eq!(
            a.store.group_hash(ParamGroup::Generator),
            c.store.group_hash(ParamGroup::Generator)
        );
        assert_eq!(
            a.store.group_hash(ParamGroup::Discriminator),
            c.store.group_hash(ParamGroup::Discriminator)
        );
    }

    #[test]
    fn attention_arch_adds_gate_parameters() {
        let plain = Models::build(small_specs(false), 1).unwrap();
        let mut specs = small_specs(false);
        specs.g_ab.arch = GenArch::AttentionUnet;
        let gated = Models::build(specs, 1).unwrap();
        assert!(gated.store.parameter_count() > plain.store.parameter_count());
        assert!(gated.store.find("g_ab.dec0.gate.psi.w").is_some());
    }
}
