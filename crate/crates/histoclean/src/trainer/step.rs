//! One alternation of the minmax optimisation.
//!
//! The generator substep builds the full variant-specific data flow with
//! the discriminators bound as frozen constants, minimising the composed
//! generator total over `G_AB`, `G_BA` (plus the attention head, RGB
//! projector and classifier when present). The discriminator substep then
//! scores real samples against the captured fakes with the generators
//! frozen. Fakes handed to the discriminators come from the pre-update
//! generator forward, detached from its graph.

use ndarray::{concatenate, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Batch, NUM_CLASSES};
use crate::losses::{
    compose_base, compose_ws, l1_mean_t, lsgan_discriminator_loss_t, lsgan_generator_loss_t,
    LossReport,
};
use crate::networks::{batch_condition, Models};
use crate::params::{GradSet, Graph, ParamGroup};

use super::{TrainConfig, TrainError, TrainState, Variant};

fn noise_channel(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(&[n, 1, h, w]), |_| rng.sample::<f32, _>(StandardNormal))
}

pub(crate) struct GeneratorPass {
    pub grads: GradSet,
    pub report: LossReport,
    pub fake_a: ArrayD<f32>,
    pub fake_b: ArrayD<f32>,
    pub cond_true: Option<Array4<f32>>,
    pub cond_sampled: Option<Array4<f32>>,
}

pub(crate) fn generator_substep(
    models: &Models,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    batch: &Batch,
) -> Result<GeneratorPass, TrainError> {
    let variant = cfg.variant;
    let (n, _, h, w) = batch.images_a.dim();
    let mut g = Graph::training(&models.store, ParamGroup::Generator);
    let a = g.tape.constant(batch.images_a.clone().into_dyn());
    let b = g.tape.constant(batch.images_b.clone().into_dyn());

    let out_ab = models.g_ab.forward(&mut g, a)?;
    let fake_b = out_ab.image;

    let mut cond_true = None;
    let mut cond_sampled = None;
    let mut mask = None;

    // Variant-specific plumbing of the remaining five generator passes.
    let (fake_a, rec_a, rec_b, id_a_img, id_b_img, d_a_fake_in) = if variant.conditioned() {
        let labels = batch
            .labels_a
            .as_ref()
            .ok_or(TrainError::MissingLabels(variant))?;
        // The B→A translation has no true artifact class; a label is drawn
        // uniformly so G_BA learns what class it is asked to introduce.
        let sampled: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
        let ct = batch_condition(labels, h, w)?;
        let cs = batch_condition(&sampled, h, w)?;
        cond_true = Some(ct.clone());
        cond_sampled = Some(cs.clone());
        let ctv = g.tape.constant(ct.into_dyn());
        let csv = g.tape.constant(cs.into_dyn());
        let fb_ct = g.tape.concat_channels(&[fake_b, ctv]);
        let rec_a = models.g_ba.forward(&mut g, fb_ct)?.image;
        let b_cs = g.tape.concat_channels(&[b, csv]);
        let fake_a = models.g_ba.forward(&mut g, b_cs)?.image;
        let rec_b = models.g_ab.forward(&mut g, fake_a)?.image;
        let a_ct = g.tape.concat_channels(&[a, ctv]);
        let id_a = models.g_ba.forward(&mut g, a_ct)?.image;
        let id_b = models.g_ab.forward(&mut g, b)?.image;
        // D_A sees each image with the label that accompanied it.
        let d_in = g.tape.concat_channels(&[fake_a, csv]);
        (fake_a, rec_a, rec_b, id_a, id_b, d_in)
    } else if variant.uses_attention() {
        let head = models
            .attention
            .as_ref()
            .expect("attention variants build the head");
        let m = head.forward(&mut g, out_ab.penultimate)?;
        mask = Some(m);
        // The A→B→A cycle hands G_BA the attention map as a fourth channel;
        // everywhere else that channel is a fresh draw of unit Gaussian
        // noise, since no attention map exists off the cycle.
        let cat = g.tape.concat_channels(&[m, fake_b]);
        let rec_a = models.g_ba.forward(&mut g, cat)?.image;
        let nb = g.tape.constant(noise_channel(rng, n, h, w));
        let b_noise = g.tape.concat_channels(&[nb, b]);
        let fake_a = models.g_ba.forward(&mut g, b_noise)?.image;
        let rec_b = models.g_ab.forward(&mut g, fake_a)?.image;
        let na = g.tape.constant(noise_channel(rng, n, h, w));
        let a_noise = g.tape.concat_channels(&[na, a]);
        let id_a = models.g_ba.forward(&mut g, a_noise)?.image;
        let id_b = models.g_ab.forward(&mut g, b)?.image;
        (fake_a, rec_a, rec_b, id_a, id_b, fake_a)
    } else {
        let rec_a = models.g_ba.forward(&mut g, fake_b)?.image;
        let fake_a = models.g_ba.forward(&mut g, b)?.image;
        let rec_b = models.g_ab.forward(&mut g, fake_a)?.image;
        let id_a = models.g_ba.forward(&mut g, a)?.image;
        let id_b = models.g_ab.forward(&mut g, b)?.image;
        (fake_a, rec_a, rec_b, id_a, id_b, fake_a)
    };

    let sb = models.d_b.forward(&mut g, fake_b)?;
    let g_adv_ab = lsgan_generator_loss_t(&mut g.tape, sb);
    let sa = models.d_a.forward(&mut g, d_a_fake_in)?;
    let g_adv_ba = lsgan_generator_loss_t(&mut g.tape, sa);
    let cyc_aba = l1_mean_t(&mut g.tape, rec_a, a);
    let cyc_bab = l1_mean_t(&mut g.tape, rec_b, b);
    let id_a_l = l1_mean_t(&mut g.tape, id_a_img, a);
    let id_b_l = l1_mean_t(&mut g.tape, id_b_img, b);

    let lw = &cfg.weights;
    let mut terms = vec![
        (1.0f32, g_adv_ab),
        (lw.lambda_aba as f32, cyc_aba),
        (lw.lambda_a as f32, id_a_l),
        (1.0, g_adv_ba),
        (lw.lambda_bab as f32, cyc_bab),
        (lw.lambda_b as f32, id_b_l),
    ];

    let mut cls = None;
    let mut smooth = None;
    let mut sparse = None;
    if variant == Variant::Ws {
        let labels = batch
            .labels_a
            .as_ref()
            .ok_or(TrainError::MissingLabels(variant))?;
        let m = mask.expect("ws builds the attention mask");
        let classifier = models
            .classifier
            .as_ref()
            .expect("ws builds the classifier");
        // The mask gates the *real* artifact tile; the classifier must
        // still recover the weak label from what the mask lets through.
        let logits = classifier.classify(&mut g, a, m)?;
        let cls_l = g.tape.cross_entropy_mean(logits, labels);
        let smooth_l = g.tape.tv_mean(m);
        let sparse_l = g.tape.mean_all(m);
        terms.push((lw.lambda_cls as f32, cls_l));
        terms.push((lw.lambda_smooth as f32, smooth_l));
        terms.push((lw.lambda_sparse as f32, sparse_l));
        cls = Some(cls_l);
        smooth = Some(smooth_l);
        sparse = Some(sparse_l);
    }

    let total_g = g.tape.weighted_sum(&terms);
    g.tape.backward(total_g);
    let grads = g.collect_grads(ParamGroup::Generator);

    let sc = |v| g.tape.scalar(v) as f64;
    let report = LossReport {
        g_adv_ab: Some(sc(g_adv_ab)),
        g_adv_ba: Some(sc(g_adv_ba)),
        cyc_aba: Some(sc(cyc_aba)),
        cyc_bab: Some(sc(cyc_bab)),
        id_a: Some(sc(id_a_l)),
        id_b: Some(sc(id_b_l)),
        cls: cls.map(sc),
        smooth: smooth.map(sc),
        sparse: sparse.map(sc),
        ..LossReport::default()
    };
    Ok(GeneratorPass {
        grads,
        report,
        fake_a: g.tape.value(fake_a).clone(),
        fake_b: g.tape.value(fake_b).clone(),
        cond_true,
        cond_sampled,
    })
}

pub(crate) struct DiscriminatorPass {
    pub grads: GradSet,
    pub d_a: f64,
    pub d_b: f64,
}

pub(crate) fn discriminator_substep(
    models: &Models,
    cfg: &TrainConfig,
    batch: &Batch,
    pass: &GeneratorPass,
) -> Result<DiscriminatorPass, TrainError> {
    let real_target = cfg.real_label as f32;
    let mut g = Graph::training(&models.store, ParamGroup::Discriminator);

    let real_b = g.tape.constant(batch.images_b.clone().into_dyn());
    let fake_b = g.tape.constant(pass.fake_b.clone());
    let rb = models.d_b.forward(&mut g, real_b)?;
    let fb = models.d_b.forward(&mut g, fake_b)?;
    let d_b_loss = lsgan_discriminator_loss_t(&mut g.tape, rb, fb, real_target);

    let (real_a_arr, fake_a_arr) = match (&pass.cond_true, &pass.cond_sampled) {
        (Some(ct), Some(cs)) => {
            let fake4 = pass
                .fake_a
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("fake_a is 4-d");
            (
                concatenate(Axis(1), &[batch.images_a.view(), ct.view()])
                    .expect("concat real_a")
                    .into_dyn(),
                concatenate(Axis(1), &[fake4, cs.view()])
                    .expect("concat fake_a")
                    .into_dyn(),
            )
        }
        _ => (
            batch.images_a.clone().into_dyn(),
            pass.fake_a.clone(),
        ),
    };
    let real_a = g.tape.constant(real_a_arr);
    let fake_a = g.tape.constant(fake_a_arr);
    let ra = models.d_a.forward(&mut g, real_a)?;
    let fa = models.d_a.forward(&mut g, fake_a)?;
    let d_a_loss = lsgan_discriminator_loss_t(&mut g.tape, ra, fa, real_target);

    let total_d = g.tape.add(d_a_loss, d_b_loss);
    g.tape.backward(total_d);
    Ok(DiscriminatorPass {
        grads: g.collect_grads(ParamGroup::Discriminator),
        d_a: g.tape.scalar(d_a_loss) as f64,
        d_b: g.tape.scalar(d_b_loss) as f64,
    })
}

/// One full alternation: generator-side update, then discriminator-side
/// update, returning every loss component plus the composed totals.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    lr: f64,
) -> Result<LossReport, TrainError> {
    if state.cfg.variant.needs_labels() && batch.labels_a.is_none() {
        return Err(TrainError::MissingLabels(state.cfg.variant));
    }
    let gen = generator_substep(&state.models, &state.cfg, &mut state.rng, batch)?;
    state
        .opt_g
        .step(&mut state.models.store, &gen.grads, ParamGroup::Generator, lr as f32);
    let disc = discriminator_substep(&state.models, &state.cfg, batch, &gen)?;
    state.opt_d.step(
        &mut state.models.store,
        &disc.grads,
        ParamGroup::Discriminator,
        lr as f32,
    );
    let mut report = gen.report;
    report.d_a = Some(disc.d_a);
    report.d_b = Some(disc.d_b);
    let totals = match state.cfg.variant {
        Variant::Ws => compose_ws(&report, &state.cfg.weights)?,
        _ => compose_base(&report, &state.cfg.weights)?,
    };
    report.total_g = Some(totals.0);
    report.total_d = Some(totals.1);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AugmentConfig;
    use crate::losses::LossWeights;
    use crate::tape::Var;
    use rand::SeedableRng;

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig::for_variant(variant);
        cfg.gen_base_width = 4;
        cfg.gen_depth = 2;
        cfg.disc_widths = vec![4, 8, 16, 32];
        cfg.batch_size = 2;
        cfg.augment = AugmentConfig {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            crop_size: 32,
            out_size: 32,
        };
        cfg
    }

    fn tiny_batch(seed: u64, labelled: bool) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = |n: usize| {
            Array4::from_shape_fn((n, 3, 32, 32), |_| rng.random_range(-0.9f32..0.9))
        };
        let images_a = img(2);
        let images_b = img(2);
        Batch {
            images_a,
            labels_a: labelled.then(|| vec![0, 5]),
            images_b,
            clean_targets_a: None,
        }
    }

    #[test]
    fn every_variant_steps_with_finite_losses() {
        for variant in Variant::ALL {
            let mut state = TrainState::new(tiny_cfg(variant)).unwrap();
            let report = train_step(&mut state, &tiny_batch(1, true), 1e-3)
                .unwrap_or_else(|e| panic!("variant {variant}: {e}"));
            assert!(report.all_finite(), "variant {variant}: {report:?}");
            assert_eq!(
                report.cls.is_some(),
                variant == Variant::Ws,
                "classification loss only for ws"
            );
            assert_eq!(report.smooth.is_some(), variant == Variant::Ws);
            assert!(report.total_g.is_some() && report.total_d.is_some());
        }
    }

    #[test]
    fn identical_seeds_produce_identical_steps() {
        for variant in [Variant::Base, Variant::Cond, Variant::Ws] {
            let run = || {
                let mut state = TrainState::new(tiny_cfg(variant)).unwrap();
                let r1 = train_step(&mut state, &tiny_batch(2, true), 1e-3).unwrap();
                let r2 = train_step(&mut state, &tiny_batch(3, true), 1e-3).unwrap();
                (r1, r2)
            };
            assert_eq!(run(), run(), "variant {variant} must be deterministic");
        }
    }

    #[test]
    fn substeps_do_not_touch_the_frozen_side() {
        let mut state = TrainState::new(tiny_cfg(Variant::Ws)).unwrap();
        let batch = tiny_batch(4, true);
        let d_before = state.models.store.group_hash(ParamGroup::Discriminator);
        let gen = generator_substep(&state.models, &state.cfg, &mut state.rng, &batch).unwrap();
        state
            .opt_g
            .step(&mut state.models.store, &gen.grads, ParamGroup::Generator, 1e-3);
        assert_eq!(
            d_before,
            state.models.store.group_hash(ParamGroup::Discriminator),
            "generator substep must leave discriminators untouched"
        );
        let g_after_gen = state.models.store.group_hash(ParamGroup::Generator);
        assert_ne!(
            g_after_gen,
            d_before,
            "sanity: generator parameters did change"
        );
        let disc = discriminator_substep(&state.models, &state.cfg, &batch, &gen).unwrap();
        state.opt_d.step(
            &mut state.models.store,
            &disc.grads,
            ParamGroup::Discriminator,
            1e-3,
        );
        assert_eq!(
            g_after_gen,
            state.models.store.group_hash(ParamGroup::Generator),
            "discriminator substep must leave generators untouched"
        );
        assert_ne!(
            d_before,
            state.models.store.group_hash(ParamGroup::Discriminator)
        );
    }

    #[test]
    fn ws_rejects_unlabelled_batches() {
        let mut state = TrainState::new(tiny_cfg(Variant::Ws)).unwrap();
        match train_step(&mut state, &tiny_batch(5, false), 1e-3) {
            Err(TrainError::MissingLabels(Variant::Ws)) => {}
            other => panic!("expected missing-label error, got {other:?}"),
        }
    }

    /// With every λ at zero the generator gradient must equal the gradient
    /// of the pure adversarial loss, computed on an independent graph that
    /// never builds the cycle or identity passes.
    #[test]
    fn zero_lambdas_reduce_to_the_pure_adversarial_gradient() {
        let mut cfg = tiny_cfg(Variant::Base);
        cfg.weights = LossWeights {
            lambda_aba: 0.0,
            lambda_bab: 0.0,
            lambda_a: 0.0,
            lambda_b: 0.0,
            ..LossWeights::default()
        };
        let state = TrainState::new(cfg.clone()).unwrap();
        let batch = tiny_batch(6, true);
        let mut rng = state.rng.clone();
        let full = generator_substep(&state.models, &cfg, &mut rng, &batch).unwrap();

        // Adversarial-only oracle graph.
        let models = &state.models;
        let mut g = Graph::training(&models.store, ParamGroup::Generator);
        let a = g.tape.constant(batch.images_a.clone().into_dyn());
        let b = g.tape.constant(batch.images_b.clone().into_dyn());
        let fake_b = models.g_ab.forward(&mut g, a).unwrap().image;
        let fake_a = models.g_ba.forward(&mut g, b).unwrap().image;
        let sb = models.d_b.forward(&mut g, fake_b).unwrap();
        let adv_ab = lsgan_generator_loss_t(&mut g.tape, sb);
        let sa = models.d_a.forward(&mut g, fake_a).unwrap();
        let adv_ba = lsgan_generator_loss_t(&mut g.tape, sa);
        let total: Var = g.tape.add(adv_ab, adv_ba);
        g.tape.backward(total);
        let oracle = g.collect_grads(ParamGroup::Generator);

        for id in models.store.group_ids(ParamGroup::Generator) {
            match (full.grads.get(id), oracle.get(id)) {
                (Some(af), Some(ao)) => {
                    for (x, y) in af.iter().zip(ao.iter()) {
                        assert!(
                            (x - y).abs() < 1e-6,
                            "{}: {x} vs {y}",
                            models.store.name(id)
                        );
                    }
                }
                (None, None) => {}
                _ => panic!(
                    "gradient presence differs for {}",
                    models.store.name(id)
                ),
            }
        }
    }
}
