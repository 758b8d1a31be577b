//! Structural properties of the heads and the evaluation protocols.

mod common;

use common::{small_set, tiny_model};
use drnet_core::data::{EyeImage, Sample};
use drnet_core::evaluation::*;
use drnet_core::geometry::{angular_error, pitch_yaw_to_vector, GazeVector, PitchYaw};
use drnet_core::models::{Guidance, ModelError, ModelVariant};
use drnet_core::noise::{inject_noise, NoiseMode};

fn perturb(model: &mut drnet_core::models::GazeModel, seed: u64) {
    // fresh models have a zero adjustment head; give it weight so the checks are not vacuous
    let mut r = common::rng(seed);
    for e in model.params_mut().entries_mut() {
        if e.trainable && e.name.starts_with("ad.") {
            for v in &mut e.data {
                *v += rand::Rng::random_range(&mut r, -0.3..0.3);
            }
        }
    }
}

#[test]
fn drnet_gaze_is_exactly_shortcut_plus_aux() {
    let s = small_set(1);
    let mut m = tiny_model(ModelVariant::Drnet, 2);
    perturb(&mut m, 3);
    for i in 0..s.len() - 1 {
        let o = m.drnet_forward(&s[i].image, &s[i + 1].image).unwrap();
        for k in 0..3 {
            assert_eq!(o.gaze[k], o.sc[k] + o.aux[k]);
        }
        assert_ne!(o.aux, [0.0; 3]);
        assert_eq!(o.aux, m.ad_module(&o.diff).unwrap());
        let f = m.features(&s[i].image).unwrap();
        assert_eq!(o.sc, m.sc_module(&f).unwrap());
        let g = m.features(&s[i + 1].image).unwrap();
        assert_eq!(o.diff, m.diff_module(&f, &g).unwrap());
    }
}

#[test]
fn zeroed_adjustment_leaves_shortcut() {
    let s = small_set(1);
    let mut m = tiny_model(ModelVariant::Drnet, 4);
    perturb(&mut m, 5);
    m.zero_ad().unwrap();
    for i in 0..4 {
        let o = m.drnet_forward(&s[i].image, &s[i + 1].image).unwrap();
        assert_eq!(o.gaze, o.sc);
        assert_eq!(o.aux, [0.0; 3]);
    }
    // a fresh model starts there too
    let fresh = tiny_model(ModelVariant::Drnet, 4);
    let o = fresh.drnet_forward(&s[0].image, &s[1].image).unwrap();
    assert_eq!(o.gaze, o.sc);
}

#[test]
fn no_diff_ignores_guidance() {
    let s = small_set(2);
    let mut m = tiny_model(ModelVariant::NoDiff, 6);
    perturb(&mut m, 7);
    let blank = EyeImage::zeros(36, 60);
    let a = m.nodiff_forward(&s[0].image, &s[1].image).unwrap();
    let b = m.nodiff_forward(&s[0].image, &s[4].image).unwrap();
    let c = m.nodiff_forward(&s[0].image, &blank).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn mixing_weight_endpoints() {
    let s = small_set(3);
    let mut m = tiny_model(ModelVariant::NoAd, 8);
    assert_eq!(m.gamma(), Some(0.5));
    let f = m.features(&s[0].image).unwrap();
    let g = m.features(&s[1].image).unwrap();
    let sc = m.sc_module(&f).unwrap();
    let diff = m.diff_module(&f, &g).unwrap();
    m.set_gamma(1.0).unwrap();
    assert_eq!(m.noad_forward(&s[0].image, &s[1].image).unwrap(), sc);
    m.set_gamma(0.0).unwrap();
    assert_eq!(m.noad_forward(&s[0].image, &s[1].image).unwrap(), diff);
    assert!(tiny_model(ModelVariant::Drnet, 0).gamma().is_none());
}

#[test]
fn only_diff_nn_takes_guidance_labels() {
    let only: Vec<ModelVariant> = ModelVariant::ALL
        .into_iter()
        .filter(|v| v.requires_guidance_label())
        .collect();
    assert_eq!(only, vec![ModelVariant::DiffNn]);

    let s = small_set(4);
    let label = s[1].gaze();
    let m = tiny_model(ModelVariant::DiffNn, 9);
    assert_eq!(
        m.diffnn_forward(&s[0].image, &s[1].image, None),
        Err(ModelError::MissingGuidanceLabel)
    );
    assert_eq!(
        m.predict(&s[0].image, Guidance::Image(&s[1].image)),
        Err(ModelError::MissingGuidanceLabel)
    );
    let out = m.diffnn_forward(&s[0].image, &s[1].image, Some(label)).unwrap();
    let diff = m
        .diff_module(&m.features(&s[0].image).unwrap(), &m.features(&s[1].image).unwrap())
        .unwrap();
    let l = label.to_array();
    assert_eq!(out, [diff[0] + l[0], diff[1] + l[1], diff[2] + l[2]]);

    // every other variant produces the same output whatever label accompanies the guidance image
    let other = GazeVector::new(0.3, -0.2, -1.0).unwrap();
    for v in ModelVariant::ALL.into_iter().filter(|v| *v != ModelVariant::DiffNn) {
        let mut m = tiny_model(v, 10);
        perturb(&mut m, 11);
        let plain = m.predict(&s[0].image, Guidance::Image(&s[1].image)).unwrap();
        for l in [label, other] {
            let labeled = m
                .predict(
                    &s[0].image,
                    Guidance::Labeled {
                        image: &s[1].image,
                        label: l,
                    },
                )
                .unwrap();
            assert_eq!(plain, labeled, "{v:?}");
        }
    }
}

#[test]
fn evaluation_reads_labels_only_for_diff_nn() {
    let s = small_set(5);
    let opts = EvalOptions::new(GuidancePolicy::RandomSeeded, 1);
    for v in ModelVariant::ALL {
        let m = tiny_model(v, 12);
        let r = evaluate(&m, &s, &opts).unwrap();
        let expected = if v == ModelVariant::DiffNn { s.len() } else { 0 };
        assert_eq!(r.guidance_labels_read, expected, "{v:?}");
    }
}

#[test]
fn wrong_variant_entry_point_is_rejected() {
    let s = small_set(1);
    let m = tiny_model(ModelVariant::TwoStream, 0);
    assert!(matches!(
        m.drnet_forward(&s[0].image, &s[1].image),
        Err(ModelError::VariantMismatch { .. })
    ));
    assert!(m.two_stream_forward(&s[0].image, &s[1].image).is_ok());
    assert!(matches!(
        m.features(&EyeImage::zeros(10, 10)),
        Err(ModelError::ImageShape { .. })
    ));
}

/// A NoDiff model whose output is the constant shortcut bias.
fn constant_model(v: [f64; 3]) -> drnet_core::models::GazeModel {
    let mut m = tiny_model(ModelVariant::NoDiff, 0);
    m.zero_ad().unwrap();
    let ids = m.sc_param_ids();
    m.params_mut().get_mut(ids[0]).fill(0.0);
    m.params_mut().get_mut(ids[1]).copy_from_slice(&v);
    m
}

#[test]
fn constant_model_error_is_mean_angle_to_its_output() {
    let s = small_set(6);
    let forward = pitch_yaw_to_vector(PitchYaw::new(0.0, 0.0).unwrap());
    let m = constant_model(forward.to_array());
    let r = evaluate(&m, &s, &EvalOptions::new(GuidancePolicy::RandomSeeded, 3)).unwrap();
    let expected = s.iter().map(|x| angular_error(&x.gaze(), &forward)).sum::<f64>() / s.len() as f64;
    assert!((r.overall_mean - expected).abs() < 1e-9);
    assert_eq!(r.n_samples, s.len());
}

#[test]
fn report_mean_is_sample_weighted() {
    let mut s = small_set(7);
    // drop two of the last subject's images so subjects differ in size
    s.truncate(s.len() - 2);
    let m = tiny_model(ModelVariant::Drnet, 1);
    let r = evaluate(&m, &s, &EvalOptions::new(GuidancePolicy::RandomSeeded, 0)).unwrap();
    let weighted: f64 = r.per_subject.values().map(|e| e.mean * e.n as f64).sum::<f64>() / r.n_samples as f64;
    assert!((weighted - r.overall_mean).abs() < 1e-9);
    assert!(r.per_subject.values().all(|e| (0.0..=180.0).contains(&e.mean)));
    assert_eq!(r.per_subject["p02"].n, 4);
}

#[test]
fn no_diff_noise_distance_is_exactly_zero() {
    let s = small_set(8);
    let mut m = tiny_model(ModelVariant::NoDiff, 2);
    perturb(&mut m, 2);
    for mode in NoiseMode::ALL {
        let d = noise_distance(&m, &s, 4, NoiseProtocol { mode, fraction: 1.0 }).unwrap();
        assert_eq!(d.mean, 0.0);
        assert!(d.per_subject.values().all(|&v| v == 0.0));
        assert_eq!(d.clean.per_subject, d.noisy.per_subject);
    }
}

#[test]
fn noisy_guidance_changes_guided_models() {
    let s = small_set(9);
    let m = tiny_model(ModelVariant::TwoStream, 3);
    let d = noise_distance(
        &m,
        &s,
        4,
        NoiseProtocol {
            mode: NoiseMode::Blank,
            fraction: 1.0,
        },
    )
    .unwrap();
    assert!(d.mean > 0.0);
    // zero fraction means no guidance image is replaced
    let d0 = noise_distance(
        &m,
        &s,
        4,
        NoiseProtocol {
            mode: NoiseMode::Blank,
            fraction: 0.0,
        },
    )
    .unwrap();
    assert_eq!(d0.mean, 0.0);
}

#[test]
fn evaluation_is_reproducible_and_batch_independent() {
    let s = small_set(10);
    let m = tiny_model(ModelVariant::Drnet, 5);
    let mut opts = EvalOptions::new(GuidancePolicy::FixedNoisy, 8);
    let a = evaluate(&m, &s, &opts).unwrap();
    let b = evaluate(&m, &s, &opts).unwrap();
    assert_eq!(a, b);
    opts.batch_size = 1;
    let c = evaluate(&m, &s, &opts).unwrap();
    for (k, v) in &a.per_subject {
        assert!((v.mean - c.per_subject[k].mean).abs() < 1e-9);
    }
}

#[test]
fn evaluation_preconditions_fail_before_inference() {
    let s: Vec<Sample> = small_set(11).into_iter().take(7).collect();
    let m = tiny_model(ModelVariant::Drnet, 0);
    let opts = EvalOptions::new(GuidancePolicy::RandomSeeded, 0);
    assert!(matches!(evaluate(&m, &s, &opts), Err(EvalError::Precondition(_))));
    assert!(matches!(evaluate(&m, &[], &opts), Err(EvalError::Precondition(_))));
    let noisy = inject_noise(&s[0], NoiseMode::Blink, 0);
    assert_eq!(noisy.gaze(), s[0].gaze());
}
