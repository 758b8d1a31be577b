//! Analytic gradients against central finite differences.

mod common;

use common::{random_unit, random_vec, rel_err, rng, small_set, tiny_model};
use drnet_core::data::EyeImage;
use drnet_core::geometry::{angle_between, GazeVector, Vec3};
use drnet_core::losses::*;
use drnet_core::models::{GazeModel, ModelVariant};
use drnet_core::nn::Grads;

const H: f64 = 1e-6;

fn fd3(f: impl Fn(&Vec3) -> f64, x: &Vec3) -> Vec3 {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let (mut p, mut m) = (*x, *x);
        p[k] += H;
        m[k] -= H;
        g[k] = (f(&p) - f(&m)) / (2.0 * H);
    }
    g
}

/// Points away from the kinks of |.| and the arccos endpoints.
fn smooth_point(seed: u64) -> (Vec3, Vec3, GazeVector, GazeVector) {
    let mut r = rng(seed);
    loop {
        let g = random_vec(&mut r, 1.5);
        let d = random_vec(&mut r, 1.5);
        let t = random_unit(&mut r);
        let u = random_unit(&mut r);
        let ta = t.to_array();
        let kink_free = (0..3).all(|k| (g[k] - ta[k]).abs() > 1e-3);
        let angles_ok = [angle_between(&g, &ta), angle_between(&d, &u.to_array())]
            .iter()
            .all(|a| matches!(a, Ok(v) if *v > 0.05 && *v < 3.09));
        let la_ok = la(&d, &t, &u).map(|v| v > 1e-3).unwrap_or(false);
        if kink_free && angles_ok && la_ok {
            return (g, d, t, u);
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences_at_100_points() {
    let w = LossWeights::new(0.75, 0.75).unwrap();
    let angles = GapLoss {
        norm: GapNorm::L2,
        space: GapSpace::Angles,
    };
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (g, d, t, u) = smooth_point(1000 + i);
        let checks: Vec<(Vec3, Vec3)> = vec![
            (
                l_original_grad(&g, &t).unwrap().1,
                fd3(|x| l_original(x, &t).unwrap(), &g),
            ),
            (l_new_grad(&g, &t).unwrap().1, fd3(|x| l_new(x, &t).unwrap(), &g)),
            (
                lb_grad(&g, &t, 0.3, &GapLoss::default()).unwrap().1,
                fd3(|x| lb(x, &t, 0.3).unwrap(), &g),
            ),
            (la_grad(&d, &t, &u).unwrap().1, fd3(|x| la(x, &t, &u).unwrap(), &d)),
            (
                total_loss_grad(&g, &d, &t, &u, &w, &GapLoss::default())
                    .unwrap()
                    .grad_gaze,
                fd3(|x| total_loss(x, &d, &t, &u, &w).unwrap(), &g),
            ),
            (
                total_loss_grad(&g, &d, &t, &u, &w, &GapLoss::default())
                    .unwrap()
                    .grad_diff,
                fd3(|x| total_loss(&g, x, &t, &u, &w).unwrap(), &d),
            ),
            (
                angles.grad(&g, &t).unwrap().1,
                fd3(|x| angles.value(x, &t).unwrap(), &g),
            ),
        ];
        for (k, (a, n)) in checks.iter().enumerate() {
            let e = rel_err(a, n);
            assert!(e < 1e-4, "point {i} check {k}: analytic {a:?} numeric {n:?} rel {e}");
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-4);
}

struct Batch {
    tests: Vec<EyeImage>,
    guidance: Vec<EyeImage>,
    test_gaze: Vec<GazeVector>,
    guidance_gaze: Vec<GazeVector>,
}

fn batch() -> Batch {
    let s = small_set(5);
    // same-subject pairs (i, i+1) within each subject's 6 samples
    let idx: Vec<(usize, usize)> = (0..3)
        .flat_map(|sub| (0..3).map(move |k| (sub * 6 + k, sub * 6 + k + 3)))
        .collect();
    Batch {
        tests: idx.iter().map(|&(t, _)| s[t].image.clone()).collect(),
        guidance: idx.iter().map(|&(_, g)| s[g].image.clone()).collect(),
        test_gaze: idx.iter().map(|&(t, _)| s[t].gaze()).collect(),
        guidance_gaze: idx.iter().map(|&(_, g)| s[g].gaze()).collect(),
    }
}

/// Mean batch loss and its analytic parameter gradient.
fn loss_and_grads(model: &GazeModel, b: &Batch, w: &LossWeights, want_grads: bool) -> (f64, Option<Grads>) {
    let tests: Vec<&EyeImage> = b.tests.iter().collect();
    let guid: Vec<&EyeImage> = b.guidance.iter().collect();
    let (outs, cache) = model.forward_train(&tests, &guid, Some(&b.guidance_gaze)).unwrap();
    let n = outs.len() as f64;
    let mut total = 0.0;
    let (mut dg, mut dd) = (Vec::new(), Vec::new());
    for (i, o) in outs.iter().enumerate() {
        let br = if model.variant().trains_with_la() {
            total_loss_grad(
                &o.gaze,
                &o.diff.unwrap(),
                &b.test_gaze[i],
                &b.guidance_gaze[i],
                w,
                &GapLoss::default(),
            )
        } else {
            lb_only_grad(&o.gaze, &b.test_gaze[i], w, &GapLoss::default())
        }
        .unwrap();
        total += br.total / n;
        dg.push(br.grad_gaze.map(|x| x / n));
        dd.push(br.grad_diff.map(|x| x / n));
    }
    (total, want_grads.then(|| model.backward(&cache, &dg, &dd)))
}

#[test]
fn shortcut_weight_gradients_match_coordinatewise() {
    let b = batch();
    let w = LossWeights::default();
    for variant in [ModelVariant::Drnet, ModelVariant::NoAd, ModelVariant::NoDiff] {
        let mut model = tiny_model(variant, 11);
        let (_, grads) = loss_and_grads(&model, &b, &w, true);
        let grads = grads.unwrap();
        for id in model.sc_param_ids() {
            let analytic = grads.get(id).to_vec();
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|j| {
                    let x = model.params().get(id)[j];
                    model.params_mut().get_mut(id)[j] = x + H;
                    let lp = loss_and_grads(&model, &b, &w, false).0;
                    model.params_mut().get_mut(id)[j] = x - H;
                    let lm = loss_and_grads(&model, &b, &w, false).0;
                    model.params_mut().get_mut(id)[j] = x;
                    (lp - lm) / (2.0 * H)
                })
                .collect();
            let e = rel_err(&analytic, &numeric);
            assert!(e < 1e-4, "{variant:?} sc tensor {id:?}: rel {e}");
        }
    }
}

#[test]
fn end_to_end_directional_derivatives_on_tiny_backbone() {
    let b = batch();
    let w = LossWeights::default();
    let h = 1e-5;
    for variant in ModelVariant::ALL {
        let model = tiny_model(variant, 3);
        let (_, grads) = loss_and_grads(&model, &b, &w, true);
        let grads = grads.unwrap();
        let trainable: Vec<usize> = (0..model.params().len())
            .filter(|&i| model.params().entries()[i].trainable)
            .collect();
        let mut r = rng(99);
        // one direction over all parameters, then one per tensor
        let mut directions: Vec<Vec<usize>> = vec![trainable.clone()];
        directions.extend(trainable.iter().map(|&i| vec![i]));
        for tensors in directions {
            let u: Vec<Vec<f64>> = tensors
                .iter()
                .map(|&i| {
                    (0..model.params().entries()[i].data.len())
                        .map(|_| rand::Rng::random_range(&mut r, -1.0..1.0))
                        .collect()
                })
                .collect();
            let analytic: f64 = tensors
                .iter()
                .zip(&u)
                .map(|(&i, ui)| grads.data[i].iter().zip(ui).map(|(g, x)| g * x).sum::<f64>())
                .sum();
            let shifted = |sign: f64| {
                let mut m = model.clone();
                for (&i, ui) in tensors.iter().zip(&u) {
                    for (p, x) in m.params_mut().entries_mut()[i].data.iter_mut().zip(ui) {
                        *p += sign * h * x;
                    }
                }
                loss_and_grads(&m, &b, &w, false).0
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            let name = &model.params().entries()[tensors[0]].name;
            assert!(
                e < 1e-3,
                "{variant:?} direction starting at {name} ({} tensors): analytic {analytic} numeric {numeric}",
                tensors.len()
            );
        }
    }
}
