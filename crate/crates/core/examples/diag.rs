//! Scratch diagnostics: gradient checks for the network ops and a peek
//! at loss breakdowns / disparity statistics during a short overfit run.

use stereodepth_core::data::{generate_scene, SceneSpec};
use stereodepth_core::diffcore::{grad_check, Tape, Tensor};
use stereodepth_core::loss::{self, LossWeights};
use stereodepth_core::model::{self, BoundParams, InputMode, NetConfig};
use stereodepth_core::rng::Rng;
use stereodepth_core::train::{train, AugmentConfig, TrainOptions};

fn check(name: &str, outcome: stereodepth_core::Result<stereodepth_core::diffcore::GradCheckOutcome>) {
    match outcome {
        Ok(o) => println!("{name:30} max_rel_err {:.3e} passed={}", o.max_rel_error, o.passed),
        Err(e) => println!("{name:30} ERROR {e}"),
    }
}

fn main() {
    let mut rng = Rng::new(42);

    // conv2d gradients w.r.t. input, weight, bias
    let inp = Tensor::uniform(vec![2, 5, 6], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(vec![3], -0.5, 0.5, &mut rng);
    let probe = Tensor::uniform(vec![3, 3, 3], -1.0, 1.0, &mut rng);
    let pr = probe.clone();
    check(
        "conv2d s1 p1",
        grad_check(
            move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let p = t.leaf(pr.clone());
                let yp = t.mul(y, p)?;
                t.mean(yp)
            },
            &[inp.clone(), w.clone(), b.clone()],
            1e-5,
            1e-4,
        ),
    );
    let probe2 = Tensor::uniform(vec![3, 3, 3], -1.0, 1.0, &mut rng);
    check(
        "conv2d s2 p1",
        grad_check(
            move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                let p = t.leaf(probe2.clone());
                let yp = t.mul(y, p)?;
                t.mean(yp)
            },
            &[Tensor::uniform(vec![2, 6, 6], -1.0, 1.0, &mut rng), w.clone(), b.clone()],
            1e-5,
            1e-4,
        ),
    );

    for (name, f) in [
        ("elu", 0usize),
        ("upsample", 1),
        ("avgpool", 2),
        ("select_channel", 3),
        ("boxmean3", 4),
    ] {
        let x = Tensor::uniform(vec![2, 4, 6], -2.0, 2.0, &mut rng);
        let fi = f;
        check(
            name,
            grad_check(
                move |t, v| {
                    let y = match fi {
                        0 => t.elu(v[0])?,
                        1 => t.upsample_nearest2x(v[0])?,
                        2 => t.avgpool2x(v[0])?,
                        3 => t.select_channel(v[0], 1)?,
                        _ => t.boxmean3(v[0])?,
                    };
                    t.mean(y)
                },
                &[x],
                1e-5,
                1e-4,
            ),
        );
    }

    // end-to-end: tiny 2-scale model + total loss on a 16x8 synthetic pair
    let net = NetConfig {
        encoder_channels: vec![3, 5],
        seed: 7,
        input_mode: InputMode::Mono,
        ..NetConfig::default()
    };
    let params = model::init(&net).unwrap();
    let scene = generate_scene(&SceneSpec {
        seed: 5,
        width: 16,
        height: 8,
        background_disparity: 1.0,
        layers: vec![],
    })
    .unwrap();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let weights = LossWeights::default();
    let (left_img, right_img) = (scene.left.clone(), scene.right.clone());
    let netc = net.clone();
    check(
        "end-to-end 2-scale",
        grad_check(
            move |t, v| {
                let bound = BoundParams::from_vars(&netc, v)?;
                let l = t.leaf(left_img.clone());
                let r = t.leaf(right_img.clone());
                let l1 = t.avgpool2x(l)?;
                let r1 = t.avgpool2x(r)?;
                let pyr = model::forward(t, &bound, l, None)?;
                let (total, _) = loss::total_loss(t, &[(l, r), (l1, r1)], &pyr.levels, &weights)?;
                Ok(total)
            },
            &tensors,
            1e-5,
            1e-3,
        ),
    );

    // short overfit run with breakdown printing
    let samples = vec![
        generate_scene(&SceneSpec::random(100, 64, 32)).unwrap(),
        generate_scene(&SceneSpec::random(101, 64, 32)).unwrap(),
    ];
    let net = NetConfig::default();
    let opts = TrainOptions {
        epochs: 150,
        batch_size: 2,
        seed: 1,
        base_lr: 3e-3,
        augment: AugmentConfig {
            flip_prob: 0.0,
            color_prob: 0.0,
            ..AugmentConfig::default()
        },
    };
    let outcome = train(&samples, &net, &LossWeights::default(), &opts).unwrap();
    for idx in [0usize, 30, 60, 100, 149] {
        let r = &outcome.log[idx];
        let s0 = &r.scales[0];
        let s3 = &r.scales[3];
        println!(
            "step {:3} total {:.4} | s1: ap {:.4} ds {:.5} lr {:.5} | s4: ap {:.4} ds {:.5} lr {:.5}",
            r.step,
            r.c_total,
            s0.c_ap_l + s0.c_ap_r,
            s0.c_ds_l + s0.c_ds_r,
            s0.c_lr_l + s0.c_lr_r,
            s3.c_ap_l + s3.c_ap_r,
            s3.c_ds_l + s3.c_ds_r,
            s3.c_lr_l + s3.c_lr_r,
        );
    }

    // what do the predictions look like vs ground truth?
    let mut tape = Tape::new();
    let l = tape.leaf(samples[0].left.clone());
    let bound = outcome.params.bind_frozen(&mut tape);
    let pyr = model::forward(&mut tape, &bound, l, None).unwrap();
    let gt = samples[0].gt_disparity_left.as_ref().unwrap();
    for (s, (dl, _)) in pyr.levels.iter().enumerate() {
        let d = tape.value(*dl);
        let mean = d.mean();
        let min = d.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = d.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("scale {s}: pred mean {mean:.3} min {min:.3} max {max:.3}");
    }
    println!(
        "gt: mean {:.3} min {:.3} max {:.3}",
        gt.mean(),
        gt.data().iter().cloned().fold(f64::INFINITY, f64::min),
        gt.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
}
