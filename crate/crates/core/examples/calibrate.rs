//! Scratch harness for tuning the desk-scale recipe. Not part of the
//! test suite; run with `cargo run --example calibrate -p stereodepth-core`.

use std::time::Instant;

use stereodepth_core::data::{generate_scene, SceneSpec, StereoSample};
use stereodepth_core::diffcore::{Tape, Tensor};
use stereodepth_core::eval::{evaluate, EvalOptions};
use stereodepth_core::loss::LossWeights;
use stereodepth_core::model::{self, NetConfig};
use stereodepth_core::rng::{derive_stream, Rng};
use stereodepth_core::train::{train, AugmentConfig, TrainOptions, STREAM_DATAGEN};

fn dataset(master_seed: u64, count: usize, w: usize, h: usize, offset: u64) -> Vec<StereoSample> {
    let mut seed_rng = Rng::new(derive_stream(master_seed, STREAM_DATAGEN) ^ offset);
    (0..count)
        .map(|_| generate_scene(&SceneSpec::random(seed_rng.next_u64(), w, h)).unwrap())
        .collect()
}

fn predictor_for(params: &model::Parameters) -> impl FnMut(&Tensor, &Tensor) -> stereodepth_core::Result<Tensor> + '_ {
    move |left: &Tensor, _right: &Tensor| {
        let mut tape = Tape::new();
        let l = tape.leaf(left.clone());
        let bound = params.bind_frozen(&mut tape);
        let pyr = model::forward(&mut tape, &bound, l, None)?;
        Ok(tape.value(pyr.finest_left()).clone())
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let n_train: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(200);
    let augment_on: bool = args.get(4).map(|s| s == "aug").unwrap_or(true);
    let eval_on_train: bool = args.get(5).map(|s| s == "train").unwrap_or(false);
    let batch = 4usize;
    let epochs = (steps * batch).div_ceil(n_train);

    let train_set = dataset(1, n_train, 64, 32, 0);
    let heldout = if eval_on_train {
        train_set[..n_train.min(20)].to_vec()
    } else {
        dataset(1, 20, 64, 32, 0x5EED)
    };

    let net = NetConfig::default();
    let weights = LossWeights::default();
    let opts = TrainOptions {
        epochs,
        batch_size: batch,
        seed: 1,
        base_lr: lr,
        augment: if augment_on {
            AugmentConfig::default()
        } else {
            AugmentConfig {
                flip_prob: 0.0,
                color_prob: 0.0,
                ..AugmentConfig::default()
            }
        },
    };
    println!(
        "steps={} lr={} n_train={} epochs={}",
        steps, lr, n_train, epochs
    );

    let t0 = Instant::now();
    let outcome = train(&train_set, &net, &weights, &opts).unwrap();
    let train_time = t0.elapsed();
    let first: f64 = outcome.log[..outcome.log.len() / 10]
        .iter()
        .map(|r| r.c_total)
        .sum::<f64>()
        / (outcome.log.len() / 10) as f64;
    let last: f64 = outcome.log[outcome.log.len() * 9 / 10..]
        .iter()
        .map(|r| r.c_total)
        .sum::<f64>()
        / (outcome.log.len() - outcome.log.len() * 9 / 10) as f64;
    println!(
        "train: {:.1?}  loss first10% {:.4} -> last10% {:.4} (ratio {:.3})",
        train_time,
        first,
        last,
        last / first
    );

    // constant mean-disparity baseline from the training ground truth
    let mean_disp: f64 = {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in &train_set {
            let gt = s.gt_disparity_left.as_ref().unwrap();
            sum += gt.data().iter().sum::<f64>();
            n += gt.numel();
        }
        sum / n as f64
    };
    let eval_opts = EvalOptions::default();
    let (baseline, _) = evaluate(
        &heldout,
        |left, _| Ok(Tensor::full(vec![left.shape()[1], left.shape()[2]], mean_disp)),
        &eval_opts,
    )
    .unwrap();
    println!("baseline (constant {:.3}): abs_rel {:.4} d1 {:.2}% delta1 {:.4}", mean_disp, baseline.abs_rel, baseline.d1_all, baseline.delta1);

    let t1 = Instant::now();
    let (report, _) = evaluate(&heldout, predictor_for(&outcome.params), &eval_opts).unwrap();
    println!(
        "model: abs_rel {:.4} d1 {:.2}% delta1 {:.4} delta2 {:.4} (eval {:.1?})",
        report.abs_rel,
        report.d1_all,
        report.delta1,
        report.delta2,
        t1.elapsed()
    );
    println!(
        "abs_rel ratio vs baseline: {:.3} (need <= 0.5), delta1 {:.3} (need >= 0.80)",
        report.abs_rel / baseline.abs_rel,
        report.delta1
    );
}
