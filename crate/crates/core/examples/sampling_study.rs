//! Loss sampling: keep each loss cell with probability p and grow the
//! batch to compensate. Same held-out loss, more time per iteration.

use fcn::data::gen_synth_dataset;
use fcn::pipeline::{pretrain_classifier, Protocol};
use fcn::train::{evaluate, train, TrainConfig};
use fcn::{zoo, Net};

fn main() -> fcn::Result<()> {
    let classes = 6;
    let train_set = gen_synth_dataset(80, 32, 32, classes, 11)?;
    let val = gen_synth_dataset(20, 32, 32, classes, 12)?;
    let (classifier, _) = pretrain_classifier(&Protocol::toy(classes, 5), &train_set)?;
    let spec = zoo::convert_to_fcn(classifier.spec(), classes)?;

    println!("p     images/batch  iters  final loss  mean IU  seconds");
    for p in [1.0, 0.5, 0.25] {
        let mut net = Net::<f32>::transplant(spec.clone(), 5, &classifier.checkpoint())?;
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 4,
            sample_p: p,
            epochs: 1000,
            max_iterations: 150,
            ..TrainConfig::default()
        };
        let report = train(&mut net, &train_set, &[], &cfg)?;
        let m = evaluate(&net, &val, "out")?;
        println!(
            "{p:<5} {:>12}  {:>5}  {:>10.4}  {:>7.4}  {:>7.2}",
            cfg.images_per_batch(),
            report.iterations,
            report.final_loss,
            m.mean_iu,
            report.wall.as_secs_f64()
        );
    }
    Ok(())
}
