//! One trunk, two heads: six-way segmentation and foreground/background,
//! trained jointly with a summed loss.

use fcn::data::gen_synth_dataset;
use fcn::pipeline::{pretrain_classifier, Protocol};
use fcn::train::{evaluate, train, TrainConfig};
use fcn::{zoo, Net};

fn main() -> fcn::Result<()> {
    let classes = 6;
    let train_set = gen_synth_dataset(60, 32, 32, classes, 3)?;
    let (classifier, _) = pretrain_classifier(&Protocol::toy(classes, 2), &train_set)?;
    let spec = zoo::add_head(&zoo::convert_to_fcn(classifier.spec(), classes)?, "fg", 2)?;
    let mut net = Net::<f32>::transplant(spec, 2, &classifier.checkpoint())?;
    let val = gen_synth_dataset(10, 32, 32, classes, 4)?;

    let cfg = TrainConfig {
        lr: 0.01,
        batch_size: 4,
        epochs: 12,
        heads: vec!["out:classes:1".parse()?, "out_fg:foreground:0.5".parse()?],
        ..TrainConfig::default()
    };
    let report = train(&mut net, &train_set, &val, &cfg)?;
    println!(
        "{} iterations, final loss {:.4}",
        report.iterations, report.final_loss
    );
    println!("classes:    {}", evaluate(&net, &val, "out")?);

    let fg_val: Vec<_> = val
        .iter()
        .map(|s| fcn::data::Sample {
            labels: fcn::data::foreground_labels(&s.labels),
            ..s.clone()
        })
        .collect();
    println!("foreground: {}", evaluate(&net, &fg_val, "out_fg")?);
    Ok(())
}
