//! Pretrain the patch classifier, convert it and fine-tune the coarse FCN
//! on synthetic scenes.
//!
//! `cargo run --release --example train_fcn -- [epochs]`

use fcn::data::gen_synth_dataset;
use fcn::pipeline::{finetune_coarse, pretrain_classifier, Protocol};
use fcn::train::history_csv;

fn main() -> fcn::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(8, |a| a.parse().expect("epochs"));
    let classes = 6;
    let train_set = gen_synth_dataset(60, 32, 32, classes, 1)?;
    let val = gen_synth_dataset(20, 32, 32, classes, 2)?;

    let mut p = Protocol::toy(classes, 1);
    p.finetune.epochs = epochs;
    let (classifier, pre) = pretrain_classifier(&p, &train_set)?;
    println!(
        "pretrained classifier: {} iterations, loss {:.4}",
        pre.iterations, pre.final_loss
    );

    let stage = finetune_coarse(&p, &classifier, &p.finetune, &train_set, &val)?;
    let per_epoch: Vec<_> = stage
        .report
        .history
        .iter()
        .filter(|r| r.metrics.is_some())
        .cloned()
        .collect();
    print!("{}", history_csv(&per_epoch));
    println!("coarse FCN: {}", stage.val);
    Ok(())
}
