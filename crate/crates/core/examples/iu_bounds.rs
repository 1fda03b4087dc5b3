//! Upper bound on mean IU for predictions made at a coarser resolution.

use fcn::data::gen_synth_dataset;
use fcn::metrics::{iu_upper_bound_set, Resample};

fn main() -> fcn::Result<()> {
    let truths: Vec<_> = gen_synth_dataset(50, 64, 64, 6, 21)?
        .into_iter()
        .map(|s| s.labels)
        .collect();
    println!("factor  nearest  majority");
    for f in [1, 2, 4, 8, 16] {
        let near = iu_upper_bound_set(&truths, f, 6, Resample::Nearest)?.mean_iu;
        let maj = iu_upper_bound_set(&truths, f, 6, Resample::Majority)?.mean_iu;
        println!("{f:>6}  {near:.4}   {maj:.4}");
    }
    Ok(())
}
