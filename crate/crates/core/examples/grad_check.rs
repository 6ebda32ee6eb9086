//! Finite-difference check of the stage-one objective against the tape.

use vecformer::graphio::{gen_sbm, SbmConfig};
use vecformer::numerics::{grad_check_params, Mode};
use vecformer::trainer::{init_stage1, TrainConfig};
use vecformer::{SeededRng, Tape};

fn main() -> vecformer::Result<()> {
    let ds = gen_sbm(&SbmConfig::new(vec![6, 6], 0.5, 0.1).with_features(4, 1.0), &mut SeededRng::new(1))?;
    let cfg = TrainConfig {
        hidden_dim: 6,
        m: 4,
        n: 4,
        ..TrainConfig::default()
    };
    let (store, model) = init_stage1(&ds, &cfg)?;
    let ctx = vecformer::encoder::GraphContext::new(&ds.adjacency);
    let report = grad_check_params(
        &store,
        |tape: &Tape, store| {
            model
                .loss(tape, store, &ctx, &ds, &cfg, Mode::Eval, &mut SeededRng::new(0), &mut SeededRng::new(0))
                .map(|t| t.total)
        },
        1e-5,
    )?;
    println!(
        "{} coordinates, max relative error {:.2e} at {}[{}]",
        report.coordinates, report.max_rel_error, report.worst_param, report.worst_index
    );
    Ok(())
}
