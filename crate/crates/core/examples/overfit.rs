//! Overfits the tiny full model on eight synthetic images and prints the
//! training-set Dice every few epochs.
//!
//! cargo run --release --example overfit -- [lr] [epochs] [batch] [seed]

use std::time::Instant;

use cto::data::synth_dataset;
use cto::eval::evaluate;
use cto::train::{TrainConfig, Trainer};
use cto::{ModelConfig, Variant};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .map_or(default, |s| s.parse().ok().expect("numeric argument"))
}

fn main() -> cto::Result<()> {
    let (lr, epochs, batch, seed) = (arg(1, 1e-4), arg(2, 100), arg(3, 4), arg(4, 0));
    let data = synth_dataset(8, 64, seed, 1)?;
    let config = TrainConfig {
        lr,
        batch,
        epochs,
        seed,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::<f32>::new(&ModelConfig::tiny(Variant::Full), config)?;
    let start = Instant::now();
    for e in 1..=epochs {
        let logs = trainer.run_epoch(&data, &mut |_| {})?;
        if e % 10 == 0 || e == epochs {
            let report = evaluate(&mut trainer.model, &data)?;
            println!(
                "epoch {e:3} step {:4} loss {:.4} train dice {:.4} ({:.1}s)",
                trainer.step_count(),
                logs.last().map_or(f64::NAN, |l| l.loss.total),
                report.dice.mean.unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
