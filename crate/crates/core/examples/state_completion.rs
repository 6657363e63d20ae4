// Adversarial state completion on the slice fixture: 12 uniform values, two
// agents each seeing one half. Prints the held-out masked MSE curve.

use pagnet::config::Config;
use pagnet::env::SliceFixture;
use pagnet::train::{pretrain_on, random_episode, PretrainReport};
use pagnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fit_fixture(updates: usize, seed: u64) -> Result<PretrainReport> {
    let mut env = SliceFixture::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset = (0..200)
        .map(|_| {
            let s = rng.gen();
            random_episode(&mut env, s, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = Config::from_toml_str(
        "",
        &[format!("seed={seed}"), format!("train.pretrain_updates={updates}"), "train.pretrain_batch=32".into()],
    )?;
    pretrain_on(&env, &cfg, &dataset)
}

pub fn run_example() -> Result<PretrainReport> {
    let report = fit_fixture(std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300), 5)?;
    println!("{} training / {} held-out timesteps", report.train_samples, report.heldout_samples);
    for (u, mse) in report.heldout_mse.iter().step_by(10) {
        println!("update {u:>5}  held-out masked mse {mse:.5}");
    }
    if let Some(d) = report.heldout_d_fake {
        println!("mean D(generated) on held-out samples: {d:.3}");
    }
    Ok(report)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
