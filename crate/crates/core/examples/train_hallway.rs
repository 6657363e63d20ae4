// A short training run on a small Hallway with tiny networks. Writes
// `config.toml`, `metrics.csv` and `checkpoint.pagn` under the output dir.

use std::path::{Path, PathBuf};

use pagnet::config::Config;
use pagnet::train::{train_with_progress, RunSummary};
use pagnet::Result;

/// Tiny model and budget; every mode finishes in seconds.
pub fn tiny_config(mode: &str, out_dir: &Path, steps: u64) -> Result<Config> {
    let toml = format!(
        r#"
seed = 1
mode = "{mode}"
out_dir = {out:?}

[env]
name = "hallway"

[env.hallway]
lengths = [2, 3]

[train]
batch_size = 8
total_env_steps = {steps}
eval_interval = {interval}
eval_episodes = 10
gan_samples = 16
target_sync_interval = 20
epsilon_anneal_steps = {anneal}

[model.weight_net]
dim = 8

[model.generator]
widths = [4, 4, 4]

[model.discriminator]
embed = 16
channels = [2, 2, 2, 2]

[model.decoder]
dim = 16
heads = 2
layers = 1
ffn_dim = 16

[model.mixer]
embed = 8
hyper_hidden = 16
"#,
        out = out_dir.display().to_string(),
        interval = (steps / 4).max(1),
        anneal = (steps / 2).max(1),
    );
    Config::from_toml_str(&toml, &[])
}

pub fn run_in(out_dir: &Path, steps: u64) -> Result<RunSummary> {
    let cfg = tiny_config("pagnet", out_dir, steps)?;
    let summary = train_with_progress(&cfg, &mut |row| {
        println!(
            "step {:>6}  eps {:.2}  td {:>8}  test win {:.2}",
            row.step,
            row.epsilon,
            row.td_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            row.test_win_rate.unwrap_or(0.0)
        )
    })?;
    println!("{} updates over {} episodes; checkpoint {}", summary.updates, summary.episodes, summary.checkpoint_path.display());
    Ok(summary)
}

pub fn run_example() -> Result<RunSummary> {
    let dir = std::env::temp_dir().join("pagnet-example-train");
    run_in(&dir, 3000)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("pagnet-example-train"));
    run_in(&dir, 3000).map(|_| ())
}
