use std::path::Path;

use pagnet::config::Config;

/// Hallway with chains [2, 3] and every network shrunk to a few units.
pub fn tiny_hallway(dir: &Path, seed: u64, steps: u64) -> Config {
    Config::from_toml_str(
        "",
        &[
            format!("seed={seed}"),
            format!("out_dir={}", toml::Value::String(dir.display().to_string())),
            "env.hallway.lengths=[2,3]".into(),
            format!("train.total_env_steps={steps}"),
            "train.batch_size=4".into(),
            "train.eval_interval=200".into(),
            "train.eval_episodes=5".into(),
            "train.target_sync_interval=20".into(),
            "model.weight_net.dim=8".into(),
            "model.generator.widths=[4,4,8]".into(),
            "model.discriminator.embed=16".into(),
            "model.discriminator.channels=[2,4,4,4]".into(),
            "model.decoder.dim=16".into(),
            "model.decoder.heads=2".into(),
            "model.decoder.layers=1".into(),
            "model.decoder.ffn_dim=16".into(),
            "model.mixer.embed=8".into(),
            "model.mixer.hyper_hidden=16".into(),
        ],
    )
    .unwrap()
}
