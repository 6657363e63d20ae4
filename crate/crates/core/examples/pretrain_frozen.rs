// Offline pipeline: collect random Hallway episodes, pretrain the weight and
// completion networks on them, then train a policy on top with both frozen.

use std::path::Path;

use pagnet::config::Config;
use pagnet::train::{collect, pretrain, train, write_dataset, RunSummary};
use pagnet::Result;

fn base(out_dir: &Path, extra: &[String]) -> Result<Config> {
    let mut o: Vec<String> = [
        "seed=4",
        "env.hallway.lengths=[2, 3]",
        "train.batch_size=8",
        "train.total_env_steps=400",
        "train.eval_interval=200",
        "train.eval_episodes=10",
        "train.target_sync_interval=20",
        "train.pretrain_updates=60",
        "train.pretrain_batch=32",
        "model.weight_net.dim=8",
        "model.generator.widths=[4, 4, 4]",
        "model.discriminator.embed=16",
        "model.discriminator.channels=[2, 2, 2, 2]",
        "model.decoder.dim=16",
        "model.decoder.layers=1",
        "model.decoder.ffn_dim=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("out_dir={:?}", out_dir.display().to_string()));
    o.extend_from_slice(extra);
    Config::from_toml_str("", &o)
}

pub struct PipelineOutput {
    pub heldout_mse: Vec<(usize, f64)>,
    pub run: RunSummary,
}

pub fn run_in(root: &Path) -> Result<PipelineOutput> {
    std::fs::create_dir_all(root)?;
    let cfg = base(&root.join("pretrain"), &[])?;
    let data = collect(&cfg, 100)?;
    write_dataset(&root.join("dataset.jsonl"), &data)?;
    let report = pretrain(&cfg, &data)?;
    let (first, last) = (report.heldout_mse[0].1, report.heldout_mse.last().expect("curve").1);
    println!("pretrain: held-out masked mse {first:.4} -> {last:.4}");
    let ck = root.join("pretrained.pagn");
    report.checkpoint.save(&ck)?;

    let frozen = base(&root.join("frozen"), &["mode=\"pagnet_pt\"".into(), format!("train.checkpoint_path={:?}", ck.display().to_string())])?;
    let run = train(&frozen)?;
    println!("pagnet_pt: {} updates, last test win rate {:.2}", run.updates, run.last_win_rate);
    Ok(PipelineOutput { heldout_mse: report.heldout_mse, run })
}

pub fn run_example() -> Result<PipelineOutput> {
    run_in(&std::env::temp_dir().join("pagnet-example-pretrain"))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
