// Trains a tiny Hallway learner, then runs the analysis tools on it:
// greedy evaluation with a confidence interval, a single-episode trace with
// figures, and learning curves aggregated over two seeds.

use std::path::{Path, PathBuf};

use pagnet::config::Config;
use pagnet::eval::{curves, evaluate, trace, CurveFiles, EvalReport, TraceOutput};
use pagnet::train::train;
use pagnet::Result;

fn tiny(seed: u64, out_dir: &Path) -> Result<Config> {
    let o = |s: &str| s.to_string();
    Config::from_toml_str(
        "",
        &[
            format!("seed={seed}"),
            format!("out_dir={:?}", out_dir.display().to_string()),
            o("env.hallway.lengths=[2, 3]"),
            o("train.batch_size=8"),
            o("train.total_env_steps=600"),
            o("train.eval_interval=200"),
            o("train.eval_episodes=10"),
            o("train.gan_samples=16"),
            o("train.target_sync_interval=20"),
            o("model.weight_net.dim=8"),
            o("model.generator.widths=[4, 4, 4]"),
            o("model.discriminator.embed=16"),
            o("model.discriminator.channels=[2, 2, 2, 2]"),
            o("model.decoder.dim=16"),
            o("model.decoder.layers=1"),
            o("model.decoder.ffn_dim=16"),
        ],
    )
}

pub struct AnalysisOutput {
    pub report: EvalReport,
    pub trace: TraceOutput,
    pub curves: CurveFiles,
}

pub fn run_in(root: &Path) -> Result<AnalysisOutput> {
    let mut metrics: Vec<PathBuf> = Vec::new();
    let mut checkpoint = PathBuf::new();
    for seed in [1, 2] {
        let cfg = tiny(seed, &root.join(format!("seed{seed}")))?;
        let summary = train(&cfg)?;
        metrics.push(summary.metrics_path);
        checkpoint = summary.checkpoint_path;
    }
    let cfg = tiny(2, &root.join("analysis"))?;
    let report = evaluate(&cfg, &checkpoint, 20, 9)?;
    report.write(&cfg.out_dir)?;
    print!("{}", report.summary());
    let trace = trace(&cfg, &checkpoint, 9, &cfg.out_dir)?;
    println!("trace: {} steps, positions recovered on {:.0}% of steps", trace.dump.rows.len(), 100.0 * trace.accuracy.per_step);
    let curves = curves(&metrics, &["test_win_rate".into(), "td_loss".into()], &root.join("curves"))?;
    for p in curves.csv.iter().chain(&curves.figures) {
        println!("wrote {}", p.display());
    }
    Ok(AnalysisOutput { report, trace, curves })
}

pub fn run_example() -> Result<AnalysisOutput> {
    run_in(&std::env::temp_dir().join("pagnet-example-analysis"))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
