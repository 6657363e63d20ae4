use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pagnet::config::{Config, Mode};
use pagnet::error::{Error, Result};
use pagnet::{eval, train};

#[derive(Parser)]
#[command(name = "pagnet", version, about = "Train and analyse communicating multi-agent value learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `train.batch_size=16` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// pagnet, pagnet_fc, pagnet_pt or qmix.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Pretrained checkpoint for pagnet_pt.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Keep training the generator in pagnet_pt.
    #[arg(long)]
    unfreeze_generator: bool,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(m) = &self.mode {
            m.parse::<Mode>()?;
            o.push(format!("mode=\"{m}\""));
        }
        if let Some(d) = &self.out_dir {
            o.push(format!("out_dir={}", toml_string(d)));
        }
        if let Some(p) = &self.pretrained {
            o.push(format!("train.checkpoint_path={}", toml_string(p)));
        }
        if self.unfreeze_generator {
            o.push("train.unfreeze_generator=true".into());
        }
        Config::load(self.config.as_deref(), &o)
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Run the full training loop and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train the weight and generative networks on an offline dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// JSON-lines episode dataset written by `collect`.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Record random-policy episodes as a JSON-lines dataset.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        /// Output file (default: <out_dir>/dataset.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// One greedy episode with weight and completion traces.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate metrics files into learning curves.
    Curves {
        /// metrics.csv files, one per run.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Column to aggregate (repeatable).
        #[arg(long = "metric", default_values_t = vec!["test_win_rate".to_string()])]
        metric: Vec<String>,
        #[arg(long, default_value = "curves")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.load()?;
            eprintln!("training {} on {:?} for {} env steps -> {}", cfg.mode, cfg.env.name, cfg.train.total_env_steps, cfg.out_dir.display());
            let summary = train::train_with_progress(&cfg, &mut |r| {
                eprintln!(
                    "step {:>8}  episode {:>6}  eps {:.3}  win {:.3}  return {:.3}  td {}",
                    r.step,
                    r.episode,
                    r.epsilon,
                    r.test_win_rate.unwrap_or(f64::NAN),
                    r.test_return.unwrap_or(f64::NAN),
                    r.td_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                )
            })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Pretrain { common, dataset } => {
            let cfg = common.load()?;
            let data = train::read_dataset(&dataset)?;
            let report = train::pretrain(&cfg, &data)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let ck = cfg.out_dir.join("pretrained.pagn");
            report.checkpoint.save(&ck)?;
            let curve = cfg.out_dir.join("pretrain_heldout.csv");
            let mut w = csv::Writer::from_path(&curve)?;
            w.write_record(["update", "heldout_mse"])?;
            for (u, m) in &report.heldout_mse {
                w.write_record([u.to_string(), m.to_string()])?;
            }
            w.flush()?;
            let (first, last) = (report.heldout_mse.first(), report.heldout_mse.last());
            println!("checkpoint: {}", ck.display());
            println!("held-out masked mse: {:?} -> {:?}", first.map(|p| p.1), last.map(|p| p.1));
        }
        Command::Collect { common, episodes, output } => {
            let cfg = common.load()?;
            let n = episodes.unwrap_or(cfg.train.collect_episodes);
            let out = output.unwrap_or_else(|| cfg.out_dir.join("dataset.jsonl"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let data = train::collect(&cfg, n)?;
            train::write_dataset(&out, &data)?;
            println!("wrote {n} episodes to {}", out.display());
        }
        Command::Evaluate { common, checkpoint, episodes } => {
            let cfg = common.load()?;
            let n = episodes.unwrap_or(cfg.train.eval_episodes);
            let report = eval::evaluate(&cfg, &checkpoint, n, cfg.seed)?;
            let (csv, summary) = report.write(&cfg.out_dir)?;
            print!("{}", report.summary());
            println!("wrote {} and {}", csv.display(), summary.display());
        }
        Command::Trace { common, checkpoint } => {
            let cfg = common.load()?;
            let out = eval::trace(&cfg, &checkpoint, cfg.seed, &cfg.out_dir)?;
            println!(
                "{} steps; generated positions match on {:.1}% of steps ({:.1}% of agent segments)",
                out.dump.rows.len(),
                100.0 * out.accuracy.per_step,
                100.0 * out.accuracy.per_segment
            );
            for p in [out.files.csv, out.files.weights_figure, out.files.completion_figure] {
                println!("wrote {}", p.display());
            }
        }
        Command::Curves { metrics, metric, out_dir } => {
            let files = eval::curves(&metrics, &metric, &out_dir)?;
            for p in files.csv.iter().chain(&files.figures) {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e: Error = e;
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
