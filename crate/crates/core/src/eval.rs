//! Greedy evaluation, per-episode traces and multi-seed learning curves,
//! with CSV as the source of truth and SVG figures derived from it.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::env::{Environment, SegmentKind, StateLayout};
use crate::error::{Error, Result};
use crate::train::{Learner, MetricsRow, METRICS_HEADER};

/// Mean and normal-approximation 95% half-width `1.96 * sigma / sqrt(n)`,
/// with the population standard deviation. Values are summed in sorted order
/// so the result does not depend on input order.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let sd = (dev.iter().sum::<f64>() / n).sqrt();
    (mean, 1.96 * sd / n.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub seed: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub mean_return: f64,
    pub return_ci95: f64,
    pub win_rate: f64,
    pub mean_length: f64,
    pub episodes: Vec<EpisodeRow>,
}

impl EvalReport {
    pub fn from_rows(episodes: Vec<EpisodeRow>) -> Self {
        let n = episodes.len();
        let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
        let (mean_return, return_ci95) = mean_ci(&returns);
        let win_rate = episodes.iter().filter(|e| e.success).count() as f64 / n.max(1) as f64;
        let mean_length = episodes.iter().map(|e| e.length as f64).sum::<f64>() / n.max(1) as f64;
        Self { n_episodes: n, mean_return, return_ci95, win_rate, mean_length, episodes }
    }

    pub fn summary(&self) -> String {
        format!(
            "episodes: {}\nmean_return: {:.6}\nreturn_ci95: {:.6}\nwin_rate: {:.6}\nmean_length: {:.3}\n",
            self.n_episodes, self.mean_return, self.return_ci95, self.win_rate, self.mean_length
        )
    }

    /// Writes `eval_episodes.csv` and `eval_summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join("eval_episodes.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        for r in &self.episodes {
            w.serialize(r)?;
        }
        w.flush()?;
        let summary_path = dir.join("eval_summary.txt");
        std::fs::write(&summary_path, self.summary())?;
        Ok((csv_path, summary_path))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        check_header(r.headers()?, &["episode", "seed", "return", "length", "success"])?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<EpisodeRow>, _>>()?;
        Ok(Self::from_rows(rows))
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (i, want) in expected.iter().enumerate() {
        match found.get(i) {
            Some(f) if f == *want => {}
            Some(f) => return Err(Error::Schema { column: want.to_string(), message: format!("found {f:?} in position {i}") }),
            None => return Err(Error::Schema { column: want.to_string(), message: "missing".into() }),
        }
    }
    if found.len() > expected.len() {
        return Err(Error::Schema { column: found[expected.len()].to_string(), message: "unexpected column".into() });
    }
    Ok(())
}

/// `n` greedy episodes. Reset seeds and mixing noise come from `seed` alone.
pub fn evaluate_learner(learner: &Learner, env: &mut dyn Environment, n: usize, seed: u64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let s = rng.gen();
        let rec = learner.run_episode(env, 0.0, s, &mut rng, None)?;
        rows.push(EpisodeRow { episode: k, seed: s, ret: rec.episode_return() as f64, length: rec.len(), success: rec.success });
    }
    Ok(EvalReport::from_rows(rows))
}

/// Learner and environment for a checkpoint, refusing env mismatches.
pub fn load_learner(cfg: &Config, checkpoint: &Path) -> Result<(Learner, Box<dyn Environment>)> {
    let env = cfg.env.build()?;
    let hash = env.env_hash();
    let ck = Checkpoint::load_for_env(checkpoint, &hash)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let learner = Learner::from_checkpoint(cfg, env.spec(), &hash, &ck, &mut rng)?;
    Ok((learner, env))
}

pub fn evaluate(cfg: &Config, checkpoint: &Path, n: usize, seed: u64) -> Result<EvalReport> {
    let (learner, mut env) = load_learner(cfg, checkpoint)?;
    evaluate_learner(&learner, env.as_mut(), n, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub mean_w: f64,
    pub mean_one_minus_w: f64,
    pub liveness: Vec<f32>,
    pub state: Vec<f32>,
    pub generated: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceDump {
    pub rows: Vec<TraceRow>,
}

impl TraceDump {
    pub fn header(n_agents: usize, state_len: usize) -> Vec<String> {
        let mut h = vec!["t".to_string(), "mean_W".to_string(), "mean_one_minus_W".to_string()];
        h.extend((0..n_agents).map(|i| format!("live_{i}")));
        h.extend((0..state_len).map(|i| format!("s_{i}")));
        h.extend((0..state_len).map(|i| format!("g_{i}")));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (n, big_l) = self.rows.first().map(|r| (r.liveness.len(), r.state.len())).unwrap_or((0, 0));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header(n, big_l))?;
        for r in &self.rows {
            let mut rec = vec![r.t.to_string(), r.mean_w.to_string(), r.mean_one_minus_w.to_string()];
            rec.extend(r.liveness.iter().map(|v| v.to_string()));
            rec.extend(r.state.iter().map(|v| v.to_string()));
            rec.extend(r.generated.iter().map(|v| v.to_string()));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let h = r.headers()?.clone();
        let count = |p: &str| h.iter().filter(|c| c.starts_with(p)).count();
        let (n, big_l) = (count("live_"), count("s_"));
        let expected = Self::header(n, big_l);
        check_header(&h, &expected.iter().map(String::as_str).collect::<Vec<_>>())?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| Error::Schema { column: expected[i].clone(), message: e.to_string() })
            };
            let range = |a: usize, b: usize| -> Result<Vec<f32>> { (a..b).map(|i| num(i).map(|v| v as f32)).collect() };
            rows.push(TraceRow {
                t: num(0)? as usize,
                mean_w: num(1)?,
                mean_one_minus_w: num(2)?,
                liveness: range(3, 3 + n)?,
                state: range(3 + n, 3 + n + big_l)?,
                generated: range(3 + n + big_l, 3 + n + 2 * big_l)?,
            });
        }
        Ok(Self { rows })
    }
}

/// One greedy episode with completed states recorded at every step.
pub fn trace_learner(learner: &Learner, env: &mut dyn Environment, seed: u64) -> Result<TraceDump> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.gen();
    let mut generated = Vec::new();
    let rec = learner.run_episode(env, 0.0, s, &mut rng, Some(&mut generated))?;
    let rows = (0..rec.len())
        .map(|t| {
            let w = rec.mean_w[t] as f64;
            TraceRow {
                t,
                mean_w: w,
                mean_one_minus_w: 1.0 - w,
                liveness: env.liveness(&rec.states[t]),
                state: rec.states[t].values.clone(),
                generated: generated[t].clone(),
            }
        })
        .collect();
    Ok(TraceDump { rows })
}

/// How often the argmax of each generated one-hot position segment lands on
/// the true position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletionAccuracy {
    /// Fraction of `(step, segment)` pairs that match.
    pub per_segment: f64,
    /// Fraction of steps where every position segment matches.
    pub per_step: f64,
    pub steps: usize,
}

pub fn completion_accuracy(dump: &TraceDump, layout: &StateLayout) -> CompletionAccuracy {
    let segs: Vec<_> = layout.segments.iter().filter(|s| s.kind == SegmentKind::OneHot && s.agent.is_some()).collect();
    let argmax = |v: &[f32]| v.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0;
    let (mut hits, mut full) = (0usize, 0usize);
    for r in &dump.rows {
        let ok = segs
            .iter()
            .filter(|s| argmax(&r.generated[s.start..s.start + s.len]) == argmax(&r.state[s.start..s.start + s.len]))
            .count();
        hits += ok;
        full += (ok == segs.len()) as usize;
    }
    let steps = dump.rows.len();
    CompletionAccuracy {
        per_segment: hits as f64 / (steps * segs.len()).max(1) as f64,
        per_step: full as f64 / steps.max(1) as f64,
        steps,
    }
}

/// Files written by [`trace`].
#[derive(Clone, Debug)]
pub struct TraceFiles {
    pub csv: PathBuf,
    pub weights_figure: PathBuf,
    pub completion_figure: PathBuf,
}

/// Everything [`trace`] produces.
#[derive(Clone, Debug)]
pub struct TraceOutput {
    pub dump: TraceDump,
    pub files: TraceFiles,
    pub accuracy: CompletionAccuracy,
}

pub fn trace(cfg: &Config, checkpoint: &Path, seed: u64, out_dir: &Path) -> Result<TraceOutput> {
    let (learner, mut env) = load_learner(cfg, checkpoint)?;
    let dump = trace_learner(&learner, env.as_mut(), seed)?;
    let layout = env.state_layout();
    let files = write_trace(&dump, &layout, out_dir)?;
    let accuracy = completion_accuracy(&dump, &layout);
    Ok(TraceOutput { dump, files, accuracy })
}

pub fn write_trace(dump: &TraceDump, layout: &StateLayout, out_dir: &Path) -> Result<TraceFiles> {
    std::fs::create_dir_all(out_dir)?;
    let files = TraceFiles {
        csv: out_dir.join("trace.csv"),
        weights_figure: out_dir.join("trace_weights.svg"),
        completion_figure: out_dir.join("trace_completion.svg"),
    };
    dump.write_csv(&files.csv)?;
    plot_weights(dump, &files.weights_figure)?;
    plot_completion(dump, layout, &files.completion_figure)?;
    Ok(files)
}

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("figure rendering failed: {e:?}")))
}

/// Weight and `1 - W` over time, with per-agent liveness bars underneath.
pub fn plot_weights(dump: &TraceDump, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let t_max = dump.rows.len().max(1) as f64;
    let n = dump.rows.first().map(|r| r.liveness.len()).unwrap_or(0);
    let mut chart = ChartBuilder::on(&root)
        .caption("communication weight and agent liveness", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(-0.5..t_max - 0.5, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("t").y_desc("fraction").draw().map_err(plot_err)?;
    let width = 0.8 / n.max(1) as f64;
    for (i, color) in (0..n).map(|i| (i, Palette99::pick(i).mix(0.35))) {
        chart
            .draw_series(dump.rows.iter().map(|r| {
                let x0 = r.t as f64 - 0.4 + i as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, r.liveness[i] as f64)], color.filled())
            }))
            .map_err(plot_err)?
            .label(format!("live_{i}"))
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], Palette99::pick(i).mix(0.35).filled()));
    }
    chart
        .draw_series(LineSeries::new(dump.rows.iter().map(|r| (r.t as f64, r.mean_w)), BLUE.stroke_width(2)))
        .map_err(plot_err)?
        .label("mean W")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE));
    chart
        .draw_series(LineSeries::new(dump.rows.iter().map(|r| (r.t as f64, r.mean_one_minus_w)), RED.stroke_width(2)))
        .map_err(plot_err)?
        .label("mean 1-W")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED));
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn heat(v: f32, lo: f32, hi: f32) -> RGBColor {
    let x = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let c = (255.0 * (1.0 - x)) as u8;
    RGBColor(c, c, 255)
}

/// True (upper) and generated (lower) state per timestep, with segment
/// boundaries from the layout.
pub fn plot_completion(dump: &TraceDump, layout: &StateLayout, path: &Path) -> Result<()> {
    let steps = dump.rows.len();
    let big_l = layout.state_len;
    let root = SVGBackend::new(path, (900, (60 + 36 * steps.max(1)) as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("true (upper) vs generated (lower) state", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..big_l as f64, steps as f64..0.0)
        .map_err(plot_err)?;
    chart.configure_mesh().disable_mesh().x_desc("state index").y_desc("t").draw().map_err(plot_err)?;
    for row in &dump.rows {
        let t = row.t as f64;
        for seg in &layout.segments {
            let vals = seg.start..seg.start + seg.len;
            let (lo, hi) = match seg.kind {
                SegmentKind::OneHot => (0.0, 1.0),
                SegmentKind::Scalars => {
                    let it = vals.clone().map(|s| row.state[s]).chain(vals.clone().map(|s| row.generated[s]));
                    it.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
                }
            };
            chart
                .draw_series(vals.clone().flat_map(|s| {
                    let x = s as f64;
                    [
                        Rectangle::new([(x, t + 0.05), (x + 1.0, t + 0.45)], heat(row.state[s], lo, hi).filled()),
                        Rectangle::new([(x, t + 0.5), (x + 1.0, t + 0.9)], heat(row.generated[s], lo, hi).filled()),
                    ]
                }))
                .map_err(plot_err)?;
        }
    }
    for seg in &layout.segments {
        let x = seg.start as f64;
        chart.draw_series(std::iter::once(PathElement::new(vec![(x, 0.0), (x, steps as f64)], BLACK))).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub mode: String,
    pub step: u64,
    pub n_runs: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_half_width: f64,
}

pub const CURVE_HEADER: [&str; 7] = ["mode", "step", "n_runs", "mean", "ci_low", "ci_high", "ci_half_width"];

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    check_header(r.headers()?, &METRICS_HEADER)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

fn metric_value(row: &MetricsRow, metric: &str) -> Result<Option<f64>> {
    Ok(match metric {
        "epsilon" => Some(row.epsilon),
        "td_loss" => row.td_loss,
        "d_loss" => row.d_loss,
        "g_loss" => row.g_loss,
        "mse_loss" => row.mse_loss,
        "train_return" => row.train_return,
        "test_return" => row.test_return,
        "test_win_rate" => row.test_win_rate,
        "mean_W" => row.mean_w,
        other => return Err(Error::Schema { column: other.to_string(), message: "not a numeric metrics column".into() }),
    })
}

/// Per-(mode, step) mean and 95% CI across runs.
pub fn aggregate_curves(runs: &[Vec<MetricsRow>], metric: &str) -> Result<Vec<CurveRow>> {
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for row in run {
            if let Some(v) = metric_value(row, metric)? {
                groups.entry((row.mode.clone(), row.step)).or_default().push(v);
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|((mode, step), v)| {
            let (mean, half) = mean_ci(&v);
            CurveRow { mode, step, n_runs: v.len(), mean, ci_low: mean - half, ci_high: mean + half, ci_half_width: half }
        })
        .collect())
}

pub fn write_curves_csv(rows: &[CurveRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(CURVE_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    check_header(r.headers()?, &CURVE_HEADER)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?)
}

/// Mean line with a shaded CI band, one colour per mode.
pub fn plot_curves(rows: &[CurveRow], metric: &str, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = rows.iter().map(|r| r.step).max().unwrap_or(1).max(1) as f64;
    let (mut lo, mut hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.ci_low), b.max(r.ci_high)));
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let mut chart = ChartBuilder::on(&root)
        .caption(metric, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("env steps").y_desc(metric).draw().map_err(plot_err)?;
    let mut modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    modes.dedup();
    modes.sort();
    modes.dedup();
    for (k, mode) in modes.iter().enumerate() {
        let pts: Vec<&CurveRow> = rows.iter().filter(|r| r.mode == *mode).collect();
        let color = Palette99::pick(k);
        let mut band: Vec<(f64, f64)> = pts.iter().map(|r| (r.step as f64, r.ci_high)).collect();
        band.extend(pts.iter().rev().map(|r| (r.step as f64, r.ci_low)));
        chart.draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled()))).map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(pts.iter().map(|r| (r.step as f64, r.mean)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*mode)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], Palette99::pick(k)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Files written by [`curves`].
#[derive(Clone, Debug)]
pub struct CurveFiles {
    pub csv: Vec<PathBuf>,
    pub figures: Vec<PathBuf>,
}

/// Aggregates metrics files and writes `curves_<metric>.csv/.svg` per metric.
pub fn curves(paths: &[PathBuf], metrics: &[String], out_dir: &Path) -> Result<CurveFiles> {
    if paths.is_empty() {
        return Err(Error::Usage("curves needs at least one metrics file".into()));
    }
    let runs = paths.iter().map(|p| read_metrics(p)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = CurveFiles { csv: Vec::new(), figures: Vec::new() };
    for m in metrics {
        let rows = aggregate_curves(&runs, m)?;
        let csv_path = out_dir.join(format!("curves_{m}.csv"));
        write_curves_csv(&rows, &csv_path)?;
        let fig = out_dir.join(format!("curves_{m}.svg"));
        plot_curves(&rows, m, &fig)?;
        files.csv.push(csv_path);
        files.figures.push(fig);
    }
    Ok(files)
}

/// Checks that a file exists and is a complete SVG document.
pub fn is_svg(path: &Path) -> bool {
    use std::io::Read;
    let mut s = String::new();
    File::open(path).and_then(|mut f| f.read_to_string(&mut s)).is_ok() && s.contains("<svg") && s.trim_end().ends_with("</svg>")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: &str, step: u64, win: f64) -> MetricsRow {
        MetricsRow {
            step,
            episode: 0,
            mode: mode.into(),
            seed: 0,
            epsilon: 1.0,
            td_loss: None,
            d_loss: None,
            g_loss: None,
            mse_loss: None,
            train_return: None,
            test_return: Some(win * 10.0),
            test_win_rate: Some(win),
            mean_w: None,
        }
    }

    #[test]
    fn ci_arithmetic() {
        assert_eq!(mean_ci(&[0.8]), (0.8, 0.0));
        let (m, h) = mean_ci(&[0.8; 5]);
        assert!((m - 0.8).abs() < 1e-15 && h.abs() < 1e-15);
        let (m, h) = mean_ci(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((h - 1.96 * 0.5 / 2f64.sqrt()).abs() < 1e-12);
        assert!((h - 0.693).abs() < 1e-3);
    }

    #[test]
    fn curves_group_by_mode_and_step() {
        let runs = vec![vec![row("pagnet", 0, 0.0), row("pagnet", 10, 1.0)], vec![row("pagnet", 0, 0.0), row("pagnet", 10, 0.0), row("qmix", 10, 0.5)]];
        let c = aggregate_curves(&runs, "test_win_rate").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!((c[1].mode.as_str(), c[1].step, c[1].n_runs, c[1].mean), ("pagnet", 10, 2, 0.5));
        assert!(matches!(aggregate_curves(&runs, "nope"), Err(Error::Schema { .. })));
    }

    #[test]
    fn header_checks_name_the_column() {
        let rec = csv::StringRecord::from(vec!["t", "mean_w"]);
        match check_header(&rec, &["t", "mean_W", "x"]) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "mean_W"),
            other => panic!("{other:?}"),
        }
    }
}
