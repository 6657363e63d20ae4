//! Acceptance criteria. Each check prints one `PASS`/`FAIL` line.
//!
//! Criteria 1, 2 and 9 are long training protocols and are `#[ignore]`d; run
//! them with `cargo test --release --test acceptance -- --ignored`. Budget and
//! seeds come from `PAGNET_ACCEPT_STEPS`, `PAGNET_ACCEPT_SEEDS` and
//! `PAGNET_ACCEPT_DIR`.

mod common;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array2, Array3, Axis};
use pagnet::autodiff::{tensor, Graph, Tensor};
use pagnet::checkpoint::Checkpoint;
use pagnet::comm::{receiver_mix, receiver_mix_graph, standard_normal, WeightNet, WeightNetConfig, WeightTensor};
use pagnet::config::{Config, Mode};
use pagnet::env::{EnvConfig, Environment, GlobalState, Hallway, HallwayConfig, ObservationSet, SliceFixture};
use pagnet::eval::{self, TraceDump, CURVE_HEADER};
use pagnet::infocomp::{
    discriminator_loss, masked_mse, masked_mse_graph, CompletionBatch, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use pagnet::nn::ParamStore;
use pagnet::policy::{td_loss, DecoderConfig, MixerConfig, PolicyNet, TdBatch};
use pagnet::train::{self, epsilon_at, random_episode, EpisodeRecord, Learner, ReplayBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!("{} criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn skip(id: u32, name: &str) {
    println!("SKIP criterion {id:>2} {name}: long protocol, run with --ignored");
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

// ---------------------------------------------------------------- criterion 3

struct GradCheck {
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||) over every parameter.
    global: f64,
    /// Worst per-element relative error among elements with a non-negligible gradient.
    worst: f64,
    checked: usize,
}

/// Central differences over every parameter entry of `store`.
fn grad_check(store: &ParamStore<f64>, f: &dyn Fn(&ParamStore<f64>) -> (f64, Vec<Tensor<f64>>)) -> GradCheck {
    let h = 1e-6;
    let (_, analytic) = f(store);
    let (mut diff2, mut a2, mut n2, mut worst, mut checked) = (0.0, 0.0, 0.0, 0.0f64, 0);
    for (k, (_, t)) in store.iter().enumerate() {
        for idx in 0..t.len() {
            let mut plus = store.clone();
            let mut minus = store.clone();
            plus.values_mut().nth(k).unwrap().as_slice_mut().unwrap()[idx] += h;
            minus.values_mut().nth(k).unwrap().as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&plus).0 - f(&minus).0) / (2.0 * h);
            let ana = analytic[k].as_slice().unwrap()[idx];
            diff2 += (num - ana).powi(2);
            a2 += ana * ana;
            n2 += num * num;
            let scale = num.abs().max(ana.abs());
            if scale > 1e-5 {
                worst = worst.max((num - ana).abs() / scale);
            }
            checked += 1;
        }
    }
    GradCheck { global: diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-300), worst, checked }
}

fn weight_mix_instance() -> GradCheck {
    let (n, l) = (2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let net = WeightNet::<f64>::new(n, l, &WeightNetConfig { dim: 8, dropout: 0.0 }, &mut rng).unwrap();
    let msgs = uniform(&mut rng, &[2, n, l]);
    let eps = uniform(&mut rng, &[2, n, l]);
    let probe = uniform(&mut rng, &[2, n, n, l]);
    grad_check(&net.store, &|s| {
        let g = Graph::new();
        let p = s.bind(&g, true);
        let m = g.constant(msgs.clone());
        let w = net.forward(&g, &p, m, None::<&mut ChaCha8Rng>).w_rows;
        let x = receiver_mix_graph(&g, m, w, g.constant(eps.clone()));
        let y = g.mul(x, g.constant(probe.clone()));
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        (g.scalar(loss), s.grads_of(&p, &grads))
    })
}

fn generator_instance() -> GradCheck {
    let (n, l, big_l) = (2, 8, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let gen = Generator::<f64>::new(n, l, big_l, &GeneratorConfig { widths: [4, 4, 4] }, &mut rng).unwrap();
    let msgs = uniform(&mut rng, &[2, n, l]);
    let w = uniform(&mut rng, &[2, n, 1, l]).mapv(|v| 0.5 + 0.4 * v);
    let eps = uniform(&mut rng, &[2, n, l]);
    let target = uniform(&mut rng, &[2, big_l]);
    let count = tensor(&[2, big_l], (0..2 * big_l).map(|i| (i % 3) as f64).collect());
    grad_check(&gen.store, &|s| {
        let g = Graph::new();
        let p = s.bind(&g, true);
        let s_hat = gen.complete(&g, &p, g.constant(msgs.clone()), g.constant(w.clone()), g.constant(eps.clone()));
        let loss = masked_mse_graph(&g, s_hat, g.constant(count.clone()), g.constant(target.clone()));
        let grads = g.backward(loss);
        (g.scalar(loss), s.grads_of(&p, &grads))
    })
}

fn discriminator_instance() -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let disc = Discriminator::<f64>::new(12, &DiscriminatorConfig { embed: 16, channels: [4, 4, 4, 4] }, &mut rng).unwrap();
    let real = uniform(&mut rng, &[3, 12]);
    let fake = uniform(&mut rng, &[3, 12]);
    grad_check(&disc.store, &|s| {
        let g = Graph::new();
        let p = s.bind(&g, true);
        let dl = discriminator_loss(&g, &disc, &p, g.constant(real.clone()), g.constant(fake.clone()));
        let grads = g.backward(dl.d_loss);
        (g.scalar(dl.d_loss), s.grads_of(&p, &grads))
    })
}

fn td_instance() -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let dcfg = DecoderConfig { dim: 8, heads: 2, layers: 1, ffn_dim: 8 };
    let mcfg = MixerConfig { embed: 4, hyper_hidden: 6 };
    let online = PolicyNet::<f64>::new(1, 2, 2, 3, &dcfg, &mcfg, &mut rng).unwrap();
    let target = PolicyNet::<f64>::new(1, 2, 2, 3, &dcfg, &mcfg, &mut rng).unwrap();
    let steps = 3;
    let batch = TdBatch {
        n_agents: 1,
        n_actions: 2,
        x: (0..=steps).map(|_| uniform(&mut rng, &[2, 1, 2])).collect(),
        cond: (0..=steps).map(|_| uniform(&mut rng, &[2, 3])).collect(),
        avail: vec![vec![true, true, true, false]; steps + 1],
        actions: vec![vec![0, 1], vec![1, 0], vec![1, 0]],
        rewards: Array2::from_shape_fn((2, steps), |(b, t)| (b as f64 - 0.5) * (t as f64 + 1.0) * 0.3),
        terminated: Array2::from_shape_vec((2, steps), vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap(),
        mask: Array2::from_shape_vec((2, steps), vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap(),
    };
    grad_check(&online.store, &|s| {
        let mut net = online.clone();
        net.store = s.clone();
        let g = Graph::new();
        let p = net.store.bind(&g, true);
        let l = td_loss(&g, &p, &net, &target, &batch, 0.9).unwrap();
        let grads = g.backward(l.loss);
        (l.value, net.store.grads_of(&p, &grads))
    })
}

#[test]
fn criterion_03_gradient_oracles() {
    let cases: [(&str, fn() -> GradCheck); 4] = [
        ("weights+mix", weight_mix_instance),
        ("generator+masked mse", generator_instance),
        ("discriminator loss", discriminator_instance),
        ("td loss", td_instance),
    ];
    let mut all = true;
    for (name, case) in cases {
        let c = case();
        let ok = c.global <= 1e-4;
        all &= report(3, &format!("gradient oracle ({name})"), ok, &format!(
            "relative error {:.2e} over {} entries (worst element {:.2e}), tolerance 1e-4",
            c.global, c.checked, c.worst
        ));
    }
    assert!(all);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_mixer_monotonicity() {
    let (n, cond_len) = (4, 36);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut net = PolicyNet::<f64>::new(n, 11, 3, cond_len, &DecoderConfig::default(), &MixerConfig::default(), &mut rng).unwrap();
    // spread the hypernetwork weights well beyond their initial scale
    let names = net.store.names().to_vec();
    for (name, t) in names.iter().zip(net.store.values_mut()) {
        if name.starts_with("mixer.") {
            t.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        }
    }
    let h = 1e-3f32;
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let q: Vec<f32> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let c: Vec<f32> = (0..cond_len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for i in 0..n {
            let (mut up, mut down) = (q.clone(), q.clone());
            up[i] += h;
            down[i] -= h;
            let slope = (net.mix(&up, &c).unwrap() - net.mix(&down, &c).unwrap()) / (up[i] - down[i]) as f64;
            worst = worst.min(slope);
        }
    }
    let ok = worst >= -1e-8;
    assert!(report(4, "mixer monotonicity", ok, &format!("min dQtot/dq_i over 1000 samples x {n} agents = {worst:.3e}, bound -1e-8")));
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_weight_limits_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut mismatches = 0usize;
    for trial in 0..100 {
        let (n, l) = (rng.gen_range(1..6), rng.gen_range(1..12));
        let m = Array2::from_shape_fn((n, l), |_| rng.gen_range(-5.0f32..5.0));
        let eps: Array2<f32> = standard_normal(&mut rng, &[n, l]).into_dimensionality().unwrap();
        let obs = ObservationSet { values: m.clone(), raw_lengths: vec![l; n] };
        let zeros = WeightTensor::zeros(n, l);
        let ones = WeightTensor { values: Array3::ones((n, n, l)) };
        let x0 = receiver_mix(&obs, &zeros, &eps).unwrap();
        let x1 = receiver_mix(&obs, &ones, &eps).unwrap();
        for i in 0..n {
            mismatches += (x0.values.index_axis(Axis(0), i) != m) as usize;
            mismatches += (x1.values.index_axis(Axis(0), i) != eps) as usize;
        }
        // the batched training path as well
        let g = Graph::<f32>::no_grad();
        let mt = g.constant(m.clone().into_shape_with_order((1, n, l)).unwrap().into_dyn());
        let et = g.constant(eps.clone().into_shape_with_order((1, n, l)).unwrap().into_dyn());
        let fill = if trial % 2 == 0 { 0.0 } else { 1.0 };
        let w = g.constant(Tensor::from_elem(vec![1, n, 1, l], fill));
        let x = g.value(receiver_mix_graph(&g, mt, w, et));
        let expect = if fill == 0.0 { &m } else { &eps };
        for i in 0..n {
            for j in 0..n {
                for k in 0..l {
                    mismatches += (x[[0, i, j, k]] != expect[[j, k]]) as usize;
                }
            }
        }
    }
    assert!(report(5, "exact weight limits", mismatches == 0, &format!("{mismatches} inexact entries over 100 random instances")));
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_masked_mse_oracle() {
    let mut env = Hallway::new(HallwayConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let big_l = env.spec().state_len;
    let l = env.spec().obs_len;
    let mut worst = 0.0f64;
    for k in 0..100 {
        let mut r = env.reset(k).unwrap();
        for _ in 0..rng.gen_range(0..6) {
            if r.done {
                break;
            }
            let actions: Vec<usize> = r.avail.iter().map(|a| a.iter().enumerate().filter(|p| *p.1).map(|p| p.0).last().unwrap()).collect();
            let actions: Vec<usize> = actions.iter().map(|&a| rng.gen_range(0..=a)).collect();
            r = env.step(&actions).unwrap();
        }
        let vis = env.visibility(&r.state).unwrap();
        let gen = GlobalState::generated((0..big_l).map(|_| rng.gen_range(-1.0..2.0)).collect());
        // oracle: walk the 0/1 mask row by row, pairing the i-th visible entry
        // with the i-th observation coordinate
        let mut oracle = 0.0f64;
        for i in 0..vis.mask.nrows() {
            let mut k = 0;
            for s in 0..big_l {
                if vis.mask[[i, s]] == 1 {
                    let d = gen.values[s] as f64 - r.obs.values[[i, k]] as f64;
                    oracle += d * d;
                    k += 1;
                }
            }
            assert!(k <= l);
        }
        let direct = masked_mse(&gen, &r.obs, &vis);
        let batch = CompletionBatch::<f64>::from_samples(&[(&r.obs, &r.state, &vis.gather[..])]);
        let g = Graph::<f64>::new();
        let s = g.constant(tensor(&[1, big_l], gen.values.iter().map(|&v| v as f64).collect()));
        let taped = g.scalar(masked_mse_graph(&g, s, g.constant(batch.count), g.constant(batch.target)));
        worst = worst.max((direct - oracle).abs()).max((taped - oracle).abs());
    }
    let ok = worst <= 1e-12;
    assert!(report(6, "masked mse oracle", ok, &format!("max |loss - oracle| = {worst:.2e} over 100 Hallway states, tolerance 1e-12")));
}

// ---------------------------------------------------------------- criterion 7

/// Synthetic completion fixture at default model sizes.
fn gan_fixture(updates: usize, seed: u64) -> train::PretrainReport {
    let mut env = SliceFixture::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset: Vec<EpisodeRecord> = (0..200)
        .map(|_| {
            let s = rng.gen();
            random_episode(&mut env, s, &mut rng).unwrap()
        })
        .collect();
    let cfg = Config::from_toml_str(
        "",
        &[format!("seed={seed}"), format!("train.pretrain_updates={updates}"), "train.pretrain_batch=32".into()],
    )
    .unwrap();
    train::pretrain_on(&env, &cfg, &dataset).unwrap()
}

#[test]
fn criterion_07_gan_fixture() {
    let rep = gan_fixture(5000, 7);
    let mse = rep.heldout_mse.last().unwrap().1;
    let d_fake = rep.heldout_d_fake.unwrap();
    let d_real = rep.last_update.map(|s| s.d_real_mean).unwrap_or(f64::NAN);
    report(7, "gan fixture held-out mse", mse <= 1e-2, &format!("{mse:.4e} after 5000 updates, bound 1e-2"));
    report(7, "gan fixture D(generated)", (0.3..=0.7).contains(&d_fake), &format!(
        "{d_fake:.3} on held-out samples (last batch D(real) {d_real:.3}), band [0.3, 0.7]"
    ));
}

// ---------------------------------------------------------------- criterion 8

fn marked_episode(k: usize) -> EpisodeRecord {
    EpisodeRecord {
        obs: vec![],
        states: vec![],
        gather: vec![],
        avail: vec![],
        actions: vec![],
        rewards: vec![k as f32],
        mean_w: vec![],
        terminated: true,
        success: false,
    }
}

#[test]
fn criterion_08_schedule_and_plumbing() {
    let cfg = Config::default();
    let e = [epsilon_at(0, &cfg.train), epsilon_at(50_000, &cfg.train), epsilon_at(25_000, &cfg.train)];
    // linear interpolation between the endpoints, computed independently
    let mid = 1.0 + (0.05 - 1.0) * 0.5;
    let eps_ok = e[0] == 1.0 && (e[1] - 0.05).abs() < 1e-12 && (e[2] - mid).abs() < 1e-12 && (mid - 0.525).abs() < 1e-12;
    let a = report(8, "epsilon schedule", eps_ok, &format!("eps(0)={} eps(25000)={} eps(50000)={}", e[0], e[2], e[1]));

    let mut buf = ReplayBuffer::new(5000).unwrap();
    for k in 0..5003 {
        buf.push(marked_episode(k));
    }
    let marks: Vec<f32> = buf.iter().map(|ep| ep.rewards[0]).collect();
    let fifo_ok = buf.len() == 5000 && marks[0] == 3.0 && marks[4999] == 5002.0 && marks.windows(2).all(|w| w[1] == w[0] + 1.0);
    let b = report(8, "replay FIFO", fifo_ok, &format!("len {} oldest {} newest {} after 5003 pushes", buf.len(), marks[0], marks[4999]));

    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_hallway(dir.path(), 3, 0);
    let env = cfg.env.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let learner = Learner::new(&cfg, env.spec(), &env.env_hash(), &mut rng).unwrap();
    let ck = learner.to_checkpoint(17);
    let path = dir.path().join("ck.pagn");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let rebuilt = Learner::from_checkpoint(&cfg, env.spec(), &env.env_hash(), &loaded, &mut rng).unwrap();
    let same_params = [
        (learner.weight_net.store.iter().collect::<Vec<_>>(), rebuilt.weight_net.store.iter().collect::<Vec<_>>()),
        (learner.generator.store.iter().collect(), rebuilt.generator.store.iter().collect()),
        (learner.discriminator.store.iter().collect(), rebuilt.discriminator.store.iter().collect()),
        (learner.policy.store.iter().collect(), rebuilt.policy.store.iter().collect()),
    ]
    .iter()
    .all(|(x, y)| {
        x.len() == y.len()
            && x.iter().zip(y).all(|((na, ta), (nb, tb))| na == nb && ta.iter().zip(tb.iter()).all(|(p, q)| p.to_bits() == q.to_bits()))
    });
    let bytes_ok = std::fs::read(&path).unwrap() == rebuilt.to_checkpoint(17).to_bytes();
    let c = report(8, "checkpoint round trip", same_params && bytes_ok, &format!("parameters bit-identical: {same_params}, re-saved bytes identical: {bytes_ok}"));

    let run_once = |seed: u64| -> Vec<EpisodeRecord> {
        let mut env = cfg.env.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let learner = Learner::new(&cfg, env.spec(), &env.env_hash(), &mut rng).unwrap();
        (0..10).map(|k| learner.run_episode(env.as_mut(), 0.5, 100 + k, &mut rng, None).unwrap()).collect()
    };
    let (r1, r2, r3) = (run_once(9), run_once(9), run_once(10));
    let d = report(8, "seeded determinism", r1 == r2 && r1 != r3, &format!(
        "10 episodes twice with seed 9 identical: {}, seed 10 differs: {}",
        r1 == r2,
        r1 != r3
    ));
    assert!(a && b && c && d);
}

// --------------------------------------------------------------- criterion 10

fn header_of(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

#[test]
fn criterion_10_trace_and_curves_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    let mut last = None;
    for seed in [1, 2] {
        let cfg = common::tiny_hallway(&dir.path().join(format!("seed{seed}")), seed, 600);
        let summary = train::train(&cfg).unwrap();
        metrics.push(summary.metrics_path.clone());
        last = Some((cfg, summary));
    }
    let (cfg, summary) = last.unwrap();
    let spec = cfg.env.build().unwrap().spec().clone();

    let out = eval::trace(&cfg, &summary.checkpoint_path, 4, &dir.path().join("trace")).unwrap();
    let trace_header_ok = header_of(&out.files.csv) == TraceDump::header(spec.n_agents, spec.state_len);
    let back = TraceDump::read_csv(&out.files.csv).unwrap();
    let close = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + x.abs()));
    let trace_rt = back.rows.len() == out.dump.rows.len()
        && back.rows.iter().zip(&out.dump.rows).all(|(a, b)| {
            a.t == b.t && (a.mean_w - b.mean_w).abs() < 1e-6 && close(&a.state, &b.state) && close(&a.generated, &b.generated) && close(&a.liveness, &b.liveness)
        });
    let trace_figs = eval::is_svg(&out.files.weights_figure) && eval::is_svg(&out.files.completion_figure);
    let a = report(10, "trace files", trace_header_ok && trace_rt && trace_figs, &format!(
        "{} rows; header matches schema: {trace_header_ok}, reader round trip: {trace_rt}, figures are SVG: {trace_figs}",
        out.dump.rows.len()
    ));

    let metric_names = vec!["test_win_rate".to_string(), "td_loss".to_string()];
    let files = eval::curves(&metrics, &metric_names, &dir.path().join("curves")).unwrap();
    let runs: Vec<_> = metrics.iter().map(|p| eval::read_metrics(p).unwrap()).collect();
    let mut curves_ok = files.csv.len() == 2 && files.figures.iter().all(|f| eval::is_svg(f));
    for (m, path) in metric_names.iter().zip(&files.csv) {
        curves_ok &= header_of(path) == CURVE_HEADER;
        curves_ok &= eval::read_curves_csv(path).unwrap() == eval::aggregate_curves(&runs, m).unwrap();
    }
    let metrics_ok = metrics.iter().all(|p| header_of(p) == train::METRICS_HEADER);
    let b = report(10, "curve files", curves_ok && metrics_ok, &format!(
        "metrics headers match schema: {metrics_ok}, curves headers, reader round trip and SVG figures: {curves_ok}"
    ));
    assert!(a && b);
}

// ------------------------------------------------------- criteria 1, 2 and 9

#[test]
fn criteria_01_02_09_are_opt_in() {
    skip(1, "hallway separation");
    skip(2, "lbf ordering");
    skip(9, "completion fidelity");
}

fn accept_steps() -> u64 {
    std::env::var("PAGNET_ACCEPT_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(2_000_000)
}

fn accept_seeds() -> Vec<u64> {
    std::env::var("PAGNET_ACCEPT_SEEDS")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_else(|| vec![1, 2, 3])
}

fn accept_dir() -> PathBuf {
    std::env::var_os("PAGNET_ACCEPT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

/// Outcome of one protocol run; reused across criteria when already on disk.
#[derive(serde::Serialize, serde::Deserialize)]
struct ProtocolRun {
    env_steps: u64,
    last_win_rate: f64,
    last_test_return: f64,
    checkpoint: PathBuf,
}

/// Held while a protocol run trains, so tests sharing a run never race on it.
static PROTOCOL: Mutex<()> = Mutex::new(());

fn protocol_run(config: &str, mode: Mode, seed: u64) -> (Config, ProtocolRun) {
    let _guard = PROTOCOL.lock().unwrap_or_else(|e| e.into_inner());
    let steps = accept_steps();
    let out = accept_dir().join(format!("{}_{mode}_{steps}_s{seed}", config.trim_end_matches(".toml")));
    let cfg = Config::load(
        Some(&configs_dir().join(config)),
        &[
            format!("seed={seed}"),
            format!("mode=\"{mode}\""),
            format!("train.total_env_steps={steps}"),
            format!("out_dir={}", toml::Value::String(out.display().to_string())),
        ],
    )
    .unwrap();
    let record = out.join("protocol.json");
    if let Ok(text) = std::fs::read_to_string(&record) {
        return (cfg, serde_json::from_str(&text).unwrap());
    }
    let t0 = std::time::Instant::now();
    let s = train::train(&cfg).unwrap();
    eprintln!("{config} {mode} seed {seed}: {} steps in {:.0}s", s.env_steps, t0.elapsed().as_secs_f64());
    let run = ProtocolRun { env_steps: s.env_steps, last_win_rate: s.last_win_rate, last_test_return: s.last_test_return, checkpoint: s.checkpoint_path };
    std::fs::write(&record, serde_json::to_string_pretty(&run).unwrap()).unwrap();
    (cfg, run)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[test]
#[ignore = "long training protocol"]
fn criterion_01_hallway_separation() {
    let seeds = accept_seeds();
    let wins = |mode| seeds.iter().map(|&s| protocol_run("hallway_desk.toml", mode, s).1.last_win_rate).collect::<Vec<_>>();
    let (p, q) = (wins(Mode::Pagnet), wins(Mode::Qmix));
    let (mp, mq) = (median(p.clone()), median(q.clone()));
    report(1, "hallway separation", mp >= 0.8 && mq <= 0.1, &format!(
        "{} steps; pagnet win rates {p:?} (median {mp:.2}, need >= 0.8), qmix {q:?} (median {mq:.2}, need <= 0.1)",
        accept_steps()
    ));
}

#[test]
#[ignore = "long training protocol"]
fn criterion_02_lbf_ordering() {
    let seeds = accept_seeds();
    let (cfg, _) = protocol_run("lbf_desk.toml", Mode::Pagnet, seeds[0]);
    let mut env = cfg.env.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let random: f64 = (0..1000)
        .map(|k| random_episode(env.as_mut(), 10_000 + k, &mut rng).unwrap().episode_return() as f64)
        .sum::<f64>()
        / 1000.0;
    let returns: Vec<f64> = seeds.iter().map(|&s| protocol_run("lbf_desk.toml", Mode::Pagnet, s).1.last_test_return).collect();
    let beating = returns.iter().filter(|&&r| r - random >= 0.3).count();
    let need = (2 * seeds.len()).div_ceil(3);
    report(2, "lbf ordering", beating >= need, &format!(
        "{} steps; pagnet returns {returns:?} vs random {random:.3}; {beating} of {} seeds ahead by >= 0.3 (need {need})",
        accept_steps(),
        seeds.len()
    ));
}

#[test]
#[ignore = "long training protocol"]
fn criterion_09_completion_fidelity() {
    let seeds = accept_seeds();
    let runs: Vec<_> = seeds.iter().map(|&s| protocol_run("hallway_desk.toml", Mode::Pagnet, s)).collect();
    let (cfg, best) = runs.iter().max_by(|a, b| a.1.last_win_rate.partial_cmp(&b.1.last_win_rate).unwrap()).unwrap();
    let EnvConfig { hallway, .. } = cfg.env.clone();
    let decoder = Hallway::new(hallway).unwrap();
    let (mut hit, mut steps) = (0usize, 0usize);
    for k in 0..10 {
        let out = eval::trace(cfg, &best.checkpoint, 500 + k, &accept_dir().join(format!("trace_{k}"))).unwrap();
        for row in &out.dump.rows {
            hit += (decoder.decode_positions(&row.generated) == decoder.decode_positions(&row.state)) as usize;
            steps += 1;
        }
    }
    let frac = hit as f64 / steps.max(1) as f64;
    report(9, "completion fidelity", frac >= 0.8, &format!(
        "all positions recovered on {hit}/{steps} trace steps ({:.1}%) of the best pagnet run (win rate {:.2}), need >= 80%",
        100.0 * frac,
        best.last_win_rate
    ));
}
