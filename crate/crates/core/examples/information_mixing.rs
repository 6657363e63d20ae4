// Per-feature information weights on one Hallway observation, and the noise
// mix each receiver sees.

use ndarray::Array2;
use pagnet::comm::{receiver_mix, standard_normal, WeightNet, WeightNetConfig, WeightTensor};
use pagnet::env::EnvConfig;
use pagnet::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct MixingSummary {
    pub mean_weight: f32,
    /// Max |x - M| when every weight is 0.
    pub zero_weight_gap: f32,
    /// Max |x - eps| when every weight is 1.
    pub unit_weight_gap: f32,
}

pub fn run_example() -> Result<MixingSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut env = EnvConfig::default().build()?;
    let first = env.reset(11)?;
    let spec = env.spec().clone();
    let net = WeightNet::<f32>::new(spec.n_agents, spec.obs_len, &WeightNetConfig::default(), &mut rng)?;
    let (w, attn) = net.compute_weights::<ChaCha8Rng>(&first.obs, None)?;
    println!("attention over senders:\n{attn:.3}");
    println!("receiver mean weights: {:?}", w.receiver_means());

    let eps: Array2<f32> = standard_normal(&mut rng, &[spec.n_agents, spec.obs_len])
        .into_dimensionality()
        .expect("2d noise");
    let mixed = receiver_mix(&first.obs, &w, &eps)?;
    println!("receiver 0 view of sender 1: {:.3}", mixed.values.slice(ndarray::s![0, 1, ..]));

    let gap = |w: &WeightTensor, reference: &Array2<f32>| -> Result<f32> {
        let m = receiver_mix(&first.obs, w, &eps)?;
        let mut worst = 0.0f32;
        for view in m.values.outer_iter() {
            for (a, b) in view.iter().zip(reference.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    };
    let zeros = WeightTensor::zeros(spec.n_agents, spec.obs_len);
    let ones = WeightTensor { values: zeros.values.mapv(|_| 1.0) };
    let summary = MixingSummary {
        mean_weight: w.mean(),
        zero_weight_gap: gap(&zeros, &first.obs.values)?,
        unit_weight_gap: gap(&ones, &eps)?,
    };
    println!("W=0 gap {} / W=1 gap {}", summary.zero_weight_gap, summary.unit_weight_gap);
    Ok(summary)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
