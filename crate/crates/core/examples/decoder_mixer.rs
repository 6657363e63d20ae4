// Recurrent decoder Q-values for each receiver, greedy joint action, and the
// monotone mixer's response to raising one agent's Q-value.

use ndarray::Array2;
use pagnet::policy::{greedy_action, DecoderConfig, MixerConfig, PolicyNet};
use pagnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct PolicySummary {
    pub actions: Vec<usize>,
    pub q_tot: f64,
    /// `Q_tot` after adding 1 to agent 0's chosen Q-value.
    pub q_tot_raised: f64,
}

pub fn run_example() -> Result<PolicySummary> {
    let (n, l, actions, state_len) = (3, 6, 4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dcfg = DecoderConfig { dim: 16, heads: 2, layers: 1, ffn_dim: 32 };
    let net = PolicyNet::<f32>::new(n, l, actions, state_len + n, &dcfg, &MixerConfig::default(), &mut rng)?;

    let mut chosen = Vec::new();
    let mut picked = Vec::new();
    for receiver in 0..n {
        let x = Array2::from_shape_fn((n, l), |_| rng.gen_range(-1.0f32..1.0));
        let h = vec![0.0; dcfg.dim];
        let (q, h_next) = net.agent_q(&x, &h, receiver)?;
        let a = greedy_action(&q, &[true; 4])?;
        println!("receiver {receiver}: q = {q:.3?}, greedy {a}, |h| = {:.3}", h_next.iter().map(|v| v * v).sum::<f32>().sqrt());
        chosen.push(q[a]);
        picked.push(a);
    }
    let cond: Vec<f32> = (0..state_len + n).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    let q_tot = net.mix(&chosen, &cond)?;
    let mut raised = chosen.clone();
    raised[0] += 1.0;
    let q_tot_raised = net.mix(&raised, &cond)?;
    println!("Q_tot {q_tot:.4} -> {q_tot_raised:.4} after raising agent 0");
    Ok(PolicySummary { actions: picked, q_tot, q_tot_raised })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
