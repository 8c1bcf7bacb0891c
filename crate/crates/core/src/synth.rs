//! Desk-scale synthetic traffic on a ring road with cross-town chords.
//!
//! Generative process, with `t` in 5-minute steps:
//!
//! * road graph: ring edges `i <-> i+1` with lengths `U[400, 900]` and, for
//!   `n >= 4`, chords `i <-> i + n/2` with lengths `U[1500, 2500]`. Both
//!   directions are listed. The default kernel bandwidth keeps the ring and
//!   prunes the chords, so chord coupling is only visible to attention.
//! * base speed `b_v(t) = 60 + o_v + 5 sin(2 pi t / 288 + phi_v)` with
//!   `o_v ~ U[-5, 5]`, `phi_v ~ U[0, 2 pi)`.
//! * source pulses `p_v(t)`: at every step a pulse starts with probability
//!   `pulse_prob`; each is a raised cosine of `pulse_len` steps and amplitude
//!   `U[8, 15]`. Overlapping pulses add.
//! * congestion `c_v(t) = p_v(t) + decay * sum_{u ~ v} p_u(t - 1)`.
//! * speed `x_v(t) = b_v(t) - c_v(t) + noise_std * N(0, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::data::SpeedSeries;
use crate::error::{Error, Result};
use crate::graph::Distance;

pub const STEPS_PER_DAY: usize = 288;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub noise_std: f64,
    pub pulse_prob: f64,
    pub pulse_len: usize,
    pub decay: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            noise_std: 0.5,
            pulse_prob: 0.01,
            pulse_len: 24,
            decay: 0.6,
        }
    }
}

/// Generated data plus the latent pieces it was assembled from.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub series: SpeedSeries,
    pub distances: Vec<Distance>,
    /// `[L, N]` base speeds.
    pub base: Tensor,
    /// `[L, N]` source pulses `p_v(t)`.
    pub pulses: Tensor,
    /// Road-graph neighbours of every node, ascending.
    pub neighbours: Vec<Vec<usize>>,
}

fn road_edges(n: usize) -> Vec<(usize, usize, bool)> {
    let mut edges = Vec::new();
    if n == 2 {
        edges.push((0, 1, false));
        return edges;
    }
    for i in 0..n {
        edges.push((i, (i + 1) % n, false));
    }
    if n >= 4 {
        for i in 0..n / 2 {
            edges.push((i, i + n / 2, true));
        }
    }
    edges
}

fn pulse_shape(k: usize, len: usize) -> f64 {
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * (k + 1) as f64 / (len + 1) as f64).cos())
}

/// Default synthetic dataset: `length` steps on `n_nodes` sensors.
pub fn synth_generate(
    n_nodes: usize,
    length: usize,
    seed: u64,
) -> Result<(SpeedSeries, Vec<Distance>)> {
    let data = synth_generate_with(n_nodes, length, seed, &SynthOptions::default())?;
    Ok((data.series, data.distances))
}

pub fn synth_generate_with(
    n_nodes: usize,
    length: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<SynthData> {
    let n = n_nodes;
    if n < 2 {
        return Err(Error::Value(format!("synthetic graph needs at least 2 nodes, got {n}")));
    }
    if !(0.0..=1.0).contains(&opts.pulse_prob) || opts.pulse_len == 0 || opts.noise_std < 0.0 {
        return Err(Error::Value(format!("invalid synthetic options {opts:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut distances = Vec::new();
    let mut neighbours = vec![Vec::new(); n];
    for (i, j, chord) in road_edges(n) {
        let d = if chord {
            rng.random_range(1500.0..2500.0)
        } else {
            rng.random_range(400.0..900.0)
        };
        distances.push((i, j, d));
        distances.push((j, i, d));
        neighbours[i].push(j);
        neighbours[j].push(i);
    }
    for nb in &mut neighbours {
        nb.sort_unstable();
    }

    let offsets: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let phases: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI))
        .collect();

    let mut base = Tensor::zeros(&[length, n]);
    for t in 0..length {
        for v in 0..n {
            let angle = 2.0 * std::f64::consts::PI * t as f64 / STEPS_PER_DAY as f64 + phases[v];
            base.set(&[t, v], 60.0 + offsets[v] + 5.0 * angle.sin());
        }
    }

    let mut pulses = Tensor::zeros(&[length, n]);
    for t in 0..length {
        for v in 0..n {
            if rng.random_bool(opts.pulse_prob) {
                let amp = rng.random_range(8.0..15.0);
                for k in 0..opts.pulse_len.min(length - t) {
                    let cur = pulses.get(&[t + k, v]);
                    pulses.set(&[t + k, v], cur + amp * pulse_shape(k, opts.pulse_len));
                }
            }
        }
    }

    let mut values = Tensor::zeros(&[length, n]);
    for t in 0..length {
        for v in 0..n {
            let mut congestion = pulses.get(&[t, v]);
            if t > 0 {
                let spill: f64 = neighbours[v].iter().map(|&u| pulses.get(&[t - 1, u])).sum();
                congestion += opts.decay * spill;
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            values.set(&[t, v], base.get(&[t, v]) - congestion + opts.noise_std * noise);
        }
    }

    Ok(SynthData {
        series: SpeedSeries::from_values(values)?,
        distances,
        base,
        pulses,
        neighbours,
    })
}
