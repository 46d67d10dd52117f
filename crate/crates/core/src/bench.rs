//! Wall-clock timing of the selective scan across sequence lengths.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanTiming {
    pub length: usize,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub median_ns: f64,
    pub trials: usize,
}

struct ScanInputs {
    len: usize,
    u: Tensor,
    delta: Tensor,
    b: Tensor,
    c: Tensor,
}

/// Times one forward scan (discretization fused, no stored states) per trial
/// for every length, with `channels` channels and `d_state` states.
///
/// Trials are interleaved across lengths so slow drift of the host (frequency
/// scaling, neighbours) affects every length alike.
pub fn scan_bench(
    lengths: &[usize],
    channels: usize,
    d_state: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<ScanTiming>> {
    if trials == 0 || channels == 0 || d_state == 0 {
        return Err(Error::InvalidConfig(
            "trials, d_model and d_state must be >= 1".into(),
        ));
    }
    if lengths.contains(&0) {
        return Err(Error::InvalidConfig("lengths must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::uniform(&[channels, d_state], -2.0, -0.1, &mut rng);
    let d = Tensor::uniform(&[channels], -1.0, 1.0, &mut rng);
    let inputs: Vec<ScanInputs> = lengths
        .iter()
        .map(|&len| ScanInputs {
            len,
            u: Tensor::uniform(&[len, channels], -1.0, 1.0, &mut rng),
            delta: Tensor::uniform(&[len, channels], 1e-3, 0.1, &mut rng),
            b: Tensor::uniform(&[len, d_state], -1.0, 1.0, &mut rng),
            c: Tensor::uniform(&[len, d_state], -1.0, 1.0, &mut rng),
        })
        .collect();
    let run = |x: &ScanInputs| {
        kernels::zoh_scan_forward(
            black_box(x.u.data()),
            black_box(x.delta.data()),
            a.data(),
            black_box(x.b.data()),
            x.c.data(),
            d.data(),
            x.len,
            channels,
            d_state,
            None,
        )
    };
    for x in &inputs {
        black_box(run(x));
    }
    let mut samples = vec![Vec::with_capacity(trials); inputs.len()];
    for _ in 0..trials {
        for (x, s) in inputs.iter().zip(&mut samples) {
            let start = Instant::now();
            black_box(run(x));
            s.push(start.elapsed().as_nanos() as f64);
        }
    }
    Ok(inputs
        .iter()
        .zip(samples)
        .map(|(x, mut samples)| {
            let mean = samples.iter().sum::<f64>() / trials as f64;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / trials as f64;
            samples.sort_by(f64::total_cmp);
            let median = if trials % 2 == 1 {
                samples[trials / 2]
            } else {
                0.5 * (samples[trials / 2 - 1] + samples[trials / 2])
            };
            ScanTiming {
                length: x.len,
                mean_ns: mean,
                stddev_ns: var.sqrt(),
                median_ns: median,
                trials,
            }
        })
        .collect())
}

/// `length,mean_ns,stddev_ns`
pub fn timings_csv(rows: &[ScanTiming]) -> String {
    let mut s = String::from("length,mean_ns,stddev_ns\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.0},{:.0}", r.length, r.mean_ns, r.stddev_ns);
    }
    s
}
