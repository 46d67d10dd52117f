mod common;

use common::{discretize_oracle, max_abs_diff, scan_oracle, uniform_vec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmamba_core::autodiff::{selective_scan, selective_scan_zoh, Tape};
use xmamba_core::fusion::compute_context_alpha;
use xmamba_core::params::{ParamId, ParamStore};
use xmamba_core::ssm::{mamba_block_forward, OutputInit, SsmBlockConfig, SsmBlockParams};
use xmamba_core::Tensor;

#[derive(Clone)]
struct ScanInputs {
    len: usize,
    ch: usize,
    n: usize,
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl ScanInputs {
    fn random(len: usize, ch: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            len,
            ch,
            n,
            u: uniform_vec(len * ch, -2.0, 2.0, rng),
            delta: uniform_vec(len * ch, 1e-3, 1.0, rng),
            a: uniform_vec(ch * n, -3.0, -0.05, rng),
            b: uniform_vec(len * n, -2.0, 2.0, rng),
            c: uniform_vec(len * n, -2.0, 2.0, rng),
            d: uniform_vec(ch, -1.0, 1.0, rng),
        }
    }

    fn bars(&self) -> (Vec<f64>, Vec<f64>) {
        discretize_oracle(&self.delta, &self.a, &self.b, self.len, self.ch, self.n)
    }

    fn oracle(&self) -> Vec<f64> {
        let (ab, bb) = self.bars();
        scan_oracle(
            &self.u, &ab, &bb, &self.c, &self.d, self.len, self.ch, self.n,
        )
    }

    fn scan(&self) -> Vec<f64> {
        let (ab, bb) = self.bars();
        let (l, c, n) = (self.len, self.ch, self.n);
        let tape = Tape::new();
        let t = |shape: &[usize], v: &[f64]| tape.constant(Tensor::new(shape, v.to_vec()).unwrap());
        selective_scan(
            t(&[l, c], &self.u),
            t(&[l, c, n], &ab),
            t(&[l, c, n], &bb),
            t(&[l, n], &self.c),
            t(&[c], &self.d),
        )
        .unwrap()
        .value()
        .data()
        .to_vec()
    }

    fn fused(&self) -> Vec<f64> {
        let (l, c, n) = (self.len, self.ch, self.n);
        let tape = Tape::new();
        let t = |shape: &[usize], v: &[f64]| tape.constant(Tensor::new(shape, v.to_vec()).unwrap());
        selective_scan_zoh(
            t(&[l, c], &self.u),
            t(&[l, c], &self.delta),
            t(&[c, n], &self.a),
            t(&[l, n], &self.b),
            t(&[l, n], &self.c),
            t(&[c], &self.d),
        )
        .unwrap()
        .value()
        .data()
        .to_vec()
    }
}

#[test]
fn scan_matches_quadratic_oracle_up_to_length_32() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for len in 1..=32 {
        for _ in 0..20 {
            let s = ScanInputs::random(len, 3, 4, &mut rng);
            let oracle = s.oracle();
            worst = worst.max(max_abs_diff(&s.scan(), &oracle));
            worst = worst.max(max_abs_diff(&s.fused(), &oracle));
        }
    }
    assert!(worst < 1e-10, "max abs diff {worst:e}");
}

#[test]
fn scan_is_linear_in_u() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let s1 = ScanInputs::random(12, 3, 5, &mut rng);
        let mut s2 = ScanInputs::random(12, 3, 5, &mut rng);
        s2.delta = s1.delta.clone();
        s2.a = s1.a.clone();
        s2.b = s1.b.clone();
        s2.c = s1.c.clone();
        s2.d = s1.d.clone();
        let mut sum = ScanInputs::random(12, 3, 5, &mut rng);
        sum.delta = s1.delta.clone();
        sum.a = s1.a.clone();
        sum.b = s1.b.clone();
        sum.c = s1.c.clone();
        sum.d = s1.d.clone();
        sum.u = s1.u.iter().zip(&s2.u).map(|(x, y)| x + y).collect();
        let added: Vec<f64> = s1
            .scan()
            .iter()
            .zip(s2.scan())
            .map(|(x, y)| x + y)
            .collect();
        assert!(max_abs_diff(&sum.scan(), &added) < 1e-12);
    }
}

#[test]
fn scan_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = ScanInputs::random(10, 2, 3, &mut rng);
    let base = s.fused();
    for t in 0..10 {
        let mut p = s.clone();
        p.u[t * 2] += 1.0;
        let y = p.fused();
        assert_eq!(&y[..t * 2], &base[..t * 2], "step {t}");
        assert_ne!(y[t * 2], base[t * 2]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_shapes_match_oracle(len in 1usize..20, ch in 1usize..5, n in 1usize..6, seed in any::<u64>()) {
        let s = ScanInputs::random(len, ch, n, &mut ChaCha8Rng::seed_from_u64(seed));
        let oracle = s.oracle();
        prop_assert!(max_abs_diff(&s.scan(), &oracle) < 1e-10);
        prop_assert!(max_abs_diff(&s.fused(), &oracle) < 1e-10);
    }
}

// ---- independent plain-loop block -------------------------------------------------

fn get(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn reverse(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .rev()
        .flat_map(|r| x[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

fn block_oracle(
    x: &[f64],
    len: usize,
    store: &ParamStore,
    p: &SsmBlockParams,
    cfg: &SsmBlockConfig,
) -> Vec<f64> {
    let (c, e, n, k, r) = (
        cfg.d_model,
        cfg.d_inner(),
        cfg.d_state,
        cfg.d_conv,
        cfg.dt_rank(),
    );
    let (gamma, beta) = (get(store, p.norm_gamma), get(store, p.norm_beta));
    let mut xn = vec![0.0; len * c];
    for t in 0..len {
        let row = &x[t * c..(t + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            xn[t * c + j] = (row[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j];
        }
    }
    let inner: Vec<f64> = mm(&xn, &get(store, p.in_proj), len, c, e)
        .into_iter()
        .map(silu)
        .collect();
    let gate: Vec<f64> = mm(&xn, &get(store, p.gate_proj), len, c, e)
        .into_iter()
        .map(silu)
        .collect();
    let a: Vec<f64> = get(store, p.a_log).iter().map(|v| -v.exp()).collect();
    let (w, cb) = (get(store, p.conv_w), get(store, p.conv_b));
    let path = |v: &[f64]| {
        let mut u = vec![0.0; len * e];
        for t in 0..len {
            for ch in 0..e {
                let mut s = cb[ch];
                for j in 0..k {
                    if let Some(src) = (t + j + 1).checked_sub(k) {
                        s += w[ch * k + j] * v[src * e + ch];
                    }
                }
                u[t * e + ch] = s;
            }
        }
        let low = mm(&u, &get(store, p.dt_down), len, e, r);
        let bias = get(store, p.dt_bias);
        let delta: Vec<f64> = mm(&low, &get(store, p.dt_up), len, r, e)
            .iter()
            .enumerate()
            .map(|(i, v)| softplus(v + bias[i % e]))
            .collect();
        let bm = mm(&u, &get(store, p.b_proj), len, e, n);
        let cm = mm(&u, &get(store, p.c_proj), len, e, n);
        let (ab, bb) = discretize_oracle(&delta, &a, &bm, len, e, n);
        scan_oracle(&u, &ab, &bb, &cm, &get(store, p.d_skip), len, e, n)
    };
    let mut y = path(&inner);
    if cfg.bidirectional {
        let back = reverse(&path(&reverse(&inner, len, e)), len, e);
        y = y.iter().zip(&back).map(|(f, b)| (f + b) * 0.5).collect();
    }
    let gated: Vec<f64> = y.iter().zip(&gate).map(|(a, b)| a * b).collect();
    let out = mm(&gated, &get(store, p.out_proj), len, e, c);
    x.iter().zip(&out).map(|(a, b)| a + b).collect()
}

fn random_block(cfg: &SsmBlockConfig, seed: u64) -> (ParamStore, SsmBlockParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = SsmBlockParams::init(&mut store, "blk", cfg, OutputInit::Random, &mut rng).unwrap();
    // Move the biases and skip gains off their structured initial values.
    for id in [ids.norm_beta, ids.conv_b, ids.d_skip] {
        let shape = store.get(id).shape().to_vec();
        store
            .set(id, Tensor::uniform(&shape, -0.5, 0.5, &mut rng))
            .unwrap();
    }
    (store, ids)
}

#[test]
fn block_matches_plain_loop_oracle() {
    for bidirectional in [false, true] {
        for seed in 0..5 {
            let cfg = SsmBlockConfig {
                d_model: 6,
                d_state: 4,
                expand: 2,
                d_conv: 3,
                bidirectional,
            };
            let (store, ids) = random_block(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let len = 9;
            let x = uniform_vec(len * 6, -2.0, 2.0, &mut rng);
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            let xv = tape.constant(Tensor::new(&[len, 6], x.clone()).unwrap());
            let got = mamba_block_forward(xv, &p, &ids, &cfg).unwrap().value();
            let want = block_oracle(&x, len, &store, &ids, &cfg);
            let diff = max_abs_diff(got.data(), &want);
            assert!(
                diff < 1e-10,
                "bidirectional={bidirectional} seed={seed}: {diff:e}"
            );
        }
    }
}

#[test]
fn unidirectional_block_is_causal() {
    let cfg = SsmBlockConfig {
        d_model: 4,
        d_state: 3,
        expand: 2,
        d_conv: 2,
        bidirectional: false,
    };
    let (store, ids) = random_block(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform_vec(7 * 4, -1.0, 1.0, &mut rng);
    let run = |x: &[f64]| {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let xv = tape.constant(Tensor::new(&[7, 4], x.to_vec()).unwrap());
        mamba_block_forward(xv, &p, &ids, &cfg)
            .unwrap()
            .value()
            .data()
            .to_vec()
    };
    let base = run(&x);
    for t in 0..7 {
        let mut y = x.clone();
        y[t * 4 + 1] += 0.5;
        assert_eq!(&run(&y)[..t * 4], &base[..t * 4]);
    }
}

#[test]
fn context_alpha_matches_oracle() {
    for seed in 0..5 {
        let cfg = SsmBlockConfig {
            d_model: 5,
            d_state: 3,
            expand: 2,
            d_conv: 4,
            bidirectional: true,
        };
        let (store, ids) = random_block(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let (lv, ls) = (7, 3);
        let tv = uniform_vec(lv * 5, -1.0, 1.0, &mut rng);
        let ts = uniform_vec(ls * 5, -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let alpha = compute_context_alpha(
            tape.constant(Tensor::new(&[lv, 5], tv.clone()).unwrap()),
            tape.constant(Tensor::new(&[ls, 5], ts.clone()).unwrap()),
            &ids,
            &cfg,
            &p,
        )
        .unwrap()
        .item();
        let joined: Vec<f64> = tv.iter().chain(&ts).copied().collect();
        let out = block_oracle(&joined, lv + ls, &store, &ids, &cfg);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let want = 1.0 / (1.0 + (-mean).exp());
        assert!(
            (alpha - want).abs() < 1e-10,
            "seed {seed}: {alpha} vs {want}"
        );
        assert!(alpha > 0.0 && alpha < 1.0);
    }
}
