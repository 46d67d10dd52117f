//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    concat_tokens, discretize, elementwise, selective_scan, selective_scan_zoh, Elementwise, Tape,
    Var,
};
use crate::data::{generate_synthetic, Sample, SyntheticDatasetSpec};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::StrategyKind;
use crate::model::{Architecture, Classifier};
use crate::params::Bound;
use crate::params::ParamStore;
use crate::ssm::{mamba_block_forward, OutputInit, SsmBlockConfig, SsmBlockParams};
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-12;

/// Which coordinates of each input get probed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `per_tensor` coordinates per input, drawn with `seed`.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

/// Central-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    Central2,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, error O(h⁴).
    Central4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub probes: usize,
}

fn check_h(h: f64) -> Result<()> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {h} outside (0, 1e-2]"
        )));
    }
    Ok(())
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(Error::NotScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Max over coordinates of `|analytic − central difference| / (|analytic| + 1e-12)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let report = finite_diff_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        h,
        Coords::All,
        Stencil::Central2,
    )?;
    Ok(report.max_rel_err)
}

/// Multi-input variant with optional coordinate subsampling.
pub fn finite_diff_check_many<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords: Coords,
    stencil: Stencil,
) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_h(h)?;

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    scalar_of(loss)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |probe: &[Tensor], flat: usize| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        match f(&tape, &vars).and_then(scalar_of) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(Error::NonFinite(_)) => Err(Error::NonFiniteProbe(flat)),
            Err(e) => Err(e),
        }
    };

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        probes: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picked: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_tensor, seed } if per_tensor < n => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9));
                let mut idx = sample(&mut rng, n, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
            Coords::Sample { .. } => (0..n).collect(),
        };
        for i in picked {
            let orig = input.data()[i];
            let mut at = |offset: f64| {
                probe[k].data_mut()[i] = orig + offset;
                let v = eval(&probe, i);
                probe[k].data_mut()[i] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::Central2 => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::Central4 => {
                    let near = at(h)? - at(-h)?;
                    let far = at(2.0 * h)? - at(-2.0 * h)?;
                    (8.0 * near - far) / (12.0 * h)
                }
            };
            let a = analytic[k][i];
            let err = (a - numeric).abs() / (a.abs() + DENOM_FLOOR);
            report.probes += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (k, i);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Worst case of one named check over several seeds.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Step used by the op suites (two-point stencil).
pub const SUITE_STEP: f64 = 1e-5;

/// Step for the block and full-model suites (four-point stencil). Their
/// weakly coupled coordinates have gradients near 1e-8, where a two-point
/// difference is dominated by roundoff at small h and truncation at large h.
pub const COMPOSITE_STEP: f64 = 3e-3;

type Check = fn(u64) -> Result<CheckReport>;
type BoxedCheck = Box<dyn Fn(u64) -> Result<CheckReport>>;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn u2(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// `Σ w ⊙ y` with fixed random `w`, so every output coordinate matters.
fn weighted<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = rng_for(seed ^ 0x77);
    let w = y
        .tape()
        .constant(Tensor::uniform(&y.shape(), -1.0, 1.0, &mut rng));
    y.mul(w)?.sum_all()
}

macro_rules! op_check {
    ($shapes:expr, |$seed:ident, $v:ident| $body:expr) => {
        |$seed: u64| -> Result<CheckReport> {
            let mut rng = rng_for($seed);
            let shapes: &[&[usize]] = &$shapes;
            let inputs: Vec<Tensor> = shapes.iter().map(|s| u2(s, &mut rng)).collect();
            finite_diff_check_many(
                |_tape, $v| weighted($body?, $seed),
                &inputs,
                SUITE_STEP,
                Coords::All,
                Stencil::Central2,
            )
        }
    };
}

fn op_checks() -> Vec<(&'static str, Check)> {
    const M34: &[usize] = &[3, 4];
    const M45: &[usize] = &[4, 5];
    const V4: &[usize] = &[4];
    const S: &[usize] = &[];
    vec![
        ("matmul", op_check!([M34, M45], |seed, v| v[0].matmul(v[1]))),
        ("add", op_check!([M34, M34], |seed, v| v[0].add(v[1]))),
        ("sub", op_check!([M34, M34], |seed, v| v[0].sub(v[1]))),
        ("mul", op_check!([M34, M34], |seed, v| v[0].mul(v[1]))),
        ("mul_scalar", op_check!([S, M34], |seed, v| v[0].mul(v[1]))),
        (
            "add_rows",
            op_check!([M34, V4], |seed, v| v[0].add_rows(v[1])),
        ),
        ("scale", op_check!([M34], |seed, v| v[0].scale(-1.5))),
        ("sigmoid", op_check!([M34], |seed, v| v[0].sigmoid())),
        ("softplus", op_check!([M34], |seed, v| v[0].softplus())),
        ("silu", op_check!([M34], |seed, v| v[0].silu())),
        ("exp", op_check!([M34], |seed, v| v[0].exp())),
        ("neg", op_check!([M34], |seed, v| v[0].neg())),
        (
            "elementwise",
            op_check!([M34, M34], |seed, v| elementwise(
                Elementwise::Mul,
                v[0],
                Some(v[1])
            )
            .and_then(|y| elementwise(Elementwise::Silu, y, None))),
        ),
        (
            "layer_norm",
            op_check!([M34, V4, V4], |seed, v| v[0].layer_norm(v[1], v[2], 1e-5)),
        ),
        (
            "concat_tokens",
            op_check!([M34, &[2, 4]], |seed, v| concat_tokens(v[0], v[1])),
        ),
        (
            "slice_rows",
            op_check!([M34], |seed, v| v[0].slice_rows(1, 3)),
        ),
        ("row", op_check!([M34], |seed, v| v[0].row(2))),
        (
            "reverse_rows",
            op_check!([M34], |seed, v| v[0].reverse_rows()),
        ),
        ("reshape", op_check!([M34], |seed, v| v[0].reshape(&[2, 6]))),
        ("mean_all", op_check!([M34], |seed, v| v[0].mean_all())),
        ("sum_all", op_check!([M34], |seed, v| v[0].sum_all())),
        (
            "causal_conv",
            op_check!([&[6, 3], &[3, 4], &[3]], |seed, v| v[0]
                .causal_conv(v[1], v[2])),
        ),
        (
            "cross_entropy",
            op_check!([V4], |seed, v| v[0].cross_entropy(2)),
        ),
        (
            "discretize",
            op_check!([&[4, 3], &[3, 2], &[4, 2]], |seed, v| discretize(
                v[0], v[1], v[2]
            )
            .and_then(|(a, b)| a.add(b))),
        ),
        (
            "selective_scan",
            op_check!(
                [&[4, 3], &[4, 3, 2], &[4, 3, 2], &[4, 2], &[3]],
                |seed, v| selective_scan(v[0], v[1], v[2], v[3], v[4])
            ),
        ),
        (
            "selective_scan_zoh",
            op_check!(
                [&[4, 3], &[4, 3], &[3, 2], &[4, 2], &[4, 2], &[3]],
                |seed, v| selective_scan_zoh(v[0], v[1], v[2], v[3], v[4], v[5])
            ),
        ),
    ]
}

/// Redraws every parameter from U[−1, 1]. Structured initial values (small
/// Δ, near-zero states) leave many gradients near 1e-11, below what a central
/// difference can resolve; a generic point exercises the same code paths.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::uniform(&shape, -1.0, 1.0, rng))?;
    }
    Ok(())
}

fn block_check(bidirectional: bool) -> impl Fn(u64) -> Result<CheckReport> {
    move |seed| {
        let mut rng = rng_for(seed);
        let cfg = SsmBlockConfig {
            d_model: 4,
            d_state: 3,
            expand: 2,
            d_conv: 3,
            bidirectional,
        };
        let mut store = ParamStore::new();
        let ids = SsmBlockParams::init(&mut store, "b", &cfg, OutputInit::Random, &mut rng)?;
        randomize(&mut store, &mut rng)?;
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
        inputs.push(u2(&[5, 4], &mut rng));
        let coords = Coords::Sample {
            per_tensor: 6,
            seed,
        };
        finite_diff_check_many(
            |_tape, v| {
                let (params, x) = v.split_at(v.len() - 1);
                let p = Bound::from_vars(params.to_vec());
                weighted(mamba_block_forward(x[0], &p, &ids, &cfg)?, seed)
            },
            &inputs,
            COMPOSITE_STEP,
            coords,
            Stencil::Central4,
        )
    }
}

/// Tiny end-to-end configuration for the full-model checks.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        depth: 1,
        dim: 4,
        frames: 2,
        height: 4,
        width: 4,
        // One patch per frame keeps the skeleton rows a few scan steps from
        // the fused CLS row, so their gradients stay well above FD roundoff.
        patch_size: 4,
        num_classes: 3,
        d_state: 2,
        d_conv: 2,
        ..ModelConfig::toy()
    }
}

fn gradcheck_sample(cfg: &ModelConfig, seed: u64) -> Result<Sample> {
    let ds = generate_synthetic(&SyntheticDatasetSpec {
        num_classes: cfg.num_classes,
        samples_per_class: 1,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        keypoint_noise: 0.05,
        seed,
        ..Default::default()
    })?;
    Ok(ds.samples[(seed % cfg.num_classes as u64) as usize].clone())
}

fn model_check(arch: Architecture, strategy: StrategyKind) -> impl Fn(u64) -> Result<CheckReport> {
    move |seed| {
        let cfg = gradcheck_model_config();
        let mut model = Classifier::new(&cfg, arch, strategy, seed)?;
        randomize(&mut model.store, &mut rng_for(seed ^ 0x5a5a))?;
        let sample = gradcheck_sample(&cfg, seed)?;
        let inputs: Vec<Tensor> = model.store.iter().map(|(_, _, t)| t.clone()).collect();
        finite_diff_check_many(
            |tape, v| {
                let p = Bound::from_vars(v.to_vec());
                model.loss(tape, &p, &sample)
            },
            &inputs,
            COMPOSITE_STEP,
            Coords::Sample {
                per_tensor: 4,
                seed,
            },
            Stencil::Central4,
        )
    }
}

/// Every differentiable op, the SSM block in both directions, and full
/// classifier forwards (each fusion strategy plus both unimodal branches),
/// each over all `seeds`.
pub fn run_suites(seeds: &[u64]) -> Result<Vec<SuiteResult>> {
    let mut checks: Vec<(&'static str, BoxedCheck)> = op_checks()
        .into_iter()
        .map(|(n, f)| (n, Box::new(f) as BoxedCheck))
        .collect();
    checks.push(("mamba_block", Box::new(block_check(false))));
    checks.push(("mamba_block_bidirectional", Box::new(block_check(true))));
    for kind in StrategyKind::ALL {
        let name = match kind {
            StrategyKind::Naive => "fused_model_naive",
            StrategyKind::Average => "fused_model_average",
            StrategyKind::Weighted => "fused_model_weighted",
            StrategyKind::Context => "fused_model_context",
        };
        checks.push((name, Box::new(model_check(Architecture::Fused, kind))));
    }
    checks.push((
        "video_branch_model",
        Box::new(model_check(Architecture::Video, StrategyKind::Average)),
    ));
    checks.push((
        "skeleton_branch_model",
        Box::new(model_check(Architecture::Skeleton, StrategyKind::Average)),
    ));

    let mut out = Vec::with_capacity(checks.len());
    for (name, check) in checks {
        let mut res = SuiteResult {
            name,
            seeds: seeds.len(),
            max_rel_err: 0.0,
            probes: 0,
        };
        for &seed in seeds {
            let r = check(seed)?;
            res.max_rel_err = res.max_rel_err.max(r.max_rel_err);
            res.probes += r.probes;
        }
        out.push(res);
    }
    Ok(out)
}
