//! Finite-difference verification of every tape primitive. The oracle only
//! uses forward evaluation, so it is independent of the reverse pass it
//! checks. Kept in the library so integration tests and the acceptance suite
//! share one implementation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AgResult, Tape, Tensor, TensorId};

/// Worst case seen during a sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: usize,
    pub max_rel_err: f64,
    pub worst_case: String,
}

/// Central-difference check of `d out / d x` for a scalar-valued graph built
/// by `build` on top of leaf `x`. Returns the max relative error over all
/// coordinates of `x`.
pub fn gradcheck_scalar<F>(shape: &[usize], x0: &[f64], h: f64, build: F) -> Result<f64, String>
where
    F: Fn(&mut Tape, TensorId) -> AgResult<TensorId>,
{
    let mk = |data: &[f64], rg: bool| -> Result<Tensor, String> {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
            .map(|t| t.requires_grad(rg))
            .map_err(|e| e.to_string())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(mk(x0, true)?);
    let out = build(&mut tape, x).map_err(|e| e.to_string())?;
    if tape.value(out).numel() != 1 {
        return Err("gradcheck output must be scalar".into());
    }
    let mut grads = tape.backward(out).map_err(|e| e.to_string())?;
    let analytic = grads.take(x).ok_or("leaf received no gradient")?;

    let eval = |data: &[f64]| -> Result<f64, String> {
        let mut tape = Tape::new();
        let x = tape.leaf(mk(data, false)?);
        let out = build(&mut tape, x).map_err(|e| e.to_string())?;
        tape.value(out).item().map_err(|e| e.to_string())
    };

    let mut pert = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..pert.len() {
        pert[i] = x0[i] + h;
        let fp = eval(&pert)?;
        pert[i] = x0[i] - h;
        let fm = eval(&pert)?;
        pert[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn rand_data<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values kept away from zero so relu's kink cannot sit within h of a sample.
fn rand_data_off_zero<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Reduces `y` to a scalar through a fixed random linear functional so the
/// checked op sees a non-uniform incoming adjoint.
fn project(tape: &mut Tape, y: TensorId, weights: &Tensor) -> AgResult<TensorId> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

struct Case {
    name: &'static str,
    shape: Vec<usize>,
    x0: Vec<f64>,
    build: Box<dyn Fn(&mut Tape, TensorId) -> AgResult<TensorId>>,
}

fn unary_case<R: Rng>(
    name: &'static str,
    rng: &mut R,
    data_fn: fn(usize, &mut ChaCha8Rng) -> Vec<f64>,
    op: fn(&mut Tape, TensorId) -> AgResult<TensorId>,
) -> Case {
    let n = rng.random_range(1..=8usize);
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let x0 = data_fn(n, &mut sub);
    let w = Tensor::randn(&[n], 1.0, &mut sub);
    Case {
        name,
        shape: vec![n],
        x0,
        build: Box::new(move |tape, x| {
            let y = op(tape, x)?;
            project(tape, y, &w)
        }),
    }
}

fn binary_cases<R: Rng>(name: &'static str, rng: &mut R, which: u8) -> Case {
    // which: 0 equal shapes checking lhs, 1 checking rhs, 2 scalar lhs, 3 scalar rhs
    let n = rng.random_range(2..=6usize);
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let other_shape: Vec<usize> = if which == 3 { vec![] } else { vec![n] };
    let other = Tensor::randn(&other_shape, 1.0, &mut sub);
    let shape: Vec<usize> = if which == 2 { vec![] } else { vec![n] };
    let x0 = rand_data(if which == 2 { 1 } else { n }, -1.5, 1.5, &mut sub);
    let w = Tensor::randn(&[n], 1.0, &mut sub);
    let opname = name;
    Case {
        name,
        shape,
        x0,
        build: Box::new(move |tape, x| {
            let o = tape.constant(other.clone());
            let y = match (opname, which) {
                ("add", 1) => tape.add(o, x)?,
                ("add", _) => tape.add(x, o)?,
                ("sub", 1) => tape.sub(o, x)?,
                ("sub", _) => tape.sub(x, o)?,
                ("mul", 1) => tape.mul(o, x)?,
                (_, _) => tape.mul(x, o)?,
            };
            project(tape, y, &w)
        }),
    }
}

fn matmul_case<R: Rng>(rng: &mut R, check_rhs: bool) -> Case {
    let (m, k, n) = (
        rng.random_range(1..=4usize),
        rng.random_range(1..=4usize),
        rng.random_range(1..=4usize),
    );
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let other_shape = if check_rhs { vec![m, k] } else { vec![k, n] };
    let other = Tensor::randn(&other_shape, 1.0, &mut sub);
    let shape = if check_rhs { vec![k, n] } else { vec![m, k] };
    let x0 = rand_data(shape.iter().product(), -1.5, 1.5, &mut sub);
    let w = Tensor::randn(&[m, n], 1.0, &mut sub);
    Case {
        name: if check_rhs { "matmul_rhs" } else { "matmul_lhs" },
        shape,
        x0,
        build: Box::new(move |tape, x| {
            let o = tape.constant(other.clone());
            let y = if check_rhs { tape.matmul(o, x)? } else { tape.matmul(x, o)? };
            project(tape, y, &w)
        }),
    }
}

fn conv_case<R: Rng>(rng: &mut R, check_kernel: bool) -> Case {
    let batched = rng.random_bool(0.5);
    let b = if batched { rng.random_range(1..=2usize) } else { 1 };
    let c = rng.random_range(1..=3usize);
    let f = rng.random_range(1..=3usize);
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let pad = rng.random_range(0..=1usize);
    let h = rng.random_range(k.max(2)..=5usize);
    let w = rng.random_range(k.max(2)..=5usize);
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let img_shape = if batched { vec![b, c, h, w] } else { vec![c, h, w] };
    let ker_shape = vec![f, c, k, k];
    let out_shape = if batched { vec![b, f, ho, wo] } else { vec![f, ho, wo] };
    let other = Tensor::randn(if check_kernel { &img_shape } else { &ker_shape }, 1.0, &mut sub);
    let shape = if check_kernel { ker_shape } else { img_shape };
    let x0 = rand_data(shape.iter().product(), -1.5, 1.5, &mut sub);
    let wts = Tensor::randn(&out_shape, 1.0, &mut sub);
    Case {
        name: if check_kernel { "conv2d_kernel" } else { "conv2d_input" },
        shape,
        x0,
        build: Box::new(move |tape, x| {
            let o = tape.constant(other.clone());
            let y = if check_kernel {
                tape.conv2d(o, x, pad)?
            } else {
                tape.conv2d(x, o, pad)?
            };
            project(tape, y, &wts)
        }),
    }
}

fn pool_case<R: Rng>(rng: &mut R, global: bool) -> Case {
    let batched = rng.random_bool(0.5);
    let b = rng.random_range(1..=2usize);
    let c = rng.random_range(1..=3usize);
    let h = 2 * rng.random_range(1..=3usize);
    let w = 2 * rng.random_range(1..=3usize);
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let shape = if batched { vec![b, c, h, w] } else { vec![c, h, w] };
    let out_shape: Vec<usize> = if global {
        shape[..shape.len() - 2].to_vec()
    } else {
        let mut s = shape.clone();
        let d = s.len();
        s[d - 2] = h / 2;
        s[d - 1] = w / 2;
        s
    };
    let x0 = rand_data(shape.iter().product(), -1.5, 1.5, &mut sub);
    let wts = Tensor::randn(&out_shape, 1.0, &mut sub);
    Case {
        name: if global { "global_mean_pool" } else { "mean_pool2" },
        shape,
        x0,
        build: Box::new(move |tape, x| {
            let y = if global { tape.global_mean_pool(x)? } else { tape.mean_pool2(x)? };
            project(tape, y, &wts)
        }),
    }
}

fn reduction_case<R: Rng>(name: &'static str, rng: &mut R) -> Case {
    let n = rng.random_range(1..=8usize);
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let x0 = rand_data(n, -1.5, 1.5, &mut sub);
    Case {
        name,
        shape: vec![n],
        x0,
        build: Box::new(move |tape, x| {
            let y = if name == "mean" { tape.mean(x)? } else { tape.sum(x)? };
            tape.scale(y, 1.7)
        }),
    }
}

fn reshape_case<R: Rng>(rng: &mut R) -> Case {
    let (a, b) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let x0 = rand_data(a * b, -1.5, 1.5, &mut sub);
    let w = Tensor::randn(&[b, a], 1.0, &mut sub);
    Case {
        name: "reshape",
        shape: vec![a, b],
        x0,
        build: Box::new(move |tape, x| {
            let y = tape.reshape(x, &[b, a])?;
            project(tape, y, &w)
        }),
    }
}

fn sce_case<R: Rng>(rng: &mut R) -> Case {
    let bsz = rng.random_range(1..=4usize);
    let k = rng.random_range(2..=5usize);
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let labels: Vec<usize> = (0..bsz).map(|_| sub.random_range(0..k)).collect();
    let x0 = rand_data(bsz * k, -2.0, 2.0, &mut sub);
    Case {
        name: "softmax_cross_entropy",
        shape: vec![bsz, k],
        x0,
        build: Box::new(move |tape, x| {
            let y = tape.softmax_cross_entropy(x, &labels)?;
            tape.scale(y, 1.3)
        }),
    }
}

fn mse_case<R: Rng>(rng: &mut R, check_target: bool) -> Case {
    let n = rng.random_range(1..=8usize);
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
    let other = Tensor::randn(&[n], 1.0, &mut sub);
    let x0 = rand_data(n, -1.5, 1.5, &mut sub);
    Case {
        name: if check_target { "mse_target" } else { "mse_pred" },
        shape: vec![n],
        x0,
        build: Box::new(move |tape, x| {
            let o = tape.constant(other.clone());
            let y = if check_target { tape.mse(o, x)? } else { tape.mse(x, o)? };
            tape.scale(y, 0.9)
        }),
    }
}

fn draw_case(kind: usize, rng: &mut ChaCha8Rng) -> Case {
    let which: u8 = rng.random_range(0..4);
    let coin: bool = rng.random_bool(0.5);
    match kind {
        0 => binary_cases("add", rng, which),
        1 => binary_cases("sub", rng, which),
        2 => binary_cases("mul", rng, which),
        3 => matmul_case(rng, false),
        4 => matmul_case(rng, true),
        5 => conv_case(rng, false),
        6 => conv_case(rng, true),
        7 => pool_case(rng, false),
        8 => pool_case(rng, true),
        9 => unary_case("relu", rng, |n, r| rand_data_off_zero(n, r), |t, x| t.relu(x)),
        10 => unary_case("sigmoid", rng, |n, r| rand_data(n, -2.0, 2.0, r), |t, x| t.sigmoid(x)),
        11 => unary_case("tanh", rng, |n, r| rand_data(n, -2.0, 2.0, r), |t, x| t.tanh(x)),
        12 => unary_case("exp", rng, |n, r| rand_data(n, -2.0, 2.0, r), |t, x| t.exp(x)),
        13 => unary_case("log", rng, |n, r| rand_data(n, 0.3, 3.0, r), |t, x| t.log(x)),
        14 => reduction_case("mean", rng),
        15 => reduction_case("sum", rng),
        16 => reshape_case(rng),
        17 => sce_case(rng),
        _ => mse_case(rng, coin),
    }
}

pub const PRIMITIVE_KINDS: usize = 19;

/// Sweeps `cases_per_op` random shape/value cases for every primitive and
/// fails if any coordinate's relative error exceeds `tol` at step `h`.
pub fn check_all_primitives(seed: u64, cases_per_op: usize, h: f64, tol: f64) -> Result<GradCheckReport, String> {
    let mut report = GradCheckReport { cases: 0, max_rel_err: 0.0, worst_case: String::new() };
    for kind in 0..PRIMITIVE_KINDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64) << 32);
        for case_idx in 0..cases_per_op {
            let case = draw_case(kind, &mut rng);
            let err = gradcheck_scalar(&case.shape, &case.x0, h, &case.build)
                .map_err(|e| format!("{} case {case_idx}: {e}", case.name))?;
            report.cases += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_case = format!("{} case {case_idx}", case.name);
            }
            if err > tol {
                return Err(format!(
                    "{} case {case_idx}: relative error {err:.3e} exceeds {tol:.1e}",
                    case.name
                ));
            }
        }
    }
    Ok(report)
}
