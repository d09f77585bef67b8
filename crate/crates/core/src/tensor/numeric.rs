//! Central finite differences and the gradient-check harness built on them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::grad::{backward, Op};
use super::{Result, Scalar, Tensor, TensorError};

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_diff_grad<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(TensorError::Domain(format!(
            "step h must be positive, got {}",
            h
        )));
    }
    let mut probe = x.clone();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        grad.push((plus - minus) / two_h);
    }
    Tensor::new(x.shape(), grad)
}

/// Smallest magnitude used as the denominator of an elementwise relative error.
const REL_FLOOR: f64 = 1e-6;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-6)`.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR)
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub ops: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Every differentiable operator in the order reported by [`gradcheck_all`].
pub fn checked_ops() -> Vec<Op<f64>> {
    vec![
        Op::DwConv3,
        Op::PwConv1,
        Op::BatchNorm {
            eps: super::DEFAULT_BN_EPS,
        },
        Op::Relu6,
        Op::MaxPool2,
        Op::SpaceToDepth,
        Op::DepthToSpace,
        Op::Concat,
    ]
}

/// Compares analytic and central-difference gradients for every operator and
/// every input, over `trials` random draws per operator.
///
/// The scalar objective is `<op(inputs), r>` with a random probe `r`, so the
/// analytic side is `backward(op, inputs, r)`.
pub fn gradcheck_all(seed: u64, trials: usize) -> Result<GradCheckReport> {
    let h = GRADCHECK_STEP;
    let mut ops = Vec::new();
    for (op_idx, op) in checked_ops().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ ((op_idx as u64) << 32) ^ (trial as u64).wrapping_mul(0x9E37_79B9),
            );
            let inputs = sample_inputs(&op, &mut rng, h)?;
            let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
            let out = op.forward(&refs)?;
            let probe = Tensor::from_fn(out.shape(), |_| rng.gen_range(-1.0..1.0))?;
            let analytic = backward(&op, &refs, &probe)?;
            for (i, ga) in analytic.iter().enumerate() {
                let objective = |t: &Tensor<f64>| {
                    let mut args = refs.clone();
                    args[i] = t;
                    op.forward(&args)
                        .and_then(|y| y.dot(&probe))
                        .unwrap_or(f64::NAN)
                };
                let gn = finite_diff_grad(objective, &inputs[i], h)?;
                worst = worst.max(max_relative_error(ga, &gn)?);
            }
        }
        ops.push(OpCheck {
            op: op.name().to_string(),
            trials,
            max_rel_error: worst,
            passed: worst <= GRADCHECK_TOL,
        });
    }
    Ok(GradCheckReport {
        seed,
        step: h,
        tolerance: GRADCHECK_TOL,
        ops,
    })
}

/// Random inputs for `op`, kept at least `10h` away from every kink.
fn sample_inputs(op: &Op<f64>, rng: &mut ChaCha8Rng, h: f64) -> Result<Vec<Tensor<f64>>> {
    let c = rng.gen_range(1..=4usize);
    let hh = 2 * rng.gen_range(1..=3usize);
    let ww = 2 * rng.gen_range(1..=3usize);
    fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }
    Ok(match op {
        Op::DwConv3 => vec![
            uniform(rng, &[c, hh, ww], -1.0, 1.0)?,
            uniform(rng, &[c, 3, 3], -1.0, 1.0)?,
        ],
        Op::PwConv1 => {
            let cout = 1 + (hh + ww) % 5;
            vec![
                uniform(rng, &[c, hh, ww], -1.0, 1.0)?,
                uniform(rng, &[cout, c], -1.0, 1.0)?,
            ]
        }
        Op::BatchNorm { .. } => vec![
            uniform(rng, &[c, hh, ww], -2.0, 2.0)?,
            uniform(rng, &[c], -2.0, 2.0)?,
            uniform(rng, &[c], -1.0, 1.0)?,
            uniform(rng, &[c], -0.5, 0.5)?,
            uniform(rng, &[c], 0.5, 1.5)?,
        ],
        Op::Relu6 => {
            let mut x = uniform(rng, &[c, hh, ww], -2.0, 8.0)?;
            for v in x.data_mut() {
                for kink in [0.0, 6.0] {
                    if (*v - kink).abs() < 10.0 * h {
                        *v = kink + 20.0 * h;
                    }
                }
            }
            vec![x]
        }
        Op::MaxPool2 => {
            // distinct values on a 1e-2 lattice plus sub-lattice jitter: every
            // block has a unique maximum with a gap far above 10h
            let n = c * hh * ww;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let jitter = uniform(rng, &[n], 0.0, 1e-3)?;
            let data = order
                .iter()
                .zip(jitter.data())
                .map(|(&o, &j)| o as f64 * 1e-2 + j - 0.5)
                .collect();
            vec![Tensor::new(&[c, hh, ww], data)?]
        }
        Op::SpaceToDepth => vec![uniform(rng, &[c, hh, ww], -1.0, 1.0)?],
        Op::DepthToSpace => vec![uniform(rng, &[4 * c, hh / 2, ww / 2], -1.0, 1.0)?],
        Op::Concat => {
            let cb = 1 + (c + hh) % 3;
            vec![
                uniform(rng, &[c, hh, ww], -1.0, 1.0)?,
                uniform(rng, &[cb, hh, ww], -1.0, 1.0)?,
            ]
        }
    })
}
