//! Central finite-difference checking of recorded gradients.
//!
//! The checker is the independent oracle for every differentiable
//! primitive: it never consults the tape's backward pass, only repeated
//! forward evaluations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use super::{ResampleSpec, Tape, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

/// Step used by every finite-difference comparison in the crate.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error budget for gradient checks in 64-bit arithmetic.
pub const FD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Second differences blew up: the function is not differentiable here
    /// (a ReLU kink, pooling tie, ...). Excluded from the error maximum.
    pub kink: bool,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare `analytic` against central differences of `f` at `point`, one
/// entry per requested coordinate. `f` must be pure and deterministic.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<FdReport> {
    assert_eq!(point.len(), analytic.len());
    let f0 = f(point)?;
    let mut report = FdReport::default();
    let mut x = point.to_vec();
    for &i in coords {
        x[i] = point[i] + step;
        let fp = f(&x)?;
        x[i] = point[i] - step;
        let fm = f(&x)?;
        x[i] = point[i];
        let numeric = (fp - fm) / (2.0 * step);
        // For a smooth f the symmetric second difference is O(step); at a
        // kink it is O(1) relative to the gradient scale.
        let second = (fp + fm - 2.0 * f0).abs() / (2.0 * step);
        let kink = second > 1e-2 * numeric.abs().max(1.0);
        let err = rel_err(analytic[i], numeric);
        if kink {
            report.skipped += 1;
        } else {
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
        }
        report.coords.push(CoordCheck { index: i, analytic: analytic[i], numeric, rel_err: err, kink });
    }
    Ok(report)
}

/// Outcome of one named check in the primitive suite.
#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub pass: bool,
}

impl SuiteCheck {
    fn from_report(name: &str, rep: &FdReport) -> Self {
        SuiteCheck {
            name: name.to_string(),
            max_rel_err: rep.max_rel_err,
            checked: rep.checked,
            skipped: rep.skipped,
            pass: rep.checked > 0 && rep.max_rel_err < FD_TOL,
        }
    }
}

type Builder = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Check d(build)/d(inputs[wrt]) against finite differences at `points`
/// random coordinates.
fn check_one(
    name: &str,
    inputs: &[Tensor],
    wrt: usize,
    build: &Builder,
    rng: &mut ChaCha8Rng,
    points: usize,
) -> Result<SuiteCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
    let out = build(&mut tape, &vars)?;
    let grad = tape.backward(out, &[vars[wrt]])?[0];
    let analytic = tape.grad_tensor(vars[wrt], grad);

    let mut eval = |x: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let mut vs = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            let tensor = if i == wrt {
                Tensor::new(input.shape().to_vec(), x.to_vec())?
            } else {
                input.clone()
            };
            vs.push(t.leaf(tensor)?);
        }
        Ok(build(&mut t, &vs)?.value_of(&t))
    };

    let n = inputs[wrt].len();
    let coords = sample_coords(rng, n, points);
    let rep = finite_diff_check(&mut eval, inputs[wrt].data(), analytic.data(), FD_STEP, &coords)?;
    Ok(SuiteCheck::from_report(name, &rep))
}

impl Var {
    fn value_of(self, tape: &Tape) -> f64 {
        tape.value(self).item()
    }
}

fn sample_coords(rng: &mut ChaCha8Rng, n: usize, points: usize) -> Vec<usize> {
    if n <= points {
        return (0..n).collect();
    }
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..points {
        let j = rng.gen_range(i..n);
        all.swap(i, j);
    }
    all.truncate(points);
    all.sort_unstable();
    all
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let count = shape.iter().product();
    let data = (0..count).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform values bounded away from zero, for kink-free ReLU inputs.
fn uniform_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, margin: f64) -> Tensor {
    let count = shape.iter().product();
    let data = (0..count)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            v.signum() * (v.abs() + margin)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform values with all entries pairwise separated, for tie-free pooling.
fn uniform_no_ties(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    loop {
        let t = uniform(rng, shape.clone(), -1.0, 1.0);
        let mut sorted = t.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).all(|w| w[1] - w[0] > gap) {
            return t;
        }
    }
}

/// Run the full primitive and double-backprop gradient-check suite.
///
/// Each check samples at least `points` random coordinates and compares the
/// recorded backward pass against central finite differences.
pub fn run_primitive_suite(seed: u64, points: usize) -> Result<Vec<SuiteCheck>> {
    let mut checks = Vec::new();
    let r = |name: &str| rng::stream(seed, "gradcheck", &[fnv(name)]);

    // A fixed readout vector turns tensor outputs into scalars so the full
    // Jacobian is exercised, not just the row sums.
    fn readout(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let shape = tape.value(v).shape().to_vec();
        let mut rng = rng::stream(seed, "readout", &[]);
        let w = uniform(&mut rng, shape, -1.0, 1.0);
        let w = tape.constant(w)?;
        tape.dot(v, w)
    }

    {
        let mut rng = r("matmul_nn");
        let a = uniform(&mut rng, vec![4, 5], -1.0, 1.0);
        let b = uniform(&mut rng, vec![5, 3], -1.0, 1.0);
        for (wrt, side) in [(0usize, "lhs"), (1, "rhs")] {
            checks.push(check_one(
                &format!("matmul_nn_{side}"),
                &[a.clone(), b.clone()],
                wrt,
                &|t, v| {
                    let y = t.matmul(v[0], v[1], false, false)?;
                    readout(t, y, 11)
                },
                &mut rng,
                points,
            )?);
        }
    }
    {
        let mut rng = r("matmul_nt");
        let a = uniform(&mut rng, vec![4, 5], -1.0, 1.0);
        let b = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
        checks.push(check_one(
            "matmul_nt",
            &[a, b],
            0,
            &|t, v| {
                let y = t.matmul(v[0], v[1], false, true)?;
                readout(t, y, 12)
            },
            &mut rng,
            points,
        )?);
    }
    {
        let mut rng = r("matmul_tn");
        let a = uniform(&mut rng, vec![5, 4], -1.0, 1.0);
        let b = uniform(&mut rng, vec![5, 3], -1.0, 1.0);
        checks.push(check_one(
            "matmul_tn",
            &[a, b],
            1,
            &|t, v| {
                let y = t.matmul(v[0], v[1], true, false)?;
                readout(t, y, 13)
            },
            &mut rng,
            points,
        )?);
    }
    {
        let mut rng = r("conv2d");
        let x = uniform(&mut rng, vec![2, 3, 6, 5], -1.0, 1.0);
        let w = uniform(&mut rng, vec![4, 3, 3, 3], -1.0, 1.0);
        for (wrt, side) in [(0usize, "input"), (1, "weight")] {
            checks.push(check_one(
                &format!("conv2d_{side}"),
                &[x.clone(), w.clone()],
                wrt,
                &|t, v| {
                    let y = t.conv2d(v[0], v[1], 1)?;
                    readout(t, y, 14)
                },
                &mut rng,
                points,
            )?);
        }
    }
    {
        let mut rng = r("relu");
        let x = uniform_off_zero(&mut rng, vec![48], 0.05);
        checks.push(check_one(
            "relu_interior",
            &[x],
            0,
            &|t, v| {
                let y = t.relu(v[0])?;
                readout(t, y, 15)
            },
            &mut rng,
            points,
        )?);
    }
    {
        let mut rng = r("maxpool");
        let x = uniform_no_ties(&mut rng, vec![1, 2, 6, 6], 1e-3);
        checks.push(check_one(
            "maxpool_no_ties",
            &[x],
            0,
            &|t, v| {
                let y = t.maxpool(v[0], 3)?;
                readout(t, y, 16)
            },
            &mut rng,
            points,
        )?);
    }
    {
        let mut rng = r("resample");
        let x = uniform(&mut rng, vec![2, 2, 5, 5], 0.0, 1.0);
        let params = Arc::new(vec![
            ResampleSpec { flip: false, dx: 0.37, dy: -1.23 },
            ResampleSpec { flip: true, dx: -0.61, dy: 0.44 },
        ]);
        checks.push(check_one(
            "bilinear_resample",
            &[x],
            0,
            &move |t, v| {
                let y = t.resample(v[0], params.clone())?;
                readout(t, y, 17)
            },
            &mut rng,
            points,
        )?);
    }
    for mean in [true, false] {
        let name = if mean { "softmax_cross_entropy_mean" } else { "softmax_cross_entropy_sum" };
        let mut rng = r(name);
        let logits = uniform(&mut rng, vec![6, 5], -2.0, 2.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        checks.push(check_one(
            name,
            &[logits],
            0,
            &move |t, v| t.cross_entropy(v[0], &labels, mean),
            &mut rng,
            points,
        )?);
    }
    {
        let mut rng = r("l2_norm");
        let x = uniform(&mut rng, vec![30], -1.0, 1.0);
        checks.push(check_one(
            "l2_norm",
            &[x],
            0,
            &|t, v| {
                let sq = t.dot(v[0], v[0])?;
                t.sqrt(sq)
            },
            &mut rng,
            points,
        )?);
    }
    {
        let mut rng = r("cosine");
        let a = uniform(&mut rng, vec![30], -1.0, 1.0);
        let b = uniform(&mut rng, vec![30], -1.0, 1.0);
        for (wrt, side) in [(0usize, "lhs"), (1, "rhs")] {
            checks.push(check_one(
                &format!("cosine_similarity_{side}"),
                &[a.clone(), b.clone()],
                wrt,
                &|t, v| {
                    let num = t.dot(v[0], v[1])?;
                    let na = t.dot(v[0], v[0])?;
                    let nb = t.dot(v[1], v[1])?;
                    let na = t.sqrt(na)?;
                    let nb = t.sqrt(nb)?;
                    let denom = t.mul(na, nb)?;
                    let inv = t.recip(denom)?;
                    t.mul(num, inv)
                },
                &mut rng,
                points,
            )?);
        }
    }
    {
        // conv -> relu -> maxpool -> flatten -> linear -> cross-entropy
        let mut rng = r("composite");
        let x = uniform(&mut rng, vec![2, 2, 7, 7], 0.0, 1.0);
        let w = uniform(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5);
        let cb = uniform(&mut rng, vec![3], -0.2, 0.2);
        let fw = uniform(&mut rng, vec![4, 12], -0.5, 0.5);
        let fb = uniform(&mut rng, vec![4], -0.2, 0.2);
        let labels = vec![1usize, 3];
        checks.push(check_one(
            "conv_pool_linear_composite",
            &[x, w, cb, fw, fb],
            0,
            &move |t, v| {
                let c = t.conv2d(v[0], v[1], 1)?;
                let c = t.add_chan_bias(c, v[2])?;
                let c = t.relu(c)?;
                let p = t.maxpool(c, 3)?;
                let flat = t.reshape(p, vec![2, 12])?;
                let logits = t.matmul(flat, v[3], false, true)?;
                let logits = t.add_row_bias(logits, v[4])?;
                t.cross_entropy(logits, &labels, true)
            },
            &mut rng,
            50.max(points),
        )?);
    }
    {
        // Double backprop: a scalar of parameter gradients, differentiated
        // with respect to the network input.
        let mut rng = r("double_backprop");
        let x = uniform(&mut rng, vec![3, 2], -1.0, 1.0);
        let w1 = uniform(&mut rng, vec![4, 2], -0.8, 0.8);
        let b1 = uniform(&mut rng, vec![4], -0.3, 0.3);
        let w2 = uniform(&mut rng, vec![2, 4], -0.8, 0.8);
        let b2 = uniform(&mut rng, vec![2], -0.3, 0.3);
        let labels = vec![0usize, 1, 0];
        checks.push(check_one(
            "double_backprop",
            &[x, w1, b1, w2, b2],
            0,
            &move |t, v| {
                let h = t.matmul(v[0], v[1], false, true)?;
                let h = t.add_row_bias(h, v[2])?;
                let h = t.relu(h)?;
                let logits = t.matmul(h, v[3], false, true)?;
                let logits = t.add_row_bias(logits, v[4])?;
                let loss = t.cross_entropy(logits, &labels, true)?;
                let grads = t.backward(loss, &v[1..5])?;
                // t = sum_i <g_i, c_i> + sum_i <g_i, g_i>
                let mut total: Option<Var> = None;
                for (i, g) in grads.into_iter().enumerate() {
                    let g = g.expect("parameters reach the loss");
                    let shape = t.value(g).shape().to_vec();
                    let mut crng = rng::stream(991, "double_readout", &[i as u64]);
                    let c = uniform(&mut crng, shape, -1.0, 1.0);
                    let c = t.constant(c)?;
                    let lin = t.dot(g, c)?;
                    let quad = t.dot(g, g)?;
                    let term = t.add(lin, quad)?;
                    total = Some(match total {
                        Some(acc) => t.add(acc, term)?,
                        None => term,
                    });
                }
                Ok(total.expect("at least one parameter"))
            },
            &mut rng,
            points,
        )?);
    }

    Ok(checks)
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_at_machine_scale() {
        // f(x) = <x, x>, df = 2x
        let point = vec![0.3, -1.2, 2.4];
        let analytic: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        let mut f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum());
        let rep =
            finite_diff_check(&mut f, &point, &analytic, FD_STEP, &[0, 1, 2]).unwrap();
        assert_eq!(rep.checked, 3);
        assert!(rep.max_rel_err < 1e-9, "max err {}", rep.max_rel_err);
    }

    #[test]
    fn relu_kink_is_flagged_and_excluded() {
        // d/dx relu(x) at exactly 0 is defined as 0, but the point is
        // nondifferentiable and must be excluded rather than scored.
        let point = vec![0.0];
        let analytic = vec![0.0];
        let mut f = |x: &[f64]| Ok(x[0].max(0.0));
        let rep = finite_diff_check(&mut f, &point, &analytic, FD_STEP, &[0]).unwrap();
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.checked, 0);
        assert!(rep.coords[0].kink);
    }

    #[test]
    fn primitive_suite_passes() {
        let checks = run_primitive_suite(0, 20).unwrap();
        assert!(checks.len() >= 12);
        for c in &checks {
            assert!(
                c.pass,
                "{} failed: max rel err {} over {} coords",
                c.name, c.max_rel_err, c.checked
            );
            assert!(c.checked >= 1, "{} checked no coordinates", c.name);
        }
    }
}
