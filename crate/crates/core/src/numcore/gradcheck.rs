//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Below this magnitude the
/// comparison degrades to an absolute one, where finite differences are
/// dominated by rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of scalar `f` at `point` against central
/// differences with the given `step`.
///
/// `f` receives one gradient-tracking leaf per input tensor and must
/// return a `1 × 1` node.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        tolerance: tol,
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (input, tensor) in point.iter().enumerate() {
        for coord in 0..tensor.len() {
            let orig = tensor.data()[coord];
            probe[input].data_mut()[coord] = orig + step;
            let plus = eval(&probe)?;
            probe[input].data_mut()[coord] = orig - step;
            let minus = eval(&probe)?;
            probe[input].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[input].data()[coord];
            let abs = (a - numeric).abs();
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((input, coord));
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn linear_function_agrees_exactly() {
        let w = Tensor::row_vector(vec![0.5, -2.0, 4.0]);
        let report = finite_diff_check(
            |tape, v| {
                let w = tape.constant(w.clone());
                tape.dot(v[0], w)
            },
            &[Tensor::row_vector(vec![0.25, 1.0, -0.75])],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let bias = random(1, 2, &mut rng);
        let c = random(3, 2, &mut rng);
        let report = finite_diff_check(
            |tape, v| {
                let m = tape.matmul(v[0], v[1])?;
                let m = tape.add(m, v[2])?;
                let t = tape.tanh(m);
                let s = tape.sigmoid(v[3]);
                let p = tape.mul(t, s)?;
                let e = tape.exp(p);
                let sm = tape.softmax_rows(e)?;
                let l = tape.log(sm);
                let n = tape.normalize_rows(v[3])?;
                let nt = tape.transpose(n);
                let cat = tape.concat_cols(&[l, v[3]])?;
                let top = tape.slice_rows(cat, 0, 2)?;
                let left = tape.slice_cols(top, 1, 3)?;
                let g = tape.gather_rows(v[0], &[2, 2, 0])?;
                let gs = tape.slice_cols(g, 0, 3)?;
                let stacked = tape.concat_rows(&[gs, nt])?;
                let d = tape.dot(stacked, stacked)?;
                let s1 = tape.mean(left);
                let s2 = tape.scale(d, 0.3);
                let diff = tape.sub(s1, s2)?;
                let sq = tape.sum(sm);
                tape.add(diff, sq)
            },
            &[a, b, bias, c],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn softmax_cross_entropy_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(3, 4, &mut rng);
        let x = random(2, 3, &mut rng);
        let onehot = Tensor::from_rows(&[[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let report = finite_diff_check(
            |tape, v| {
                let x = tape.constant(x.clone());
                let y = tape.constant(onehot.clone());
                let logits = tape.matmul(x, v[0])?;
                let p = tape.softmax_rows(logits)?;
                let lp = tape.log_clamped(p, 1e-12);
                let picked = tape.mul(lp, y)?;
                let s = tape.sum(picked);
                Ok(tape.scale(s, -1.0))
            },
            &[w],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
