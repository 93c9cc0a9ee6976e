//! Finite-difference verification of reverse-mode gradients.
//!
//! The checked computation may produce a tensor of any shape. It is reduced
//! to a scalar with a fixed random projection `L = sum(r * out)` accumulated in
//! `f64`, and the tape is seeded with `r`. For scalar outputs `r = 1`.
//!
//! Error per input is measured in the infinity norm relative to the larger of
//! the two gradient magnitudes:
//! `max_i |g_ad - g_fd| / max(max_i |g_ad|, max_i |g_fd|)`.
//! Coordinates whose perturbation flips a relu mask, an argmax, or a BCE clamp
//! are not differentiable at that step size; by default they are skipped and
//! counted.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f32 = 1e-3;

/// Smallest gradient scale treated as nonzero when normalizing errors.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f32,
    pub rel_tol: f64,
    /// Check at most this many coordinates per input (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose perturbation changes any branch decision. Large
    /// composites leave this off: some far-away relu almost always flips, and
    /// a single unit crossing its kink moves the difference very little.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            rel_tol: 1e-2,
            max_coords: None,
            seed: 0,
            skip_kinks: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub grad_scale: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub rel_tol: f64,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.non_finite && self.inputs.iter().all(|r| r.max_rel_err < self.rel_tol)
    }
}

struct Eval {
    out: Tensor,
    branch: u64,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

fn project(out: &Tensor, r: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Compares tape gradients of `f` against central differences at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(&f, inputs)?;
    let base = Eval {
        out: g.value(out).clone(),
        branch: g.branch_hash(),
    };
    let mut report = GradCheckReport {
        inputs: Vec::with_capacity(inputs.len()),
        rel_tol: opts.rel_tol,
        non_finite: !base.out.is_finite(),
    };
    if report.non_finite {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = if base.out.numel() == 1 {
        Tensor::ones(base.out.shape())
    } else {
        Tensor::from_fn(base.out.shape(), |_| rng.gen_range(-1.0..1.0))
    };
    let grads = match g.backward_with(out, r.clone()) {
        Ok(gr) => gr,
        Err(Error::NonFinite(_)) => {
            report.non_finite = true;
            return Ok(report);
        }
        Err(e) => return Err(e),
    };

    let run = |perturbed: &[Tensor]| -> Result<Eval> {
        let (g, _, out) = evaluate(&f, perturbed)?;
        Ok(Eval {
            out: g.value(out).clone(),
            branch: g.branch_hash(),
        })
    };

    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = inputs[k].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut pairs = Vec::with_capacity(coords.len());
        let mut skipped = 0;
        for &i in &coords {
            let x0 = inputs[k].data()[i];
            let xp = x0 + opts.step;
            let xm = x0 - opts.step;
            work[k].data_mut()[i] = xp;
            let plus = run(&work)?;
            work[k].data_mut()[i] = xm;
            let minus = run(&work)?;
            work[k].data_mut()[i] = x0;
            if !plus.out.is_finite() || !minus.out.is_finite() {
                report.non_finite = true;
                continue;
            }
            if opts.skip_kinks && (plus.branch != base.branch || minus.branch != base.branch) {
                skipped += 1;
                continue;
            }
            let numeric = (project(&plus.out, &r) - project(&minus.out, &r)) / (xp as f64 - xm as f64);
            pairs.push((analytic.data()[i] as f64, numeric));
        }
        let scale = pairs
            .iter()
            .map(|(a, b)| a.abs().max(b.abs()))
            .fold(0.0, f64::max)
            .max(SCALE_FLOOR);
        let max_abs = pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.inputs.push(InputReport {
            checked: pairs.len(),
            skipped_kinks: skipped,
            max_abs_err: max_abs,
            max_rel_err: max_abs / scale,
            grad_scale: scale,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_has_unit_gradient() {
        let x = rand_tensor(&[2, 3, 3], 1);
        let report = grad_check(|g, v| Ok(g.sum(v[0])), &[x], &GradCheckOptions::default()).unwrap();
        assert!(report.passed());
        assert!(report.inputs[0].max_abs_err < 1e-2);
    }

    #[test]
    fn square_checks_every_coordinate() {
        let x = rand_tensor(&[4], 2);
        let report = grad_check(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.inputs[0].checked, 4);
    }

    #[test]
    fn reports_non_finite() {
        let x = Tensor::full(&[2], f32::MAX);
        let report = grad_check(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.non_finite);
        assert!(!report.passed());
    }
}
