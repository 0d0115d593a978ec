//! Central finite-difference verification of tape gradients.
//!
//! For a function `f(inputs) -> y`, the checker reduces `y` to a scalar with
//! a fixed random projection `L = sum(r * y)`, back-propagates `L` on the
//! tape and compares every checked coordinate against
//! `(L(x + h e_k) - L(x - h e_k)) / 2h`.
//!
//! A probe whose relu sign pattern differs from the unperturbed one has
//! crossed a nondifferentiable point. For such coordinates the step is
//! halved up to [`KINK_HALVINGS`] times until both probes stay in the
//! linear region of the base point; failing that, the one-sided difference
//! on the side that stays is used.
//!
//! The error reported per input is normwise: the largest absolute
//! analytic/numeric discrepancy divided by the largest gradient magnitude of
//! that input (floored at [`GRAD_FLOOR`]).

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const GRAD_FLOOR: f64 = 1e-6;
pub const KINK_HALVINGS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Upper bound on checked coordinates per input; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose probes straddled a relu kink at the nominal step.
    pub kinked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, r| m.max(r.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tol
    }
}

fn projected<F>(f: &F, inputs: &[Tensor], proj: &mut Option<Tensor>, seed: u64) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let shape = g.value(y).shape().to_vec();
    let r = proj.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
    });
    let loss = g.dot_const(y, r.clone())?;
    Ok((g, vars, loss))
}

/// Compares analytic and central-difference gradients of `f` with respect
/// to every tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut proj = None;
    let (g, vars, loss) = projected(&f, inputs, &mut proj, opts.seed)?;
    let grads = g.backward(loss)?;
    let base_loss = g.value(loss).item();
    let base_signs = g.relu_signs();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, (&v, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        if let Some(k) = analytic.first_non_finite() {
            return Err(invalid(
                "grad_check",
                format!("non-finite analytic gradient at input {i}, index {k}"),
            ));
        }
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < t.len() => {
                let mut c = sample(&mut rng, t.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..t.len()).collect(),
        };
        let mut scale = GRAD_FLOOR;
        let mut worst = (0.0, coords.first().copied().unwrap_or(0));
        let mut numeric = Vec::with_capacity(coords.len());
        let mut kinked = 0;
        for &k in &coords {
            let mut eval = |delta: f64| -> Result<(f64, bool)> {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[k] += delta;
                let (g, _, l) = projected(&f, &shifted, &mut proj, opts.seed)?;
                Ok((g.value(l).item(), g.relu_signs() == base_signs))
            };
            let mut h = opts.step;
            let mut n = None;
            let mut last = (0.0, false, 0.0, false);
            for _ in 0..=KINK_HALVINGS {
                let (lp, sp) = eval(h)?;
                let (lm, sm) = eval(-h)?;
                if sp && sm {
                    n = Some((lp - lm) / (2.0 * h));
                    break;
                }
                last = (lp, sp, lm, sm);
                h *= 0.5;
            }
            if h < opts.step {
                kinked += 1;
            }
            let h = 2.0 * h;
            let n = n.unwrap_or_else(|| match last {
                (lp, true, _, _) => (lp - base_loss) / h,
                (_, _, lm, true) => (base_loss - lm) / h,
                (lp, _, lm, _) => (lp - lm) / (2.0 * h),
            });
            if !n.is_finite() {
                return Err(invalid(
                    "grad_check",
                    format!("non-finite numeric gradient at input {i}, index {k}"),
                ));
            }
            let a = analytic.data()[k];
            scale = scale.max(a.abs()).max(n.abs());
            numeric.push((k, (a - n).abs()));
        }
        for (k, d) in numeric {
            if d > worst.0 {
                worst = (d, k);
            }
        }
        reports.push(InputReport {
            max_rel_error: worst.0 / scale,
            worst_index: worst.1,
            checked: coords.len(),
            kinked,
        });
    }
    Ok(GradReport {
        inputs: reports,
        tol: opts.tol,
    })
}
