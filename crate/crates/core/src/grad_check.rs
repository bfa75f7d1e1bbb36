//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Per-parameter outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// max over checked components of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    pub components_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare analytic gradients of a scalar function against central finite
/// differences.
///
/// `f` receives a tape plus one `Var` per parameter (in `params` order) and
/// returns the scalar output node. When `max_components_per_param` is set,
/// a seeded subset of the components of each parameter is perturbed instead
/// of all of them (for large parameter tensors).
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    step: f64,
    tol: f64,
    max_components_per_param: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        out.item()
    };

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zero(*v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut per_param = Vec::with_capacity(params.len());

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let indices: Vec<usize> = match max_components_per_param {
            Some(max) if n > max => (0..max).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut max_err = 0.0_f64;
        for &ci in &indices {
            let mut work = base.clone();
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let fp = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let fm = eval(&work)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "grad_check",
                    detail: format!("f at {name}[{ci}] +/- {step}"),
                });
            }
            let numeric = (fp - fm) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[pi].data()[ci], numeric));
        }
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_err,
            components_checked: indices.len(),
        });
    }

    Ok(GradCheckReport { per_param, tol })
}
