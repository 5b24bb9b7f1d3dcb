//! Central finite-difference gradient checking.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Largest network `gradcheck` will perturb parameter by parameter.
pub const GRADCHECK_MAX_PARAMS: usize = 10_000;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a function of magnitude `value`. Central
/// differences carry round-off near `|f|·2⁻⁵²/ε`, so gradients much smaller
/// than `1e-6·|f|` cannot be resolved and are compared absolutely.
pub fn error_floor(value: f64) -> f64 {
    1e-6 * value.abs().max(1.0)
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences, returning the largest relative error for each input tensor.
pub fn gradient_errors<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let floor = error_floor(g.value(loss).item());
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("inputs require grad"))
        .collect();
    drop(g);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[j], numeric, floor));
        }
        errors.push(worst);
    }
    Ok(errors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub module: String,
    pub params: usize,
    /// `None` for a module without parameters.
    pub max_rel_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub modules: Vec<ModuleCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.modules
            .iter()
            .filter_map(|m| m.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("module,params,max_rel_err,status\n");
        for m in &self.modules {
            match m.max_rel_err {
                Some(e) => {
                    let status = if e < self.tolerance { "pass" } else { "FAIL" };
                    writeln!(s, "{},{},{e:.3e},{status}", m.module, m.params).unwrap();
                }
                None => writeln!(s, "{},0,-,vacuous pass (no parameters)", m.module).unwrap(),
            }
        }
        writeln!(
            s,
            "overall max_rel_err {:.3e} tolerance {:e}",
            self.max_rel_err(),
            self.tolerance
        )
        .unwrap();
        s
    }
}

/// Checks every parameter of the configured network on a seeded batch of two
/// random inputs, grouped by module. Parameters are drawn uniformly from
/// `[-0.5, 0.5]` rather than the training init so that no weight starts at a
/// value that hides its gradient.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let graph = cfg.build()?;
    let total = graph.layout().total();
    if total > GRADCHECK_MAX_PARAMS {
        return Err(Error::config(format!(
            "gradcheck needs a small network: {total} parameters exceeds {GRADCHECK_MAX_PARAMS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ParamStore::random_uniform(graph.layout(), &mut rng, 0.5);
    let shape = [2, graph.spec.in_channels, cfg.data.height, cfg.data.width];
    let x = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng));
    let labels: Vec<usize> = (0..2)
        .map(|_| rng.random_range(0..graph.classes()))
        .collect();
    let errors = gradient_errors(params.tensors(), FD_EPS, |g, vars| {
        let xv = g.constant(x.clone());
        let bound = crate::params::Bound::from_vars(vars.to_vec());
        let logits = graph.forward(g, &bound, xv)?;
        g.cross_entropy(logits, &labels)
    })?;
    let modules = graph
        .modules()
        .iter()
        .map(|m| ModuleCheck {
            module: m.name.clone(),
            params: m
                .params
                .iter()
                .map(|&id| graph.layout().spec(id).numel())
                .sum(),
            max_rel_err: if m.params.is_empty() {
                None
            } else {
                Some(
                    m.params
                        .iter()
                        .map(|id| errors[id.index()])
                        .fold(0.0, f64::max),
                )
            },
        })
        .collect();
    Ok(GradcheckReport {
        modules,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
