//! Central finite-difference checks of tape gradients, run in `f64`.

use crate::error::{Error, Result};
use crate::param::Module;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor, as a fraction of `max(1, |loss|)`. Derivatives below
/// it sit at the finite-difference noise level (roundoff in `f` divided by
/// the step) and are effectively compared in absolute terms.
pub const LOSS_RELATIVE_FLOOR: f64 = 1e-5;
/// Step shrink attempts when the one-sided slopes disagree (a kink such as
/// a ReLU hinge lies inside the stencil).
const KINK_RETRIES: usize = 3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    floor: f64,
    pub max_rel_error: f64,
    /// Name of the tensor and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new(loss: f64) -> Self {
        GradCheckReport {
            floor: LOSS_RELATIVE_FLOOR * loss.abs().max(1.0),
            max_rel_error: 0.0,
            worst: None,
            worst_values: None,
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric, self.floor);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), index));
            self.worst_values = Some((analytic, numeric));
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / floor.max(analytic.abs() + numeric.abs())
}

fn scalar(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Central difference of `eval` around `x0` along one coordinate, shrinking
/// the step while the left and right slopes disagree.
fn central_difference(mut eval: impl FnMut(f64) -> Result<f64>, x0: f64, f0: f64, eps: f64) -> Result<f64> {
    let mut h = eps;
    let mut estimate = 0.0;
    for _ in 0..=KINK_RETRIES {
        let (fp, fm) = (eval(x0 + h)?, eval(x0 - h)?);
        estimate = (fp - fm) / (2.0 * h);
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        if (right - left).abs() <= 1e-2 * (right.abs() + left.abs()) + 1e-6 {
            break;
        }
        h /= 10.0;
    }
    Ok(estimate)
}

/// Max relative error between the tape gradient of the scalar `f(x)` and
/// central differences with step `eps`.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let f0 = scalar(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport::new(f0);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let numeric = central_difference(
            |v| {
                probe.data_mut()[i] = v;
                let mut t = Tape::new();
                let pv = t.leaf(probe.clone(), false);
                let out = f(&mut t, pv)?;
                scalar(&t, out)
            },
            x0,
            f0,
            eps,
        )?;
        probe.data_mut()[i] = x0;
        report.record("input", i, analytic.data()[i], numeric);
    }
    Ok(report.max_rel_error)
}

/// Checks gradients with respect to every parameter of `module` and every
/// tensor in `inputs`.
pub fn grad_check_module<M, G>(module: &M, inputs: &[Tensor<f64>], eps: f64, f: G) -> Result<GradCheckReport>
where
    M: Module<f64> + Clone,
    G: Fn(&M, &mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(module, &mut tape, &vars)?;
    let f0 = scalar(&tape, y)?;
    let grads = tape.backward(y)?;

    let eval = |m: &M, ins: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(m, &mut t, &vs)?;
        scalar(&t, out)
    };

    let mut report = GradCheckReport::new(f0);
    let mut work = module.clone();
    let names: Vec<String> = module.params().iter().map(|p| p.name.clone()).collect();
    for (k, p) in module.params().iter().enumerate() {
        let analytic = grads
            .param(p)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for i in 0..p.value.len() {
            let x0 = p.value.data()[i];
            let numeric = central_difference(
                |v| {
                    work.params_mut()[k].value.data_mut()[i] = v;
                    eval(&work, inputs)
                },
                x0,
                f0,
                eps,
            )?;
            work.params_mut()[k].value.data_mut()[i] = x0;
            report.record(&names[k], i, analytic.data()[i], numeric);
        }
    }

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.len() {
            let x0 = x.data()[i];
            let numeric = central_difference(
                |val| {
                    probe[k].data_mut()[i] = val;
                    eval(module, &probe)
                },
                x0,
                f0,
                eps,
            )?;
            probe[k].data_mut()[i] = x0;
            report.record(&format!("input{k}"), i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}
