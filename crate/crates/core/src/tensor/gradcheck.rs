use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Relative tolerance between analytic and numeric derivatives.
    pub tol: f64,
    /// Absolute difference accepted regardless of `tol` (near-zero slopes).
    pub abs_tol: f64,
    /// Step is `rel_step · max(1, |x_i|)`.
    pub rel_step: f64,
    /// Restrict the check to these `(input, flat index)` coordinates.
    pub coords: Option<Vec<(usize, usize)>>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            tol: 1e-4,
            abs_tol: 1e-7,
            rel_step: 1e-5,
            coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub pass: bool,
    /// `(input, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn gradcheck<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> Result<Tensor<S>>,
    x: &Tensor<S>,
    tol: f64,
) -> Result<GradcheckReport> {
    gradcheck_many(|xs| f(&xs[0]), std::slice::from_ref(x), tol)
}

pub fn gradcheck_many<S: Scalar>(
    f: impl Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
    xs: &[Tensor<S>],
    tol: f64,
) -> Result<GradcheckReport> {
    gradcheck_with(
        f,
        xs,
        &GradcheckOptions {
            tol,
            ..Default::default()
        },
    )
}

fn eval_scalar<S: Scalar>(
    f: &impl Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
    xs: &[Tensor<S>],
) -> Result<f64> {
    let y = f(xs)?;
    if y.len() != 1 {
        return Err(Error::contract(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    let v = y.item().as_f64();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Compares tape gradients of scalar `f` against central differences.
pub fn gradcheck_with<S: Scalar>(
    f: impl Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
    xs: &[Tensor<S>],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let plain: Vec<Tensor<S>> = xs.iter().map(Tensor::detach).collect();
    eval_scalar(&f, &plain)?;

    let tape = Tape::new();
    let tracked = plain
        .iter()
        .enumerate()
        .map(|(i, x)| tape.param(format!("x{i}"), x))
        .collect::<Result<Vec<_>>>()?;
    let y = f(&tracked)?;
    let analytic: Vec<Vec<f64>> = if y.requires_grad() {
        let grads = tape.backward(&y)?;
        (0..xs.len())
            .map(|i| grads.get(&format!("x{i}")).unwrap().data().iter().map(|v| v.as_f64()).collect())
            .collect()
    } else {
        xs.iter().map(|x| vec![0.0; x.len()]).collect()
    };

    let coords: Vec<(usize, usize)> = match &opts.coords {
        Some(c) => c.clone(),
        None => xs
            .iter()
            .enumerate()
            .flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)))
            .collect(),
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        pass: true,
        worst: None,
    };
    let mut worst = (-1.0, -1.0);
    for &(i, j) in &coords {
        let x0 = plain[i].data()[j];
        let h = opts.rel_step * x0.as_f64().abs().max(1.0);
        let mut probe = plain.clone();
        let mut shifted = |delta: f64| -> Result<f64> {
            let mut v = plain[i].to_vec();
            v[j] = S::lit(x0.as_f64() + delta);
            probe[i] = Tensor::raw(plain[i].shape().to_vec(), v);
            eval_scalar(&f, &probe)
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let a = analytic[i][j];
        let abs_err = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel_err = if abs_err <= opts.abs_tol || scale == 0.0 { 0.0 } else { abs_err / scale };
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs_err);
        report.max_rel_err = report.max_rel_err.max(rel_err);
        if rel_err > opts.tol {
            report.pass = false;
        }
        if (rel_err, abs_err) > worst {
            worst = (rel_err, abs_err);
            report.worst = Some((i, j, a, numeric));
        }
    }
    Ok(report)
}
