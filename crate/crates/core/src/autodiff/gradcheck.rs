//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference half-step `h`, within `[1e-6, 1e-3]`.
    pub step: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            coords_per_tensor: 32,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub worst: f64,
    pub params: Vec<ParamCheck>,
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare analytic gradients of `f` against central differences.
///
/// `f` records a scalar objective on the given tape, reading the checked
/// tensors through the supplied leaf handles (one per entry of `params`,
/// in order). Anything else it needs is captured as constants.
pub fn grad_check<F>(params: &[(String, Tensor<f64>)], cfg: &GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&cfg.step) {
        return Err(Error::invalid(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            cfg.step
        )));
    }
    let mut eval = |values: &[Tensor<f64>], need_grad: bool| -> Result<(f64, Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), need_grad)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        Ok((v, tape, out, vars))
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (f0, tape, out, vars) = eval(&values, true)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            what: "objective at the unperturbed point".into(),
            step: 0,
        });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf requires grad"))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        worst: 0.0,
        params: Vec::new(),
    };
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &ci in &coords {
            let orig = values[pi].data()[ci];
            values[pi].data_mut()[ci] = orig + cfg.step;
            let (fp, ..) = eval(&values, false)?;
            values[pi].data_mut()[ci] = orig - cfg.step;
            let (fm, ..) = eval(&values, false)?;
            values[pi].data_mut()[ci] = orig;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("objective while perturbing {name}[{ci}]"),
                    step: 0,
                });
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            worst = worst.max(rel_err(analytic[pi].data()[ci], numeric, cfg.abs_floor));
        }
        report.worst = report.worst.max(worst);
        report.params.push(ParamCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = vec![(
            "theta".to_string(),
            Tensor::new(&[4], vec![0.5, -1.25, 2.0, 3.5]).unwrap(),
        )];
        let r = grad_check(&p, &GradCheckConfig::default(), |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(r.worst < 1e-9, "{}", r.worst);
        assert_eq!(r.params[0].coords, 4);
    }

    #[test]
    fn step_out_of_range() {
        let cfg = GradCheckConfig {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&[], &cfg, |tape, _| Ok(tape.constant(Tensor::scalar(0.0)))).is_err());
    }

    #[test]
    fn non_finite_names_parameter() {
        let p = vec![("w_bad".to_string(), Tensor::new(&[1], vec![0.0]).unwrap())];
        let err = grad_check(&p, &GradCheckConfig::default(), |tape, v| {
            // finite at 0, infinite once perturbed
            let x = tape.value(v[0]).data()[0];
            let bad = tape.constant(Tensor::scalar(if x == 0.0 { 1.0 } else { f64::INFINITY }));
            let y = tape.mul(v[0], bad)?;
            Ok(tape.sum(y))
        })
        .unwrap_err();
        assert!(err.to_string().contains("w_bad"), "{err}");
    }

    #[test]
    fn subsamples_large_tensors() {
        let p = vec![("big".to_string(), Tensor::from_fn(&[10, 10], |i| i as f64 * 0.01))];
        let r = grad_check(&p, &GradCheckConfig::default(), |tape, v| {
            let g = tape.gelu(v[0]);
            Ok(tape.sum(g))
        })
        .unwrap();
        assert_eq!(r.params[0].coords, 32);
        assert!(r.worst < 1e-6);
    }
}
