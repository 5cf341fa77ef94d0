//! Central-difference gradient oracle, independent of the tape.

use crate::error::{Result, TensorError};
use crate::tensor::{GradMap, ParamSet, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(p+eps) - f(p-eps)) / 2eps` for every coordinate of every parameter.
pub fn finite_difference_oracle<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradMap>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    finite_difference_subset(f, params, &names, eps)
}

/// Same as [`finite_difference_oracle`] restricted to `names`.
pub fn finite_difference_subset<F>(
    f: F,
    params: &ParamSet,
    names: &[String],
    eps: f64,
) -> Result<GradMap>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let n = params
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("unknown parameter `{name}`")))?
            .numel();
        entries.push((name.clone(), (0..n).collect::<Vec<_>>()));
    }
    let mut out = finite_difference_entries(f, params, &entries, eps)?;
    for name in names {
        let dims = params.get(name).expect("present").dims().to_vec();
        let flat = out.remove(name).expect("computed");
        out.insert(name.clone(), flat.reshape(dims)?);
    }
    Ok(out)
}

/// Central differences at selected flat coordinates. Each entry yields a 1-D
/// tensor holding one derivative per listed coordinate, in list order.
pub fn finite_difference_entries<F>(
    mut f: F,
    params: &ParamSet,
    entries: &[(String, Vec<usize>)],
    eps: f64,
) -> Result<GradMap>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Usage(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let mut work = params.clone();
    let mut out = GradMap::new();
    for (name, coords) in entries {
        let n = work
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("unknown parameter `{name}`")))?
            .numel();
        let mut grad = Vec::with_capacity(coords.len());
        for &i in coords {
            if i >= n {
                return Err(TensorError::Usage(format!(
                    "coordinate {i} out of range for `{name}` ({n})"
                )));
            }
            let orig = work.get(name).expect("present").data()[i];
            set(&mut work, name, i, orig + eps);
            let up = f(&work)?;
            set(&mut work, name, i, orig - eps);
            let down = f(&work)?;
            set(&mut work, name, i, orig);
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "finite_difference_oracle",
                });
            }
            grad.push((up - down) / (2.0 * eps));
        }
        out.insert(name.clone(), Tensor::new(vec![coords.len()], grad)?);
    }
    Ok(out)
}

fn set(p: &mut ParamSet, name: &str, i: usize, v: f64) {
    p.get_mut(name).expect("present").data_mut()[i] = v;
}

/// Worst disagreement for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Max of `|a - n| / max(|n|, tiny)` over coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    /// Failing parameter with the largest relative error, if any fail.
    pub fn worst_failure(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !p.passed)
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }
}

/// Elementwise `|analytic - numeric| <= atol + rtol * |numeric|` per parameter
/// present in `numeric`.
pub fn compare_gradients(
    analytic: &GradMap,
    numeric: &GradMap,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport> {
    let mut params = Vec::new();
    for (name, num) in numeric {
        let ana = analytic
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("no analytic gradient for `{name}`")))?;
        if ana.dims() != num.dims() {
            return Err(TensorError::Shape {
                op: "compare_gradients",
                lhs: ana.dims().to_vec(),
                rhs: num.dims().to_vec(),
            });
        }
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            passed: true,
        };
        for (a, n) in ana.data().iter().zip(num.data()) {
            let abs = (a - n).abs();
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(abs / n.abs().max(1e-12));
            if abs > atol + rtol * n.abs() {
                check.passed = false;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::scalar(3.0)).unwrap();
        let g = finite_difference_oracle(
            |q| Ok(q.get("p").unwrap().data()[0].powi(2)),
            &p,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!((g["p"].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut p = ParamSet::new();
        p.insert(
            "a",
            Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap(),
        )
        .unwrap();
        let g = finite_difference_oracle(|_| Ok(7.0), &p, DEFAULT_EPS).unwrap();
        assert!(g["a"].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        let err = finite_difference_oracle(|_| Ok(f64::NAN), &p, DEFAULT_EPS).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        assert!(finite_difference_oracle(|_| Ok(0.0), &p, 0.0).is_err());
    }
}
