use super::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a relu kink.
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.excluded += other.excluded;
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::Invalid(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Compares the autodiff gradient of a scalar function at `x` against
/// central differences with step `h`.
///
/// A coordinate is excluded when the relu activation pattern differs between
/// `x + h` and `x - h`, since the function is not differentiable there.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    g.backward(out);
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |point: Tensor<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let v = g.leaf(point);
        let out = f(&mut g, v)?;
        Ok((scalar_of(&g, out)?, g.relu_signature()))
    };

    let mut report = GradCheckReport::default();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != sm {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic[i], numeric));
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check over the parameters of a store.
///
/// `stride` subsamples coordinates within each parameter (1 checks all).
pub fn check_params<F>(store: &ParamStore<f64>, f: F, h: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    scalar_of(&g, out)?;
    g.backward(out);
    g.accumulate_param_grads(&mut work);
    let analytic: Vec<Vec<f64>> = work
        .iter()
        .map(|(_, p)| p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.len()]))
        .collect();

    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok((scalar_of(&g, out)?, g.relu_signature()))
    };

    let mut total = GradCheckReport::default();
    let ids: Vec<_> = work.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let mut report = GradCheckReport::default();
        let n = work.value(id).len();
        for i in (0..n).step_by(stride.max(1)) {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let (fp, sp) = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - h;
            let (fm, sm) = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            if sp != sm {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[k][i], numeric));
            report.checked += 1;
        }
        total.merge(&report);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::from_f64(&[3], &[0.0, 1.0, -1.0]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum_all(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        assert!(finite_diff_check(|_, x| Ok(x), &x, 1e-5).is_err());
    }
}
