use super::{ParamSet, ParamVars, Tape, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// One-sided difference quotients disagreeing by more than this (relative)
    /// mark the probe as straddling a kink.
    pub kink_tol: f64,
    /// Probe at most this many evenly spaced entries per tensor. `None` probes all.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            kink_tol: 1e-3,
            max_entries_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeOutcome {
    Pass,
    Fail,
    /// Excluded: the probe straddles a non-differentiable point.
    NonDifferentiable,
}

#[derive(Debug, Clone)]
pub struct ProbeFailure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probed: usize,
    pub passed: usize,
    pub tensors: Vec<String>,
    pub non_differentiable: Vec<(String, usize)>,
    pub failures: Vec<ProbeFailure>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn probe_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < n => {
            if k <= 1 {
                return vec![0];
            }
            let mut idx: Vec<usize> = (0..k)
                .map(|j| ((j as f64) * (n - 1) as f64 / (k - 1) as f64).round() as usize)
                .collect();
            idx.dedup();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, entry by entry.
pub fn gradient_check<E, F>(f: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>, E>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(TensorError::Invalid {
            op: "gradient_check",
            msg: format!("eps {} outside [1e-7, 1e-3]", opts.eps),
        }
        .into());
    }

    let (f0, analytic) = {
        let tape = Tape::new();
        let vars = params.register(&tape, true);
        let y = f(&tape, &vars)?;
        let f0 = y.item();
        if !f0.is_finite() {
            return Err(TensorError::NonFinite("objective at base point".into()).into());
        }
        let mut grads = y.backward()?;
        (f0, vars.collect_grads(&mut grads))
    };

    let eval = |p: &ParamSet| -> Result<f64, E> {
        let tape = Tape::new();
        let vars = p.register(&tape, false);
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let rel = |a: f64, b: f64| (a - b).abs() / 1f64.max(a.abs()).max(b.abs());

    for (ti, name) in names.iter().enumerate() {
        report.tensors.push(name.clone());
        let n = params.iter().nth(ti).map(|(_, t)| t.len()).unwrap_or(0);
        let grad = analytic.get(name).expect("layout preserved");
        for idx in probe_indices(n, opts.max_entries_per_tensor) {
            let orig = params.get(name).unwrap().data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + opts.eps;
            let fp = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig - opts.eps;
            let fm = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::NonFinite(format!("{name}[{idx}] probe")).into());
            }

            report.probed += 1;
            let central = (fp - fm) / (2.0 * opts.eps);
            let forward = (fp - f0) / opts.eps;
            let backward = (f0 - fm) / opts.eps;
            let a = grad.data()[idx];
            let err = rel(a, central);
            let one_sided = rel(forward, backward);
            let outcome = if one_sided > opts.kink_tol || (err > opts.tol && one_sided > opts.tol) {
                ProbeOutcome::NonDifferentiable
            } else if err <= opts.tol {
                ProbeOutcome::Pass
            } else {
                ProbeOutcome::Fail
            };
            match outcome {
                ProbeOutcome::Pass => {
                    report.passed += 1;
                    report.max_rel_err = report.max_rel_err.max(err);
                }
                ProbeOutcome::NonDifferentiable => report.non_differentiable.push((name.clone(), idx)),
                ProbeOutcome::Fail => report.failures.push(ProbeFailure {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric: central,
                    rel_err: err,
                }),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(name: &str, data: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::new(vec![data.len()], data.to_vec()).unwrap());
        p
    }

    #[test]
    fn constant_function_passes_with_zero_gradient() {
        let p = one_param("w", &[0.3, -1.2, 4.0]);
        let report = gradient_check::<TensorError, _>(
            |tape, vars| {
                let w = vars.get("w")?;
                w.scale(0.0).sum().add(tape.scalar(5.0))
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.passed, 3);
        assert!(report.all_passed());
    }

    #[test]
    fn l1_kink_is_flagged_not_failed() {
        let p = one_param("w", &[0.0, 0.5]);
        let report = gradient_check::<TensorError, _>(
            |_, vars| Ok(vars.get("w")?.abs().sum()),
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.all_passed());
        assert_eq!(report.non_differentiable, vec![("w".to_string(), 0)]);
        assert_eq!(report.passed, 1);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // detach() hides the dependence from the tape, so the analytic gradient is wrong.
        let p = one_param("w", &[0.7]);
        let report = gradient_check::<TensorError, _>(
            |_, vars| {
                let w = vars.get("w")?;
                Ok(w.mul(w.detach())?.sum())
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.failures.len(), 1);
        assert!((report.failures[0].numeric - 1.4).abs() < 1e-6);
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        // log is finite at the base point but not one eps below it.
        let p = one_param("bias", &[5e-6]);
        let err = gradient_check::<TensorError, _>(
            |_, vars| Ok(vars.get("bias")?.log().sum()),
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("bias[0]"), "{err}");
    }

    #[test]
    fn eps_outside_range_refused() {
        let p = one_param("w", &[1.0]);
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(gradient_check::<TensorError, _>(|_, v| Ok(v.get("w")?.sum()), &p, &opts).is_err());
    }

    #[test]
    fn strided_probe_plan() {
        assert_eq!(probe_indices(10, Some(3)), vec![0, 5, 9]);
        assert_eq!(probe_indices(3, Some(8)), vec![0, 1, 2]);
    }
}
