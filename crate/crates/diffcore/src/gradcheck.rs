//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;
use std::fmt;

use crate::ModelParams;

/// Smallest denominator of [`relative_error`]. A central difference with
/// `h = 1e-6` on an O(1) loss carries about `1e-9` of rounding noise, so
/// gradients far below this floor are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(REL_ERROR_FLOOR, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    /// Worst error per group, where a group is the first two path segments
    /// (`det.hpt.0.img.wq` → `det.hpt`).
    pub fn by_group(&self) -> BTreeMap<String, (f64, bool)> {
        let mut out: BTreeMap<String, (f64, bool)> = BTreeMap::new();
        for p in &self.params {
            let group = p.name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
            let e = out.entry(group).or_insert((0.0, true));
            e.0 = e.0.max(p.max_rel_error);
            e.1 &= p.passed;
        }
        out
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (group, (err, ok)) in self.by_group() {
            let tag = if ok { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {group:<20} max_rel_err={err:.3e}")?;
        }
        Ok(())
    }
}

/// Perturbs every scalar of `params` by `±h` and compares the central
/// difference of `loss_fn` against `analytic`.
pub fn finite_diff_check<F>(
    params: &ModelParams<f64>,
    analytic: &ModelParams<f64>,
    mut loss_fn: F,
    h: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&ModelParams<f64>) -> f64,
{
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).expect("listed").numel();
        let grad = analytic
            .get(&name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|_| vec![0.0; n]);
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..n {
            let orig = work.get(&name).expect("listed").data()[i];
            work.get_mut(&name).expect("listed").data_mut()[i] = orig + h;
            let up = loss_fn(&work);
            work.get_mut(&name).expect("listed").data_mut()[i] = orig - h;
            let down = loss_fn(&work);
            work.get_mut(&name).expect("listed").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad[i], numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = grad[i];
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error <= tolerance;
        checks.push(check);
    }
    GradCheckReport {
        tolerance,
        params: checks,
    }
}
