//! Central finite-difference gradient checking, run at f64.

use super::{ParamTree, Tape, Var};

#[derive(Debug)]
pub struct GradCheckFailure {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub struct GradCheckReport {
    pub n_checked: usize,
    pub worst_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients of every trainable leaf against central finite
/// differences of the scalar loss built by `build`. The closure must construct
/// the same graph each call (it is re-run for every perturbation).
pub fn finite_diff_check<F>(
    tree: &mut ParamTree<f64>,
    build: F,
    step: f64,
    rel_tol: f64,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &mut ParamTree<f64>) -> Var,
{
    let eval = |tree: &mut ParamTree<f64>| -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, tree);
        tape.scalar_value(loss)
    };

    tree.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, tree);
        tape.backward(loss, tree);
    }
    let names: Vec<String> = tree
        .iter()
        .filter(|(_, l)| l.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|n| tree.get(n).grad.iter().cloned().collect())
        .collect();

    let mut report = GradCheckReport {
        n_checked: 0,
        worst_rel_error: 0.0,
        failures: Vec::new(),
    };
    for (leaf_idx, name) in names.iter().enumerate() {
        let len = tree.get(name).value.len();
        for i in 0..len {
            let orig = tree.get(name).value.as_slice().unwrap()[i];
            tree.get_mut(name).value.as_slice_mut().unwrap()[i] = orig + step;
            let plus = eval(tree);
            tree.get_mut(name).value.as_slice_mut().unwrap()[i] = orig - step;
            let minus = eval(tree);
            tree.get_mut(name).value.as_slice_mut().unwrap()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[leaf_idx][i];
            let abs_err = (a - numeric).abs();
            let rel = abs_err / a.abs().max(numeric.abs()).max(1e-6);
            report.n_checked += 1;
            if rel > report.worst_rel_error {
                report.worst_rel_error = rel;
            }
            if abs_err > 1e-8 && rel > rel_tol {
                report.failures.push(GradCheckFailure {
                    leaf: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}
