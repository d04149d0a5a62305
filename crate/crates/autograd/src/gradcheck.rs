//! Central finite-difference checks for parameter gradients.

use crate::{Graph, ParamId, ParamStore, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst per-coordinate `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_error: f64,
    /// `‖a - n‖ / max(‖a‖, ‖n‖)` over all checked coordinates.
    pub norm_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because a perturbation switched a max or clamp
    /// branch, so the difference quotient straddles a kink.
    pub non_smooth: usize,
    /// Coordinate with the worst error, as (parameter, flat index, analytic, numeric).
    pub worst: Option<(ParamId, usize, f64, f64)>,
}

/// Every coordinate of every parameter.
pub fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect()
}

/// Compares `backward` against Richardson-extrapolated central differences
/// on the listed coordinates. `f` must build a scalar from a fresh graph and be
/// deterministic. Coordinates whose stencil changes the graph's branch
/// signature are counted in `non_smooth` instead of being compared.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    step: f64,
    floor: f64,
    f: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let (analytic, signature) = {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        let signature = g.branch_signature().to_vec();
        (g.backward(root), signature)
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        (g.scalar(root), g.branch_signature() == signature.as_slice())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        norm_rel_error: 0.0,
        checked: 0,
        non_smooth: 0,
        worst: None,
    };
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for &(id, flat) in coords {
        let shape = store.get(id).dim();
        let a = analytic
            .get(id, shape)
            .map(|m| m.iter().nth(flat).copied().unwrap_or(0.0))
            .unwrap_or(0.0);
        let original = *store.get(id).iter().nth(flat).expect("coordinate in range");
        let mut central = |h: f64| {
            set_flat(store, id, flat, original + h);
            let (plus, same_plus) = eval(store);
            set_flat(store, id, flat, original - h);
            let (minus, same_minus) = eval(store);
            set_flat(store, id, flat, original);
            ((plus - minus) / (2.0 * h), same_plus && same_minus)
        };
        // Richardson extrapolation cancels the O(h²) truncation term.
        let (coarse, smooth_coarse) = central(step);
        let (fine, smooth_fine) = central(step / 2.0);
        if !(smooth_coarse && smooth_fine) {
            report.non_smooth += 1;
            continue;
        }
        let n = (4.0 * fine - coarse) / 3.0;

        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((id, flat, a, n));
        }
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        report.checked += 1;
    }
    let denom = a2.sqrt().max(n2.sqrt());
    report.norm_rel_error = if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 };
    report
}

fn set_flat(store: &mut ParamStore, id: ParamId, flat: usize, value: f64) {
    let m = store.get_mut(id);
    *m.iter_mut().nth(flat).expect("coordinate in range") = value;
}
