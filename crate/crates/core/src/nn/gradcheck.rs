//! Central finite differences against the tape's reverse pass.

use rand::seq::SliceRandom;
use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Denominator floor so that coordinates with vanishing gradient do not
/// turn rounding noise into large relative errors.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `loss` over at least `min_coords` coordinates drawn from `params`.
///
/// Every listed parameter contributes at least one coordinate so that a
/// fault in any single tensor is visible. `fault` rescales the analytic
/// gradient of one tensor and exists to prove that the check can fail.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    loss: F,
    eps: f64,
    min_coords: usize,
    rng: &mut impl Rng,
    fault: Option<(ParamId, f64)>,
) -> GradCheckReport
where
    F: Fn(&ParamStore, &mut Tape) -> Var,
{
    assert!((1e-6..=1e-3).contains(&eps), "eps {eps} outside [1e-6, 1e-3]");
    let mut tape = Tape::new();
    let out = loss(store, &mut tape);
    let grads = tape.backward(out);
    let mut analytic: Vec<(ParamId, super::Mat)> = grads
        .params(&tape)
        .into_iter()
        .filter(|(id, _)| params.contains(id))
        .collect();
    if let Some((fid, s)) = fault {
        for (id, g) in &mut analytic {
            if *id == fid {
                g.scale_assign(s);
            }
        }
    }

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for &id in params {
        let n = store.get(id).len();
        let take = n.min(2);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        coords.extend(idx.into_iter().take(take).map(|i| (id, i)));
    }
    let total: usize = params.iter().map(|&id| store.get(id).len()).sum();
    while coords.len() < min_coords.min(total) {
        let id = params[rng.gen_range(0..params.len())];
        let i = rng.gen_range(0..store.get(id).len());
        if !coords.contains(&(id, i)) {
            coords.push((id, i));
        }
    }

    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(s, &mut t);
        t.value(v).data[0]
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: coords.len(), worst: None };
    for (id, i) in coords {
        let orig = store.get(id).data[i];
        store.get_mut(id).data[i] = orig + eps;
        let fp = eval(store);
        store.get_mut(id).data[i] = orig - eps;
        let fm = eval(store);
        store.get_mut(id).data[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map_or(0.0, |(_, g)| g.data[i]);
        let e = relative_error(a, numeric);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    report
}
