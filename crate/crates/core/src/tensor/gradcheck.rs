//! Central finite-difference checks of analytic gradients.

use super::{ParamStore, Tensor};

/// Worst relative error seen in one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[i]` with `(f(p + h) - f(p - h)) / 2h` for every
/// element of every tensor in `params`.
pub fn check_params(
    params: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<GroupCheck> {
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (id, grad) in params.ids().zip(analytic) {
        let mut worst = 0f64;
        for i in 0..grad.len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric, floor));
        }
        out.push(GroupCheck {
            name: params.name(id).to_string(),
            checked: grad.len(),
            max_rel_err: worst,
        });
    }
    out
}
