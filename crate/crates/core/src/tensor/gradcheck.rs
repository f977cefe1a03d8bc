use super::{ParamStore, Result, Tensor, TensorError};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid(format!("step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_difference", node: i });
        }
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub parameter: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Compares analytic gradients of `loss` against central differences for
/// every parameter in `params` that appears in the analytic gradient map.
///
/// `loss` returns the loss value and, when asked, the analytic gradients.
/// At most `max_coords` coordinates per parameter are probed (evenly strided).
pub fn grad_check<F>(
    params: &ParamStore,
    loss: F,
    h: f64,
    tolerance: f64,
    max_coords: usize,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&ParamStore) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)>,
{
    let (_, analytic) = loss(params)?;
    let mut reports = Vec::new();
    let mut probe = params.clone();
    for (name, g_ad) in &analytic {
        let n = g_ad.numel();
        let stride = (n / max_coords.max(1)).max(1);
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(stride) {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let up = loss(&probe)?.0;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let down = loss(&probe)?.0;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(g_ad.data()[i], fd));
        }
        reports.push(GradCheckReport { parameter: name.clone(), max_relative_error: worst, tolerance });
    }
    Ok(reports)
}
