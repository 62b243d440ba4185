//! Finite-difference verification of reverse-mode gradients.

use crate::rng::Rng;

use super::params::{ParamBinding, ParamSet};
use super::tape::{Tape, Var};
use super::KernelError;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates where analytic and finite-difference gradients agree to
    /// within the arithmetic noise of the central difference itself; their
    /// relative error is unmeasurable at this epsilon and recorded as zero.
    pub coords_noise_limited: usize,
    /// (parameter name, flat coordinate, analytic, finite difference) of the
    /// worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Checks the tape gradient of a scalar-valued composite against central
/// differences, coordinate by coordinate.
///
/// `forward` must be a deterministic function of the parameter values. At
/// most `max_coords_per_tensor` coordinates per tensor are probed, sampled
/// with the given seed so runs are reproducible. Relative error is
/// `|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    eps: f64,
    max_coords_per_tensor: usize,
    seed: u64,
    forward: F,
) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&Tape, &ParamBinding) -> Result<Var, KernelError>,
{
    assert!(eps > 0.0);
    let eval = |params: &ParamSet| -> Result<f64, KernelError> {
        let tape = Tape::new();
        let binding = ParamBinding::bind(&tape, params)?;
        let loss = forward(&tape, &binding)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(KernelError::Shape {
                op: "finite_diff_check",
                detail: "composite must be scalar-valued".into(),
            });
        }
        Ok(v.item())
    };

    // Analytic pass.
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params)?;
    let loss = forward(&tape, &binding)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let analytic = binding.collect(params, &grads);

    // The central difference subtracts two nearly equal values of f, so the
    // quotient carries rounding noise of about |f| * eps_machine / eps plus
    // the O(eps^2) truncation term. Disagreements inside that band are
    // measurement noise, not gradient errors.
    let noise_abs = 10.0 * (loss_value.abs() * (f64::EPSILON / eps) + eps * eps);

    let mut rng = Rng::stream(seed, "gradcheck", &[]);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        coords_noise_limited: 0,
        worst: None,
    };

    let names: Vec<String> = params.names().map(String::from).collect();
    for (p_idx, name) in names.iter().enumerate() {
        let numel = params.get(name).unwrap().numel();
        let coords: Vec<usize> = if numel <= max_coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            rng.shuffle(&mut all);
            let mut picked = all[..max_coords_per_tensor].to_vec();
            picked.sort_unstable();
            picked
        };
        for &c in &coords {
            let keep = params.get(name).unwrap().data()[c];
            params.get_mut(name).unwrap().data_mut()[c] = keep + eps;
            let hi = eval(params)?;
            params.get_mut(name).unwrap().data_mut()[c] = keep - eps;
            let lo = eval(params)?;
            params.get_mut(name).unwrap().data_mut()[c] = keep;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(KernelError::NonFinite { op: "finite_diff_check" });
            }
            let g_fd = (hi - lo) / (2.0 * eps);
            let g_ad = analytic[p_idx].1.data()[c];
            report.coords_checked += 1;
            if (g_ad - g_fd).abs() <= noise_abs {
                report.coords_noise_limited += 1;
                continue;
            }
            let rel = (g_ad - g_fd).abs() / f64::max(1e-12, g_ad.abs() + g_fd.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), c, g_ad, g_fd));
            }
        }
    }
    Ok(report)
}
