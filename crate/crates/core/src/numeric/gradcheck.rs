use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, ParamStore};
use crate::error::{D2kError, Result};

/// Upper bound on the number of coordinates checked per call.
pub const MAX_CHECKED_COORDS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients to central finite differences.
///
/// `loss_fn` must be deterministic and return the loss and its analytic
/// gradients at the given parameters. Coordinates are sampled per parameter
/// tensor (seeded), favouring coordinates with a nonzero analytic gradient,
/// and capped at [`MAX_CHECKED_COORDS`] overall.
pub fn grad_check<F>(params: &ParamStore, loss_fn: F, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (loss0, analytic) = loss_fn(params)?;
    if !loss0.is_finite() {
        return Err(D2kError::GradCheck(format!("non-finite loss {loss0}")));
    }
    let coords = pick_coords(params, &analytic, seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (id, i) in coords {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + eps;
        let (fp, _) = loss_fn(&work)?;
        work.get_mut(id).data_mut()[i] = orig - eps;
        let (fm, _) = loss_fn(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        let g_fd = (fp - fm) / (2.0 * eps);
        let g_ad = analytic.get(id).data()[i];
        if !g_fd.is_finite() || !g_ad.is_finite() {
            return Err(D2kError::GradCheck(format!(
                "non-finite gradient at {}[{i}]: analytic {g_ad}, numeric {g_fd}",
                params.name(id)
            )));
        }
        let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params.name(id).to_string(), i, g_ad, g_fd));
        }
    }
    Ok(report)
}

fn pick_coords(params: &ParamStore, grads: &Gradients, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = params.num_scalars();
    if total <= MAX_CHECKED_COORDS {
        return params
            .iter()
            .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
            .collect();
    }
    let per_param = (MAX_CHECKED_COORDS / params.len().max(1)).max(1);
    let mut out = Vec::new();
    for (id, _, t) in params.iter() {
        let g = grads.get(id).data();
        let nonzero: Vec<usize> = (0..t.len()).filter(|&i| g[i] != 0.0).collect();
        // three quarters from active coordinates, the rest uniform
        let want_active = (per_param * 3 / 4).max(1).min(nonzero.len());
        for j in sample(&mut rng, nonzero.len(), want_active) {
            out.push((id, nonzero[j]));
        }
        let want_any = (per_param - want_active).min(t.len());
        for i in sample(&mut rng, t.len(), want_any) {
            out.push((id, i));
        }
    }
    out.truncate(MAX_CHECKED_COORDS);
    out
}
