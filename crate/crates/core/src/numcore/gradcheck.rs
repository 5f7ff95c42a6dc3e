use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::params::ParamStore;
use crate::error::Result;

/// Coordinates below this magnitude are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `loss` returns the scalar loss and the analytic gradients for a parameter
/// snapshot. At most `max_coords` coordinates per parameter are probed,
/// chosen by a seeded shuffle. The error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRADCHECK_FLOOR)`.
pub fn finite_diff_check<F>(
    loss: F,
    params: &ParamStore,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Array>)>,
{
    let (_, grads) = loss(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(analytic) = grads.get(&name) else { continue };
        let n = params.expect(&name).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > max_coords {
            coords.shuffle(&mut rng);
            coords.truncate(max_coords);
        }
        for i in coords {
            let orig = params.expect(&name).data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let plus = loss(&work)?.0;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let minus = loss(&work)?.0;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
