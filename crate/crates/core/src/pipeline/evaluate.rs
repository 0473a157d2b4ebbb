use std::time::Instant;

use crate::error::Result;
use crate::metrics::MetricReport;
use crate::regnet::{warp_labels, warp_volume, DisplacementField, LabelVolume, RegNet, Registration, VelocityField, Volume};
use crate::scalar::Real;
use crate::synthdata::RegistrationPair;

/// Outputs of registering one pair.
#[derive(Clone, Debug)]
pub struct PairRegistration<T> {
    pub registration: Registration<T>,
    pub warped: Volume<T>,
    pub warped_labels: LabelVolume,
    /// Wall time of the network forward pass and integration.
    pub forward_s: f64,
}

pub fn register_pair<T: Real>(net: &RegNet<T>, pair: &RegistrationPair<T>) -> Result<PairRegistration<T>> {
    let t = Instant::now();
    let registration = net.register(&pair.moving, &pair.fixed)?;
    let forward_s = t.elapsed().as_secs_f64();
    let warped = warp_volume(&pair.moving, &registration.displacement)?.with_id(pair.moving.id.clone());
    let (warped_labels, _) = warp_labels(&pair.moving_labels, &registration.displacement)?;
    Ok(PairRegistration {
        registration,
        warped,
        warped_labels,
        forward_s,
    })
}

/// Register with the identity map (the undeformed baseline).
pub fn identity_registration<T: Real>(pair: &RegistrationPair<T>) -> PairRegistration<T> {
    let dims = pair.moving.dims();
    PairRegistration {
        registration: Registration {
            velocity: VelocityField::zeros(dims),
            displacement: DisplacementField::zeros(dims),
        },
        warped: pair.moving.clone(),
        warped_labels: pair.moving_labels.clone(),
        forward_s: 0.0,
    }
}

/// Metrics of a precomputed displacement (e.g. loaded from disk).
pub fn evaluate_field<T: Real>(pair: &RegistrationPair<T>, field: &DisplacementField<T>, param_count: usize, wall_time_s: f64) -> Result<MetricReport> {
    let (warped_labels, _) = warp_labels(&pair.moving_labels, field)?;
    MetricReport::compute(pair.moving.id.clone(), &warped_labels, &pair.fixed_labels, field, param_count, wall_time_s)
}

/// Metrics per pair; `net = None` evaluates the identity map.
pub fn evaluate_pairs<T: Real>(net: Option<&RegNet<T>>, pairs: &[RegistrationPair<T>]) -> Result<Vec<MetricReport>> {
    pairs
        .iter()
        .map(|pair| {
            let (r, params) = match net {
                Some(n) => (register_pair(n, pair)?, n.param_count()),
                None => (identity_registration(pair), 0),
            };
            MetricReport::compute(
                pair.moving.id.clone(),
                &r.warped_labels,
                &pair.fixed_labels,
                &r.registration.displacement,
                params,
                r.forward_s,
            )
        })
        .collect()
}
