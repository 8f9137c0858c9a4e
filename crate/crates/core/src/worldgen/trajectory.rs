use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Pose;
use crate::error::{Error, Result};
use crate::rng;

/// Noisy loop laps around a closed reference route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    /// Closed loop; the last waypoint connects back to the first.
    pub waypoints: Vec<[f64; 2]>,
    pub frame_spacing: f64,
    pub lateral_offset_step: f64,
    /// Number of distinct lateral offsets cycled through lap by lap.
    pub offset_variants: usize,
    pub num_laps: usize,
    pub noise_std: f64,
    pub camera_height: f64,
    pub rng_seed: u64,
}

impl TrajectoryParams {
    /// One noise-free lap exactly on the reference route.
    pub fn reference(&self) -> TrajectoryParams {
        TrajectoryParams { num_laps: 1, noise_std: 0.0, lateral_offset_step: 0.0, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.frame_spacing > 0.0) {
            return Err(Error::Config(format!("frame_spacing must be > 0, got {}", self.frame_spacing)));
        }
        if self.num_laps == 0 {
            return Err(Error::Config("num_laps must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.offset_variants == 0 {
            return Err(Error::Config("offset_variants must be >= 1".into()));
        }
        Ok(())
    }
}

/// A pose plus where it came from on the reference loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySample {
    pub pose: Pose,
    pub lap: usize,
    /// Arc length of the un-displaced reference point within its lap.
    pub arc_length: f64,
}

/// Signed offset multiplier for lap `k`: 0, +1, -1, +2, -2, ...
fn offset_units(lap: usize, variants: usize) -> f64 {
    let m = lap % variants;
    if m == 0 {
        0.0
    } else if m % 2 == 1 {
        m.div_ceil(2) as f64
    } else {
        -((m / 2) as f64)
    }
}

struct Loop {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl Loop {
    fn new(waypoints: &[[f64; 2]]) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::DegenerateLoop(format!("{} waypoints", waypoints.len())));
        }
        let mut points = waypoints.to_vec();
        points.push(waypoints[0]);
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let len = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + len);
        }
        let total = *cumulative.last().unwrap();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateLoop(format!("loop length {total}")));
        }
        Ok(Loop { points, cumulative })
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Point and unit tangent at arc length `s`; at a vertex the outgoing segment wins.
    fn at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let seg = self
            .cumulative
            .windows(2)
            .position(|c| s < c[1] && c[1] > c[0])
            .unwrap_or_else(|| {
                // s at the very end: use the last non-empty segment
                self.cumulative.windows(2).rposition(|c| c[1] > c[0]).unwrap()
            });
        let (a, b) = (self.points[seg], self.points[seg + 1]);
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let f = (s - self.cumulative[seg]) / len;
        let tangent = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        ([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])], tangent)
    }
}

/// Samples every lap with its lap index and reference arc length.
pub fn trajectory_samples(params: &TrajectoryParams) -> Result<Vec<TrajectorySample>> {
    params.validate()?;
    let route = Loop::new(&params.waypoints)?;
    let length = route.length();
    let per_lap = ((length / params.frame_spacing) * (1.0 + 1e-12)).floor() as usize;
    let per_lap = per_lap.max(1);
    let mut rng = rng::stream(params.rng_seed, rng::TRAJECTORY_NOISE, 0);
    let noise = Normal::new(0.0, params.noise_std).expect("noise_std validated");

    let mut samples = Vec::with_capacity(per_lap * params.num_laps);
    for lap in 0..params.num_laps {
        let lap_offset = offset_units(lap, params.offset_variants) * params.lateral_offset_step;
        for i in 0..per_lap {
            let s = i as f64 * params.frame_spacing;
            let (p, t) = route.at(s);
            let jitter = if params.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let lateral = lap_offset + jitter;
            // left normal of the direction of travel
            let n = [-t[1], t[0]];
            let position = [p[0] + lateral * n[0], p[1] + lateral * n[1], params.camera_height];
            samples.push(TrajectorySample {
                pose: Pose::new(position, t[1].atan2(t[0])),
                lap,
                arc_length: s,
            });
        }
    }
    Ok(samples)
}

/// Poses every `frame_spacing` meters of arc length for `num_laps` laps.
pub fn generate_trajectory(params: &TrajectoryParams) -> Result<Vec<Pose>> {
    Ok(trajectory_samples(params)?.into_iter().map(|s| s.pose).collect())
}
