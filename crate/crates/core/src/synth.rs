//! Synthetic street grids, ground-truth pollution fields and vehicle traces.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_distance, GeoPoint};
use crate::graph::{Segment, StreetNetwork};
use crate::ingest::{AggregationConfig, MeasurementRecord, ObservationMatrix};
use crate::numcore::Tensor2;

const DAY_S: f64 = 86_400.0;

/// 2018-05-01T00:00:00Z.
pub const DEFAULT_START: i64 = 1_525_132_800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Grid center.
    pub origin: GeoPoint,
    /// Number of north-south streets.
    pub grid_w: usize,
    /// Number of east-west streets.
    pub grid_h: usize,
    pub block_m: f64,
    pub n_sources: usize,
    pub plume_scale_m: f64,
    pub base_level: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub diurnal_strength: f64,
    pub noise_sd: f64,
    pub n_vehicles: usize,
    pub days: u32,
    pub seed: u64,
    pub start: i64,
    pub speed_mps: f64,
    pub record_interval_s: i64,
    /// Chance that a vehicle is out measuring during any given hour.
    pub active_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            origin: GeoPoint::new(51.2194, 4.4025).expect("valid origin"),
            grid_w: 12,
            grid_h: 12,
            block_m: 100.0,
            n_sources: 12,
            plume_scale_m: 60.0,
            base_level: 20.0,
            amplitude_min: 20.0,
            amplitude_max: 60.0,
            diurnal_strength: 0.5,
            noise_sd: 3.0,
            n_vehicles: 24,
            days: 30,
            seed: 0,
            start: DEFAULT_START,
            speed_mps: 8.0,
            record_interval_s: 60,
            active_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    /// Small grid with a handful of vehicles over three days.
    pub fn desk_scale(seed: u64) -> Self {
        SynthConfig {
            grid_w: 12,
            grid_h: 12,
            n_vehicles: 4,
            days: 3,
            seed,
            ..SynthConfig::default()
        }
    }

    /// City-sized grid, 24 vehicles over 30 days at a sub-percent known-entry density.
    pub fn paper_scale(seed: u64) -> Self {
        SynthConfig {
            grid_w: 76,
            grid_h: 76,
            n_sources: 500,
            n_vehicles: 24,
            days: 30,
            active_fraction: 0.02,
            seed,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synth config: {m}")));
        if self.grid_w < 2 || self.grid_h < 2 {
            return bad("grid needs at least 2 streets each way");
        }
        for (name, v) in [
            ("block_m", self.block_m),
            ("plume_scale_m", self.plume_scale_m),
            ("speed_mps", self.speed_mps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("base_level", self.base_level),
            ("amplitude_min", self.amplitude_min),
            ("diurnal_strength", self.diurnal_strength),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.amplitude_max >= self.amplitude_min && self.amplitude_max.is_finite()) {
            return bad("amplitude range is inverted");
        }
        if !(0.0..=1.0).contains(&self.active_fraction) {
            return bad("active_fraction must lie in [0, 1]");
        }
        if self.days == 0 || self.record_interval_s <= 0 {
            return bad("days and record interval must be positive");
        }
        Ok(())
    }

    pub fn period_end(&self) -> i64 {
        self.start + i64::from(self.days) * 86_400
    }

    /// Aggregation window matching the simulated period.
    pub fn aggregation(&self) -> AggregationConfig {
        AggregationConfig::new(self.start, self.period_end())
    }

    fn intersection(&self, col: usize, row: usize) -> GeoPoint {
        let east = (col as f64 - (self.grid_w - 1) as f64 / 2.0) * self.block_m;
        let north = (row as f64 - (self.grid_h - 1) as f64 / 2.0) * self.block_m;
        self.origin
            .offset(north, east)
            .expect("grid stays within coordinate range")
    }
}

/// Rectangular street grid: one polyline per street, east-west streets first.
pub fn generate_network(config: &SynthConfig) -> Result<StreetNetwork> {
    config.validate()?;
    let mut segments = Vec::with_capacity(config.grid_w + config.grid_h);
    for row in 0..config.grid_h {
        segments.push(Segment {
            id: segments.len() as i64,
            points: (0..config.grid_w).map(|c| config.intersection(c, row)).collect(),
        });
    }
    for col in 0..config.grid_w {
        segments.push(Segment {
            id: segments.len() as i64,
            points: (0..config.grid_h).map(|r| config.intersection(col, r)).collect(),
        });
    }
    Ok(StreetNetwork { segments })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub position: GeoPoint,
    pub amplitude: f64,
    /// Diurnal phase in radians.
    pub phase: f64,
}

/// Sum of Gaussian plumes with a daily modulation, clipped at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthField {
    pub base_level: f64,
    pub plume_scale_m: f64,
    pub diurnal_strength: f64,
    pub sources: Vec<Source>,
}

impl GroundTruthField {
    /// Sources placed uniformly over the grid's extent.
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f1e1d);
        let half_w = (config.grid_w - 1) as f64 / 2.0 * config.block_m;
        let half_h = (config.grid_h - 1) as f64 / 2.0 * config.block_m;
        let sources = (0..config.n_sources)
            .map(|_| {
                let east = rng.random_range(-half_w..=half_w);
                let north = rng.random_range(-half_h..=half_h);
                let amplitude = if config.amplitude_max > config.amplitude_min {
                    rng.random_range(config.amplitude_min..config.amplitude_max)
                } else {
                    config.amplitude_min
                };
                Ok(Source {
                    position: config.origin.offset(north, east)?,
                    amplitude,
                    phase: rng.random_range(0.0..2.0 * PI),
                })
            })
            .collect::<Result<_>>()?;
        Ok(GroundTruthField {
            base_level: config.base_level,
            plume_scale_m: config.plume_scale_m,
            diurnal_strength: config.diurnal_strength,
            sources,
        })
    }

    /// Concentration at `p` and epoch second `t`.
    pub fn value(&self, p: GeoPoint, t: f64) -> f64 {
        let two_l2 = 2.0 * self.plume_scale_m * self.plume_scale_m;
        let plumes: f64 = self
            .sources
            .iter()
            .map(|s| {
                let d = haversine_distance(p, s.position);
                let daily = 1.0 + self.diurnal_strength * (2.0 * PI * t / DAY_S + s.phase).sin();
                s.amplitude * (-d * d / two_l2).exp() * daily
            })
            .sum();
        (self.base_level + plumes).max(0.0)
    }

    /// Noise-free values at every location and slot center.
    pub fn truth_matrix(&self, locations: &[GeoPoint], slot_times: &[i64], slot_duration: i64) -> Tensor2 {
        let half = slot_duration as f64 / 2.0;
        Tensor2::from_fn(locations.len(), slot_times.len(), |i, j| {
            self.value(locations[i], slot_times[j] as f64 + half)
        })
    }

    /// [`truth_matrix`](Self::truth_matrix) for the cells of `obs`, assuming hourly slots
    /// unless the slot spacing says otherwise.
    pub fn truth_for(&self, obs: &ObservationMatrix) -> Tensor2 {
        let times = obs.slot_times();
        let step = if times.len() > 1 { times[1] - times[0] } else { 3600 };
        self.truth_matrix(obs.locations(), times, step)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "field",
            detail: e.to_string(),
        })?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Format {
            what: "field",
            detail: e.to_string(),
        })
    }
}

/// Random walks over grid intersections, one reading per `record_interval_s`
/// while a vehicle is active.
pub fn simulate_vehicles(field: &GroundTruthField, config: &SynthConfig) -> Result<Vec<MeasurementRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e41_c1e5);
    let noise = Normal::new(0.0, config.noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let (w, h) = (config.grid_w as i64, config.grid_h as i64);
    let edge_s = config.block_m / config.speed_mps;
    let hours = i64::from(config.days) * 24;
    let mut records = Vec::new();

    for _ in 0..config.n_vehicles {
        let mut at = (rng.random_range(0..w), rng.random_range(0..h));
        let mut prev: Option<(i64, i64)> = None;
        let mut next = at;
        // seconds traveled along the edge at -> next; starting at edge_s forces a first pick
        let mut progress = edge_s;
        for hour in 0..hours {
            let active = rng.random_bool(config.active_fraction);
            let mut tick = 0;
            while tick < 3600 {
                if active {
                    let f = progress / edge_s;
                    let a = config.intersection(at.0 as usize, at.1 as usize);
                    let b = config.intersection(next.0 as usize, next.1 as usize);
                    let pos = GeoPoint::new(a.lat() + f * (b.lat() - a.lat()), a.lon() + f * (b.lon() - a.lon()))?;
                    let ts = config.start + hour * 3600 + tick;
                    let value = (field.value(pos, ts as f64) + noise.sample(&mut rng)).max(0.0);
                    records.push(MeasurementRecord {
                        timestamp: ts,
                        position: pos,
                        value,
                    });
                }
                let dt = config.record_interval_s.min(3600 - tick);
                tick += dt;
                progress += dt as f64;
                while progress >= edge_s {
                    progress -= edge_s;
                    let here = next;
                    let options: Vec<(i64, i64)> = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .map(|(dx, dy)| (here.0 + dx, here.1 + dy))
                        .filter(|&(x, y)| (0..w).contains(&x) && (0..h).contains(&y))
                        .filter(|&p| Some(p) != prev)
                        .collect();
                    prev = Some(here);
                    at = here;
                    next = options[rng.random_range(0..options.len())];
                }
            }
        }
    }
    records.sort_by_key(|r| r.timestamp);
    Ok(records)
}

/// Everything a synthetic run produces.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub network: StreetNetwork,
    pub field: GroundTruthField,
    pub records: Vec<MeasurementRecord>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    let network = generate_network(config)?;
    let field = GroundTruthField::generate(config)?;
    let records = simulate_vehicles(&field, config)?;
    Ok(SynthOutput {
        network,
        field,
        records,
    })
}
