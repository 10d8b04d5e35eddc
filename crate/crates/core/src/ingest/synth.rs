//! Seeded synthetic stand-in for a crop-season sensor dataset.
//!
//! Every sensor row carries one Gaussian bump on top of a flat baseline, all
//! in normalized units, at a random position. The target depends on bump
//! heights and a cross-row interaction but not on baselines or positions, so
//! reading it off requires recognising the pattern rather than weighting
//! fixed cells.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, SampleFrame, SensorChannel};
use crate::error::{Error, Result};

/// Bump standard deviation as a fraction of the horizon.
pub const BUMP_WIDTH: f64 = 0.06;

/// Target noise standard deviation per unit of `SynthSpec::noise`.
const TARGET_NOISE_SCALE: f64 = 10.0;

const AMPLITUDE: (f64, f64) = (0.2, 0.7);
const CENTER: (f64, f64) = (0.15, 0.85);
const BASELINE: (f64, f64) = (0.05, 0.2);

/// Named weather channels with plausible absolute ranges; rows past these
/// get generic names.
const WEATHER: [(&str, f64, f64); 7] = [
    ("ADNI", 0.0, 1000.0),
    ("AP", 0.0, 50.0),
    ("ARH", 0.0, 100.0),
    ("MDNI", 0.0, 1200.0),
    ("MaxSur", -10.0, 50.0),
    ("MinSur", -20.0, 40.0),
    ("AvgSur", -15.0, 45.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub sensors: usize,
    pub time_steps: usize,
    pub samples: usize,
    /// Per-cell probability of being dropped, in `[0, 1)`.
    pub missing_rate: f64,
    /// Reading noise std in normalized units; target noise is
    /// `noise * 10` in target units.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sensors: 7,
            time_steps: 214,
            samples: 2000,
            missing_rate: 0.0,
            noise: 0.0,
        }
    }
}

/// Latent pattern parameters of one sample, one entry per sensor row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLatents {
    pub baseline: Vec<f64>,
    pub amplitude: Vec<f64>,
    /// Bump centre as a fraction of the horizon.
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub latents: Vec<SampleLatents>,
}

/// Noise-free target of a sample:
///
/// ```text
/// y = 50 + 60·(mean(a) − 0.45) + 80·(a₀ − 0.45)·(a₁ − 0.45)
/// ```
///
/// with `a` the bump amplitudes. With a single row, `a₁` is `a₀`. Bump
/// centres do not enter the target; they only move the pattern around.
pub fn pattern_target(latents: &SampleLatents) -> f64 {
    let a = &latents.amplitude;
    let rows = a.len();
    let mean = a.iter().sum::<f64>() / rows as f64;
    let a0 = a[0];
    let a1 = a[1 % rows];
    50.0 + 60.0 * (mean - 0.45) + 80.0 * (a0 - 0.45) * (a1 - 0.45)
}

fn synthetic_manifest(sensors: usize, time_steps: usize) -> Result<DatasetManifest> {
    let channels = (0..sensors)
        .map(|i| match WEATHER.get(i) {
            Some(&(name, lo, hi)) => SensorChannel::measured(name, lo, hi),
            None => SensorChannel::measured(format!("s{i}"), 0.0, 100.0),
        })
        .collect();
    DatasetManifest::new(channels, time_steps, "yield")
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.sensors == 0 || spec.samples == 0 || spec.time_steps == 0 {
        return Err(Error::Config(
            "synthetic data needs at least one sensor, sample and time step".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.missing_rate) {
        return Err(Error::Config(format!(
            "missing rate must be in [0, 1), got {}",
            spec.missing_rate
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let manifest = synthetic_manifest(spec.sensors, spec.time_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reading_noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let target_noise = Normal::new(0.0, spec.noise * TARGET_NOISE_SCALE).expect("validated noise");
    let (rows, t_steps) = (spec.sensors, spec.time_steps);
    let horizon = (t_steps.max(2) - 1) as f64;
    let id_width = (spec.samples - 1).to_string().len();

    let mut frames = Vec::with_capacity(spec.samples);
    let mut latents = Vec::with_capacity(spec.samples);
    for n in 0..spec.samples {
        let lat = SampleLatents {
            baseline: (0..rows).map(|_| uniform(&mut rng, BASELINE)).collect(),
            amplitude: (0..rows).map(|_| uniform(&mut rng, AMPLITUDE)).collect(),
            center: (0..rows).map(|_| uniform(&mut rng, CENTER)).collect(),
        };
        let mut frame = SampleFrame::empty(format!("syn{n:0id_width$}"), rows, t_steps);
        for (i, sensor) in manifest.sensors.iter().enumerate() {
            let keep = rng.gen_range(0..t_steps);
            for j in 0..t_steps {
                let t = j as f64 / horizon;
                let z = (t - lat.center[i]) / BUMP_WIDTH;
                let mut u = lat.baseline[i] + lat.amplitude[i] * (-0.5 * z * z).exp();
                if spec.noise > 0.0 {
                    u += reading_noise.sample(&mut rng);
                }
                let raw = (sensor.sigma + u.clamp(0.0, 1.0) * sensor.span()).clamp(sensor.sigma, sensor.lambda);
                let dropped = spec.missing_rate > 0.0 && j != keep && rng.gen::<f64>() < spec.missing_rate;
                if !dropped {
                    frame.set(i, j, raw);
                }
            }
        }
        let mut y = pattern_target(&lat);
        if spec.noise > 0.0 {
            y += target_noise.sample(&mut rng);
        }
        frame.target = Some(y);
        frames.push(frame);
        latents.push(lat);
    }
    Ok(SyntheticDataset {
        dataset: Dataset { manifest, frames },
        latents,
    })
}
