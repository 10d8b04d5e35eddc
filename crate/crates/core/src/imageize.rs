//! Sensors-to-image conversion.
//!
//! Each sensor row is min-max scaled by its absolute range from the manifest:
//! `x̄ = (x − σ) / (λ − σ)`. Rows are scaled independently of each other and
//! of other samples, which keeps the mapping invertible.

use crate::error::{Error, Result};
use crate::ingest::{DatasetManifest, SampleFrame};

/// Slack allowed outside `[0, 1]` when inverting a tensor.
pub const RANGE_TOLERANCE: f64 = 1e-9;

/// A `channels × sensors × time_steps` grid in `[0, 1]`; every channel is a
/// copy of the same normalized plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub sample_id: String,
    channels: usize,
    sensors: usize,
    time_steps: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn from_parts(
        sample_id: impl Into<String>,
        channels: usize,
        sensors: usize,
        time_steps: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || data.len() != channels * sensors * time_steps {
            return Err(Error::Shape(format!(
                "{} elements for a {channels}x{sensors}x{time_steps} image",
                data.len()
            )));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            channels,
            sensors,
            time_steps,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.sensors, self.time_steps]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let len = self.sensors * self.time_steps;
        &self.data[c * len..(c + 1) * len]
    }

    /// Appends the image to a batch buffer in the network's element type.
    pub fn extend_batch<T: crate::tensor::Scalar>(&self, batch: &mut Vec<T>) {
        batch.extend(self.data.iter().map(|v| T::from_f64_lossy(*v)));
    }
}

pub fn normalize(frame: &SampleFrame, manifest: &DatasetManifest, channels: usize) -> Result<ImageTensor> {
    if channels == 0 {
        return Err(Error::Config("channels must be at least 1".into()));
    }
    if !frame.is_complete() {
        return Err(Error::Unfilled(frame.sample_id.clone()));
    }
    if frame.sensors() != manifest.num_sensors() || frame.time_steps() != manifest.time_steps {
        return Err(Error::Shape(format!(
            "sample `{}` is {}x{}, manifest expects {}x{}",
            frame.sample_id,
            frame.sensors(),
            frame.time_steps(),
            manifest.num_sensors(),
            manifest.time_steps
        )));
    }
    let mut plane = Vec::with_capacity(frame.values().len());
    for (i, s) in manifest.sensors.iter().enumerate() {
        let span = s.span();
        for &x in frame.row(i) {
            if !s.contains(x) {
                return Err(Error::data(
                    format!("sample `{}` sensor `{}`", frame.sample_id, s.name),
                    format!("value {x} outside absolute range [{}, {}]", s.sigma, s.lambda),
                ));
            }
            // contains() bounds the ratio to [0, 1] up to rounding
            plane.push(((x - s.sigma) / span).clamp(0.0, 1.0));
        }
    }
    let mut data = Vec::with_capacity(plane.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    ImageTensor::from_parts(
        frame.sample_id.clone(),
        channels,
        frame.sensors(),
        frame.time_steps(),
        data,
    )
}

/// Inverts [`normalize`] from channel 0.
pub fn denormalize(tensor: &ImageTensor, manifest: &DatasetManifest) -> Result<SampleFrame> {
    if tensor.sensors != manifest.num_sensors() || tensor.time_steps != manifest.time_steps {
        return Err(Error::Shape(format!(
            "image is {}x{}, manifest expects {}x{}",
            tensor.sensors,
            tensor.time_steps,
            manifest.num_sensors(),
            manifest.time_steps
        )));
    }
    if let Some(bad) = tensor
        .data
        .iter()
        .find(|v| !(**v >= -RANGE_TOLERANCE && **v <= 1.0 + RANGE_TOLERANCE))
    {
        return Err(Error::CorruptTensor(format!(
            "sample `{}` has element {bad} outside [0, 1]",
            tensor.sample_id
        )));
    }
    let plane = tensor.plane(0);
    let mut values = Vec::with_capacity(plane.len());
    for (i, s) in manifest.sensors.iter().enumerate() {
        let row = &plane[i * tensor.time_steps..(i + 1) * tensor.time_steps];
        values.extend(row.iter().map(|u| u * s.span() + s.sigma));
    }
    SampleFrame::from_values(tensor.sample_id.clone(), tensor.sensors, tensor.time_steps, values)
}
