//! Loading multi-sensor time-series datasets.
//!
//! A dataset directory holds `manifest.json` (sensor rows with their absolute
//! ranges), `samples.csv` in long format (`sample_id,sensor,t_index,value`,
//! empty value meaning missing) and an optional `targets.csv`.

mod synth;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, pattern_target, SampleLatents, SynthSpec, SyntheticDataset, BUMP_WIDTH};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TARGETS_FILE: &str = "targets.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Measured,
    Auxiliary,
}

/// A sensor row and the absolute range `[sigma, lambda]` it can report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorChannel {
    pub name: String,
    #[serde(rename = "min")]
    pub sigma: f64,
    #[serde(rename = "max")]
    pub lambda: f64,
    pub kind: SensorKind,
}

impl SensorChannel {
    pub fn measured(name: impl Into<String>, sigma: f64, lambda: f64) -> Self {
        Self {
            name: name.into(),
            sigma,
            lambda,
            kind: SensorKind::Measured,
        }
    }

    pub fn span(&self) -> f64 {
        self.lambda - self.sigma
    }

    pub fn contains(&self, v: f64) -> bool {
        self.sigma <= v && v <= self.lambda
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub time_steps: usize,
    pub target_name: String,
    pub sensors: Vec<SensorChannel>,
}

impl DatasetManifest {
    pub fn new(sensors: Vec<SensorChannel>, time_steps: usize, target_name: impl Into<String>) -> Result<Self> {
        let m = Self {
            version: MANIFEST_VERSION,
            time_steps,
            target_name: target_name.into(),
            sensors,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.sensors.is_empty() {
            return Err(Error::Manifest("no sensors declared".into()));
        }
        if self.time_steps == 0 {
            return Err(Error::Manifest("time_steps must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.sensors {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate sensor name `{}`", s.name)));
            }
            if !(s.sigma.is_finite() && s.lambda.is_finite() && s.lambda > s.sigma) {
                return Err(Error::Manifest(format!(
                    "sensor `{}` needs finite min < max, got [{}, {}]",
                    s.name, s.sigma, s.lambda
                )));
            }
        }
        Ok(())
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn sensor_index(&self, name: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.name == name)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One sample's raw `sensors × time_steps` grid, row-major by sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFrame {
    pub sample_id: String,
    sensors: usize,
    time_steps: usize,
    values: Vec<f64>,
    missing: Vec<bool>,
    pub target: Option<f64>,
}

impl SampleFrame {
    /// A frame with every cell missing.
    pub fn empty(sample_id: impl Into<String>, sensors: usize, time_steps: usize) -> Self {
        Self {
            sample_id: sample_id.into(),
            sensors,
            time_steps,
            values: vec![0.0; sensors * time_steps],
            missing: vec![true; sensors * time_steps],
            target: None,
        }
    }

    /// A fully observed frame from row-major values.
    pub fn from_values(
        sample_id: impl Into<String>,
        sensors: usize,
        time_steps: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != sensors * time_steps {
            return Err(Error::Shape(format!(
                "{} values for a {sensors}x{time_steps} frame",
                values.len()
            )));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            sensors,
            time_steps,
            missing: vec![false; values.len()],
            values,
            target: None,
        })
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.time_steps..(i + 1) * self.time_steps]
    }

    pub fn row_missing(&self, i: usize) -> &[bool] {
        &self.missing[i * self.time_steps..(i + 1) * self.time_steps]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.time_steps + j;
        (!self.missing[k]).then_some(self.values[k])
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let k = i * self.time_steps + j;
        self.values[k] = value;
        self.missing[k] = false;
    }

    pub fn set_missing(&mut self, i: usize, j: usize) {
        let k = i * self.time_steps + j;
        self.values[k] = 0.0;
        self.missing[k] = true;
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|m| **m).count()
    }

    pub fn is_complete(&self) -> bool {
        !self.missing.iter().any(|m| *m)
    }

    /// Checks shape against the manifest and every observed value against its
    /// sensor's absolute range.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.sensors != manifest.num_sensors() || self.time_steps != manifest.time_steps {
            return Err(Error::Shape(format!(
                "sample `{}` is {}x{}, manifest expects {}x{}",
                self.sample_id,
                self.sensors,
                self.time_steps,
                manifest.num_sensors(),
                manifest.time_steps
            )));
        }
        for (i, s) in manifest.sensors.iter().enumerate() {
            for j in 0..self.time_steps {
                if let Some(v) = self.get(i, j) {
                    if !s.contains(v) {
                        return Err(Error::data(
                            format!("sample `{}` sensor `{}` t={j}", self.sample_id, s.name),
                            format!("value {v} outside absolute range [{}, {}]", s.sigma, s.lambda),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Replaces each missing cell with the closest earlier observation in the
/// same row. Cells before a row's first observation take that first
/// observation.
pub fn forward_fill(frame: &SampleFrame) -> Result<SampleFrame> {
    let mut out = frame.clone();
    let t = frame.time_steps;
    for i in 0..frame.sensors {
        let row = i * t..(i + 1) * t;
        let first = frame.missing[row.clone()]
            .iter()
            .position(|m| !m)
            .ok_or_else(|| Error::EmptyRow {
                sample_id: frame.sample_id.clone(),
                sensor: i.to_string(),
            })?;
        let mut last = frame.values[row.start + first];
        for k in row {
            if out.missing[k] {
                out.values[k] = last;
                out.missing[k] = false;
            } else {
                last = out.values[k];
            }
        }
    }
    Ok(out)
}

/// [`forward_fill`] with sensor names from the manifest in error messages.
pub fn forward_fill_named(frame: &SampleFrame, manifest: &DatasetManifest) -> Result<SampleFrame> {
    forward_fill(frame).map_err(|e| match e {
        Error::EmptyRow { sample_id, sensor } => {
            let name = sensor
                .parse::<usize>()
                .ok()
                .and_then(|i| manifest.sensors.get(i))
                .map(|s| s.name.clone())
                .unwrap_or(sensor);
            Error::EmptyRow {
                sample_id,
                sensor: name,
            }
        }
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frames: Vec<SampleFrame>,
}

#[derive(Debug, Deserialize)]
struct CellRecord {
    sample_id: String,
    sensor: String,
    t_index: usize,
    value: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetRecord {
    sample_id: String,
    target: f64,
}

/// Loads a manifest and a long-format samples CSV. Samples appear in order of
/// first occurrence; cells without a CSV row are flagged missing.
pub fn load_dataset(manifest_path: &Path, data_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::from_path(manifest_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(data_path)
        .map_err(|e| Error::csv(data_path, e))?;

    let sensor_index: HashMap<&str, usize> = manifest
        .sensors
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    let (n_sensors, t_steps) = (manifest.num_sensors(), manifest.time_steps);

    let mut order: HashMap<String, usize> = HashMap::new();
    let mut frames: Vec<SampleFrame> = Vec::new();
    let mut seen: Vec<Vec<bool>> = Vec::new();

    for (line, record) in reader.deserialize::<CellRecord>().enumerate() {
        // header is line 1
        let location = || format!("{}:{}", data_path.display(), line + 2);
        let rec = record.map_err(|e| Error::csv(data_path, e))?;
        let &i = sensor_index
            .get(rec.sensor.as_str())
            .ok_or_else(|| Error::data(location(), format!("unknown sensor `{}`", rec.sensor)))?;
        if rec.t_index >= t_steps {
            return Err(Error::data(
                location(),
                format!("t_index {} out of bounds for {t_steps} time steps", rec.t_index),
            ));
        }
        let idx = match order.get(&rec.sample_id) {
            Some(&idx) => idx,
            None => {
                order.insert(rec.sample_id.clone(), frames.len());
                frames.push(SampleFrame::empty(rec.sample_id.clone(), n_sensors, t_steps));
                seen.push(vec![false; n_sensors * t_steps]);
                frames.len() - 1
            }
        };
        let cell = i * t_steps + rec.t_index;
        if std::mem::replace(&mut seen[idx][cell], true) {
            return Err(Error::data(
                location(),
                format!(
                    "duplicate cell ({}, {}, {})",
                    rec.sample_id, rec.sensor, rec.t_index
                ),
            ));
        }
        if let Some(v) = rec.value {
            let s = &manifest.sensors[i];
            if !s.contains(v) {
                return Err(Error::data(
                    location(),
                    format!(
                        "value {v} for sensor `{}` outside absolute range [{}, {}]",
                        s.name, s.sigma, s.lambda
                    ),
                ));
            }
            frames[idx].set(i, rec.t_index, v);
        }
    }
    Ok(Dataset { manifest, frames })
}

impl Dataset {
    /// Loads `manifest.json`, `samples.csv` and, when present, `targets.csv`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut ds = load_dataset(&dir.join(MANIFEST_FILE), &dir.join(SAMPLES_FILE))?;
        let targets = dir.join(TARGETS_FILE);
        if targets.exists() {
            ds.attach_targets(&targets)?;
        }
        Ok(ds)
    }

    pub fn attach_targets(&mut self, path: &Path) -> Result<()> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let index: HashMap<String, usize> = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| (f.sample_id.clone(), i))
            .collect();
        let mut assigned = vec![false; self.frames.len()];
        for (line, record) in reader.deserialize::<TargetRecord>().enumerate() {
            let location = || format!("{}:{}", path.display(), line + 2);
            let rec = record.map_err(|e| Error::csv(path, e))?;
            let &i = index.get(&rec.sample_id).ok_or_else(|| {
                Error::data(location(), format!("target for unknown sample `{}`", rec.sample_id))
            })?;
            if !rec.target.is_finite() {
                return Err(Error::data(location(), "non-finite target"));
            }
            if std::mem::replace(&mut assigned[i], true) {
                return Err(Error::data(
                    location(),
                    format!("duplicate target for `{}`", rec.sample_id),
                ));
            }
            self.frames[i].target = Some(rec.target);
        }
        Ok(())
    }

    /// Writes the three dataset files; the inverse of [`Dataset::load_dir`].
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.write(&dir.join(MANIFEST_FILE))?;
        self.write_samples(&dir.join(SAMPLES_FILE))?;
        self.write_targets(&dir.join(TARGETS_FILE))
    }

    pub fn write_samples(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "sample_id,sensor,t_index,value").map_err(io)?;
        for f in &self.frames {
            for (i, s) in self.manifest.sensors.iter().enumerate() {
                for j in 0..f.time_steps {
                    match f.get(i, j) {
                        Some(v) => writeln!(w, "{},{},{j},{v:?}", f.sample_id, s.name),
                        None => writeln!(w, "{},{},{j},", f.sample_id, s.name),
                    }
                    .map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn write_targets(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for f in &self.frames {
            if let Some(target) = f.target {
                w.serialize(TargetRecord {
                    sample_id: f.sample_id.clone(),
                    target,
                })
                .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Forward-fills every frame.
    pub fn filled(&self) -> Result<Dataset> {
        let frames = self
            .frames
            .iter()
            .map(|f| forward_fill_named(f, &self.manifest))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest: self.manifest.clone(),
            frames,
        })
    }

    pub fn targets(&self) -> Option<Vec<f64>> {
        self.frames.iter().map(|f| f.target).collect()
    }
}
