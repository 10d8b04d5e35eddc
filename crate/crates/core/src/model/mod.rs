//! Residual convolutional regressor with an adaptive concat pooling head.
//!
//! ```text
//! input [N,C,H,W]
//!   → stem conv3x3 → relu
//!   → residual blocks (conv3x3 → relu → conv3x3, + shortcut, relu)
//!   → [global avg ‖ global max] per channel → [N, 2C]
//!   → linear → relu → linear → [N, 1]
//! ```
//!
//! There is no normalization layer anywhere, so each sample's output depends
//! only on that sample.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use checkpoint::{
    load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, CheckpointManifest, InputSignature,
    ParamEntry, CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Tiny,
    Small,
    Resmini,
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ArchKind::Tiny),
            "small" => Ok(ArchKind::Small),
            "resmini" => Ok(ArchKind::Resmini),
            other => Err(Error::Config(format!(
                "unknown arch `{other}` (expected tiny, small or resmini)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub arch: ArchKind,
    pub channels_in: usize,
    pub stem_channels: usize,
    /// (rows, time) stride of the stem; the time axis is usually much longer.
    pub stem_stride: (usize, usize),
    pub blocks: Vec<BlockSpec>,
    pub head_hidden: usize,
}

pub const DEFAULT_HEAD_HIDDEN: usize = 128;

impl ArchConfig {
    pub fn preset(arch: ArchKind, channels_in: usize) -> Self {
        let b = |channels, stride| BlockSpec { channels, stride };
        let (stem_channels, stem_stride, blocks) = match arch {
            ArchKind::Tiny => (8, (2, 2), vec![b(8, 2), b(16, 2)]),
            ArchKind::Small => (16, (1, 2), vec![b(16, 1), b(32, 2), b(32, 1), b(64, 2)]),
            ArchKind::Resmini => (
                16,
                (1, 1),
                vec![
                    b(16, 1),
                    b(16, 1),
                    b(32, 2),
                    b(32, 1),
                    b(64, 2),
                    b(64, 1),
                    b(64, 1),
                    b(64, 1),
                ],
            ),
        };
        Self {
            arch,
            channels_in,
            stem_channels,
            stem_stride,
            blocks,
            head_hidden: DEFAULT_HEAD_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("architecture needs at least one block".into()));
        }
        let widths = [self.channels_in, self.stem_channels, self.head_hidden];
        if widths.iter().chain(self.blocks.iter().map(|b| &b.channels)).any(|&c| c == 0) {
            return Err(Error::Config("all channel counts must be positive".into()));
        }
        if self.stem_stride.0 == 0 || self.stem_stride.1 == 0 || self.blocks.iter().any(|b| b.stride == 0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.channels)
    }

    /// Smallest accepted height and width: the product of block strides, so
    /// every downsampling stage still sees at least one full stride cell.
    pub fn min_spatial(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionNet<T: Scalar = f32> {
    config: ArchConfig,
    params: Vec<NamedParam<T>>,
}

struct ParamPlan {
    name: String,
    shape: Vec<usize>,
    fan_in: Option<usize>,
}

fn plan(config: &ArchConfig) -> Vec<ParamPlan> {
    let mut out = Vec::new();
    let mut conv = |name: String, k: usize, c: usize, size: usize| {
        let fan_in = c * size * size;
        out.push(ParamPlan {
            name: format!("{name}.weight"),
            shape: vec![k, c, size, size],
            fan_in: Some(fan_in),
        });
        out.push(ParamPlan {
            name: format!("{name}.bias"),
            shape: vec![k],
            fan_in: None,
        });
    };
    conv("stem".into(), config.stem_channels, config.channels_in, 3);
    let mut c = config.stem_channels;
    for (i, b) in config.blocks.iter().enumerate() {
        conv(format!("block{i}.conv1"), b.channels, c, 3);
        conv(format!("block{i}.conv2"), b.channels, b.channels, 3);
        if needs_projection(c, b) {
            conv(format!("block{i}.shortcut"), b.channels, c, 1);
        }
        c = b.channels;
    }
    let mut linear = |name: &str, g: usize, f: usize| {
        out.push(ParamPlan {
            name: format!("{name}.weight"),
            shape: vec![g, f],
            fan_in: Some(f),
        });
        out.push(ParamPlan {
            name: format!("{name}.bias"),
            shape: vec![g],
            fan_in: None,
        });
    };
    linear("head.fc1", config.head_hidden, 2 * c);
    linear("head.fc2", 1, config.head_hidden);
    out
}

fn needs_projection(c_in: usize, b: &BlockSpec) -> bool {
    c_in != b.channels || b.stride != 1
}

/// `[N,C,H,W] → [N, 2C]`: per-channel global average followed by per-channel
/// global max.
pub fn adaptive_concat_pool<T: Scalar>(g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
    let avg = g.adaptive_avg_pool(features)?;
    let max = g.adaptive_max_pool(features)?;
    let avg = g.flatten(avg)?;
    let max = g.flatten(max)?;
    g.concat(avg, max)
}

impl<T: Scalar> RegressionNet<T> {
    /// He-uniform weights (`U(±√(6/fan_in))`) and zero biases, drawn in
    /// parameter order from a ChaCha8 stream seeded with `seed`.
    pub fn build(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = plan(&config)
            .into_iter()
            .map(|p| {
                let numel = p.shape.iter().product();
                let data = match p.fan_in {
                    Some(fan_in) => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..numel)
                            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                            .collect()
                    }
                    None => vec![T::zero(); numel],
                };
                let tensor = Tensor::new(p.shape, data)?.with_grad();
                Ok(NamedParam { name: p.name, tensor })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    /// Reassembles a network from parameters in [`RegressionNet::build`] order.
    pub fn from_params(config: ArchConfig, params: Vec<NamedParam<T>>) -> Result<Self> {
        config.validate()?;
        let expected = plan(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.name != p.name || e.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected parameter `{}` {:?}, got `{}` {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        let params = params
            .into_iter()
            .map(|mut p| {
                p.tensor.set_requires_grad(true);
                p
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    /// Starts the output at `value` for every input whose hidden features are
    /// zero; targets are regressed in raw units, so this is usually their mean.
    pub fn set_output_bias(&mut self, value: T) {
        let p = self.params.last_mut().expect("head.fc2.bias is always last");
        debug_assert_eq!(p.name, "head.fc2.bias");
        p.tensor.data_mut()[0] = value;
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> RegressionNet<U> {
        RegressionNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::Shape(format!("expected [N,C,H,W] input, got {shape:?}")));
        };
        if c != self.config.channels_in {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.channels_in
            )));
        }
        let min = self.config.min_spatial();
        if h < min || w < min {
            return Err(Error::Shape(format!(
                "input {h}x{w} is below the {min}x{min} minimum of the {:?} architecture",
                self.config.arch
            )));
        }
        Ok(())
    }

    /// Forward pass whose parameters receive gradients on `g.backward`.
    pub fn forward_train<'a>(&'a mut self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let vars: Vec<Var> = self.params.iter_mut().map(|p| g.param(&mut p.tensor)).collect();
        wire(&self.config, g, x, &vars)
    }

    /// Forward pass with parameters recorded as constants.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(&p.tensor)).collect();
        wire(&self.config, g, x, &vars)
    }

    /// `[N,C,H,W] → [N,1]` without recording gradients.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(batch);
        let y = self.forward_graph(&mut g, x)?;
        Ok(g.to_tensor(y))
    }
}

fn wire<T: Scalar>(config: &ArchConfig, g: &mut Graph<'_, T>, x: Var, p: &[Var]) -> Result<Var> {
    let mut next = p.iter().copied();
    let mut take = move || next.next().expect("parameter plan matches wiring");

    let (w, b) = (take(), take());
    let h = g.conv2d(x, w, b, config.stem_stride, (1, 1))?;
    let mut h = g.relu(h);
    let mut c = config.stem_channels;
    for blk in &config.blocks {
        let s = (blk.stride, blk.stride);
        let (w1, b1, w2, b2) = (take(), take(), take(), take());
        let y = g.conv2d(h, w1, b1, s, (1, 1))?;
        let y = g.relu(y);
        let y = g.conv2d(y, w2, b2, (1, 1), (1, 1))?;
        let shortcut = if needs_projection(c, blk) {
            let (ws, bs) = (take(), take());
            g.conv2d(h, ws, bs, s, (0, 0))?
        } else {
            h
        };
        let sum = g.add(y, shortcut)?;
        h = g.relu(sum);
        c = blk.channels;
    }
    let pooled = adaptive_concat_pool(g, h)?;
    let (w, b) = (take(), take());
    let z = g.linear(pooled, w, b)?;
    let z = g.relu(z);
    let (w, b) = (take(), take());
    g.linear(z, w, b)
}
