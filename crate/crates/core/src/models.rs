//! The three compared encoder–decoder architectures.
//!
//! Every model has four encoder scales and four decoder scales:
//!
//! * encoder scale `s`: stride-2 3×3 convolution + ReLU (halves H and W),
//!   followed by `residual_units_per_scale` residual units;
//! * decoder scale `d`: stride-2 3×3 transposed convolution + ReLU (doubles
//!   H and W). The U-Net variants then concatenate the same-resolution
//!   encoder output (the raw input at full resolution) and apply their
//!   residual units, the first of which projects the concatenated channels
//!   back to the decoder width;
//! * a final 1×1 convolution producing one logit channel (sigmoid mode) or
//!   two (softmax mode).
//!
//! `SemSeg` is a plain encoder–decoder with no skip concatenations and no
//! residual units. The deepest encoder output feeds the decoder directly.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{shape_err, Error, Result};
use crate::graph::{sigmoid, softmax_channels, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Spatial dims must be multiples of this (four stride-2 halvings).
pub const SPATIAL_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "semseg")]
    SemSeg,
    #[serde(rename = "resunet")]
    ResUNet,
    #[serde(rename = "resunet_plus")]
    ResUNetPlus,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::SemSeg, Architecture::ResUNet, Architecture::ResUNetPlus];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::SemSeg => "semseg",
            Architecture::ResUNet => "resunet",
            Architecture::ResUNetPlus => "resunet_plus",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Architecture::SemSeg => 0,
            Architecture::ResUNet => 1,
            Architecture::ResUNetPlus => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == code)
    }

    pub fn has_skips(self) -> bool {
        !matches!(self, Architecture::SemSeg)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::SemSeg => "SemSeg",
            Architecture::ResUNet => "ResUNet",
            Architecture::ResUNetPlus => "ResUNet+",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "semseg" => Ok(Architecture::SemSeg),
            "resunet" => Ok(Architecture::ResUNet),
            "resunet_plus" | "resunet+" => Ok(Architecture::ResUNetPlus),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture `{other}` (expected semseg|resunet|resunet_plus)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// One logit channel, probabilities via sigmoid.
    #[default]
    BinarySigmoid,
    /// Two logit channels (background, foreground), probabilities via softmax.
    Softmax,
}

impl OutputMode {
    pub fn channels(self) -> usize {
        match self {
            OutputMode::BinarySigmoid => 1,
            OutputMode::Softmax => 2,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            OutputMode::BinarySigmoid => 0,
            OutputMode::Softmax => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutputMode::BinarySigmoid),
            1 => Some(OutputMode::Softmax),
            _ => None,
        }
    }
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary_sigmoid" | "sigmoid" => Ok(OutputMode::BinarySigmoid),
            "softmax" => Ok(OutputMode::Softmax),
            other => Err(Error::InvalidArgument(format!(
                "unknown output mode `{other}` (expected binary_sigmoid|softmax)"
            ))),
        }
    }
}

/// Architecture selector plus the per-scale widths it implies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub arch: Architecture,
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    pub residual_units_per_scale: usize,
    pub out_mode: OutputMode,
}

impl ArchConfig {
    pub fn new(arch: Architecture) -> Self {
        let (enc, dec, units): (&[usize], &[usize], usize) = match arch {
            Architecture::SemSeg => (&[16, 64, 64, 128], &[128, 64, 64, 16], 0),
            Architecture::ResUNet => (&[16, 64, 64, 128], &[128, 64, 64, 16], 1),
            Architecture::ResUNetPlus => (&[32, 64, 128, 256], &[256, 128, 64, 32], 3),
        };
        Self {
            arch,
            encoder_filters: enc.to_vec(),
            decoder_filters: dec.to_vec(),
            residual_units_per_scale: units,
            out_mode: OutputMode::default(),
        }
    }

    pub fn with_out_mode(mut self, out_mode: OutputMode) -> Self {
        self.out_mode = out_mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let canonical = Self::new(self.arch);
        if self.encoder_filters != canonical.encoder_filters
            || self.decoder_filters != canonical.decoder_filters
            || self.residual_units_per_scale != canonical.residual_units_per_scale
        {
            return Err(Error::Config(format!(
                "{} requires encoder {:?}, decoder {:?}, {} residual unit(s) per scale; got {:?}/{:?}/{}",
                self.arch,
                canonical.encoder_filters,
                canonical.decoder_filters,
                canonical.residual_units_per_scale,
                self.encoder_filters,
                self.decoder_filters,
                self.residual_units_per_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// He normal, std = sqrt(2 / fan_in).
    He,
    /// std = sqrt(1 / fan_in), used for the linear output layer.
    FanIn,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    fan_in: usize,
    init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    spec: ConvSpec,
    transposed: bool,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct UnitLayers {
    conv1: Layer,
    conv2: Layer,
    projection: Option<Layer>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct EncoderScale {
    down: Layer,
    units: Vec<UnitLayers>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Skip {
    Encoder(usize),
    Input,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct DecoderScale {
    up: Layer,
    skip: Option<Skip>,
    units: Vec<UnitLayers>,
}

/// Layer wiring derived deterministically from an [`ArchConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Plan {
    encoder: Vec<EncoderScale>,
    decoder: Vec<DecoderScale>,
    head: Layer,
}

struct PlanBuilder {
    specs: Vec<ParamSpec>,
}

impl PlanBuilder {
    fn layer(&mut self, name: &str, spec: ConvSpec, transposed: bool, init: Init) -> Layer {
        let (shape, fan_in) = if transposed {
            let s = spec.stride * spec.stride;
            let taps = spec.kernel.0 * spec.kernel.1;
            (spec.transposed_weight_shape(), (spec.in_channels * taps / s).max(1))
        } else {
            (spec.weight_shape(), spec.in_channels * spec.kernel.0 * spec.kernel.1)
        };
        let weight = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: shape.to_vec(),
            fan_in,
            init,
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![spec.out_channels],
            fan_in,
            init: Init::Zero,
        });
        Layer {
            spec,
            transposed,
            weight,
            bias: weight + 1,
        }
    }

    fn unit(&mut self, name: &str, cin: usize, cout: usize) -> UnitLayers {
        let conv1 = self.layer(&format!("{name}.conv1"), ConvSpec::new(cin, cout), false, Init::He);
        let conv2 = self.layer(&format!("{name}.conv2"), ConvSpec::new(cout, cout), false, Init::Zero);
        let projection = (cin != cout).then(|| {
            self.layer(
                &format!("{name}.proj"),
                ConvSpec::new(cin, cout).with_kernel(1, 1),
                false,
                Init::He,
            )
        });
        UnitLayers {
            conv1,
            conv2,
            projection,
        }
    }
}

impl Plan {
    pub(crate) fn new(config: &ArchConfig) -> Result<(Plan, Vec<ParamSpec>)> {
        config.validate()?;
        let mut b = PlanBuilder { specs: Vec::new() };
        let units = config.residual_units_per_scale;
        let skips = config.arch.has_skips();

        let mut encoder = Vec::new();
        let mut channels = 1;
        for (s, &f) in config.encoder_filters.iter().enumerate() {
            let down = b.layer(
                &format!("enc{s}.down"),
                ConvSpec::new(channels, f).with_stride(2),
                false,
                Init::He,
            );
            let units = (0..units).map(|u| b.unit(&format!("enc{s}.res{u}"), f, f)).collect();
            encoder.push(EncoderScale { down, units });
            channels = f;
        }

        let depth = config.encoder_filters.len();
        let mut decoder = Vec::new();
        for (d, &f) in config.decoder_filters.iter().enumerate() {
            let up = b.layer(
                &format!("dec{d}.up"),
                ConvSpec::new(channels, f).with_stride(2),
                true,
                Init::He,
            );
            // Decoder scale d lands on the resolution of encoder scale depth-2-d.
            let skip = skips.then(|| {
                if d + 2 <= depth {
                    Skip::Encoder(depth - 2 - d)
                } else {
                    Skip::Input
                }
            });
            let skip_channels = match skip {
                Some(Skip::Encoder(s)) => config.encoder_filters[s],
                Some(Skip::Input) => 1,
                None => 0,
            };
            let units = (0..units)
                .map(|u| {
                    let cin = if u == 0 { f + skip_channels } else { f };
                    b.unit(&format!("dec{d}.res{u}"), cin, f)
                })
                .collect();
            decoder.push(DecoderScale { up, skip, units });
            channels = f;
        }

        let head = b.layer(
            "head",
            ConvSpec::new(channels, config.out_mode.channels()).with_kernel(1, 1),
            false,
            Init::FanIn,
        );
        Ok((Plan { encoder, decoder, head }, b.specs))
    }
}

/// Graph handles of one residual unit's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ResidualUnitVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub projection: Option<(Var, Var)>,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`, where the shortcut is the
/// identity when channel counts agree and a 1×1 projection otherwise.
pub fn residual_unit<T: Real>(g: &mut Graph<'_, T>, x: Var, unit: &ResidualUnitVars) -> Result<Var> {
    let c1 = ConvSpec::new(unit.in_channels, unit.out_channels);
    let c2 = ConvSpec::new(unit.out_channels, unit.out_channels);
    let h = g.conv2d(x, unit.conv1.0, unit.conv1.1, c1)?;
    let h = g.relu(h);
    let h = g.conv2d(h, unit.conv2.0, unit.conv2.1, c2)?;
    let shortcut = match unit.projection {
        Some((w, b)) => {
            let spec = ConvSpec::new(unit.in_channels, unit.out_channels).with_kernel(1, 1);
            g.conv2d(x, w, b, spec)?
        }
        None if unit.in_channels == unit.out_channels => x,
        None => {
            return shape_err(format!(
                "residual unit {} -> {} channels needs a projection shortcut",
                unit.in_channels, unit.out_channels
            ))
        }
    };
    let sum = g.add(h, shortcut)?;
    Ok(g.relu(sum))
}

/// Toggles used by structural tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every skip-concatenated tensor by zeros.
    pub ablate_skips: bool,
}

/// A realised, parameterised network.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ArchConfig,
    seed: u64,
    params: Vec<Parameter<T>>,
    plan: Plan,
}

/// Builds a model with He-initialised weights and zero biases, except that the
/// second convolution of every residual branch starts at zero so each unit
/// begins as its shortcut. Without that, stacked units compound the signal
/// variance and ResUNet+ starts with logits in the hundreds. The same
/// `(config, seed)` always produces bit-identical parameters.
pub fn build_model<T: Real>(config: &ArchConfig, seed: u64) -> Result<Model<T>> {
    let (plan, specs) = Plan::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = specs
        .into_iter()
        .map(|spec| {
            let tensor = match spec.init {
                Init::Zero => Tensor::zeros(spec.shape),
                Init::He => Tensor::randn(spec.shape, (2.0 / spec.fan_in as f64).sqrt(), &mut rng),
                Init::FanIn => Tensor::randn(spec.shape, (1.0 / spec.fan_in as f64).sqrt(), &mut rng),
            };
            Parameter {
                name: spec.name,
                tensor,
            }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        seed,
        params,
        plan,
    })
}

impl<T: Real> Model<T> {
    /// Reassembles a model from named tensors, checking them against the
    /// layout the configuration implies.
    pub fn from_parameters(config: ArchConfig, seed: u64, params: Vec<Parameter<T>>) -> Result<Self> {
        let (plan, specs) = Plan::new(&config)?;
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} expects {} parameter tensors, found {}",
                config.arch,
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.name != p.name || spec.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch for {}: expected {} {:?}, found {} {:?}",
                    config.arch,
                    spec.name,
                    spec.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(Self {
            config,
            seed,
            params,
            plan,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            plan: self.plan.clone(),
        }
    }

    /// Registers every parameter as a differentiated leaf, in declaration order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(&p.tensor)).collect()
    }

    /// Registers every parameter as a constant leaf (inference).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| g.frozen(&p.tensor)).collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return shape_err(format!("model input must be [N,1,H,W], got {shape:?}"));
        };
        if c != 1 {
            return shape_err(format!("model input must have 1 channel (grayscale), got {c}"));
        }
        for (name, v) in [("height", h), ("width", w)] {
            if v % SPATIAL_MULTIPLE != 0 {
                return shape_err(format!(
                    "input {name} {v} must be divisible by {SPATIAL_MULTIPLE} (four stride-2 downsamplings)"
                ));
            }
        }
        Ok(())
    }

    fn apply_layer<'a>(&self, g: &mut Graph<'a, T>, params: &[Var], x: Var, layer: &Layer) -> Result<Var> {
        let (w, b) = (params[layer.weight], params[layer.bias]);
        if layer.transposed {
            g.conv_transpose2d(x, w, b, layer.spec)
        } else {
            g.conv2d(x, w, b, layer.spec)
        }
    }

    fn unit_vars(params: &[Var], unit: &UnitLayers) -> ResidualUnitVars {
        ResidualUnitVars {
            conv1: (params[unit.conv1.weight], params[unit.conv1.bias]),
            conv2: (params[unit.conv2.weight], params[unit.conv2.bias]),
            projection: unit.projection.map(|p| (params[p.weight], params[p.bias])),
            in_channels: unit.conv1.spec.in_channels,
            out_channels: unit.conv1.spec.out_channels,
        }
    }

    /// Records the forward pass in `g` and returns the logits node.
    pub fn forward_graph<'a>(
        &self,
        g: &mut Graph<'a, T>,
        params: &[Var],
        input: Var,
        opts: ForwardOptions,
    ) -> Result<Var> {
        self.check_input(g.value(input).shape())?;
        let mut skips = Vec::with_capacity(self.plan.encoder.len());
        let mut x = input;
        for scale in &self.plan.encoder {
            x = self.apply_layer(g, params, x, &scale.down)?;
            x = g.relu(x);
            for unit in &scale.units {
                x = residual_unit(g, x, &Self::unit_vars(params, unit))?;
            }
            skips.push(x);
        }
        for scale in &self.plan.decoder {
            x = self.apply_layer(g, params, x, &scale.up)?;
            x = g.relu(x);
            if let Some(skip) = scale.skip {
                let source = match skip {
                    Skip::Encoder(s) => skips[s],
                    Skip::Input => input,
                };
                let source = if opts.ablate_skips {
                    let zeros = Tensor::zeros(g.value(source).shape().to_vec());
                    g.constant(zeros)
                } else {
                    source
                };
                x = g.concat_channels(x, source)?;
            }
            for unit in &scale.units {
                x = residual_unit(g, x, &Self::unit_vars(params, unit))?;
            }
        }
        self.apply_layer(g, params, x, &self.plan.head)
    }

    /// Logits for a `[N, 1, H, W]` batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(batch, ForwardOptions::default())
    }

    pub fn forward_with(&self, batch: &Tensor<T>, opts: ForwardOptions) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.frozen(batch);
        let y = self.forward_graph(&mut g, &params, x, opts)?;
        Ok(g.into_value(y))
    }

    /// Foreground probabilities `[N, 1, H, W]` for a `[N, 1, H, W]` batch.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.forward(batch)?;
        logits_to_probability(&logits, self.config.out_mode)
    }
}

/// Maps raw logits to foreground probabilities according to the output mode.
pub fn logits_to_probability<T: Real>(logits: &Tensor<T>, mode: OutputMode) -> Result<Tensor<T>> {
    match mode {
        OutputMode::BinarySigmoid => Ok(logits.map(sigmoid)),
        OutputMode::Softmax => {
            let p = softmax_channels(logits)?;
            let (n, _, h, w) = p.dims4()?;
            let plane = h * w;
            let mut data = Vec::with_capacity(n * plane);
            for i in 0..n {
                data.extend_from_slice(&p.data()[(2 * i + 1) * plane..(2 * i + 2) * plane]);
            }
            Tensor::new(vec![n, 1, h, w], data)
        }
    }
}
