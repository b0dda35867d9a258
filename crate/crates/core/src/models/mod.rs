//! Encoder-decoder segmentation networks and their checkpoints.

mod checkpoint;
mod deeplab;
mod unet;

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::geo::{IMAGE_BANDS, NUM_CLASSES};
use crate::losses::PredictionLogits;
use crate::nn::{Conv2d, Grads, Graph, Initializer, NodeId, ParamStore};
use crate::{Error, Result, Scalar};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointDescriptor, TensorEntry, PARAMS_FILE, DESCRIPTOR_FILE};

/// Total spatial downsampling of both architectures; inputs must be multiples of this.
pub const DOWNSAMPLING_FACTOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Unet,
    Deeplab,
}

impl Architecture {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "unet" => Ok(Self::Unet),
            "deeplab" => Ok(Self::Deeplab),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Unet => "unet",
            Self::Deeplab => "deeplab",
        }
    }
}

fn default_width() -> f64 {
    1.0
}
fn default_in_channels() -> usize {
    IMAGE_BANDS
}
fn default_num_classes() -> usize {
    NUM_CLASSES
}
fn default_aspp_rates() -> Vec<usize> {
    vec![2, 4, 6]
}

/// Network construction parameters. The architecture is kept as a name so that
/// unknown values surface as [`Error::UnknownArchitecture`] at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: String,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Dilation rates of the pyramid pooling branches (deeplab only).
    #[serde(default = "default_aspp_rates")]
    pub aspp_rates: Vec<usize>,
    /// Initialize the classification head to zero (logits start at 0).
    #[serde(default)]
    pub zero_head: bool,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, width_multiplier: f64, seed: u64) -> Self {
        Self {
            architecture: architecture.name().to_string(),
            width_multiplier,
            in_channels: IMAGE_BANDS,
            num_classes: NUM_CLASSES,
            seed,
            aspp_rates: default_aspp_rates(),
            zero_head: false,
        }
    }

    pub fn validate(&self) -> Result<Architecture> {
        let arch = Architecture::parse(&self.architecture)?;
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "width_multiplier must be > 0, got {}",
                self.width_multiplier
            )));
        }
        if self.in_channels != IMAGE_BANDS || self.num_classes != NUM_CLASSES {
            return Err(Error::InvalidParameter(format!(
                "expected {IMAGE_BANDS} input channels and {NUM_CLASSES} classes, got {} and {}",
                self.in_channels, self.num_classes
            )));
        }
        if arch == Architecture::Deeplab && (self.aspp_rates.len() < 3 || self.aspp_rates.contains(&0)) {
            return Err(Error::InvalidParameter("aspp_rates needs at least 3 positive rates".into()));
        }
        Ok(arch)
    }

    /// Channel count scaled by the width multiplier, rounded to a multiple of 4 (minimum 4).
    pub(crate) fn channels(&self, base: usize) -> usize {
        let scaled = (base as f64 * self.width_multiplier / 4.0).round() as usize * 4;
        scaled.max(4)
    }
}

/// One entry of a network's structural description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

/// Helper that creates layers while recording their description.
pub(crate) struct Builder<'a, T> {
    pub ps: &'a mut ParamStore<T>,
    pub init: Initializer,
    pub layers: Vec<LayerDesc>,
}

impl<'a, T: Scalar> Builder<'a, T> {
    fn record(&mut self, name: &str, kind: &str, c: &Conv2d) {
        self.layers.push(LayerDesc {
            name: name.to_string(),
            kind: kind.to_string(),
            in_channels: c.in_ch,
            out_channels: c.out_ch,
            kernel: c.geom.kernel,
            stride: c.geom.stride,
            dilation: c.geom.dilation,
        });
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, dilation: usize) -> Conv2d {
        let c = Conv2d::dense(self.ps, &mut self.init, name, cin, cout, k, stride, dilation, true);
        self.record(name, "conv", &c);
        c
    }

    pub fn depthwise(&mut self, name: &str, ch: usize, stride: usize) -> Conv2d {
        let c = Conv2d::depthwise(self.ps, &mut self.init, name, ch, 3, stride, 1);
        self.record(name, "depthwise_conv", &c);
        c
    }

    pub fn marker(&mut self, name: &str, kind: &str, channels: usize) {
        self.layers.push(LayerDesc {
            name: name.to_string(),
            kind: kind.to_string(),
            in_channels: channels,
            out_channels: channels,
            kernel: 0,
            stride: 1,
            dilation: 1,
        });
    }
}

#[derive(Debug, Clone)]
enum Network {
    Unet(unet::UNet),
    Deeplab(deeplab::DeepLab),
}

/// A segmentation network with its parameters.
#[derive(Debug, Clone)]
pub struct SegmentationModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    net: Network,
    layers: Vec<LayerDesc>,
}

/// A recorded forward pass that can be differentiated once.
pub struct ForwardPass<'a, T> {
    graph: Graph<'a, T>,
    out: NodeId,
    pub logits: PredictionLogits<T>,
}

impl<T: Scalar> ForwardPass<'_, T> {
    /// Parameter gradients given dL/dlogits.
    pub fn backward(self, grad: &Array4<T>) -> Grads<T> {
        self.graph.backward(self.out, grad.clone())
    }
}

/// Builds a network deterministically from its configuration.
pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<SegmentationModel<T>> {
    let arch = cfg.validate()?;
    let mut params = ParamStore::new();
    let mut b = Builder { ps: &mut params, init: Initializer::new(cfg.seed), layers: Vec::new() };
    let net = match arch {
        Architecture::Unet => Network::Unet(unet::UNet::build(&mut b, cfg)),
        Architecture::Deeplab => Network::Deeplab(deeplab::DeepLab::build(&mut b, cfg)),
    };
    let layers = std::mem::take(&mut b.layers);
    let head = match &net {
        Network::Unet(n) => n.head,
        Network::Deeplab(n) => n.head,
    };
    if cfg.zero_head {
        params.get_mut(head.weight).fill(T::zero());
    }
    Ok(SegmentationModel { config: cfg.clone(), params, net, layers })
}

impl<T: Scalar> SegmentationModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn architecture(&self) -> Architecture {
        match self.net {
            Network::Unet(_) => Architecture::Unet,
            Network::Deeplab(_) => Architecture::Deeplab,
        }
    }

    /// Structural description of the network, in construction order.
    pub fn describe(&self) -> &[LayerDesc] {
        &self.layers
    }

    fn check_input(&self, x: &ArrayView4<T>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::shape(&[b, self.config.in_channels, h, w], &[b, c, h, w]));
        }
        if h == 0 || w == 0 || h % DOWNSAMPLING_FACTOR != 0 || w % DOWNSAMPLING_FACTOR != 0 {
            return Err(Error::BadSpatialDims { h, w, factor: DOWNSAMPLING_FACTOR });
        }
        Ok(())
    }

    fn run<'a>(&'a self, x: ArrayView4<T>, record: bool) -> Result<(Graph<'a, T>, NodeId)> {
        self.check_input(&x)?;
        let mut g = Graph::new(&self.params, record);
        let input = g.input(x.to_owned());
        let out = match &self.net {
            Network::Unet(n) => n.forward(&mut g, input),
            Network::Deeplab(n) => n.forward(&mut g, input),
        };
        Ok((g, out))
    }

    /// Inference-mode forward pass: `[B, 4, H, W]` → logits `[B, 5, H, W]`.
    pub fn forward(&self, x: ArrayView4<T>) -> Result<PredictionLogits<T>> {
        let (g, out) = self.run(x, false)?;
        PredictionLogits::new(g.into_value(out))
    }

    /// Forward pass that keeps the caches needed for [`ForwardPass::backward`].
    pub fn forward_train(&self, x: ArrayView4<T>) -> Result<ForwardPass<'_, T>> {
        let (g, out) = self.run(x, true)?;
        let logits = PredictionLogits::new(g.value(out).clone())?;
        Ok(ForwardPass { graph: g, out, logits })
    }
}
