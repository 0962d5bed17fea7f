//! Encode-decode network: convolutions and two 2x2 poolings shrink the
//! input by 4, two stride-2 deconvolutions restore it, and a final
//! convolution head ("conv8") emits one logit map per landmark.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::DECONV_KERNEL;
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out: usize, kernel: usize },
    Relu,
    MaxPool2,
    Deconv { out: usize },
}

/// The landmark-map head appended after the feature tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Index of the layer whose output is the feature tap ("deconv7").
    pub feature_tap: usize,
    /// The "conv8" head; `channels` is the landmark count.
    pub head: HeadSpec,
}

fn conv_relu(out: usize, kernel: usize) -> [LayerSpec; 2] {
    [LayerSpec::Conv { out, kernel }, LayerSpec::Relu]
}

impl NetworkSpec {
    fn from_layers(layers: Vec<LayerSpec>, landmarks: usize, head_kernel: usize) -> Self {
        let feature_tap = layers.len() - 1;
        NetworkSpec {
            input_channels: 1,
            layers,
            feature_tap,
            head: HeadSpec {
                channels: landmarks,
                kernel: head_kernel,
            },
        }
    }

    /// Desk-scale preset.
    pub fn tiny(landmarks: usize) -> Self {
        let mut layers = Vec::new();
        layers.extend(conv_relu(8, 3));
        layers.extend(conv_relu(8, 3));
        layers.push(LayerSpec::MaxPool2);
        layers.extend(conv_relu(16, 3));
        layers.push(LayerSpec::MaxPool2);
        layers.extend([LayerSpec::Deconv { out: 12 }, LayerSpec::Relu]);
        layers.extend([LayerSpec::Deconv { out: 12 }, LayerSpec::Relu]);
        NetworkSpec::from_layers(layers, landmarks, 3)
    }

    /// VGG-19 trunk without pool3-5 and the fully-connected layers, plus
    /// deconv6/deconv7 with 96 filters each.
    pub fn vgg19(landmarks: usize) -> Self {
        let mut layers = Vec::new();
        for (count, width, pool) in [(2, 64, true), (2, 128, true), (4, 256, false), (4, 512, false), (4, 512, false)] {
            for _ in 0..count {
                layers.extend(conv_relu(width, 3));
            }
            if pool {
                layers.push(LayerSpec::MaxPool2);
            }
        }
        layers.extend([LayerSpec::Deconv { out: 96 }, LayerSpec::Relu]);
        layers.extend([LayerSpec::Deconv { out: 96 }, LayerSpec::Relu]);
        NetworkSpec::from_layers(layers, landmarks, 3)
    }

    /// A shallower, wider-kernel variant in the spirit of VGG-S.
    pub fn vgg_s(landmarks: usize) -> Self {
        let mut layers = Vec::new();
        layers.extend(conv_relu(96, 7));
        layers.push(LayerSpec::MaxPool2);
        layers.extend(conv_relu(256, 5));
        layers.push(LayerSpec::MaxPool2);
        for _ in 0..3 {
            layers.extend(conv_relu(512, 3));
        }
        layers.extend([LayerSpec::Deconv { out: 96 }, LayerSpec::Relu]);
        layers.extend([LayerSpec::Deconv { out: 96 }, LayerSpec::Relu]);
        NetworkSpec::from_layers(layers, landmarks, 3)
    }

    pub fn preset(name: &str, landmarks: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(NetworkSpec::tiny(landmarks)),
            "vgg19" => Ok(NetworkSpec::vgg19(landmarks)),
            "vgg_s" => Ok(NetworkSpec::vgg_s(landmarks)),
            other => Err(Error::Config(format!("unknown network preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let count = |pred: fn(&LayerSpec) -> bool| self.layers.iter().filter(|l| pred(l)).count();
        let pools = count(|l| matches!(l, LayerSpec::MaxPool2));
        let deconvs = count(|l| matches!(l, LayerSpec::Deconv { .. }));
        if pools != 2 || deconvs != 2 {
            return Err(Error::Config(format!(
                "network needs exactly two maxpool2 and two deconv layers, found {pools} and {deconvs}"
            )));
        }
        if self.feature_tap >= self.layers.len() {
            return Err(Error::Config(format!("feature tap {} out of range", self.feature_tap)));
        }
        if self.input_channels == 0 || self.head.channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let odd = |k: usize| k % 2 == 1;
        if !odd(self.head.kernel)
            || self
                .layers
                .iter()
                .any(|l| matches!(l, LayerSpec::Conv { kernel, .. } if !odd(*kernel)))
        {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        Ok(())
    }

    /// Propagates an `h x w` input through the layers; returns the head's
    /// output size, or a shape error where a pooling meets an odd size.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for layer in &self.layers {
            match layer {
                LayerSpec::MaxPool2 => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::shape("maxpool2", "even height and width", format!("{h}x{w}")));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Deconv { .. } => {
                    h *= 2;
                    w *= 2;
                }
                LayerSpec::Conv { .. } | LayerSpec::Relu => {}
            }
        }
        Ok((h, w))
    }

    /// Channel count at the feature tap (`M`).
    pub fn feature_channels(&self) -> usize {
        let mut c = self.input_channels;
        for layer in &self.layers[..=self.feature_tap] {
            if let LayerSpec::Conv { out, .. } | LayerSpec::Deconv { out } = layer {
                c = *out;
            }
        }
        c
    }

    /// Parameter tensor dims in storage order: (kernel, bias) per conv or
    /// deconv layer, then the head.
    pub fn param_dims(&self) -> Vec<Dims> {
        let mut dims = Vec::new();
        let mut c = self.input_channels;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { out, kernel } => {
                    dims.push(Dims::new(out, c, kernel, kernel));
                    dims.push(Dims::vector(1, out));
                    c = out;
                }
                LayerSpec::Deconv { out } => {
                    dims.push(Dims::new(c, out, DECONV_KERNEL, DECONV_KERNEL));
                    dims.push(Dims::vector(1, out));
                    c = out;
                }
                _ => {}
            }
        }
        let feat = self.feature_channels();
        dims.push(Dims::new(self.head.channels, feat, self.head.kernel, self.head.kernel));
        dims.push(Dims::vector(1, self.head.channels));
        dims
    }
}

/// Network outputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// Feature-tap activations (`n x M x H x W`).
    pub features: Var,
    /// Head logits (`n x p x H x W`).
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

impl Network {
    /// Zero biases; kernels drawn from `N(0, 2/fan_in)` with a fixed seed.
    /// For a stride-2 4x4 deconvolution each output sees `4 * in` inputs.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut c = spec.input_channels;
        let mut push_pair = |kd: Dims, fan_in: usize, out: usize, rng: &mut ChaCha8Rng| {
            params.push(Tensor::randn(kd, (2.0 / fan_in as f64).sqrt(), rng));
            params.push(Tensor::zeros(Dims::vector(1, out)));
        };
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Conv { out, kernel } => {
                    push_pair(Dims::new(out, c, kernel, kernel), c * kernel * kernel, out, &mut rng);
                    c = out;
                }
                LayerSpec::Deconv { out } => {
                    push_pair(Dims::new(c, out, DECONV_KERNEL, DECONV_KERNEL), 4 * c, out, &mut rng);
                    c = out;
                }
                _ => {}
            }
        }
        let feat = spec.feature_channels();
        let k = spec.head.kernel;
        push_pair(Dims::new(spec.head.channels, feat, k, k), feat * k * k, spec.head.channels, &mut rng);
        Ok(Network { spec, params })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_dims();
        if expected.len() != params.len() {
            return Err(Error::shape("Network::from_parts", expected.len(), params.len()));
        }
        for (d, p) in expected.iter().zip(&params) {
            p.expect_dims("Network::from_parts", *d)?;
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Adds the parameters to `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, input: Var, params: &[Var]) -> Result<Outputs> {
        let id = g.value(input).dims();
        if id.c != self.spec.input_channels {
            return Err(Error::shape("network input", self.spec.input_channels, id.c));
        }
        let mut x = input;
        let mut next = params.iter().copied();
        let mut features = None;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = match layer {
                LayerSpec::Conv { .. } => {
                    let (k, b) = (next.next().expect("param"), next.next().expect("param"));
                    g.conv2d(x, k, Some(b))?
                }
                LayerSpec::Deconv { .. } => {
                    let (k, b) = (next.next().expect("param"), next.next().expect("param"));
                    g.deconv2d(x, k, Some(b))?
                }
                LayerSpec::Relu => g.relu(x),
                LayerSpec::MaxPool2 => g.maxpool2(x)?,
            };
            if i == self.spec.feature_tap {
                features = Some(x);
            }
        }
        let features = features.expect("validated tap");
        let (k, b) = (next.next().expect("param"), next.next().expect("param"));
        let logits = g.conv2d(features, k, Some(b))?;
        Ok(Outputs { features, logits })
    }

    /// Inference without gradient tracking: `(features, logits)`.
    pub fn infer(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, x, &params)?;
        Ok((g.value(out.features).clone(), g.value(out.logits).clone()))
    }
}
