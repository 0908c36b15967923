//! Segmentation backbone and latent-conditioned head.
//!
//! The backbone is a three-level encoder-decoder: each encoder level is two
//! 3x3 convolutions with ReLU followed by 2x2 max pooling, the decoder mirrors
//! it with nearest-neighbour upsampling and skip concatenation, and a final
//! 1x1 convolution emits [`FEATURE_CHANNELS`] feature maps at full
//! resolution. The head is three 1x1 convolutions over the features
//! concatenated with the broadcast latent code.

pub mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channels of the backbone output feature map.
pub const FEATURE_CHANNELS: usize = 16;

/// Hidden width of the first two head layers.
pub const HEAD_WIDTH: usize = 16;

/// Input image channels.
pub const IMAGE_CHANNELS: usize = 3;

/// Spatial dims must be divisible by this (three 2x poolings).
pub const SPATIAL_MULTIPLE: usize = 8;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Channel widths of the three encoder levels.
    pub widths: [usize; 3],
}

impl ModelConfig {
    pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(num_classes: usize, latent_dim: usize) -> Self {
        ModelConfig {
            num_classes,
            latent_dim,
            widths: Self::DEFAULT_WIDTHS,
        }
    }
}

/// One convolution layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Scalar = f32> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn he_init(name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = (0..cout * cin * k * k)
            .map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        ConvLayer {
            name: name.to_string(),
            weight: Tensor::from_parts(vec![cout, cin, k, k], data),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Backbone and head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T: Scalar = f32> {
    config: ModelConfig,
    backbone: Vec<ConvLayer<T>>,
    head: Vec<ConvLayer<T>>,
}

/// Graph handles for every parameter of a [`SegModel`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    backbone: Vec<(Var, Var)>,
    head: Vec<(Var, Var)>,
}

impl BoundModel {
    /// (weight, bias) handles in the same order as [`SegModel::layers`].
    pub fn vars(&self) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.backbone.iter().chain(&self.head).copied()
    }
}

const BACKBONE_LAYERS: [&str; 14] = [
    "enc1.conv1",
    "enc1.conv2",
    "enc2.conv1",
    "enc2.conv2",
    "enc3.conv1",
    "enc3.conv2",
    "bottleneck",
    "dec3.conv1",
    "dec3.conv2",
    "dec2.conv1",
    "dec2.conv2",
    "dec1.conv1",
    "dec1.conv2",
    "features",
];

const HEAD_LAYERS: [&str; 3] = ["head.conv1", "head.conv2", "head.conv3"];

impl<T: Scalar> SegModel<T> {
    /// He-normal weights and zero biases; deterministic for a seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                config.num_classes
            )));
        }
        if config.latent_dim == 0 || config.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "latent dim and widths must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2, w3] = config.widths;
        let shapes = [
            (IMAGE_CHANNELS, w1, 3),
            (w1, w1, 3),
            (w1, w2, 3),
            (w2, w2, 3),
            (w2, w3, 3),
            (w3, w3, 3),
            (w3, w3, 3),
            (2 * w3, w3, 3),
            (w3, w3, 3),
            (w3 + w2, w2, 3),
            (w2, w2, 3),
            (w2 + w1, w1, 3),
            (w1, w1, 3),
            (w1, FEATURE_CHANNELS, 1),
        ];
        let backbone = BACKBONE_LAYERS
            .iter()
            .zip(shapes)
            .map(|(name, (cin, cout, k))| {
                ConvLayer::he_init(&format!("backbone.{name}"), cin, cout, k, &mut rng)
            })
            .collect();
        let head_shapes = [
            (FEATURE_CHANNELS + config.latent_dim, HEAD_WIDTH),
            (HEAD_WIDTH, HEAD_WIDTH),
            (HEAD_WIDTH, config.num_classes),
        ];
        let head = HEAD_LAYERS
            .iter()
            .zip(head_shapes)
            .map(|(name, (cin, cout))| ConvLayer::he_init(name, cin, cout, 1, &mut rng))
            .collect();
        Ok(SegModel {
            config,
            backbone,
            head,
        })
    }

    /// Rebuilds a model from named layers, checking every shape against the
    /// architecture implied by the layers themselves.
    pub fn from_layers(layers: Vec<ConvLayer<T>>) -> Result<Self> {
        let expected = BACKBONE_LAYERS.len() + HEAD_LAYERS.len();
        if layers.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} layers, got {}",
                layers.len()
            )));
        }
        let mut layers = layers;
        let head = layers.split_off(BACKBONE_LAYERS.len());
        let backbone = layers;
        let widths = [
            backbone[0].out_channels(),
            backbone[2].out_channels(),
            backbone[4].out_channels(),
        ];
        let num_classes = head[2].out_channels();
        let latent_dim = head[0]
            .in_channels()
            .checked_sub(FEATURE_CHANNELS)
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::InvalidArgument("head input narrower than features".into()))?;
        let config = ModelConfig {
            num_classes,
            latent_dim,
            widths,
        };
        let reference = SegModel::<T>::new(config, 0)?;
        for (got, want) in backbone.iter().chain(&head).zip(reference.layers()) {
            if got.name != want.name
                || got.weight.shape() != want.weight.shape()
                || got.bias.shape() != want.bias.shape()
            {
                return Err(Error::InvalidArgument(format!(
                    "layer {} has shape {:?}, expected {} with {:?}",
                    got.name,
                    got.weight.shape(),
                    want.name,
                    want.weight.shape()
                )));
            }
        }
        Ok(SegModel {
            config,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Backbone layers followed by head layers.
    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.backbone.iter().chain(&self.head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<T>> {
        self.backbone.iter_mut().chain(&mut self.head)
    }

    pub fn backbone_layers(&self) -> &[ConvLayer<T>] {
        &self.backbone
    }

    pub fn head_layers(&self) -> &[ConvLayer<T>] {
        &self.head
    }

    pub fn num_parameters(&self) -> usize {
        self.layers()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        let conv = |l: &ConvLayer<T>| ConvLayer {
            name: l.name.clone(),
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        SegModel {
            config: self.config,
            backbone: self.backbone.iter().map(conv).collect(),
            head: self.head.iter().map(conv).collect(),
        }
    }

    /// Adds every parameter to `g` as a trainable (or constant) leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut bind = |layers: &[ConvLayer<T>]| {
            layers
                .iter()
                .map(|l| (leaf(&l.weight), leaf(&l.bias)))
                .collect::<Vec<_>>()
        };
        let backbone = bind(&self.backbone);
        let head = bind(&self.head);
        BoundModel { backbone, head }
    }

    /// Feature extraction in a graph: `[N, 3, H, W] -> [N, 16, H, W]`.
    pub fn features_in(&self, g: &mut Graph<T>, bound: &BoundModel, image: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(image).dims4("extract_features")?;
        if c != IMAGE_CHANNELS {
            return Err(Error::shape(
                "extract_features",
                format!("expected {IMAGE_CHANNELS} image channels, got {c}"),
            ));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::shape(
                "extract_features",
                format!(
                    "image size {h}x{w} is not divisible by {SPATIAL_MULTIPLE}; pad the image to a multiple of {SPATIAL_MULTIPLE}"
                ),
            ));
        }
        let p = &bound.backbone;
        let conv = |g: &mut Graph<T>, x: Var, i: usize| -> Result<Var> {
            let y = g.conv2d(x, p[i].0, p[i].1, Padding::Same)?;
            Ok(g.relu(y))
        };
        let e1 = conv(g, image, 0)?;
        let e1 = conv(g, e1, 1)?;
        let x = g.max_pool2(e1)?;
        let e2 = conv(g, x, 2)?;
        let e2 = conv(g, e2, 3)?;
        let x = g.max_pool2(e2)?;
        let e3 = conv(g, x, 4)?;
        let e3 = conv(g, e3, 5)?;
        let x = g.max_pool2(e3)?;
        let b = conv(g, x, 6)?;

        let x = g.upsample_nearest2x(b)?;
        let x = g.concat_channels(x, e3)?;
        let d3 = conv(g, x, 7)?;
        let d3 = conv(g, d3, 8)?;
        let x = g.upsample_nearest2x(d3)?;
        let x = g.concat_channels(x, e2)?;
        let d2 = conv(g, x, 9)?;
        let d2 = conv(g, d2, 10)?;
        let x = g.upsample_nearest2x(d2)?;
        let x = g.concat_channels(x, e1)?;
        let d1 = conv(g, x, 11)?;
        let d1 = conv(g, d1, 12)?;
        g.conv2d(d1, p[13].0, p[13].1, Padding::Same)
    }

    /// Head in a graph: features `[N, 16, H, W]` and latent rows `[N, D]`
    /// to class probabilities `[N, C, H, W]`.
    pub fn segment_in(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        features: Var,
        latents: Var,
    ) -> Result<Var> {
        let (n, l, h, w) = g.value(features).dims4("segment")?;
        if l != FEATURE_CHANNELS {
            return Err(Error::shape(
                "segment",
                format!("expected {FEATURE_CHANNELS} feature channels, got {l}"),
            ));
        }
        let zshape = g.value(latents).shape().to_vec();
        if zshape != [n, self.config.latent_dim] {
            return Err(Error::shape(
                "segment",
                format!(
                    "latent batch {zshape:?} does not match [{n}, {}]",
                    self.config.latent_dim
                ),
            ));
        }
        let z = g.broadcast_spatial(latents, h, w)?;
        let x = g.concat_channels(features, z)?;
        let p = &bound.head;
        let x = g.conv2d(x, p[0].0, p[0].1, Padding::Same)?;
        let x = g.relu(x);
        let x = g.conv2d(x, p[1].0, p[1].1, Padding::Same)?;
        let x = g.relu(x);
        let x = g.conv2d(x, p[2].0, p[2].1, Padding::Same)?;
        g.softmax_channels(x)
    }

    /// Forward-only feature extraction.
    pub fn extract_features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = self.features_in(&mut g, &bound, x)?;
        Ok(g.value(f).clone())
    }

    /// Forward-only head with one latent code `z` shared by every batch element.
    pub fn segment(&self, features: &Tensor<T>, z: &[T]) -> Result<Tensor<T>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape(
                "segment",
                format!(
                    "latent has {} entries, model expects {}",
                    z.len(),
                    self.config.latent_dim
                ),
            ));
        }
        let n = features.shape().first().copied().unwrap_or(0);
        self.segment_batch(features, &vec![z.to_vec(); n])
    }

    /// Forward-only head with one latent code per batch element.
    pub fn segment_batch(&self, features: &Tensor<T>, zs: &[Vec<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let d = self.config.latent_dim;
        let flat: Vec<T> = zs.iter().flatten().copied().collect();
        if zs.iter().any(|z| z.len() != d) || zs.is_empty() {
            return Err(Error::shape(
                "segment",
                format!("every latent must have {d} entries"),
            ));
        }
        let z = g.constant(Tensor::from_parts(vec![zs.len(), d], flat));
        let p = self.segment_in(&mut g, &bound, f, z)?;
        Ok(g.value(p).clone())
    }
}
