use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::LossPosition;
use crate::nn::{BatchNorm, Conv, Ctx, ParamStore};
use crate::projector::{FeatureMap, Projector};

/// Output strides of the four encoder stages.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// RGB input.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Width of the first (stride-2) convolution.
    pub stem_channels: usize,
    /// Channels of the stride 4, 8, 16 and 32 feature maps.
    pub channels: [usize; 4],
    /// Projector output width.
    pub embedding_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            channels: [32, 64, 96, 128],
            embedding_dim: 256,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.channels.contains(&0) || self.embedding_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(ctx, x)?;
        Ok(self.bn.forward(ctx, &y)?.relu())
    }
}

/// Encoder, segmentation head, and one projector per stride, with all
/// parameters in a single flat store.
#[derive(Debug, Clone)]
pub struct SegModel {
    spec: ModelSpec,
    n_classes: usize,
    loss_position: LossPosition,
    pub params: ParamStore,
    pub buffers: ParamStore,
    /// Two layers per stage; the first of each halves the resolution.
    encoder: Vec<ConvBnRelu>,
    head: Vec<Conv>,
    projectors: BTreeMap<usize, Projector>,
}

/// Per-stride outputs of one forward pass.
pub struct Forward<'t> {
    pub features: BTreeMap<usize, FeatureMap<'t>>,
    /// Per-stride class logits before upsampling.
    pub scale_logits: BTreeMap<usize, Var<'t>>,
    /// Fused `B x N_c x H x W` logits.
    pub logits: Var<'t>,
}

impl SegModel {
    pub fn new(spec: &ModelSpec, n_classes: usize, loss_position: LossPosition, seed: u64) -> Result<Self> {
        spec.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut encoder = Vec::new();
        let mut in_ch = IMAGE_CHANNELS;
        let widths = [
            (spec.stem_channels, 2),
            (spec.channels[0], 2),
            (spec.channels[1], 2),
            (spec.channels[1], 1),
            (spec.channels[2], 2),
            (spec.channels[2], 1),
            (spec.channels[3], 2),
            (spec.channels[3], 1),
        ];
        for (i, &(out, stride)) in widths.iter().enumerate() {
            let name = format!("encoder.conv{i}");
            let conv = Conv::new(&mut params, &name, in_ch, out, 3, stride, 1, &mut rng);
            let bn = BatchNorm::new(&mut params, &mut buffers, &format!("encoder.bn{i}"), out);
            encoder.push(ConvBnRelu { conv, bn });
            in_ch = out;
        }
        let head = STRIDES
            .iter()
            .zip(spec.channels)
            .map(|(s, c)| Conv::new(&mut params, &format!("head.s{s}"), c, n_classes, 1, 1, 0, &mut rng))
            .collect();
        let projectors = STRIDES
            .iter()
            .zip(spec.channels)
            .map(|(&s, c)| {
                let in_ch = match loss_position {
                    LossPosition::Backbone => c,
                    LossPosition::Neck => n_classes,
                };
                let p = Projector::new(
                    &mut params,
                    &mut buffers,
                    &format!("proj.s{s}"),
                    in_ch,
                    spec.embedding_dim,
                    &mut rng,
                );
                (s, p)
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            n_classes,
            loss_position,
            params,
            buffers,
            encoder,
            head,
            projectors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn loss_position(&self) -> LossPosition {
        self.loss_position
    }

    pub fn projector(&self, stride: usize) -> Option<&Projector> {
        self.projectors.get(&stride)
    }

    /// Multi-scale features at strides 4, 8, 16 and 32.
    pub fn encode<'t>(&self, ctx: &Ctx<'t, '_>, image: &Var<'t>) -> Result<BTreeMap<usize, FeatureMap<'t>>> {
        let shape = image.shape();
        match shape[..] {
            [_, 3, h, w] if h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "encoder input must be B x 3 x H x W with H, W divisible by 32, got {shape:?}"
                )))
            }
        }
        let mut x = *image;
        let mut out = BTreeMap::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            x = layer.forward(ctx, &x)?;
            // stages end after layers 1, 3, 5, 7
            if i % 2 == 1 {
                let stride = STRIDES[i / 2];
                out.insert(stride, FeatureMap::new(x, stride));
            }
        }
        Ok(out)
    }

    /// Per-scale 1x1 class logits, each bilinearly upsampled to the input size
    /// and summed.
    pub fn segment_logits<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        features: &BTreeMap<usize, FeatureMap<'t>>,
    ) -> Result<(Var<'t>, BTreeMap<usize, Var<'t>>)> {
        let mut fused: Option<Var<'t>> = None;
        let mut per_scale = BTreeMap::new();
        for (conv, &s) in self.head.iter().zip(&STRIDES) {
            let f = features
                .get(&s)
                .ok_or_else(|| Error::InvalidArgument(format!("missing feature map at stride {s}")))?;
            let logits = conv.forward(ctx, &f.tensor)?;
            let up = logits.bilinear_upsample(s)?;
            per_scale.insert(s, logits);
            fused = Some(match fused {
                Some(acc) => acc.add(&up)?,
                None => up,
            });
        }
        Ok((fused.expect("four strides"), per_scale))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, image: &Var<'t>) -> Result<Forward<'t>> {
        let features = self.encode(ctx, image)?;
        let (logits, scale_logits) = self.segment_logits(ctx, &features)?;
        Ok(Forward {
            features,
            scale_logits,
            logits,
        })
    }

    /// Fused logits `B x C x H x W` for `images` in evaluation mode.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "expected B x {IMAGE_CHANNELS} x H x W images, got {shape:?}"
            )));
        }
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let ctx = Ctx::new(&tape, &vars, &self.buffers, false);
        let fwd = self.forward(&ctx, &tape.constant(images.clone()))?;
        let logits = fwd.logits.value().clone();
        Ok(logits)
    }

    /// Inputs to the projectors: raw encoder features (`backbone`) or the
    /// head's top-down fused logits at each stride (`neck`).
    pub fn loss_features<'t>(&self, fwd: &Forward<'t>) -> Result<BTreeMap<usize, FeatureMap<'t>>> {
        match self.loss_position {
            LossPosition::Backbone => Ok(fwd.features.clone()),
            LossPosition::Neck => {
                let mut out = BTreeMap::new();
                let mut coarser: Option<Var<'t>> = None;
                for &s in STRIDES.iter().rev() {
                    let l = fwd.scale_logits[&s];
                    let n = match coarser {
                        Some(c) => l.add(&c.bilinear_upsample(2)?)?,
                        None => l,
                    };
                    out.insert(s, FeatureMap::new(n, s));
                    coarser = Some(n);
                }
                Ok(out)
            }
        }
    }

    pub fn project<'t>(&self, ctx: &Ctx<'t, '_>, features: &FeatureMap<'t>) -> Result<FeatureMap<'t>> {
        let p = self
            .projectors
            .get(&features.stride)
            .ok_or_else(|| Error::InvalidArgument(format!("no projector at stride {}", features.stride)))?;
        p.project(ctx, features)
    }
}

/// Per-pixel softmax of `B x C x H x W` logits.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4("softmax")?;
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    let mut col = vec![0.0; c];
    for bi in 0..b {
        for p in 0..hw {
            for (ch, v) in col.iter_mut().enumerate() {
                *v = x[(bi * c + ch) * hw + p];
            }
            let lse = crate::autodiff::logsumexp(&col);
            for ch in 0..c {
                out[(bi * c + ch) * hw + p] = (col[ch] - lse).exp();
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Per-pixel argmax over channels (lowest index wins ties).
pub fn argmax_channels(logits: &Tensor, ignore_index: u32) -> Result<crate::labels::LabelMap> {
    let (b, c, h, w) = logits.dims4("argmax")?;
    let hw = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if x[(bi * c + ch) * hw + p] > x[(bi * c + best) * hw + p] {
                    best = ch;
                }
            }
            out.push(best as u32);
        }
    }
    crate::labels::LabelMap::new(b, h, w, out, ignore_index)
}

/// Segmentation probabilities from precomputed features.
pub fn segment<'t>(model: &SegModel, ctx: &Ctx<'t, '_>, features: &BTreeMap<usize, FeatureMap<'t>>) -> Result<Tensor> {
    let (logits, _) = model.segment_logits(ctx, features)?;
    let v = logits.value();
    softmax_channels(&v)
}
