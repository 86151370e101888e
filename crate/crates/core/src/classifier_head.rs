//! Densely connected prognosis classifier over the fused feature map.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, ConvSpec, Ctx, Linear, ParamStore};

pub const GROUP_CLASSIFIER: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub dense_blocks: usize,
    pub growth_rate: usize,
    pub layers_per_block: usize,
    /// Per-block layer counts; overrides `dense_blocks x layers_per_block`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_layers: Option<Vec<usize>>,
    /// 1x1 bottleneck of `bottleneck * growth_rate` channels before each 3x3.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
    /// Width of an initial 1x1 projection of the input, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_features: Option<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            dense_blocks: 2,
            growth_rate: 8,
            layers_per_block: 3,
            block_layers: None,
            bottleneck: None,
            init_features: None,
        }
    }
}

impl ClassifierConfig {
    /// 121-layer dense-net layout (6, 12, 24, 16 layers, growth 32).
    pub fn densenet121() -> Self {
        Self {
            dense_blocks: 4,
            growth_rate: 32,
            layers_per_block: 0,
            block_layers: Some(vec![6, 12, 24, 16]),
            bottleneck: Some(4),
            init_features: Some(64),
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        self.block_layers
            .clone()
            .unwrap_or_else(|| vec![self.layers_per_block; self.dense_blocks])
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.layers();
        if layers.is_empty() || layers.contains(&0) || self.growth_rate == 0 || self.bottleneck == Some(0) {
            return Err(Error::Config(format!("classifier sizes must be positive: {self:?}")));
        }
        if self.block_layers.is_none() && self.dense_blocks == 0 {
            return Err(Error::Config("dense_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    norm: ChannelNorm,
    bottleneck: Option<(ChannelNorm, Conv2d)>,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub config: ClassifierConfig,
    init: Option<Conv2d>,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<(ChannelNorm, Conv2d)>,
    final_norm: ChannelNorm,
    pub output: Linear,
    pub in_channels: usize,
}

impl ClassifierHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        config: ClassifierConfig,
    ) -> Result<Self> {
        config.validate()?;
        let g = GROUP_CLASSIFIER;
        let k = config.growth_rate;
        let init = config
            .init_features
            .map(|c| Conv2d::new(store, rng, "classifier.init", g, in_channels, c, ConvSpec::pointwise()));
        let mut channels = config.init_features.unwrap_or(in_channels);
        let layers = config.layers();
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &n) in layers.iter().enumerate() {
            let mut block = Vec::new();
            for l in 0..n {
                let name = format!("classifier.block{b}.layer{l}");
                let norm = ChannelNorm::new(store, &format!("{name}.norm"), g, channels);
                let (bottleneck, conv_in) = match config.bottleneck {
                    Some(m) => (
                        Some((
                            ChannelNorm::new(store, &format!("{name}.bottleneck.norm"), g, m * k),
                            Conv2d::new(store, rng, &format!("{name}.bottleneck"), g, channels, m * k, ConvSpec::pointwise()),
                        )),
                        m * k,
                    ),
                    None => (None, channels),
                };
                let conv = Conv2d::new(store, rng, &format!("{name}.conv"), g, conv_in, k, ConvSpec::same(3));
                block.push(DenseLayer { norm, bottleneck, conv });
                channels += k;
            }
            blocks.push(block);
            if b + 1 < layers.len() {
                let out = (channels / 2).max(1);
                let name = format!("classifier.transition{b}");
                transitions.push((
                    ChannelNorm::new(store, &format!("{name}.norm"), g, channels),
                    Conv2d::new(store, rng, &name, g, channels, out, ConvSpec::pointwise()),
                ));
                channels = out;
            }
        }
        let final_norm = ChannelNorm::new(store, "classifier.final_norm", g, channels);
        let output = Linear::new(store, rng, "classifier.output", g, channels, 2);
        Ok(Self {
            config,
            init,
            blocks,
            transitions,
            final_norm,
            output,
            in_channels,
        })
    }

    /// `[2]` logits `(good, poor)`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let s = cx.g.shape(f).to_vec();
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(Error::Shape(format!("classifier expects [{}, H, W], got {s:?}", self.in_channels)));
        }
        let (mut h, mut w) = (s[1], s[2]);
        let mut x = match &self.init {
            Some(c) => c.forward(cx, f),
            None => f,
        };
        for (b, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let y = layer.norm.forward(cx, x);
                let mut y = cx.g.silu(y);
                if let Some((norm, bn)) = &layer.bottleneck {
                    y = bn.forward(cx, y);
                    y = norm.forward(cx, y);
                    y = cx.g.silu(y);
                }
                let y = layer.conv.forward(cx, y);
                x = cx.g.concat(&[x, y]);
            }
            if let Some((norm, t)) = self.transitions.get(b) {
                let y = norm.forward(cx, x);
                let y = cx.g.silu(y);
                x = t.forward(cx, y);
                if h % 2 == 0 && w % 2 == 0 {
                    x = cx.g.avg_pool2(x);
                    h /= 2;
                    w /= 2;
                }
            }
        }
        let x = self.final_norm.forward(cx, x);
        let x = cx.g.silu(x);
        let pooled = cx.g.global_avg_pool(x);
        let c = cx.g.shape(pooled)[0];
        let row = cx.g.reshape(pooled, &[1, c]);
        let logits = self.output.forward(cx, row);
        Ok(cx.g.reshape(logits, &[2]))
    }

    /// Test hook: copies the "good" output column onto the "poor" one.
    pub fn symmetrize_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let w = store.get_mut(self.output.weight).value.data_mut();
        for row in w.chunks_mut(2) {
            row[1] = row[0];
        }
        let b = store.get_mut(self.output.bias).value.data_mut();
        b[1] = b[0];
    }
}

/// Softmax of `(logit_good, logit_poor)`.
pub fn predict_probability(logits: [f64; 2]) -> Result<(f64, f64)> {
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let m = logits[0].max(logits[1]);
    let (a, b) = ((logits[0] - m).exp(), (logits[1] - m).exp());
    Ok((a / (a + b), b / (a + b)))
}
