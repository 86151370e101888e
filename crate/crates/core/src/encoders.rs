//! Image pyramid stem and the small stand-in encoders: frozen image and
//! text embedders, a frozen prompt encoder and a fine-tunable mask decoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, standard_normal, uniform_tensor, Conv2d, ConvSpec, Ctx, Linear, ParamId, ParamStore};
use crate::raster::GrayImage;
use crate::synth_data::{AGE_RANGE, GCS_RANGE, ONSET_RANGE, STAY_RANGE};

pub const NUM_SCALES: usize = 4;

pub const GROUP_PYRAMID: &str = "pyramid";
pub const GROUP_CLIP_IMAGE: &str = "clip_image_encoder";
pub const GROUP_CLIP_TEXT: &str = "clip_text_encoder";
pub const GROUP_PROMPT: &str = "prompt_encoder";
pub const GROUP_DECODER: &str = "mask_decoder";

/// Widths and resolutions shared by every component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub image_height: usize,
    pub image_width: usize,
    /// Channels of the finest pyramid level; level `s` has `base << s`.
    pub base_channels: usize,
    pub text_dim: usize,
    pub prompt_dim: usize,
    pub attention_dim: usize,
    pub rough_channels: usize,
    pub fused_channels: usize,
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::for_image(128, 128)
    }
}

impl ModelDims {
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            image_height: height,
            image_width: width,
            base_channels: 16,
            text_dim: 64,
            prompt_dim: 64,
            attention_dim: 64,
            rough_channels: 32,
            fused_channels: 32,
            head_hidden: 16,
        }
    }

    pub fn level_channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Common decoder grid, half the input resolution.
    pub fn decoder_size(&self) -> (usize, usize) {
        (self.image_height / 2, self.image_width / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image_height, self.image_width);
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("image {h}x{w} must have sides divisible by 8")));
        }
        if (h / 2) % 2 != 0 || (w / 2) % 2 != 0 {
            return Err(Error::Shape(format!("decoder grid for {h}x{w} must be even")));
        }
        if self.base_channels % 4 != 0 || self.fused_channels % 4 != 0 {
            return Err(Error::Shape("channel widths must be divisible by 4".into()));
        }
        if self.prompt_dim % 2 != 0 {
            return Err(Error::Shape("prompt_dim must be even".into()));
        }
        Ok(())
    }
}

/// Four pyramid levels and their resamplings to the decoder grid.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub resized: Vec<Var>,
}

/// Stem convolution plus three stride-2 blocks.
#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    pub dims: ModelDims,
    pub stem: Conv2d,
    pub downs: Vec<Conv2d>,
    /// One per level, applied before each activation.
    pub norms: Vec<ChannelNorm>,
}

impl PyramidEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dims: ModelDims) -> Self {
        let c = dims.base_channels;
        let stem = Conv2d::new(store, rng, "pyramid.stem", GROUP_PYRAMID, 1, c, ConvSpec::same(3));
        let downs = (1..NUM_SCALES)
            .map(|s| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("pyramid.down{s}"),
                    GROUP_PYRAMID,
                    dims.level_channels(s - 1),
                    dims.level_channels(s),
                    ConvSpec::strided(3, 2),
                )
            })
            .collect();
        let norms = (0..NUM_SCALES)
            .map(|s| ChannelNorm::new(store, &format!("pyramid.norm{s}"), GROUP_PYRAMID, dims.level_channels(s)))
            .collect();
        Self { dims, stem, downs, norms }
    }

    /// Image as a `[1, H, W]` tensor scaled to `[0, 1]`.
    pub fn image_tensor<T: Scalar>(image: &GrayImage) -> Tensor<T> {
        let data = image.data.iter().map(|&v| T::of(v as f64 / 255.0)).collect();
        Tensor::new(&[1, image.height, image.width], data)
    }

    fn check(&self, image: &GrayImage) -> Result<()> {
        if image.height % 8 != 0 || image.width % 8 != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} must have sides divisible by 8",
                image.height, image.width
            )));
        }
        if image.height != self.dims.image_height || image.width != self.dims.image_width {
            return Err(Error::Shape(format!(
                "image {}x{} does not match model input {}x{}",
                image.height, image.width, self.dims.image_height, self.dims.image_width
            )));
        }
        Ok(())
    }

    /// Stem output before its activation.
    pub fn stem_preactivation<T: Scalar>(&self, cx: &mut Ctx<'_, T>, image: &GrayImage) -> Result<Var> {
        self.check(image)?;
        let x = cx.constant(Self::image_tensor(image));
        Ok(self.stem.forward(cx, x))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, image: &GrayImage) -> Result<FeaturePyramid> {
        let pre = self.stem_preactivation(cx, image)?;
        let pre = self.norms[0].forward(cx, pre);
        let mut x = cx.g.silu(pre);
        let mut levels = vec![x];
        for (d, n) in self.downs.iter().zip(&self.norms[1..]) {
            let y = d.forward(cx, x);
            let y = n.forward(cx, y);
            x = cx.g.silu(y);
            levels.push(x);
        }
        let (rh, rw) = self.dims.decoder_size();
        let resized = levels.iter().map(|&l| cx.g.resize(l, rh, rw)).collect();
        Ok(FeaturePyramid { levels, resized })
    }
}

/// Frozen stand-in image embedder, one small head per pyramid scale.
#[derive(Clone, Debug)]
pub struct ClipImageEncoder {
    pub convs: Vec<(Conv2d, Conv2d)>,
}

impl ClipImageEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dims: &ModelDims) -> Self {
        let cm = dims.rough_channels;
        let convs = (0..NUM_SCALES)
            .map(|s| {
                let a = Conv2d::new(
                    store,
                    rng,
                    &format!("clip_image.scale{s}.conv"),
                    GROUP_CLIP_IMAGE,
                    dims.level_channels(s),
                    cm,
                    ConvSpec::same(3),
                );
                let b = Conv2d::new(
                    store,
                    rng,
                    &format!("clip_image.scale{s}.proj"),
                    GROUP_CLIP_IMAGE,
                    cm,
                    cm,
                    ConvSpec::pointwise(),
                );
                (a, b)
            })
            .collect();
        Self { convs }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, scale: usize, feat: Var) -> Var {
        let (a, b) = &self.convs[scale];
        let h = a.forward(cx, feat);
        let h = cx.g.silu(h);
        b.forward(cx, h)
    }
}

pub const UNK_TOKEN: &str = "<unk>";

const TEMPLATE_WORDS: &[&str] = &[
    "age", "m", "f", "hospital", "stay", "d", "onset", "to", "ct", "h", "gcs", "treatment", "conservative",
    "surgical", "hemorrhage", "at", "left", "right", "anterior", "posterior", "central", "volume", "ml",
];

const AGE_BIN: u32 = 5;
const STAY_BIN: u32 = 5;
const ONSET_BIN: u32 = 6;
const VOLUME_BIN: f64 = 5.0;
const VOLUME_BINS: u32 = 20;

/// Token -> index map; index 0 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    index: BTreeMap<String, usize>,
}

fn bin_token(prefix: &str, v: u32, width: u32) -> String {
    let lo = v / width * width;
    format!("{prefix}_{lo}_{}", lo + width - 1)
}

fn volume_token(v: f64) -> String {
    let b = ((v / VOLUME_BIN).floor().max(0.0) as u32).min(VOLUME_BINS);
    if b == VOLUME_BINS {
        format!("vol_{}_plus", b * VOLUME_BIN as u32)
    } else {
        let lo = b * VOLUME_BIN as u32;
        format!("vol_{lo}_{}", lo + VOLUME_BIN as u32)
    }
}

impl Vocab {
    /// Every token the clinical template can produce.
    pub fn standard() -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        let mut push_bins = |prefix: &str, (lo, hi): (u32, u32), width: u32| {
            let mut v = lo / width * width;
            while v <= hi {
                tokens.push(bin_token(prefix, v, width));
                v += width;
            }
        };
        push_bins("age", AGE_RANGE, AGE_BIN);
        push_bins("stay", STAY_RANGE, STAY_BIN);
        push_bins("onset", ONSET_RANGE, ONSET_BIN);
        for g in GCS_RANGE.0..=GCS_RANGE.1 {
            tokens.push(format!("gcs_{g}"));
        }
        for b in 0..=VOLUME_BINS {
            tokens.push(volume_token(b as f64 * VOLUME_BIN));
        }
        let index = tokens.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        Self { index }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        Ok(tokenize(text)?.iter().map(|t| self.id(t)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::synth_data::write_json(path, &self.index)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: BTreeMap<String, usize> = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        Ok(Self { index })
    }
}

/// Lower-cases and splits on whitespace and punctuation. Numbers become
/// binned tokens chosen by the word before them; numbers in other
/// positions stay raw (and map to the unknown token).
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    if text.trim().is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty string".into()));
    }
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut raw: Vec<(String, bool)> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            raw.push((chars[start..i].iter().collect(), true));
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() && !chars[i].is_ascii_digit() {
                i += 1;
            }
            raw.push((chars[start..i].iter().collect(), false));
        } else {
            i += 1;
        }
    }
    let mut out = Vec::with_capacity(raw.len().max(1));
    for (k, (tok, numeric)) in raw.iter().enumerate() {
        if !numeric {
            out.push(tok.clone());
            continue;
        }
        let prev = k.checked_sub(1).map(|j| raw[j].0.as_str());
        let value: f64 = tok.parse().unwrap_or(f64::NAN);
        let whole = value.is_finite() && value.fract() == 0.0 && value >= 0.0;
        let t = match prev {
            Some("age") if whole => bin_token("age", value as u32, AGE_BIN),
            Some("stay") if whole => bin_token("stay", value as u32, STAY_BIN),
            Some("ct") if whole => bin_token("onset", value as u32, ONSET_BIN),
            Some("gcs") if whole => format!("gcs_{}", value as u32),
            Some("volume") if value.is_finite() => volume_token(value),
            _ => tok.clone(),
        };
        out.push(t);
    }
    if out.is_empty() {
        out.push(UNK_TOKEN.to_string());
    }
    Ok(out)
}

/// Frozen embedding table over [`Vocab`]; no positional encoding.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: Vocab,
    pub table: ParamId,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let vocab = Vocab::standard();
        let data = (0..vocab.len() * dim).map(|_| T::of(standard_normal(rng))).collect();
        let table = store.add("clip_text.embedding", GROUP_CLIP_TEXT, Tensor::new(&[vocab.len(), dim], data));
        Self { vocab, table, dim }
    }

    /// `[L, dim]` embedding sequence.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, text: &str) -> Result<Var> {
        let ids = self.vocab.encode(text)?;
        let table = cx.p(self.table);
        Ok(cx.g.gather_rows(table, &ids))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub is_foreground: bool,
}

/// Normalised box `(x_min, y_min, x_max, y_max)` and points in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub bbox: [f64; 4],
    pub points: Vec<PromptPoint>,
}

impl PromptSet {
    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].into_iter().all(unit) {
            return Err(Error::InvalidInput(format!("invalid normalised box {:?}", self.bbox)));
        }
        if self.points.is_empty() {
            return Err(Error::InvalidInput("prompt set needs at least one point".into()));
        }
        if let Some(p) = self.points.iter().find(|p| !unit(p.x) || !unit(p.y)) {
            return Err(Error::InvalidInput(format!("point {p:?} outside the unit square")));
        }
        Ok(())
    }
}

const TYPE_BOX_MIN: usize = 0;
const TYPE_BOX_MAX: usize = 1;
const TYPE_FG: usize = 2;
const TYPE_BG: usize = 3;

/// Random-Fourier positional encoding plus per-type embeddings.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    /// `[2, dim / 2]` Gaussian frequency matrix; a fixed buffer.
    pub basis: ParamId,
    /// `[4, dim]`: box-min, box-max, foreground point, background point.
    pub types: ParamId,
    pub dim: usize,
}

impl PromptEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let half = dim / 2;
        let b = (0..2 * half).map(|_| T::of(standard_normal(rng))).collect();
        let basis = store.add("prompt.fourier_basis", GROUP_PROMPT, Tensor::new(&[2, half], b));
        let types = store.add("prompt.type_embedding", GROUP_PROMPT, uniform_tensor(&[4, dim], 1.0, rng));
        Self { basis, types, dim }
    }

    /// Encoding of one normalised coordinate.
    pub fn positional<T: Scalar>(&self, store: &ParamStore<T>, x: f64, y: f64) -> Vec<f64> {
        let b = store.get(self.basis).value.to_f64();
        let half = self.dim / 2;
        let (u, v) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        let mut out = vec![0.0; self.dim];
        for j in 0..half {
            let a = std::f64::consts::TAU * (u * b[j] + v * b[half + j]);
            out[j] = a.sin();
            out[half + j] = a.cos();
        }
        out
    }

    /// Positional encoding at every cell centre of an `h x w` grid, `[h*w, dim]`.
    pub fn dense<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(h * w * self.dim);
        for y in 0..h {
            for x in 0..w {
                let pe = self.positional(store, (x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                data.extend(pe.into_iter().map(T::of));
            }
        }
        Tensor::new(&[h * w, self.dim], data)
    }

    /// `[2 + k, dim]`: box corners first, then points in input order.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, prompts: &PromptSet) -> Result<Var> {
        prompts.validate()?;
        let [x0, y0, x1, y1] = prompts.bbox;
        let mut coords = vec![(x0, y0, TYPE_BOX_MIN), (x1, y1, TYPE_BOX_MAX)];
        coords.extend(
            prompts
                .points
                .iter()
                .map(|p| (p.x, p.y, if p.is_foreground { TYPE_FG } else { TYPE_BG })),
        );
        let store = cx.store();
        let mut pe = Vec::with_capacity(coords.len() * self.dim);
        for &(x, y, _) in &coords {
            pe.extend(self.positional(store, x, y).into_iter().map(T::of));
        }
        let pe = cx.constant(Tensor::new(&[coords.len(), self.dim], pe));
        let idx: Vec<usize> = coords.iter().map(|c| c.2).collect();
        let table = cx.p(self.types);
        let ty = cx.g.gather_rows(table, &idx);
        Ok(cx.g.add(pe, ty))
    }
}

/// Single-head attention with separate q/k/v/out maps on `[n, dim]` tokens.
#[derive(Clone, Debug)]
pub struct TokenAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub dim: usize,
}

impl TokenAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, group: &str, dim: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), group, dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), group, dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), group, dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), group, dim, dim),
            dim,
        }
    }

    /// `queries` attend over `keys` (positional variants) and `values`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, queries: Var, keys: Var, values: Var) -> Var {
        let q = self.q.forward(cx, queries);
        let k = self.k.forward(cx, keys);
        let v = self.v.forward(cx, values);
        let s = cx.g.matmul_t(q, false, k, true);
        let s = cx.g.scale(s, 1.0 / (self.dim as f64).sqrt());
        let a = cx.g.softmax_rows(s);
        let o = cx.g.matmul(a, v);
        self.out.forward(cx, o)
    }
}

/// Shared promptable mask decoder: tokens attend to the image, the image
/// attends back to the tokens, then a per-pixel head emits logits.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub input_proj: Vec<Conv2d>,
    pub mask_token: ParamId,
    pub token_to_image: TokenAttention,
    pub image_to_token: TokenAttention,
    pub head_conv: Conv2d,
    pub head_out: Conv2d,
    pub grid: (usize, usize),
    pub dim: usize,
    dense_pe: Tensor<f64>,
}

impl MaskDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        dims: &ModelDims,
        prompt_encoder: &PromptEncoder,
    ) -> Self {
        let d = dims.prompt_dim;
        let input_proj = (0..NUM_SCALES)
            .map(|s| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("decoder.input_proj{s}"),
                    GROUP_DECODER,
                    dims.level_channels(s),
                    d,
                    ConvSpec::pointwise(),
                )
            })
            .collect();
        let mask_token = store.add("decoder.mask_token", GROUP_DECODER, uniform_tensor(&[1, d], 1.0, rng));
        let token_to_image = TokenAttention::new(store, rng, "decoder.token_to_image", GROUP_DECODER, d);
        let image_to_token = TokenAttention::new(store, rng, "decoder.image_to_token", GROUP_DECODER, d);
        let head_conv = Conv2d::new(store, rng, "decoder.head_conv", GROUP_DECODER, d, dims.head_hidden, ConvSpec::same(3));
        let head_out = Conv2d::new(store, rng, "decoder.head_out", GROUP_DECODER, dims.head_hidden, 1, ConvSpec::pointwise());
        let grid = dims.decoder_size();
        let pe = prompt_encoder.dense(store, grid.0, grid.1);
        let dense_pe = Tensor::new(pe.shape(), pe.to_f64());
        Self {
            input_proj,
            mask_token,
            token_to_image,
            image_to_token,
            head_conv,
            head_out,
            grid,
            dim: d,
            dense_pe,
        }
    }

    /// `image: [C_s, R, R]` for pyramid scale `scale`, `prompts: [n, d]`.
    /// Returns `[1, R, R]` logits.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, scale: usize, image: Var, prompts: Var) -> Result<Var> {
        let s = cx.g.shape(image).to_vec();
        let (rh, rw) = self.grid;
        if s.len() != 3 || s[1] != rh || s[2] != rw {
            return Err(Error::Shape(format!("decoder expects a {rh}x{rw} grid, got {s:?}")));
        }
        let proj = self.input_proj.get(scale).ok_or_else(|| Error::Shape(format!("no decoder input for scale {scale}")))?;
        if s[0] != proj.in_channels {
            return Err(Error::Shape(format!(
                "scale {scale} decoder input expects {} channels, got {}",
                proj.in_channels, s[0]
            )));
        }
        let ps = cx.g.shape(prompts).to_vec();
        if ps.len() != 2 || ps[1] != self.dim {
            return Err(Error::Shape(format!("prompt embeddings must be [n, {}], got {ps:?}", self.dim)));
        }
        let n = rh * rw;
        let x = proj.forward(cx, image);
        let x = cx.g.reshape(x, &[self.dim, n]);
        let x = cx.g.transpose(x);
        let pe = cx.constant(Tensor::new(self.dense_pe.shape(), self.dense_pe.data().iter().map(|&v| T::of(v)).collect()));
        let x_pe = cx.g.add(x, pe);

        let mt = cx.p(self.mask_token);
        let tokens = cx.g.concat(&[mt, prompts]);
        let upd = self.token_to_image.forward(cx, tokens, x_pe, x);
        let tokens = cx.g.add(tokens, upd);

        let upd = self.image_to_token.forward(cx, x_pe, tokens, tokens);
        let x = cx.g.add(x, upd);

        let x = cx.g.transpose(x);
        let x = cx.g.reshape(x, &[self.dim, rh, rw]);
        let h = self.head_conv.forward(cx, x);
        let h = cx.g.silu(h);
        Ok(self.head_out.forward(cx, h))
    }
}

/// All encoder-side components with their fixed parameter groups.
#[derive(Clone, Debug)]
pub struct EncoderBundle {
    pub pyramid: PyramidEncoder,
    pub clip_image: ClipImageEncoder,
    pub clip_text: TextEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

impl EncoderBundle {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let pyramid = PyramidEncoder::new(store, rng, dims);
        let clip_image = ClipImageEncoder::new(store, rng, &dims);
        let clip_text = TextEncoder::new(store, rng, dims.text_dim);
        let prompt = PromptEncoder::new(store, rng, dims.prompt_dim);
        let decoder = MaskDecoder::new(store, rng, &dims, &prompt);
        Ok(Self {
            pyramid,
            clip_image,
            clip_text,
            prompt,
            decoder,
        })
    }

    /// Standalone bundle seeded directly.
    pub fn seeded<T: Scalar>(store: &mut ParamStore<T>, seed: u64, dims: ModelDims) -> Result<Self> {
        Self::new(store, &mut ChaCha8Rng::seed_from_u64(seed), dims)
    }
}
