//! Per-scale cross-modal interaction: image-query / text-key-value
//! attention builds a rough mask, which the prompted decoder refines into
//! a valid mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::encoders::{EncoderBundle, FeaturePyramid, ModelDims, PromptPoint, PromptSet, NUM_SCALES};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, ConvSpec, Ctx, Linear, ParamId, ParamStore};
use crate::raster::{BBox, BinaryMask};
use crate::synth_data::CaseRecord;

pub fn attention_group(scale: usize) -> String {
    format!("attention.scale{scale}")
}

/// Image queries (max-pool then 1x1 conv) against text keys and values.
#[derive(Clone, Debug)]
pub struct CrossModalAttention {
    pub q_proj: Conv2d,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Conv2d,
    pub norm: ChannelNorm,
    pub dim: usize,
}

/// Attention weights `[queries, tokens]` and the normalised branch output
/// `[C_m, R, R]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub weights: Var,
    pub branch: Var,
}

impl CrossModalAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dims: &ModelDims, scale: usize) -> Self {
        let g = attention_group(scale);
        let n = format!("attention.scale{scale}");
        let da = dims.attention_dim;
        Self {
            q_proj: Conv2d::new(store, rng, &format!("{n}.q"), &g, dims.level_channels(scale), da, ConvSpec::pointwise()),
            k_proj: Linear::new(store, rng, &format!("{n}.k"), &g, dims.text_dim, da),
            v_proj: Linear::new(store, rng, &format!("{n}.v"), &g, dims.text_dim, da),
            out_proj: Conv2d::new(store, rng, &format!("{n}.out"), &g, da, dims.rough_channels, ConvSpec::pointwise()),
            norm: ChannelNorm::new(store, &format!("{n}.norm"), &g, dims.rough_channels),
            dim: da,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, feat: Var, text: Var) -> Result<AttentionOutput> {
        let fs = cx.g.shape(feat).to_vec();
        if fs.len() != 3 || fs[0] != self.q_proj.in_channels || fs[1] % 2 != 0 || fs[2] % 2 != 0 {
            return Err(Error::Shape(format!(
                "attention expects [{}, even, even] image features, got {fs:?}",
                self.q_proj.in_channels
            )));
        }
        let ts = cx.g.shape(text).to_vec();
        if ts.len() != 2 || ts[0] == 0 || ts[1] != self.k_proj.in_features {
            return Err(Error::Shape(format!(
                "attention expects [L, {}] text embeddings, got {ts:?}",
                self.k_proj.in_features
            )));
        }
        let (h, w) = (fs[1], fs[2]);
        let (ph, pw) = (h / 2, w / 2);
        let pooled = cx.g.max_pool2(feat);
        let q = self.q_proj.forward(cx, pooled);
        let q = cx.g.reshape(q, &[self.dim, ph * pw]);
        let q = cx.g.transpose(q);
        let k = self.k_proj.forward(cx, text);
        let v = self.v_proj.forward(cx, text);
        let s = cx.g.matmul_t(q, false, k, true);
        let s = cx.g.scale(s, 1.0 / (self.dim as f64).sqrt());
        let weights = cx.g.softmax_rows(s);
        let o = cx.g.matmul(weights, v);
        let o = cx.g.transpose(o);
        let o = cx.g.reshape(o, &[self.dim, ph, pw]);
        let o = cx.g.resize(o, h, w);
        let o = self.out_proj.forward(cx, o);
        let branch = self.norm.forward(cx, o);
        Ok(AttentionOutput { weights, branch })
    }
}

/// Which inputs feed the interaction modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionConfig {
    /// Text attention builds the rough mask; otherwise it is a learned constant.
    pub use_text: bool,
    /// Prompted decoder refines the rough mask; otherwise a 1x1 head does.
    pub use_prompts: bool,
    pub k_fg: usize,
    pub k_bg: usize,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            use_text: true,
            use_prompts: true,
            k_fg: 3,
            k_bg: 1,
        }
    }
}

/// Test hooks for the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks {
    pub zero_attention: bool,
}

/// Parameters owned by one scale's interaction module.
#[derive(Clone, Debug)]
pub struct ScaleModule {
    pub scale: usize,
    pub attention: Option<CrossModalAttention>,
    pub rough_constant: Option<ParamId>,
    /// Projects the rough mask to the image-feature width before decoding.
    pub rough_proj: Option<Conv2d>,
    /// Direct rough-mask to valid-mask head when the decoder is unused.
    pub vm_head: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct SamClip {
    pub config: InteractionConfig,
    pub dims: ModelDims,
    pub scales: Vec<ScaleModule>,
}

impl SamClip {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        dims: &ModelDims,
        config: InteractionConfig,
    ) -> Self {
        let scales = (0..NUM_SCALES)
            .map(|s| {
                let g = attention_group(s);
                let attention = config
                    .use_text
                    .then(|| CrossModalAttention::new(store, rng, dims, s));
                let rough_constant = (!config.use_text).then(|| {
                    store.add(
                        format!("rough_constant.scale{s}"),
                        format!("rough_constant.scale{s}"),
                        Tensor::zeros(&[dims.rough_channels]),
                    )
                });
                let rough_proj = config.use_prompts.then(|| {
                    Conv2d::new(
                        store,
                        rng,
                        &format!("attention.scale{s}.rough_proj"),
                        &g,
                        dims.rough_channels,
                        dims.level_channels(s),
                        ConvSpec::pointwise(),
                    )
                });
                let vm_head = (!config.use_prompts).then(|| {
                    Conv2d::new(
                        store,
                        rng,
                        &format!("vm_head.scale{s}"),
                        &format!("vm_head.scale{s}"),
                        dims.rough_channels,
                        1,
                        ConvSpec::pointwise(),
                    )
                });
                ScaleModule {
                    scale: s,
                    attention,
                    rough_constant,
                    rough_proj,
                    vm_head,
                }
            })
            .collect();
        Self {
            config,
            dims: *dims,
            scales,
        }
    }

    fn check_feat<T: Scalar>(&self, cx: &Ctx<'_, T>, scale: usize, feat: Var) -> Result<()> {
        let (rh, rw) = self.dims.decoder_size();
        let want = [self.dims.level_channels(scale), rh, rw];
        if cx.g.shape(feat) != want {
            return Err(Error::Shape(format!(
                "scale {scale} expects features {want:?}, got {:?}",
                cx.g.shape(feat)
            )));
        }
        Ok(())
    }

    /// Rough cross-modal mask `[C_m, R, R]`: normalised attention output
    /// plus the frozen image embedding. Without text, a learned constant.
    pub fn rough_mask<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        enc: &EncoderBundle,
        scale: usize,
        feat: Var,
        text: Option<Var>,
        hooks: Hooks,
    ) -> Result<Var> {
        self.check_feat(cx, scale, feat)?;
        let m = &self.scales[scale];
        if let Some(c) = m.rough_constant {
            let (rh, rw) = self.dims.decoder_size();
            let zeros = cx.constant(Tensor::zeros(&[self.dims.rough_channels, rh, rw]));
            let c = cx.p(c);
            return Ok(cx.g.add_channel_bias(zeros, c));
        }
        let att = m.attention.as_ref().expect("text path present");
        let text = text.ok_or_else(|| Error::InvalidInput("text embeddings required".into()))?;
        let residual = enc.clip_image.forward(cx, scale, feat);
        if hooks.zero_attention {
            return Ok(residual);
        }
        let out = att.forward(cx, feat, text)?;
        Ok(cx.g.add(out.branch, residual))
    }

    /// Valid-mask probabilities `[1, R, R]`.
    pub fn valid_mask<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        enc: &EncoderBundle,
        scale: usize,
        m_clip: Var,
        feat: Var,
        prompts: &PromptSet,
    ) -> Result<Var> {
        let logits = self.valid_mask_logits(cx, enc, scale, m_clip, feat, prompts)?;
        Ok(cx.g.sigmoid(logits))
    }

    /// Valid-mask logits `[1, R, R]`.
    pub fn valid_mask_logits<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        enc: &EncoderBundle,
        scale: usize,
        m_clip: Var,
        feat: Var,
        prompts: &PromptSet,
    ) -> Result<Var> {
        self.check_feat(cx, scale, feat)?;
        let (rh, rw) = self.dims.decoder_size();
        if cx.g.shape(m_clip) != [self.dims.rough_channels, rh, rw] {
            return Err(Error::Shape(format!("rough mask has shape {:?}", cx.g.shape(m_clip))));
        }
        let m = &self.scales[scale];
        let logits = match (&m.rough_proj, &m.vm_head) {
            (Some(proj), _) => {
                let r = proj.forward(cx, m_clip);
                let x = cx.g.add(feat, r);
                let emb = enc.prompt.forward(cx, prompts)?;
                enc.decoder.forward(cx, scale, x, emb)?
            }
            (None, Some(head)) => head.forward(cx, m_clip),
            (None, None) => unreachable!("every scale has a valid-mask path"),
        };
        Ok(logits)
    }

    /// Rough mask then valid mask for one scale.
    #[allow(clippy::too_many_arguments)]
    pub fn run_scale<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        enc: &EncoderBundle,
        scale: usize,
        pyramid: &FeaturePyramid,
        text: Option<Var>,
        prompts: &PromptSet,
        hooks: Hooks,
    ) -> Result<Var> {
        let logits = self.run_scale_logits(cx, enc, scale, pyramid, text, prompts, hooks)?;
        Ok(cx.g.sigmoid(logits))
    }

    /// As [`SamClip::run_scale`], before the sigmoid.
    #[allow(clippy::too_many_arguments)]
    pub fn run_scale_logits<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        enc: &EncoderBundle,
        scale: usize,
        pyramid: &FeaturePyramid,
        text: Option<Var>,
        prompts: &PromptSet,
        hooks: Hooks,
    ) -> Result<Var> {
        if scale >= NUM_SCALES {
            return Err(Error::InvalidInput(format!("scale {scale} out of range")));
        }
        let feat = pyramid.resized[scale];
        let m = self.rough_mask(cx, enc, scale, feat, text, hooks)?;
        self.valid_mask_logits(cx, enc, scale, m, feat, prompts)
    }

    /// Valid masks at all four scales for one case, with prompts drawn from
    /// `seed`.
    pub fn run_scale_module<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        enc: &EncoderBundle,
        scale: usize,
        pyramid: &FeaturePyramid,
        text: Option<Var>,
        case: &CaseRecord,
        seed: u64,
    ) -> Result<Var> {
        let prompts = synthesize_prompts(&case.bbox, &case.rough_mask, seed, self.config.k_fg, self.config.k_bg)?;
        self.run_scale(cx, enc, scale, pyramid, text, &prompts, Hooks::default())
    }
}

/// Normalised box and `k_fg` foreground / `k_bg` background points,
/// sampled with replacement. Background points come from inside the box
/// but outside the rough mask; none are drawn if that region is empty.
pub fn synthesize_prompts(bbox: &BBox, rough: &BinaryMask, seed: u64, k_fg: usize, k_bg: usize) -> Result<PromptSet> {
    let (w, h) = (rough.width, rough.height);
    if rough.is_empty() {
        return Err(Error::InvalidInput("rough mask has no foreground pixel".into()));
    }
    if bbox.x_min > bbox.x_max || bbox.y_min > bbox.y_max || bbox.x_max >= w || bbox.y_max >= h {
        return Err(Error::InvalidInput(format!("bbox {bbox:?} invalid for {w}x{h}")));
    }
    if k_fg == 0 {
        return Err(Error::InvalidInput("at least one foreground point is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = |(x, y): (usize, usize), fg: bool| PromptPoint {
        x: (x as f64 + 0.5) / w as f64,
        y: (y as f64 + 0.5) / h as f64,
        is_foreground: fg,
    };
    let fg: Vec<(usize, usize)> = rough.foreground().collect();
    let mut points: Vec<PromptPoint> = (0..k_fg)
        .map(|_| norm(fg[rng.random_range(0..fg.len())], true))
        .collect();
    let bg: Vec<(usize, usize)> = (bbox.y_min..=bbox.y_max)
        .flat_map(|y| (bbox.x_min..=bbox.x_max).map(move |x| (x, y)))
        .filter(|&(x, y)| !rough.get(x, y))
        .collect();
    if !bg.is_empty() {
        points.extend((0..k_bg).map(|_| norm(bg[rng.random_range(0..bg.len())], false)));
    }
    Ok(PromptSet {
        bbox: [
            bbox.x_min as f64 / w as f64,
            bbox.y_min as f64 / h as f64,
            (bbox.x_max + 1) as f64 / w as f64,
            (bbox.y_max + 1) as f64 / h as f64,
        ],
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GrayImage;

    const SIDE: usize = 32;

    struct Fixture {
        store: ParamStore<f64>,
        enc: EncoderBundle,
        sc: SamClip,
    }

    fn fixture(config: InteractionConfig) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = ModelDims::for_image(SIDE, SIDE);
        let enc = EncoderBundle::new(&mut store, &mut rng, dims).unwrap();
        let sc = SamClip::new(&mut store, &mut rng, &dims, config);
        Fixture { store, enc, sc }
    }

    fn image() -> GrayImage {
        GrayImage::new(SIDE, SIDE, (0..SIDE * SIDE).map(|i| ((i * 31) % 200) as u8).collect())
    }

    fn prompts() -> PromptSet {
        let mut rough = BinaryMask::empty(SIDE, SIDE);
        for y in 10..16 {
            for x in 12..18 {
                rough.set(x, y, true);
            }
        }
        let bbox = BBox { x_min: 9, y_min: 8, x_max: 20, y_max: 18 };
        synthesize_prompts(&bbox, &rough, 4, 3, 1).unwrap()
    }

    const TEXT_A: &str = "Age 70, M. Hospital stay 9 d. Onset-to-CT 4 h. GCS 7. Treatment: surgical. Hemorrhage at central, volume 12.0 mL.";
    const TEXT_B: &str = "Age 70, M. Hospital stay 9 d. Onset-to-CT 4 h. GCS 14. Treatment: surgical. Hemorrhage at central, volume 12.0 mL.";

    #[test]
    fn attention_rows_sum_to_one_and_single_token_broadcasts() {
        let f = fixture(InteractionConfig::default());
        let mask = vec![true; f.store.len()];
        let mut cx = Ctx::new(&f.store, &mask);
        let pyr = f.enc.pyramid.forward(&mut cx, &image()).unwrap();
        let text = f.enc.clip_text.forward(&mut cx, TEXT_A).unwrap();
        let att = f.sc.scales[2].attention.as_ref().unwrap();
        let out = att.forward(&mut cx, pyr.resized[2], text).unwrap();
        let w = cx.g.value(out.weights);
        let l = w.dim(1);
        for row in w.data().chunks(l) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // one token: every weight is exactly 1, so every pre-norm position
        // carries the same value vector and the branch is spatially constant
        let single = f.enc.clip_text.forward(&mut cx, "gcs").unwrap();
        let out = att.forward(&mut cx, pyr.resized[2], single).unwrap();
        assert!(cx.g.value(out.weights).data().iter().all(|&v| v == 1.0));
        let b = cx.g.value(out.branch);
        let per = b.len() / b.dim(0);
        for plane in b.data().chunks(per) {
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-9));
        }
    }

    #[test]
    fn rough_mask_depends_on_gcs_token() {
        let f = fixture(InteractionConfig::default());
        let mask = vec![true; f.store.len()];
        let mut cx = Ctx::new(&f.store, &mask);
        let pyr = f.enc.pyramid.forward(&mut cx, &image()).unwrap();
        let ta = f.enc.clip_text.forward(&mut cx, TEXT_A).unwrap();
        let tb = f.enc.clip_text.forward(&mut cx, TEXT_B).unwrap();
        let a = f.sc.rough_mask(&mut cx, &f.enc, 0, pyr.resized[0], Some(ta), Hooks::default()).unwrap();
        let b = f.sc.rough_mask(&mut cx, &f.enc, 0, pyr.resized[0], Some(tb), Hooks::default()).unwrap();
        assert_eq!(cx.g.shape(a), &[32, 16, 16]);
        assert_ne!(cx.g.value(a), cx.g.value(b));
    }

    #[test]
    fn zeroed_attention_leaves_the_image_embedding() {
        let f = fixture(InteractionConfig::default());
        let mask = vec![true; f.store.len()];
        let mut cx = Ctx::new(&f.store, &mask);
        let pyr = f.enc.pyramid.forward(&mut cx, &image()).unwrap();
        let t = f.enc.clip_text.forward(&mut cx, TEXT_A).unwrap();
        let hooks = Hooks { zero_attention: true };
        let m = f.sc.rough_mask(&mut cx, &f.enc, 1, pyr.resized[1], Some(t), hooks).unwrap();
        let e = f.enc.clip_image.forward(&mut cx, 1, pyr.resized[1]);
        assert_eq!(cx.g.value(m), cx.g.value(e));
    }

    #[test]
    fn valid_masks_are_probabilities_and_order_invariant() {
        let f = fixture(InteractionConfig::default());
        let mask = vec![true; f.store.len()];
        let mut cx = Ctx::new(&f.store, &mask);
        let pyr = f.enc.pyramid.forward(&mut cx, &image()).unwrap();
        let t = f.enc.clip_text.forward(&mut cx, TEXT_A).unwrap();
        let p = prompts();
        let mut q = p.clone();
        q.points.rotate_left(1);
        let mut vms = Vec::new();
        for s in 0..NUM_SCALES {
            let a = f.sc.run_scale(&mut cx, &f.enc, s, &pyr, Some(t), &p, Hooks::default()).unwrap();
            let b = f.sc.run_scale(&mut cx, &f.enc, s, &pyr, Some(t), &q, Hooks::default()).unwrap();
            let a2 = f.sc.run_scale(&mut cx, &f.enc, s, &pyr, Some(t), &p, Hooks::default()).unwrap();
            assert_eq!(cx.g.shape(a), &[1, 16, 16]);
            assert!(cx.g.value(a).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(cx.g.value(a), cx.g.value(a2));
            for (x, y) in cx.g.value(a).data().iter().zip(cx.g.value(b).data()) {
                assert!((x - y).abs() < 1e-12);
            }
            vms.push(cx.g.value(a).clone());
        }
        assert_ne!(vms[0], vms[1]);
        assert_ne!(vms[2], vms[3]);
    }

    #[test]
    fn ablated_paths_still_produce_valid_masks() {
        for cfg in [
            InteractionConfig { use_text: false, ..Default::default() },
            InteractionConfig { use_prompts: false, ..Default::default() },
        ] {
            let f = fixture(cfg);
            let mask = vec![true; f.store.len()];
            let mut cx = Ctx::new(&f.store, &mask);
            let pyr = f.enc.pyramid.forward(&mut cx, &image()).unwrap();
            let t = f.enc.clip_text.forward(&mut cx, TEXT_A).unwrap();
            let vm = f.sc.run_scale(&mut cx, &f.enc, 0, &pyr, Some(t), &prompts(), Hooks::default()).unwrap();
            assert_eq!(cx.g.shape(vm), &[1, 16, 16]);
        }
    }

    #[test]
    fn prompts_degenerate_background() {
        let mut rough = BinaryMask::empty(8, 8);
        let bbox = BBox { x_min: 2, y_min: 2, x_max: 4, y_max: 5 };
        for y in 2..=5 {
            for x in 2..=4 {
                rough.set(x, y, true);
            }
        }
        let p = synthesize_prompts(&bbox, &rough, 1, 3, 1).unwrap();
        assert_eq!(p.points.len(), 3);
        for pt in &p.points {
            assert!(pt.is_foreground);
            assert!(pt.x >= p.bbox[0] && pt.x <= p.bbox[2] && pt.y >= p.bbox[1] && pt.y <= p.bbox[3]);
        }
        p.validate().unwrap();
    }

    #[test]
    fn prompts_are_seeded_and_single_pixel_collapses() {
        let mut rough = BinaryMask::empty(10, 10);
        rough.set(3, 7, true);
        let bbox = BBox { x_min: 1, y_min: 5, x_max: 6, y_max: 9 };
        let a = synthesize_prompts(&bbox, &rough, 9, 3, 1).unwrap();
        assert_eq!(a, synthesize_prompts(&bbox, &rough, 9, 3, 1).unwrap());
        for pt in a.points.iter().filter(|p| p.is_foreground) {
            assert_eq!((pt.x, pt.y), (0.35, 0.75));
        }
        assert_eq!(a.points.iter().filter(|p| !p.is_foreground).count(), 1);
        assert!(synthesize_prompts(&bbox, &BinaryMask::empty(10, 10), 9, 3, 1).is_err());
    }

    #[test]
    fn frozen_attention_rerun_is_identical() {
        let f = fixture(InteractionConfig::default());
        let mut mask = vec![true; f.store.len()];
        for (id, p) in f.store.iter() {
            if p.group.starts_with("attention") {
                mask[id.index()] = false;
            }
        }
        let run = |mask: &Vec<bool>| {
            let mut cx = Ctx::new(&f.store, mask);
            let pyr = f.enc.pyramid.forward(&mut cx, &image()).unwrap();
            let t = f.enc.clip_text.forward(&mut cx, TEXT_A).unwrap();
            let v = f.sc.run_scale(&mut cx, &f.enc, 3, &pyr, Some(t), &prompts(), Hooks::default()).unwrap();
            cx.g.value(v).clone()
        };
        assert_eq!(run(&mask), run(&vec![true; f.store.len()]));
    }
}
