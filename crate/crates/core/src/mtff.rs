//! Multi-task feature fusion: group aggregation bridges chained from the
//! deepest stage to the finest, per-stage mask heads, the segmentation
//! output and the feature output. Also the concatenation fallback used
//! when fusion is ablated, and the per-pixel class projection.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor, Var};
use crate::encoders::{FeaturePyramid, ModelDims, NUM_SCALES};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, ConvSpec, Ctx, ParamId, ParamStore};

pub const GROUP_COUNT: usize = 4;
pub const DILATIONS: [usize; GROUP_COUNT] = [1, 3, 5, 7];

/// Four dilated 3x3 group convolutions and a 1x1 fusing convolution.
#[derive(Clone, Debug)]
pub struct GroupAggregationBridge {
    pub dilated_convs: Vec<Conv2d>,
    pub fuse_conv: Conv2d,
    /// Normalisation of each group's input, then of the fuse input.
    pub group_norms: Vec<ChannelNorm>,
    pub fuse_norm: ChannelNorm,
    pub image_channels: usize,
    pub lower_channels: usize,
}

impl GroupAggregationBridge {
    /// `group` names the parameter group; `width` is the output channel count.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        group: &str,
        image_channels: usize,
        lower_channels: usize,
        width: usize,
    ) -> Result<Self> {
        for (what, c) in [("image", image_channels), ("lower", lower_channels), ("output", width)] {
            if c % GROUP_COUNT != 0 {
                return Err(Error::Shape(format!("{what} channels {c} not divisible by {GROUP_COUNT}")));
            }
        }
        let per_in = image_channels / GROUP_COUNT + 1 + lower_channels / GROUP_COUNT;
        let per_out = width / GROUP_COUNT;
        let dilated_convs = DILATIONS
            .iter()
            .enumerate()
            .map(|(g, &d)| {
                Conv2d::new(store, rng, &format!("{group}.group{g}"), group, per_in, per_out, ConvSpec::dilated(3, d))
            })
            .collect();
        let fuse_conv = Conv2d::new(store, rng, &format!("{group}.fuse"), group, width, width, ConvSpec::pointwise());
        let group_norms = (0..GROUP_COUNT)
            .map(|g| ChannelNorm::new(store, &format!("{group}.group{g}.norm"), group, per_in))
            .collect();
        let fuse_norm = ChannelNorm::new(store, &format!("{group}.fuse.norm"), group, width);
        Ok(Self {
            dilated_convs,
            fuse_conv,
            group_norms,
            fuse_norm,
            image_channels,
            lower_channels,
        })
    }

    /// Concatenated group outputs before the fusing convolution.
    pub fn groups<T: Scalar>(&self, cx: &mut Ctx<'_, T>, image: Var, vm: Var, lower: Var) -> Result<Var> {
        let (si, sv, sl) = (cx.g.shape(image).to_vec(), cx.g.shape(vm).to_vec(), cx.g.shape(lower).to_vec());
        if si[0] % GROUP_COUNT != 0 || sl[0] % GROUP_COUNT != 0 {
            return Err(Error::Shape(format!(
                "channel counts {} and {} must be divisible by {GROUP_COUNT}",
                si[0], sl[0]
            )));
        }
        if si[0] != self.image_channels || sl[0] != self.lower_channels || sv[0] != 1 {
            return Err(Error::Shape(format!(
                "bridge expects ({}, 1, {}) channels, got ({}, {}, {})",
                self.image_channels, self.lower_channels, si[0], sv[0], sl[0]
            )));
        }
        if si[1..] != sv[1..] || si[1..] != sl[1..] {
            return Err(Error::Shape(format!("bridge inputs differ in size: {si:?} {sv:?} {sl:?}")));
        }
        let (ci, cl) = (si[0] / GROUP_COUNT, sl[0] / GROUP_COUNT);
        let mut outs = Vec::with_capacity(GROUP_COUNT);
        for (g, conv) in self.dilated_convs.iter().enumerate() {
            let a = cx.g.narrow(image, g * ci, ci);
            let b = cx.g.narrow(lower, g * cl, cl);
            let x = cx.g.concat(&[a, vm, b]);
            let x = self.group_norms[g].forward(cx, x);
            let y = conv.forward(cx, x);
            outs.push(cx.g.silu(y));
        }
        Ok(cx.g.concat(&outs))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, image: Var, vm: Var, lower: Var) -> Result<Var> {
        let cat = self.groups(cx, image, vm, lower)?;
        let cat = self.fuse_norm.forward(cx, cat);
        let y = self.fuse_conv.forward(cx, cat);
        Ok(cx.g.silu(y))
    }
}

/// Per-stage fused features, per-stage mask logits (all at the decoder
/// grid), `S` at full resolution and at the decoder grid, and `F`.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub fused: Vec<Var>,
    pub stage_masks: Vec<Var>,
    pub s: Var,
    pub s_grid: Var,
    pub f: Var,
}

pub fn gab_group(stage: usize) -> String {
    format!("gab.stage{stage}")
}

pub fn mask_head_group(stage: usize) -> String {
    format!("mask_head.stage{stage}")
}

#[derive(Clone, Debug)]
pub struct Mtff {
    pub bridges: Vec<GroupAggregationBridge>,
    pub mask_heads: Vec<Conv2d>,
    /// Learned per-channel constant standing in for the missing lower
    /// feature at the deepest stage.
    pub deepest_lower: ParamId,
    pub dims: ModelDims,
}

impl Mtff {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dims: &ModelDims) -> Result<Self> {
        let cf = dims.fused_channels;
        let bridges = (0..NUM_SCALES)
            .map(|s| GroupAggregationBridge::new(store, rng, &gab_group(s), dims.level_channels(s), cf, cf))
            .collect::<Result<Vec<_>>>()?;
        let mask_heads = (0..NUM_SCALES)
            .map(|s| {
                let g = mask_head_group(s);
                let c = Conv2d::new(store, rng, &g, &g, cf, 1, ConvSpec::pointwise());
                // near-zero start: each stage mask begins close to its valid mask
                let w = &mut store.get_mut(c.weight).value;
                *w = w.map(|v| v * T::of(1e-2));
                if let Some(b) = c.bias {
                    store.get_mut(b).value = Tensor::zeros(&[1]);
                }
                c
            })
            .collect();
        let last = NUM_SCALES - 1;
        let deepest_lower = store.add(
            format!("{}.lower_constant", gab_group(last)),
            gab_group(last),
            Tensor::zeros(&[cf]),
        );
        Ok(Self {
            bridges,
            mask_heads,
            deepest_lower,
            dims: *dims,
        })
    }

    fn lower_constant<T: Scalar>(&self, cx: &mut Ctx<'_, T>) -> Var {
        let (rh, rw) = self.dims.decoder_size();
        let zeros = cx.constant(Tensor::zeros(&[self.dims.fused_channels, rh, rw]));
        let c = cx.p(self.deepest_lower);
        cx.g.add_channel_bias(zeros, c)
    }

    /// Runs the fusion chain. When `vm0_logits` is given, the stage-0 mask
    /// logits are a residual on the scale-0 valid-mask logits.
    /// `perturb_deepest` is added to `fused[3]` when given (test hook).
    pub fn forward_with<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        pyramid: &FeaturePyramid,
        vms: &[Var],
        vm0_logits: Option<Var>,
        perturb_deepest: Option<Var>,
    ) -> Result<StageOutputs> {
        if vms.len() != NUM_SCALES || pyramid.resized.len() != NUM_SCALES {
            return Err(Error::Shape(format!("need {NUM_SCALES} valid masks and pyramid levels")));
        }
        let mut fused = vec![None; NUM_SCALES];
        let mut stage_masks = vec![None; NUM_SCALES];
        let mut lower = self.lower_constant(cx);
        let mut running: Option<Var> = None;
        for s in (0..NUM_SCALES).rev() {
            let mut f = self.bridges[s].forward(cx, pyramid.resized[s], vms[s], lower)?;
            if s == NUM_SCALES - 1 {
                if let Some(p) = perturb_deepest {
                    f = cx.g.add(f, p);
                }
            }
            let acc = match running {
                Some(r) => cx.g.add(f, r),
                None => f,
            };
            let mut m = self.mask_heads[s].forward(cx, acc);
            if let (0, Some(l)) = (s, vm0_logits) {
                m = cx.g.add(m, l);
            }
            stage_masks[s] = Some(m);
            running = Some(acc);
            fused[s] = Some(f);
            lower = f;
        }
        let fused: Vec<Var> = fused.into_iter().map(Option::unwrap).collect();
        let stage_masks: Vec<Var> = stage_masks.into_iter().map(Option::unwrap).collect();
        Ok(finish(cx, &self.dims, fused, stage_masks))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid, vms: &[Var]) -> Result<StageOutputs> {
        self.forward_with(cx, pyramid, vms, None, None)
    }
}

fn finish<T: Scalar>(cx: &mut Ctx<'_, T>, dims: &ModelDims, fused: Vec<Var>, stage_masks: Vec<Var>) -> StageOutputs {
    let s_grid = cx.g.sigmoid(stage_masks[0]);
    let up = cx.g.resize(stage_masks[0], dims.image_height, dims.image_width);
    let s = cx.g.sigmoid(up);
    let f = fused[0];
    StageOutputs {
        fused,
        stage_masks,
        s,
        s_grid,
        f,
    }
}

pub const GROUP_CONCAT: &str = "concat_fusion";

/// Direct concatenation of every resized level and valid mask followed by
/// a 1x1 fusion and a single mask head.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub fuse: Conv2d,
    pub mask_head: Conv2d,
    pub dims: ModelDims,
}

impl ConcatFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, dims: &ModelDims) -> Self {
        let cin: usize = (0..NUM_SCALES).map(|s| dims.level_channels(s) + 1).sum();
        let cf = dims.fused_channels;
        Self {
            fuse: Conv2d::new(store, rng, "concat_fusion.fuse", GROUP_CONCAT, cin, cf, ConvSpec::pointwise()),
            mask_head: Conv2d::new(store, rng, "concat_fusion.mask_head", GROUP_CONCAT, cf, 1, ConvSpec::pointwise()),
            dims: *dims,
        }
    }

    /// Same output contract with a single stage.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid, vms: &[Var]) -> Result<StageOutputs> {
        if vms.len() != NUM_SCALES {
            return Err(Error::Shape(format!("need {NUM_SCALES} valid masks")));
        }
        let mut parts = pyramid.resized.clone();
        parts.extend_from_slice(vms);
        let cat = cx.g.concat(&parts);
        let f = self.fuse.forward(cx, cat);
        let f = cx.g.silu(f);
        let m = self.mask_head.forward(cx, f);
        Ok(finish(cx, &self.dims, vec![f], vec![m]))
    }
}

pub const GROUP_P_PROJECTION: &str = "p_projection";

/// 1x1 map of `F` to two channels and a per-pixel softmax.
#[derive(Clone, Debug)]
pub struct PProjection {
    pub conv: Conv2d,
}

impl PProjection {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, GROUP_P_PROJECTION, GROUP_P_PROJECTION, channels, 2, ConvSpec::pointwise()),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, f: Var) -> Var {
        let logits = self.conv.forward(cx, f);
        channel_softmax(cx, logits)
    }
}

/// Softmax across axis 0 of `[C, H, W]` at every pixel.
pub fn channel_softmax<T: Scalar>(cx: &mut Ctx<'_, T>, x: Var) -> Var {
    let s = cx.g.shape(x).to_vec();
    let n = s[1..].iter().product();
    let flat = cx.g.reshape(x, &[s[0], n]);
    let t = cx.g.transpose(flat);
    let p = cx.g.softmax_rows(t);
    let back = cx.g.transpose(p);
    cx.g.reshape(back, &s)
}
