//! Whole-network assembly for a mode, the per-case forward pass and the
//! per-case loss graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor, Var};
use crate::classifier_head::ClassifierHead;
use crate::encoders::{EncoderBundle, ModelDims, PromptSet, NUM_SCALES};
use crate::error::{Error, Result};
use crate::harness::config::{Mode, RunConfig};
use crate::losses::{self, LossBreakdown, LossWeights, MtaVariant};
use crate::mtff::{ConcatFusion, Mtff, PProjection, StageOutputs};
use crate::nn::{Ctx, ParamStore};
use crate::sam_clip::{synthesize_prompts, Hooks, SamClip};
use crate::synth_data::CaseRecord;

#[derive(Clone, Debug)]
pub enum Fusion {
    Mtff(Mtff),
    Concat(ConcatFusion),
}

pub struct Model<T: Scalar> {
    pub mode: Mode,
    pub dims: ModelDims,
    pub store: ParamStore<T>,
    pub encoders: EncoderBundle,
    pub interaction: SamClip,
    pub fusion: Fusion,
    pub projection: Option<PProjection>,
    pub classifier: Option<ClassifierHead>,
    pub trainable: Vec<bool>,
    pub k: (usize, usize),
}

/// Graph nodes of one case's forward pass.
pub struct CaseForward {
    pub vms: Vec<Var>,
    pub stages: StageOutputs,
    pub p: Option<Var>,
    pub logits: Option<Var>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Prompt-sampling seed for a case, stable across runs and folds.
pub fn prompt_seed(run_seed: u64, case_id: &str) -> u64 {
    run_seed ^ fnv1a(case_id)
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RunConfig, dims: ModelDims) -> Result<Self> {
        let wiring = cfg.mode.wiring();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoders = EncoderBundle::new(&mut store, &mut rng, dims)?;
        let interaction = SamClip::new(&mut store, &mut rng, &dims, cfg.interaction());
        let fusion = if wiring.mtff {
            Fusion::Mtff(Mtff::new(&mut store, &mut rng, &dims)?)
        } else {
            Fusion::Concat(ConcatFusion::new(&mut store, &mut rng, &dims))
        };
        let projection = wiring
            .mta
            .then(|| PProjection::new(&mut store, &mut rng, dims.fused_channels));
        let classifier = if wiring.cla {
            Some(ClassifierHead::new(&mut store, &mut rng, dims.fused_channels, cfg.classifier.config())?)
        } else {
            None
        };
        let trainable = store.trainable_mask(&cfg.trainability_map());
        Ok(Self {
            mode: cfg.mode,
            dims,
            store,
            encoders,
            interaction,
            fusion,
            projection,
            classifier,
            trainable,
            k: (cfg.k_fg, cfg.k_bg),
        })
    }

    pub fn check_case(&self, case: &CaseRecord) -> Result<()> {
        if case.image.width != self.dims.image_width || case.image.height != self.dims.image_height {
            return Err(Error::data(
                &case.case_id,
                format!(
                    "image is {}x{}, model expects {}x{}",
                    case.image.width, case.image.height, self.dims.image_width, self.dims.image_height
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut Ctx<'_, T>, case: &CaseRecord, seed: u64) -> Result<CaseForward> {
        self.check_case(case)?;
        let enc = &self.encoders;
        let pyr = enc.pyramid.forward(cx, &case.image)?;
        let text = if self.interaction.config.use_text {
            Some(enc.clip_text.forward(cx, &case.text.rendered)?)
        } else {
            None
        };
        let prompts = if self.interaction.config.use_prompts {
            synthesize_prompts(&case.bbox, &case.rough_mask, seed, self.k.0, self.k.1)
                .map_err(|e| Error::data(&case.case_id, e.to_string()))?
        } else {
            PromptSet {
                bbox: [0.0, 0.0, 1.0, 1.0],
                points: Vec::new(),
            }
        };
        let vm_logits = (0..NUM_SCALES)
            .map(|s| self.interaction.run_scale_logits(cx, enc, s, &pyr, text, &prompts, Hooks::default()))
            .collect::<Result<Vec<_>>>()?;
        let vms: Vec<Var> = vm_logits.iter().map(|&l| cx.g.sigmoid(l)).collect();
        let stages = match &self.fusion {
            Fusion::Mtff(m) => m.forward_with(cx, &pyr, &vms, Some(vm_logits[0]), None)?,
            Fusion::Concat(c) => c.forward(cx, &pyr, &vms)?,
        };
        let p = self.projection.as_ref().map(|pp| pp.forward(cx, stages.f));
        let logits = match &self.classifier {
            Some(c) => Some(c.forward(cx, stages.f)?),
            None => None,
        };
        Ok(CaseForward { vms, stages, p, logits })
    }

    /// Loss graph for one case: returns the total node and its breakdown.
    pub fn case_loss(
        &self,
        cx: &mut Ctx<'_, T>,
        out: &CaseForward,
        case: &CaseRecord,
        w: &LossWeights,
        variant: MtaVariant,
    ) -> Result<(Var, LossBreakdown)> {
        let wiring = self.mode.wiring();
        let (h, wd) = (self.dims.image_height, self.dims.image_width);
        let (rh, rw) = self.dims.decoder_size();
        let mut seg_terms = Vec::new();
        let seg = if wiring.seg {
            // stage 0 at full resolution, deeper stages at the decoder grid
            let full = cx.constant(Tensor::from_f64(&[1, h, wd], &case.gt_mask.to_f64()));
            let mut probs = vec![out.stages.s];
            let mut targets = vec![full];
            if out.stages.stage_masks.len() > 1 {
                let down = case.gt_mask.downsample_area(rw, rh).to_f64();
                let t = cx.constant(Tensor::from_f64(&[1, rh, rw], &down));
                for &m in &out.stages.stage_masks[1..] {
                    probs.push(cx.g.sigmoid(m));
                    targets.push(t);
                }
            }
            let (total, terms) = losses::seg_loss_graph(&mut cx.g, &probs, &targets, &w.gamma, w.epsilon_smooth)?;
            seg_terms = terms
                .iter()
                .map(|&(d, j)| (cx.g.value(d).item().f64(), cx.g.value(j).item().f64()))
                .collect();
            Some(total)
        } else {
            None
        };
        let cla = match out.logits {
            Some(l) if wiring.cla => Some(losses::cla_loss_graph(&mut cx.g, l, case.label, w.xi)?),
            _ => None,
        };
        let mta = match out.p {
            Some(p) if wiring.mta => Some(losses::mta_loss_graph(&mut cx.g, p, out.stages.s_grid, w.epsilon_prob, variant)?),
            _ => None,
        };
        let value = |v: Option<Var>, cx: &Ctx<'_, T>| v.map_or(0.0, |v| cx.g.value(v).item().f64());
        let breakdown = losses::total_loss(seg_terms, value(seg, cx), value(cla, cx), value(mta, cx), w)
            .map_err(|e| Error::Numeric(format!("case {}: {e}", case.case_id)))?;
        let total = losses::total_graph(&mut cx.g, seg, cla, mta, w);
        Ok((total, breakdown))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{GROUP_CLIP_IMAGE, GROUP_CLIP_TEXT, GROUP_PROMPT};
    use crate::synth_data::{generate_cases, GeneratorConfig};

    fn cases() -> Vec<CaseRecord> {
        generate_cases(&GeneratorConfig::square(32), 8, 5).unwrap().cases
    }

    #[test]
    fn every_mode_runs_and_builds_expected_groups() {
        let cases = cases();
        for mode in Mode::ALL {
            let cfg = RunConfig {
                mode,
                ..Default::default()
            };
            let model = Model::<f64>::new(&cfg, ModelDims::for_image(32, 32)).unwrap();
            let groups = model.store.groups();
            let w = mode.wiring();
            assert_eq!(groups.contains("classifier"), w.cla, "{mode}");
            assert_eq!(groups.contains("p_projection"), w.mta, "{mode}");
            assert_eq!(groups.contains("gab.stage0"), w.mtff, "{mode}");
            assert_eq!(groups.contains("concat_fusion"), !w.mtff, "{mode}");
            assert_eq!(groups.contains("attention.scale0"), w.use_text || w.use_prompts, "{mode}");
            let mut cx = Ctx::new(&model.store, &model.trainable);
            let out = model.forward(&mut cx, &cases[0], 1).unwrap();
            assert_eq!(cx.g.shape(out.stages.s), &[1, 32, 32]);
            assert_eq!(out.logits.is_some(), w.cla);
            let (total, b) = model
                .case_loss(&mut cx, &out, &cases[0], &cfg.loss_weights(), cfg.mta_variant)
                .unwrap();
            let t = cx.g.value(total).item();
            assert!(t.is_finite() && t >= 0.0);
            assert!((b.total - t).abs() < 1e-9, "{mode}: {} vs {t}", b.total);
            assert_eq!(b.seg_per_scale.len(), if !w.seg { 0 } else if w.mtff { 4 } else { 1 });
        }
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let cases = cases();
        let cfg = RunConfig::default();
        let model = Model::<f64>::new(&cfg, ModelDims::for_image(32, 32)).unwrap();
        let mut cx = Ctx::new(&model.store, &model.trainable);
        let out = model.forward(&mut cx, &cases[1], 1).unwrap();
        let (total, _) = model
            .case_loss(&mut cx, &out, &cases[1], &cfg.loss_weights(), cfg.mta_variant)
            .unwrap();
        let grads = cx.param_grads(total);
        let mut trained = 0;
        for (id, p) in model.store.iter() {
            if [GROUP_CLIP_IMAGE, GROUP_CLIP_TEXT, GROUP_PROMPT].contains(&p.group.as_str()) {
                assert!(grads[id.index()].is_none(), "{}", p.name);
            } else if grads[id.index()].is_some() {
                trained += 1;
            }
        }
        assert!(trained > 10);
    }

    #[test]
    fn wrong_image_size_names_case() {
        let cases = cases();
        let model = Model::<f64>::new(&RunConfig::default(), ModelDims::for_image(64, 64)).unwrap();
        let mut cx = Ctx::new(&model.store, &model.trainable);
        let err = model.forward(&mut cx, &cases[0], 0).err().unwrap();
        assert!(err.to_string().contains(&cases[0].case_id));
    }

    #[test]
    fn prompt_seed_is_stable() {
        assert_eq!(prompt_seed(3, "case_0001"), prompt_seed(3, "case_0001"));
        assert_ne!(prompt_seed(3, "case_0001"), prompt_seed(3, "case_0002"));
    }
}
