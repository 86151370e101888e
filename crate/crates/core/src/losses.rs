//! Deep-supervised soft Dice/Jaccard segmentation loss, inverse-frequency
//! weighted cross-entropy, the symmetric-KL consistency term between the
//! class-probability field and the segmentation output, and their
//! weighted total.
//!
//! Every term is built from graph operations so the same code serves
//! training and the plain-value helpers used for auditing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::raster::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtaVariant {
    /// `KL(P || S) + KL(S || P)`.
    #[default]
    SymmetricKl,
    /// `KL(P || M) / 2 + KL(S || M) / 2` with `M = (P + S) / 2`.
    MixtureJs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: [f64; 4],
    pub alpha: f64,
    pub beta: f64,
    pub xi: [f64; 2],
    pub epsilon_smooth: f64,
    pub epsilon_prob: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: [1.0, 0.75, 0.5, 0.25],
            alpha: 0.2,
            beta: 0.8,
            xi: [1.0, 1.0],
            epsilon_smooth: 1e-6,
            epsilon_prob: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .gamma
            .iter()
            .chain(&self.xi)
            .chain([&self.alpha, &self.beta, &self.epsilon_smooth, &self.epsilon_prob]);
        for v in all {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
            }
        }
        if self.epsilon_prob >= 0.5 {
            return Err(Error::Config("epsilon_prob must be below 0.5".into()));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `(1 - softDSC, 1 - softJaccard)` per supervised stage.
    pub seg_per_scale: Vec<(f64, f64)>,
    pub seg_total: f64,
    pub cla: f64,
    pub mta: f64,
    pub total: f64,
}

/// `xi_c = n / (2 n_c)` from training-split labels.
pub fn class_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let n = labels.len() as f64;
    let poor = labels.iter().filter(|&&l| l == 1).count() as f64;
    let good = n - poor;
    if good == 0.0 || poor == 0.0 {
        return Err(Error::Data {
            case_id: None,
            message: format!("class weights need both classes (good {good}, poor {poor})"),
        });
    }
    Ok([n / (2.0 * good), n / (2.0 * poor)])
}

/// `(1 - softDSC, 1 - softJaccard)` of probabilities against a target.
pub fn soft_overlap_terms<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, eps: f64) -> (Var, Var) {
    let inter = g.mul(pred, target);
    let inter = g.sum(inter);
    let sp = g.sum(pred);
    let st = g.sum(target);
    let denom = g.add(sp, st);
    let num_d = g.scale(inter, 2.0);
    let num_d = g.add_scalar(num_d, eps);
    let den_d = g.add_scalar(denom, eps);
    let dsc = g.div(num_d, den_d);
    let num_j = g.add_scalar(inter, eps);
    let den_j = g.sub(denom, inter);
    let den_j = g.add_scalar(den_j, eps);
    let jac = g.div(num_j, den_j);
    let d = g.scale(dsc, -1.0);
    let d = g.add_scalar(d, 1.0);
    let j = g.scale(jac, -1.0);
    let j = g.add_scalar(j, 1.0);
    (d, j)
}

/// `sum_i gamma_i (dice_i + jaccard_i)` over the supplied stages.
pub fn seg_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    probs: &[Var],
    targets: &[Var],
    gamma: &[f64],
    eps: f64,
) -> Result<(Var, Vec<(Var, Var)>)> {
    if probs.is_empty() || probs.len() != targets.len() || probs.len() > gamma.len() {
        return Err(Error::Shape(format!(
            "{} stage predictions, {} targets, {} weights",
            probs.len(),
            targets.len(),
            gamma.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut terms = Vec::with_capacity(probs.len());
    for (i, (&p, &t)) in probs.iter().zip(targets).enumerate() {
        if g.shape(p) != g.shape(t) {
            return Err(Error::Shape(format!(
                "stage {i}: prediction {:?} vs target {:?}",
                g.shape(p),
                g.shape(t)
            )));
        }
        let (d, j) = soft_overlap_terms(g, p, t, eps);
        let s = g.add(d, j);
        let s = g.scale(s, gamma[i]);
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
        terms.push((d, j));
    }
    Ok((total.expect("at least one stage"), terms))
}

/// Weighted cross-entropy of `[2]` logits against `label`.
///
/// Computed as `-xi * ln sigmoid(z_label - z_other)`, which agrees with
/// [`cla_loss`] wherever the label probability lies in `[eps, 1 - eps]`.
/// Outside that band the clamp would leave a confidently wrong case with
/// zero gradient; the log-sigmoid form keeps pulling it back.
pub fn cla_loss_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, label: u8, xi: [f64; 2]) -> Result<Var> {
    if label > 1 {
        return Err(Error::InvalidInput(format!("label {label} not in {{0, 1}}")));
    }
    let z = g.reshape(logits, &[2]);
    let own = g.narrow(z, label as usize, 1);
    let other = g.narrow(z, 1 - label as usize, 1);
    let margin = g.sub(own, other);
    let lp = g.log_sigmoid(margin);
    Ok(g.scale(lp, -xi[label as usize]))
}

fn cla_from_probs<T: Scalar>(g: &mut Graph<T>, p: Var, label: u8, xi: [f64; 2], eps: f64) -> Result<Var> {
    let p = g.reshape(p, &[2]);
    let p = g.clamp(p, eps, 1.0 - eps);
    let pl = g.narrow(p, label as usize, 1);
    let lp = g.log(pl);
    let lp = g.reshape(lp, &[1]);
    Ok(g.scale(lp, -xi[label as usize]))
}

fn clamp_renormalize<T: Scalar>(g: &mut Graph<T>, p: Var, eps: f64) -> Var {
    let c = g.shape(p)[0];
    let p = g.clamp(p, eps, 1.0 - eps);
    let z = g.sum_channels(p);
    let z = g.broadcast_channels(z, c);
    g.div(p, z)
}

/// Per-pixel `sum_c a log(a / b)` summed over channels, `[H, W]`.
fn kl_field<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let la = g.log(a);
    let lb = g.log(b);
    let d = g.sub(la, lb);
    let t = g.mul(a, d);
    g.sum_channels(t)
}

/// Consistency between `p: [2, H, W]` and segmentation probabilities
/// `s: [1, H, W]`, averaged over pixels.
pub fn mta_loss_graph<T: Scalar>(g: &mut Graph<T>, p: Var, s: Var, eps: f64, variant: MtaVariant) -> Result<Var> {
    let (sp, ss) = (g.shape(p).to_vec(), g.shape(s).to_vec());
    if sp.len() != 3 || sp[0] != 2 || ss.len() != 3 || ss[0] != 1 || sp[1..] != ss[1..] {
        return Err(Error::Shape(format!("mta needs [2, H, W] and [1, H, W], got {sp:?} and {ss:?}")));
    }
    let neg = g.scale(s, -1.0);
    let bg = g.add_scalar(neg, 1.0);
    let s2 = g.concat(&[bg, s]);
    let p = clamp_renormalize(g, p, eps);
    let s2 = clamp_renormalize(g, s2, eps);
    let field = match variant {
        MtaVariant::SymmetricKl => {
            let a = kl_field(g, p, s2);
            let b = kl_field(g, s2, p);
            g.add(a, b)
        }
        MtaVariant::MixtureJs => {
            let m = g.add(p, s2);
            let m = g.scale(m, 0.5);
            let a = kl_field(g, p, m);
            let b = kl_field(g, s2, m);
            let f = g.add(a, b);
            g.scale(f, 0.5)
        }
    };
    Ok(g.mean(field))
}

/// `mta + alpha seg + beta cla`, omitting absent terms.
pub fn total_graph<T: Scalar>(
    g: &mut Graph<T>,
    seg: Option<Var>,
    cla: Option<Var>,
    mta: Option<Var>,
    w: &LossWeights,
) -> Var {
    let mut parts = Vec::new();
    if let Some(m) = mta {
        parts.push(m);
    }
    if let Some(s) = seg {
        parts.push(g.scale(s, w.alpha));
    }
    if let Some(c) = cla {
        parts.push(g.scale(c, w.beta));
    }
    let mut acc = match parts.first() {
        Some(&v) => v,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    for &v in parts.iter().skip(1) {
        acc = g.add(acc, v);
    }
    acc
}

/// Composes the breakdown; `total` uses exactly `mta + alpha*seg + beta*cla`.
pub fn total_loss(seg_per_scale: Vec<(f64, f64)>, seg_total: f64, cla: f64, mta: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("seg_total", seg_total), ("cla", cla), ("mta", mta)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown {
        seg_per_scale,
        seg_total,
        cla,
        mta,
        total: mta + w.alpha * seg_total + w.beta * cla,
    })
}

/// A dense single-channel probability grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }
}

/// Segmentation loss of stage probabilities against `gt`, which is area
/// downsampled (then thresholded at 0.5) to each stage's grid.
pub fn seg_loss(stages: &[Field], gt: &BinaryMask, w: &LossWeights) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut g = Graph::<f64>::new();
    let mut probs = Vec::new();
    let mut targets = Vec::new();
    for f in stages {
        let t = gt.downsample_area(f.width, f.height).to_f64();
        probs.push(g.constant(Tensor::new(&[1, f.height, f.width], f.data.clone())));
        targets.push(g.constant(Tensor::new(&[1, f.height, f.width], t)));
    }
    let (total, terms) = seg_loss_graph(&mut g, &probs, &targets, &w.gamma, w.epsilon_smooth)?;
    let terms = terms.iter().map(|&(d, j)| (g.value(d).item(), g.value(j).item())).collect();
    Ok((g.value(total).item(), terms))
}

/// Weighted cross-entropy from class probabilities `(p_good, p_poor)`.
pub fn cla_loss(probs: (f64, f64), label: u8, xi: [f64; 2], eps: f64) -> Result<f64> {
    if label > 1 {
        return Err(Error::InvalidInput(format!("label {label} not in {{0, 1}}")));
    }
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::from_f64(&[2], &[probs.0, probs.1]));
    let l = cla_from_probs(&mut g, p, label, xi, eps)?;
    Ok(g.value(l).item())
}

/// Consistency loss for `p` (two channel-major planes) and `s`.
pub fn mta_loss(p: &[f64], s: &Field, eps: f64, variant: MtaVariant) -> Result<f64> {
    let n = s.height * s.width;
    if p.len() != 2 * n {
        return Err(Error::Shape(format!("P has {} values, expected {}", p.len(), 2 * n)));
    }
    let mut g = Graph::<f64>::new();
    let pv = g.constant(Tensor::new(&[2, s.height, s.width], p.to_vec()));
    let sv = g.constant(Tensor::new(&[1, s.height, s.width], s.data.clone()));
    let l = mta_loss_graph(&mut g, pv, sv, eps, variant)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(w: usize, h: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x < x1 && y < y1)
    }

    #[test]
    fn perfect_prediction_has_near_zero_seg_loss() {
        let gt = block(16, 16, 6, 5);
        let stages: Vec<Field> = [16, 8]
            .iter()
            .map(|&s| {
                let m = gt.downsample_area(s, s);
                Field::new(s, s, m.to_f64())
            })
            .collect();
        let (t, _) = seg_loss(&stages, &gt, &LossWeights::default()).unwrap();
        assert!(t.abs() <= 1e-4);
    }

    #[test]
    fn disjoint_terms_approach_two() {
        let gt = block(8, 8, 2, 2);
        let pred = BinaryMask::from_fn(8, 8, |x, y| x >= 5 && y >= 5);
        let w = LossWeights {
            gamma: [1.0, 0.0, 0.0, 0.0],
            epsilon_smooth: 1e-12,
            ..Default::default()
        };
        let (t, terms) = seg_loss(&[Field::new(8, 8, pred.to_f64())], &gt, &w).unwrap();
        assert!((t - 2.0).abs() < 1e-9);
        assert!((terms[0].0 + terms[0].1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn two_by_two_versus_two_by_four() {
        let pred = block(8, 8, 2, 2);
        let gt = block(8, 8, 4, 2);
        // brute-force counts
        let inter = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a && **b).count() as f64;
        let (a, b) = (pred.count() as f64, gt.count() as f64);
        let dsc = 2.0 * inter / (a + b);
        let jac = inter / (a + b - inter);
        let w = LossWeights {
            gamma: [1.0, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        let (t, _) = seg_loss(&[Field::new(8, 8, pred.to_f64())], &gt, &w).unwrap();
        assert!((t - ((1.0 - dsc) + (1.0 - jac))).abs() < 1e-3);
        assert!((t - 0.8333).abs() < 1e-3);
    }

    #[test]
    fn seg_loss_decreases_along_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = BinaryMask::new(8, 8, (0..64).map(|_| rng.random_bool(0.4)).collect());
            if gt.is_empty() {
                continue;
            }
            let far: Vec<f64> = gt.data.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
            let target = gt.to_f64();
            let w = LossWeights {
                gamma: [1.0, 0.0, 0.0, 0.0],
                ..Default::default()
            };
            let mut last = f64::INFINITY;
            for k in 0..10 {
                let t = k as f64 / 9.0;
                let p: Vec<f64> = far.iter().zip(&target).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let (l, _) = seg_loss(&[Field::new(8, 8, p)], &gt, &w).unwrap();
                assert!(l < last, "not decreasing at step {k}");
                last = l;
            }
        }
    }

    #[test]
    fn gamma_scaling_is_linear() {
        let gt = block(8, 8, 3, 5);
        let p = Field::new(8, 8, (0..64).map(|i| (i % 7) as f64 / 7.0).collect());
        let stages = vec![p.clone(), p.clone(), p.clone(), p];
        let w = LossWeights::default();
        let (a, _) = seg_loss(&stages, &gt, &w).unwrap();
        for c in [0.5, 2.0, 8.0] {
            let mut w2 = w.clone();
            w2.gamma.iter_mut().for_each(|g| *g *= c);
            let (b, _) = seg_loss(&stages, &gt, &w2).unwrap();
            assert_eq!(b, c * a);
        }
        let mut w3 = w.clone();
        w3.gamma.iter_mut().for_each(|g| *g *= 3.7);
        let (b, _) = seg_loss(&stages, &gt, &w3).unwrap();
        assert!((b - 3.7 * a).abs() <= 1e-12 * b.abs());
    }

    #[test]
    fn cross_entropy_cases() {
        let eps = 1e-6;
        let perfect = cla_loss((0.0, 1.0), 1, [1.0, 1.0], eps).unwrap();
        assert!((0.0..1e-5).contains(&perfect));
        let half = cla_loss((0.5, 0.5), 1, [1.0, 1.0], eps).unwrap();
        assert!((half - 0.5f64.ln().abs()).abs() < 1e-9);
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let weighted = cla_loss((0.5, 0.5), 0, [3.0, 1.0], eps).unwrap();
        assert!((weighted - 3.0 * 0.5f64.ln().abs()).abs() < 1e-9);
        assert!(cla_loss((0.5, 0.5), 2, [1.0, 1.0], eps).is_err());
    }

    #[test]
    fn logit_form_matches_clamped_form_and_keeps_gradient() {
        let xi = [1.3, 0.7];
        for &(z0, z1) in &[(0.0, 0.0), (1.5, -2.0), (-3.0, 4.0), (6.0, 5.5)] {
            for label in [0u8, 1] {
                let mut g = Graph::<f64>::new();
                let z = g.leaf(Tensor::from_f64(&[2], &[z0, z1]), true);
                let l = cla_loss_graph(&mut g, z, label, xi).unwrap();
                let e0 = (z0 - z0.max(z1)).exp();
                let e1 = (z1 - z0.max(z1)).exp();
                let p = (e0 / (e0 + e1), e1 / (e0 + e1));
                let want = cla_loss(p, label, xi, 1e-6).unwrap();
                assert!((g.value(l).item() - want).abs() < 1e-9, "{z0} {z1} {label}");
            }
        }
        // far past the clamp the label still receives gradient
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_f64(&[2], &[0.0, 40.0]), true);
        let l = cla_loss_graph(&mut g, z, 0, [1.0, 1.0]).unwrap();
        assert!((g.value(l).item() - 40.0).abs() < 1e-9);
        let grads = g.backward(l);
        assert!((grads.get(z).unwrap()[0] + 1.0).abs() < 1e-12);
        assert!(cla_loss_graph(&mut g, z, 2, [1.0, 1.0]).is_err());
    }

    #[test]
    fn inverse_frequency_weights() {
        assert_eq!(class_weights(&[0, 1, 0, 1]).unwrap(), [1.0, 1.0]);
        assert_eq!(class_weights(&[0, 0, 0, 1]).unwrap(), [4.0 / 6.0, 2.0]);
        assert!(class_weights(&[0, 0]).is_err());
    }

    #[test]
    fn mta_identities() {
        let s = Field::new(2, 2, vec![0.1, 0.5, 0.9, 0.3]);
        let mut p: Vec<f64> = s.data.iter().map(|v| 1.0 - v).collect();
        p.extend(&s.data);
        for v in [MtaVariant::SymmetricKl, MtaVariant::MixtureJs] {
            assert!(mta_loss(&p, &s, 1e-6, v).unwrap().abs() < 1e-9);
        }
        // single pixel hand computation
        let s1 = Field::new(1, 1, vec![0.5]);
        let l = mta_loss(&[0.8, 0.2], &s1, 1e-6, MtaVariant::SymmetricKl).unwrap();
        let hand = (0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln()) + (0.5 * 0.625f64.ln() + 0.5 * 2.5f64.ln());
        assert!((l - hand).abs() < 1e-4);
        assert!((l - 0.41588).abs() < 1e-4);
        // roles swapped
        let swapped = mta_loss(&[0.5, 0.5], &Field::new(1, 1, vec![0.2]), 1e-6, MtaVariant::SymmetricKl).unwrap();
        assert!((l - swapped).abs() < 1e-12);
        assert!(mta_loss(&[0.5], &s1, 1e-6, MtaVariant::SymmetricKl).is_err());
    }

    #[test]
    fn mixture_js_is_bounded_by_ln2() {
        let s = Field::new(1, 2, vec![0.0, 1.0]);
        let l = mta_loss(&[0.0, 1.0, 1.0, 0.0], &s, 1e-9, MtaVariant::MixtureJs).unwrap();
        assert!(l <= 2f64.ln() + 1e-9 && l > 0.6);
    }

    #[test]
    fn total_composition() {
        let w = LossWeights::default();
        let b = total_loss(vec![], 1.0, 1.0, 1.0, &w).unwrap();
        assert_eq!(b.total, 2.0);
        let w0 = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let b = total_loss(vec![], 0.37, 1.9, 0.25, &w0).unwrap();
        assert_eq!(b.total, 0.25);
        let b = total_loss(vec![], 0.3, 0.7, 0.11, &w).unwrap();
        assert_eq!(b.total, 0.11 + 0.2 * 0.3 + 0.8 * 0.7);
        assert!(total_loss(vec![], f64::NAN, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
