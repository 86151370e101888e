//! Parameter storage, trainability groups and the basic layers shared by
//! every network component.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Graph, Scalar, Tensor, Var};

/// How the optimizer treats a parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainability {
    Frozen,
    FineTune,
    Train,
}

impl Trainability {
    pub fn is_trainable(self) -> bool {
        !matches!(self, Trainability::Frozen)
    }
}

/// Group name -> trainability. Lookup falls back from the exact group
/// (`attention.scale2`) to its family (`attention`), then to `Train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainabilityMap(pub BTreeMap<String, Trainability>);

impl TrainabilityMap {
    pub fn set(&mut self, group: &str, t: Trainability) {
        self.0.insert(group.to_string(), t);
    }

    pub fn get(&self, group: &str) -> Trainability {
        if let Some(t) = self.0.get(group) {
            return *t;
        }
        let family = group.split('.').next().unwrap_or(group);
        self.0.get(family).copied().unwrap_or(Trainability::Train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            group: group.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.group.clone()).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_mask(&self, map: &TrainabilityMap) -> Vec<bool> {
        self.params
            .iter()
            .map(|p| map.get(&p.group).is_trainable())
            .collect()
    }
}

/// Forward-pass context: a fresh graph plus lazily bound parameter leaves.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    trainable: &'a [bool],
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: &'a [bool]) -> Self {
        assert_eq!(store.len(), trainable.len());
        Self {
            g: Graph::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    /// Leaf for a parameter; gradient-carrying only when its group trains.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .g
            .leaf(self.store.get(id).value.clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Backward from `loss`, returning one gradient slot per parameter.
    /// Frozen or unused parameters get `None`.
    pub fn param_grads(&self, loss: Var) -> Vec<Option<Vec<T>>> {
        let mut grads: Grads<T> = self.g.backward(loss);
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

pub(crate) fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data)
}

/// Box-Muller; keeps the dependency surface to `rand` alone.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Size-preserving `k x k` convolution.
    pub fn same(kernel: usize) -> Self {
        Self::dilated(kernel, 1)
    }

    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            bias: true,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1)
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            dilation: 1,
            bias: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: &str,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
    ) -> Self {
        let k = spec.kernel;
        let bound = 1.0 / ((in_channels * k * k) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_tensor(&[out_channels, in_channels, k, k], bound, rng),
        );
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), group, uniform_tensor(&[out_channels], bound, rng)));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            spec,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.g
            .conv2d(x, w, b, self.spec.stride, self.spec.padding, self.spec.dilation)
    }
}

/// Affine map over the last axis of `[n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_tensor(&[in_features, out_features], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, uniform_tensor(&[out_features], bound, rng));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.p(self.weight);
        let b = cx.p(self.bias);
        let y = cx.g.matmul(x, w);
        cx.g.add_row_bias(y, b)
    }
}

/// Per-position standardisation across channels followed by a learned
/// per-channel affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[channels]));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let z = cx.g.channel_standardize(x, self.eps);
        let gamma = cx.p(self.gamma);
        let beta = cx.p(self.beta);
        let z = cx.g.mul_channel(z, gamma);
        cx.g.add_channel_bias(z, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trainability_falls_back_to_family() {
        let mut m = TrainabilityMap::default();
        m.set("attention", Trainability::Frozen);
        m.set("attention.scale1", Trainability::Train);
        assert_eq!(m.get("attention.scale0"), Trainability::Frozen);
        assert_eq!(m.get("attention.scale1"), Trainability::Train);
        assert_eq!(m.get("gab.stage0"), Trainability::Train);
    }

    #[test]
    fn frozen_parameters_yield_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Linear::new(&mut store, &mut rng, "a", "frozen_part", 3, 2);
        let b = Linear::new(&mut store, &mut rng, "b", "trained_part", 2, 1);
        let mut map = TrainabilityMap::default();
        map.set("frozen_part", Trainability::Frozen);
        let mask = store.trainable_mask(&map);
        let mut cx = Ctx::new(&store, &mask);
        let x = cx.constant(Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]));
        let h = a.forward(&mut cx, x);
        let y = b.forward(&mut cx, h);
        let s = cx.g.sum(y);
        let grads = cx.param_grads(s);
        assert!(grads[a.weight.index()].is_none());
        assert!(grads[a.bias.index()].is_none());
        assert!(grads[b.weight.index()].is_some());
    }
}
