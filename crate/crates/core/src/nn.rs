//! Parameters, initialization and the reusable convolutional layers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Index;

use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

/// Epsilon used by every channel layer-norm in the network.
pub const LN_EPS: f64 = 1e-5;

/// Index of a tensor inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
///
/// Names are dot-separated paths (`enc0.fdt1.rsa.qkv.weight`) and form the
/// checkpoint contract.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: BTreeMap<String, usize>,
    seed: u64,
}

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        ParameterStore { names: Vec::new(), tensors: Vec::new(), lookup: BTreeMap::new(), seed }
    }

    /// Seed the store was initialized from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| &self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::shape(
                "parameter_set",
                format!("`{name}` has shape {:?}, got {:?}", self.tensors[id.0].shape(), tensor.shape()),
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Sets every tensor whose name matches to zero; returns how many matched.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if pred(name) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
                n += 1;
            }
        }
        n
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
            seed: self.seed,
        }
    }

    /// Records every tensor in `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundParams> {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }
}

/// Graph variables of a bound [`ParameterStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl Index<ParamId> for BoundParams {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl BoundParams {
    /// Moves the gradient of every bound parameter into a name-keyed map.
    pub fn named_grads<T: Real>(&self, store: &ParameterStore<T>, grads: &mut Gradients<T>) -> GradMap<T> {
        store
            .iter()
            .filter_map(|(id, name, _)| grads.take(self[id]).map(|g| (name.to_string(), g)))
            .collect()
    }
}

/// Draws initial parameter values in construction order from one seeded stream.
pub struct ParamBuilder {
    store: ParameterStore<f32>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder { store: ParameterStore::new(seed), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform on `(-bound, bound)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f32) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, value))
    }

    pub fn finish(self) -> ParameterStore<f32> {
        self.store
    }
}

/// Fan-in uniform bound `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f32 {
    Float::sqrt(6.0 / fan_in as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::arg(
                "conv2d",
                format!("`{name}`: groups {groups} must divide {in_channels} and {out_channels}"),
            ));
        }
        let per_group = in_channels / groups;
        let weight = b.uniform(
            format!("{name}.weight"),
            &[out_channels, per_group, kernel, kernel],
            kaiming_bound(per_group * kernel * kernel),
        )?;
        let bias = Some(b.constant(format!("{name}.bias"), &[out_channels], 0.0)?);
        Ok(Conv2d { weight, bias, in_channels, out_channels, kernel, stride, padding, groups })
    }

    /// 1×1 convolution.
    pub fn pointwise(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(b, name, cin, cout, 1, 1, 0, 1)
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    pub fn same3(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(b, name, cin, cout, 3, 1, 1, 1)
    }

    /// 3×3 depthwise convolution.
    pub fn depthwise3(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Self::new(b, name, channels, channels, 3, 1, 1, channels)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let gamma = b.constant(format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = b.constant(format!("{name}.beta"), &[channels], 0.0)?;
        Ok(LayerNorm { gamma, beta, channels })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        g.layer_norm_channel(x, p[self.gamma], p[self.beta], T::of(LN_EPS))
    }
}

pub(crate) fn expect_channels<T: Real>(g: &Graph<T>, x: Var, op: &'static str, channels: usize) -> Result<[usize; 4]> {
    let dims = g.value(x)?.dims4(op)?;
    if dims[1] != channels {
        return Err(Error::shape(op, format!("expected {channels} channels, got {}", dims[1])));
    }
    Ok(dims)
}

/// `skip(x) + conv2(relu(conv1(x)))`; the skip is the identity when channel
/// counts agree and a 1×1 projection otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let conv1 = Conv2d::same3(b, &format!("{name}.conv1"), cin, cout)?;
        let conv2 = Conv2d::same3(b, &format!("{name}.conv2"), cout, cout)?;
        let skip = (cin != cout).then(|| Conv2d::pointwise(b, &format!("{name}.skip"), cin, cout)).transpose()?;
        Ok(ResidualBlock { conv1, conv2, skip })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        expect_channels(g, x, "residual_block", self.conv1.in_channels)?;
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(g, p, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Pre-normalized convolutional feed-forward with a residual connection:
/// `x + project(relu(dw(expand(norm(x)))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub project: Conv2d,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, expansion: usize) -> Result<Self> {
        let hidden = channels * expansion.max(1);
        Ok(FeedForward {
            norm: LayerNorm::new(b, &format!("{name}.norm"), channels)?,
            expand: Conv2d::pointwise(b, &format!("{name}.expand"), channels, hidden)?,
            dw: Conv2d::depthwise3(b, &format!("{name}.dw"), hidden)?,
            project: Conv2d::pointwise(b, &format!("{name}.project"), hidden, channels)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        expect_channels(g, x, "feed_forward", self.norm.channels)?;
        let h = self.norm.forward(g, p, x)?;
        let h = self.expand.forward(g, p, h)?;
        let h = self.dw.forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.project.forward(g, p, h)?;
        g.add(x, h)
    }
}
