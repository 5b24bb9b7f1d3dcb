//! Named parameter layouts and their materialised values.
//!
//! Modules register shapes into a [`ParamLayout`] while a network is being
//! built. Values are only allocated by [`ParamStore`], so large graphs can be
//! cost-analysed without ever holding their weights.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He initialisation, `N(0, 2 / fan)`.
    KaimingNormal {
        fan: usize,
    },
    /// `U(-1/√fan, 1/√fan)`, the usual default for small dense layers.
    FanUniform {
        fan: usize,
    },
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total scalar count.
    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }
}

/// Parameter values aligned index-for-index with a [`ParamLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn init(layout: &ParamLayout, rng: &mut ChaCha8Rng) -> Self {
        let tensors = layout
            .specs()
            .iter()
            .map(|spec| {
                let n = spec.numel();
                let data: Vec<f64> = match spec.init {
                    Init::KaimingNormal { fan } => {
                        let normal =
                            Normal::new(0.0, (2.0 / fan.max(1) as f64).sqrt()).expect("finite std");
                        (0..n).map(|_| normal.sample(rng)).collect()
                    }
                    Init::FanUniform { fan } => {
                        let bound = 1.0 / (fan.max(1) as f64).sqrt();
                        let uniform = Uniform::new_inclusive(-bound, bound).expect("bound > 0");
                        (0..n).map(|_| uniform.sample(rng)).collect()
                    }
                    Init::Const(v) => vec![v; n],
                };
                Tensor::new(&spec.shape, data).expect("layout shapes are positive")
            })
            .collect();
        ParamStore { tensors }
    }

    pub fn zeros(layout: &ParamLayout) -> Self {
        ParamStore {
            tensors: layout
                .specs()
                .iter()
                .map(|s| Tensor::zeros(&s.shape))
                .collect(),
        }
    }

    /// Uniform random values in `[-scale, scale]` regardless of each
    /// parameter's declared init; useful for exercising every weight.
    pub fn random_uniform(layout: &ParamLayout, rng: &mut ChaCha8Rng, scale: f64) -> Self {
        ParamStore {
            tensors: layout
                .specs()
                .iter()
                .map(|s| Tensor::from_fn(&s.shape, |_| rng.random_range(-scale..=scale)))
                .collect(),
        }
    }

    /// Rebuilds a store from named tensors, checking names and shapes against
    /// `layout`.
    pub fn from_named(layout: &ParamLayout, named: Vec<(String, Tensor)>) -> Result<Self> {
        if named.len() != layout.len() {
            return Err(Error::config(format!(
                "expected {} parameters, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs().iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::config(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(ParamStore { tensors })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Records every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles already on a graph, in layout order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
