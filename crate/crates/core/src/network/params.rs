use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Shape, Tensor};

/// Named parameter arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Params {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Overwrite every entry with uniform noise in `[-scale, scale]`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..=scale);
            }
        }
    }

    /// Register every array on `g`, as differentiable leaves when
    /// `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.leaf(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        ParamVars { map }
    }
}

/// Graph handles of a bound [`Params`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Pair `names` (in [`Params`] order) with already registered handles.
    pub fn from_named<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        ParamVars {
            map: names.into_iter().map(str::to_string).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Weight initializers.
pub(crate) enum Init {
    /// Kaiming-uniform for rectifier layers.
    He,
    Zero,
}

pub(crate) struct Builder<'a, R: Rng> {
    pub params: &'a mut Params,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    /// `{name}.w` of `cout×cin×k×k` and `{name}.b` of `1×cout×1×1` (zeros).
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, init: Init) {
        let shape = Shape::new(cout, cin, k, k);
        let w = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::He => {
                let bound = (6.0 / (cin * k * k) as f64).sqrt();
                Tensor::from_fn(shape, |_, _, _, _| self.rng.gen_range(-bound..bound))
            }
        };
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(Shape::new(1, cout, 1, 1)));
    }

    pub fn uniform(&mut self, name: &str, shape: Shape, bound: f64) {
        let t = Tensor::from_fn(shape, |_, _, _, _| self.rng.gen_range(-bound..=bound));
        self.params.insert(name, t);
    }

    pub fn constant(&mut self, name: &str, shape: Shape, value: f64) {
        self.params.insert(name, Tensor::full(shape, value));
    }
}
