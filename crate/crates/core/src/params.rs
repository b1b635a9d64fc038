//! Named parameter storage.
//!
//! Modules are described once as a [`Layout`]: an ordered list of named
//! shapes with their initialisers. Counting parameters reads the layout
//! alone; [`ModelParams::init`] materialises it into tensors.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Index of a parameter inside its [`Layout`] and [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
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

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub(crate) fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    /// A dense weight of shape `fan_in × fan_out`, normal with std `1/√fan_in`.
    pub(crate) fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.add(name, vec![fan_in, fan_out], Init::Normal { std })
    }

    pub(crate) fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> ParamId {
        self.add(name, shape, Init::Constant(value))
    }

    /// Scalar counts grouped by the first `depth` dot-separated components of
    /// each name, in first-appearance order.
    pub fn breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for spec in &self.specs {
            let key = spec.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += spec.numel(),
                None => out.push((key, spec.numel())),
            }
        }
        out
    }
}

/// Values for every parameter of a [`Layout`], in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Samples fresh values for `layout` from a generator seeded with `seed`.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = layout
            .specs
            .iter()
            .map(|s| {
                let t = match s.init {
                    Init::Normal { std } => Tensor::randn(s.shape.clone(), std, &mut rng),
                    Init::Constant(v) => Tensor::full(s.shape.clone(), v),
                };
                (s.name.clone(), t)
            })
            .collect();
        Self::from_pairs(pairs).expect("layout names are unique")
    }

    pub fn from_pairs(pairs: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pairs.len());
        let mut names = Vec::with_capacity(pairs.len());
        let mut tensors = Vec::with_capacity(pairs.len());
        for (i, (name, t)) in pairs.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(config_err!("duplicate parameter name {name}"));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// A zero-valued copy with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that names and shapes agree with `layout`, in order.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.len() != layout.len() {
            return Err(config_err!(
                "expected {} parameters, found {}",
                layout.len(),
                self.len()
            ));
        }
        for (spec, (name, t)) in layout.specs.iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(config_err!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Binds every parameter onto `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    /// Gradients of bound parameters; parameters the loss did not reach
    /// get zeros.
    pub fn grads(&self, tape: &Tape, vars: &[Var<'_>]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        let mut l = Layout::default();
        l.weight("enc.a.w".into(), 4, 3);
        l.constant("enc.a.b".into(), vec![3], 0.0);
        l.constant("dec.g".into(), vec![3], 1.0);
        l
    }

    #[test]
    fn counts_and_breakdown() {
        let l = layout();
        assert_eq!(l.num_scalars(), 18);
        assert_eq!(
            l.breakdown(1),
            vec![("enc".to_string(), 15), ("dec".to_string(), 3)]
        );
        let p = ModelParams::init(&l, 1);
        assert_eq!(p.num_scalars(), 18);
        assert_eq!(p.by_name("dec.g").unwrap().data(), &[1.0; 3]);
        p.check_layout(&l).unwrap();
    }

    #[test]
    fn init_is_seeded() {
        let l = layout();
        assert_eq!(ModelParams::init(&l, 5), ModelParams::init(&l, 5));
        assert_ne!(ModelParams::init(&l, 5), ModelParams::init(&l, 6));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(vec![1]);
        assert!(ModelParams::from_pairs(vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }
}
