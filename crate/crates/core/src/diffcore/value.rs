use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Value {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Which component of the model a parameter belongs to. Gradient scoping of
/// the combined objective is expressed in terms of these tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Encoder,
    OuterAgent,
    InnerAgent,
    TransitionModel,
}

impl Owner {
    pub const ALL: [Owner; 4] = [
        Owner::Encoder,
        Owner::OuterAgent,
        Owner::InnerAgent,
        Owner::TransitionModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Owner::Encoder => "encoder",
            Owner::OuterAgent => "outer_agent",
            Owner::InnerAgent => "inner_agent",
            Owner::TransitionModel => "transition_model",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Owner::Encoder => 0,
            Owner::OuterAgent => 1,
            Owner::InnerAgent => 2,
            Owner::TransitionModel => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Owner::ALL.into_iter().find(|o| o.code() == code)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Value,
    pub owner: Owner,
}

/// Named, ordered collection of trainable tensors. Insertion order is the
/// canonical order used by gradients, optimizer state and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `name` is already present.
    pub fn insert(&mut self, name: impl Into<String>, owner: Owner, value: Value) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.params.insert(name, Param { value, owner });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn by_index(&self, index: usize) -> (&str, &Param) {
        let (k, v) = self.params.get_index(index).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, index: usize) -> (&str, &mut Param) {
        let (k, v) = self.params.get_index_mut(index).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            names: self.params.keys().cloned().collect(),
            buffers: self.params.values().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// Gradient buffers aligned with the parameter order of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    buffers: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.buffers[i].as_slice())
    }

    pub fn buffer(&self, index: usize) -> &[f64] {
        &self.buffers[index]
    }

    pub fn buffer_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.buffers[index]
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names
            .iter()
            .zip(&self.buffers)
            .map(|(n, b)| (n.as_str(), b.as_slice()))
    }

    /// `self += other`. Both must come from the same parameter set.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.names, other.names, "gradient layouts differ");
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.buffers {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.buffers
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers.iter().flatten().all(|x| x.is_finite())
    }

    /// Zero every buffer whose parameter is not owned by `keep`.
    pub fn retain_owner(&mut self, params: &ParamSet, keep: Owner) {
        for (i, b) in self.buffers.iter_mut().enumerate() {
            if params.by_index(i).1.owner != keep {
                b.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub(crate) fn from_parts(names: Vec<String>, buffers: Vec<Vec<f64>>) -> Self {
        Self { names, buffers }
    }
}
