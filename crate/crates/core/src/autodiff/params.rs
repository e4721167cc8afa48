use std::collections::{BTreeMap, HashMap};

use super::{AutodiffError, Matrix};

/// Identifies one parameter store. Stores with distinct ids can feed the same tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoreId(pub u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: StoreId,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named dense parameters, each with a gradient slot of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    id: StoreId,
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(id: StoreId) -> Self {
        Self {
            id,
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<usize, AutodiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let idx = self.params.len();
        let grad = Matrix::zeros(value.raw_dim());
        self.by_name.insert(name.clone(), idx);
        self.params.push(Param { name, value, grad });
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize, AutodiffError> {
        self.index_of(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            store: self.id,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn value(&self, index: usize) -> &Matrix {
        &self.params[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.params[index].value
    }

    pub fn grad(&self, index: usize) -> &Matrix {
        &self.params[index].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Copies gradients for this store out of `grads`; parameters the loss
    /// never reached get an all-zero gradient.
    pub fn set_grads(&mut self, grads: &Gradients) {
        let id = self.id;
        for (index, p) in self.params.iter_mut().enumerate() {
            match grads.get(ParamKey { store: id, index }) {
                Some(g) => p.grad.assign(g),
                None => p.grad.fill(0.0),
            }
        }
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) by_key: BTreeMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Matrix> {
        self.by_key.get(&key)
    }

    pub(crate) fn accumulate(&mut self, key: ParamKey, g: &Matrix) {
        match self.by_key.get_mut(&key) {
            Some(acc) => *acc += g,
            None => {
                self.by_key.insert(key, g.clone());
            }
        }
    }
}
