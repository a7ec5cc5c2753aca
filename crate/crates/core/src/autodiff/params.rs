use std::collections::BTreeMap;

use super::{AutodiffError, Gradients, Tape, Tensor, Var};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn attach(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        Bound { vars }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to variables already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var, AutodiffError> {
        self.vars.get(name).copied().ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collects per-parameter gradients; parameters the loss ignores get zeros.
    pub fn gradients(&self, store: &ParamStore, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(store.get(name).expect("bound from this store").shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
