//! Named parameter storage and the forward-pass context that binds
//! parameters onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which partition a named tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Classification path (θ): patch encoder, what head, logits head.
    /// The occlusion judge network also lives here.
    Representation,
    /// Location path (η): attention network, mixing layer, cell query.
    Location,
    /// Non-trainable state: running batch-norm statistics, input
    /// normalization constants.
    Buffer,
}

impl Role {
    /// Roles are a pure function of the name, so checkpoints need not
    /// store them.
    pub fn of(name: &str) -> Role {
        if name.starts_with("input.") || name.ends_with(".running_mean") || name.ends_with(".running_var")
        {
            Role::Buffer
        } else if name.starts_with("loc.") {
            Role::Location
        } else {
            Role::Representation
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T: Real = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names_with_role(&self, role: Role) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| Role::of(k) == role)
            .cloned()
            .collect()
    }

    /// Number of scalar weights in the given role.
    pub fn count(&self, role: Role) -> usize {
        self.iter()
            .filter(|(k, _)| Role::of(k) == role)
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    pub fn merge_prefix(&mut self, other: &ParameterSet<T>, prefix: &str) {
        for (k, v) in other.iter() {
            if k.starts_with(prefix) {
                self.entries.insert(k.to_string(), v.clone());
            }
        }
    }

    /// Exponential moving update of running batch-norm statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: T) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let t = self.get_mut(&format!("{}.{suffix}", u.prefix))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (T::one() - momentum) * b;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and record them for running updates.
    Train,
    /// Normalize with the stored running statistics.
    Infer,
}

#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// One forward pass: a tape plus the parameter bindings made on it.
pub struct Ctx<'a, T: Real> {
    pub tape: Tape<T>,
    params: &'a ParameterSet<T>,
    train_repr: bool,
    train_loc: bool,
    bound: BTreeMap<String, Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// `train_repr` / `train_loc` select which partitions get gradients.
    pub fn new(params: &'a ParameterSet<T>, train_repr: bool, train_loc: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            train_repr,
            train_loc,
            bound: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn inference(params: &'a ParameterSet<T>) -> Self {
        Self::new(params, false, false)
    }

    pub fn params(&self) -> &'a ParameterSet<T> {
        self.params
    }

    fn trainable(&self, name: &str) -> bool {
        match Role::of(name) {
            Role::Representation => self.train_repr,
            Role::Location => self.train_loc,
            Role::Buffer => false,
        }
    }

    /// Binds `name` onto the tape on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.tape.leaf(value, self.trainable(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str, mode: BnMode) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        let eps = T::lit(BN_EPS);
        match mode {
            BnMode::Train => {
                let (y, mean, var) = self.tape.batch_norm_train(x, scale, shift, eps)?;
                self.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                });
                Ok(y)
            }
            BnMode::Infer => {
                let mean = self.params.get(&format!("{prefix}.running_mean"))?.data().to_vec();
                let var = self.params.get(&format!("{prefix}.running_var"))?.data().to_vec();
                self.tape.batch_norm_infer(x, scale, shift, &mean, &var, eps)
            }
        }
    }

    /// `(coef / 2) · Σ w²` over every parameter in `role`.
    pub fn l2(&mut self, role: Role, coef: f64) -> Result<Option<Var>> {
        if coef == 0.0 {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for name in self.params.names_with_role(role) {
            let v = self.param(&name)?;
            let sq = self.tape.sum_squares(v);
            total = Some(match total {
                Some(t) => self.tape.add(t, sq)?,
                None => sq,
            });
        }
        Ok(total.map(|t| self.tape.scale(t, T::lit(coef / 2.0))))
    }

    /// Gradients for every bound trainable parameter, zero-filled where the
    /// loss does not reach.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(k, _)| self.trainable(k))
            .map(|(k, &v)| (k.clone(), grads.wrt(v)))
            .collect()
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }
}
