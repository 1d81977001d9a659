use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to. Freezing and resets act
/// on whole groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Encoder,
    Latent,
    Decoder,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Latent => "latent",
            ParamGroup::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "encoder" => Some(ParamGroup::Encoder),
            "latent" => Some(ParamGroup::Latent),
            "decoder" => Some(ParamGroup::Decoder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Normal,
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, group: ParamGroup, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> core::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape`; groups for which `trainable`
    /// returns false are recorded as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable(p.group)))
                .collect(),
        }
    }

    /// Order-sensitive checksum of the values in `group` (all groups if None).
    pub fn checksum(&self, group: Option<ParamGroup>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            for x in p.value.data() {
                h = rng::mix64(h ^ x.to_bits());
            }
        }
        h
    }

    /// Checks names and shapes against `other`, element for element.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match expected {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.group != b.group {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn init_tensor(rows: usize, cols: usize, init: Init, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let data = (0..rows * cols)
        .map(|_| match init {
            Init::Zeros => 0.0,
            Init::Normal => StandardNormal.sample(&mut r),
            Init::Uniform(a) => r.random_range(-a..a),
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Tape handles for a bound [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables that already hold the parameters, in `ParamSet` order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
