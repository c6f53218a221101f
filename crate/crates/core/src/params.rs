//! Named, ordered trainable tensors and buffers.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model a tensor belongs to. Drives weight transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Residual block group 1..=4 of the convolutional trunk. The stem
    /// belongs to group 1.
    Group(u8),
    /// Final pre-pool normalization of the patch network.
    Post,
    /// Attention pooling: input projection, seed token and blocks.
    Pool,
    /// Positional tables.
    Embedding,
    /// Classification head.
    Head,
}

impl Role {
    pub fn tag(&self) -> String {
        match self {
            Role::Group(g) => format!("group{g}"),
            Role::Post => "post".into(),
            Role::Pool => "pool".into(),
            Role::Embedding => "embedding".into(),
            Role::Head => "head".into(),
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "post" => Ok(Role::Post),
            "pool" => Ok(Role::Pool),
            "embedding" => Ok(Role::Embedding),
            "head" => Ok(Role::Head),
            _ => tag
                .strip_prefix("group")
                .and_then(|g| g.parse::<u8>().ok())
                .filter(|g| (1..=4).contains(g))
                .map(Role::Group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown role tag `{tag}`"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// What a tensor is, read from its name suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    Embedding,
    RunningMean,
    RunningVar,
    Tracked,
}

impl ParamKind {
    pub fn from_name(name: &str) -> Result<Self> {
        let suffix = name.rsplit('.').next().unwrap_or(name);
        Ok(match suffix {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "gamma" => ParamKind::Gamma,
            "beta" => ParamKind::Beta,
            "u0" | "row" | "col" | "flat" => ParamKind::Embedding,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            "tracked" => ParamKind::Tracked,
            _ => {
                return Err(Error::Param {
                    name: name.into(),
                    msg: "unrecognized name suffix".into(),
                })
            }
        })
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar | ParamKind::Tracked)
    }

    /// L2 decay applies to weights and embeddings, not to biases or
    /// normalization affines.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        let kind = ParamKind::from_name(&name)?;
        if self.index.contains_key(&name) {
            return Err(Error::Param {
                name,
                msg: "registered twice".into(),
            });
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            role,
            kind,
            tensor,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Trainable scalars under a given role.
    pub fn count_role(&self, role: Role) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == role && p.kind.trainable())
            .map(|p| p.tensor.len())
            .sum()
    }
}
