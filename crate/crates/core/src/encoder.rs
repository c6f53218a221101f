//! Pre-activation residual trunk used as the patch processing network and,
//! extended by a fourth group, as the finetuning classifier backbone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Forward};
use crate::params::{ParamStore, Role};
use crate::rng::StreamRng;
use crate::tensor::{Tensor, Var};

pub const TRUNK: &str = "patchnet";

/// Shape of the patch network: stem plus three residual groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchNetConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub block_counts: [usize; 3],
    pub group_channels: [usize; 3],
    pub patch_size: usize,
}

impl PatchNetConfig {
    /// 16/32/64 channels, two blocks per group.
    pub fn desk(patch_size: usize) -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            block_counts: [2, 2, 2],
            group_channels: [16, 32, 64],
            patch_size,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.group_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.in_channels, self.stem_channels, self.patch_size]
            .into_iter()
            .chain(self.block_counts)
            .chain(self.group_channels);
        if all.into_iter().any(|v| v == 0) {
            return Err(Error::Config(format!("patch network sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub(crate) fn groups(&self) -> Vec<GroupSpec> {
        (0..3)
            .map(|g| GroupSpec {
                blocks: self.block_counts[g],
                channels: self.group_channels[g],
                stride: if g == 0 { 1 } else { 2 },
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct GroupSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

/// BN → ReLU → conv, twice, around an identity or 1×1 projection shortcut
/// taken from the pre-activated input.
#[derive(Clone, Debug)]
struct PreActBlock {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl PreActBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), role, cin)?;
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), role, 3, cin, cout, stride, rng)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), role, cout)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), role, 3, cout, cout, 1, rng)?;
        let shortcut = if cin != cout || stride != 1 {
            Some(Conv2d::new(store, &format!("{name}.shortcut"), role, 1, cin, cout, stride, rng)?)
        } else {
            None
        };
        Ok(Self {
            bn1,
            conv1,
            bn2,
            conv2,
            shortcut,
        })
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let pre = self.bn1.forward(f, x)?;
        let pre = f.tape.relu(pre)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(f, pre)?,
            None => x,
        };
        let h = self.conv1.forward(f, pre)?;
        let h = self.bn2.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = self.conv2.forward(f, h)?;
        f.tape.add(h, skip)
    }
}

/// Stem, residual groups, final BN → ReLU and global average pooling.
#[derive(Clone, Debug)]
pub struct ResNet {
    stem: Conv2d,
    groups: Vec<Vec<PreActBlock>>,
    post: BatchNorm,
    out_channels: usize,
}

impl ResNet {
    /// Parameters are named `patchnet.stem`, `patchnet.g{k}.b{i}`, `patchnet.post`
    /// so trunks of different depth share names group by group.
    pub(crate) fn new(
        store: &mut ParamStore,
        in_channels: usize,
        stem_channels: usize,
        groups: &[GroupSpec],
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let stem = Conv2d::new(store, &format!("{TRUNK}.stem"), Role::Group(1), 3, in_channels, stem_channels, 1, rng)?;
        let mut cin = stem_channels;
        let mut built = Vec::with_capacity(groups.len());
        for (g, spec) in groups.iter().enumerate() {
            let role = Role::Group(g as u8 + 1);
            let mut blocks = Vec::with_capacity(spec.blocks);
            for b in 0..spec.blocks {
                let stride = if b == 0 { spec.stride } else { 1 };
                let name = format!("{TRUNK}.g{}.b{b}", g + 1);
                blocks.push(PreActBlock::new(store, &name, role, cin, spec.channels, stride, rng)?);
                cin = spec.channels;
            }
            built.push(blocks);
        }
        let post = BatchNorm::new(store, &format!("{TRUNK}.post"), Role::Post, cin)?;
        Ok(Self {
            stem,
            groups: built,
            post,
            out_channels: cin,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[N×H×W×C] → [N×out_channels]`.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(f, x)?;
        for group in &self.groups {
            for block in group {
                h = block.forward(f, h)?;
            }
        }
        let h = self.post.forward(f, h)?;
        let h = f.tape.relu(h)?;
        f.tape.spatial_avg_pool(h)
    }
}

/// The patch processing network: maps every patch to one feature vector.
#[derive(Clone, Debug)]
pub struct PatchNet {
    pub config: PatchNetConfig,
    net: ResNet,
}

pub fn init_patch_network(config: &PatchNetConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<PatchNet> {
    config.validate()?;
    let net = ResNet::new(store, config.in_channels, config.stem_channels, &config.groups(), rng)?;
    Ok(PatchNet {
        config: config.clone(),
        net,
    })
}

impl PatchNet {
    pub fn feature_dim(&self) -> usize {
        self.net.out_channels()
    }

    /// Encode `[B×n×ps×ps×C]` patches to features `[B×n×d]`. All `B·n`
    /// patches form one batch for normalization statistics.
    pub fn encode(&self, f: &mut Forward, patches: &Tensor) -> Result<Var> {
        let s = patches.shape();
        let ps = self.config.patch_size;
        if s.len() != 5 || s[2] != ps || s[3] != ps || s[4] != self.config.in_channels {
            return Err(Error::invalid(
                "encode_patches",
                format!("expected [B×n×{ps}×{ps}×{}] patches, got {s:?}", self.config.in_channels),
            ));
        }
        let (b, n) = (s[0], s[1]);
        let flat = patches.clone().reshape(vec![b * n, ps, ps, s[4]])?;
        let x = f.input(flat);
        let h = self.net.forward(f, x)?;
        f.tape.reshape(h, &[b, n, self.feature_dim()])
    }

    /// Encode an already flattened `[N×ps×ps×C]` stack to `[N×d]`.
    pub fn encode_flat(&self, f: &mut Forward, x: Var) -> Result<Var> {
        self.net.forward(f, x)
    }
}
