//! Model hyperparameters and their JSON document form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::ssm::ScanMode;

/// Architectural switches, including the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    /// Scan left and right patches separately instead of channel-fusing them.
    pub no_fusion: bool,
    pub no_self: bool,
    pub no_cross: bool,
    /// Drops both attention kinds; each attention block keeps only its MLP.
    pub no_attention: bool,
    pub share_encoders: bool,
    pub tie_conv_branches: bool,
    /// Right-side cross-attention reads the already updated left features.
    pub sequential_cross: bool,
    /// Attach cross-attention residuals to the query side instead of the key/value side.
    pub cross_attach_query: bool,
}

impl Flags {
    pub fn self_attention(&self) -> bool {
        !(self.no_self || self.no_attention)
    }

    pub fn cross_attention(&self) -> bool {
        !(self.no_cross || self.no_attention)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed: usize,
    pub encoder_channels: Vec<usize>,
    pub downsample: usize,
    pub patch_side_stage1: usize,
    pub patch_side_stage2: usize,
    pub depth_n: usize,
    pub heads_h: usize,
    pub state_n: usize,
    pub conv_kernel: usize,
    pub mlp_ratio: usize,
    pub scan_mode: ScanMode,
    pub flags: Flags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: 128,
            encoder_channels: vec![32, 64, 128],
            downsample: 8,
            patch_side_stage1: 14,
            patch_side_stage2: 7,
            depth_n: 4,
            heads_h: 4,
            state_n: 16,
            conv_kernel: 3,
            mlp_ratio: 4,
            scan_mode: ScanMode::Selective,
            flags: Flags::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used for toy training.
    pub fn reduced() -> Self {
        Self {
            embed: 64,
            encoder_channels: vec![16, 32, 64],
            depth_n: 2,
            heads_h: 2,
            ..Self::default()
        }
    }

    /// Number of block pairs in the second stage.
    pub fn stage2_depth(&self) -> usize {
        self.depth_n.div_ceil(2)
    }

    /// Input sides must be multiples of this.
    pub fn pad_multiple(&self) -> usize {
        self.downsample * self.patch_side_stage1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.embed == 0 || self.embed % 2 != 0 {
            return fail(format!("embed must be even and positive, got {}", self.embed));
        }
        if self.encoder_channels.len() != 3 || self.encoder_channels.contains(&0) {
            return fail(format!(
                "encoder_channels must list three positive widths, got {:?}",
                self.encoder_channels
            ));
        }
        if self.downsample != 1 << self.encoder_channels.len() {
            return fail(format!(
                "downsample {} does not match the {}-stage stride-2 encoder",
                self.downsample,
                self.encoder_channels.len()
            ));
        }
        if self.patch_side_stage2 == 0 || self.patch_side_stage1 % self.patch_side_stage2 != 0 {
            return fail(format!(
                "patch_side_stage1 {} must be divisible by patch_side_stage2 {}",
                self.patch_side_stage1, self.patch_side_stage2
            ));
        }
        if self.depth_n == 0 {
            return fail("depth_n must be at least 1".into());
        }
        if self.heads_h == 0 || self.embed % (2 * self.heads_h) != 0 {
            return fail(format!(
                "embed {} must be divisible by both {} and {} heads",
                self.embed,
                self.heads_h,
                2 * self.heads_h
            ));
        }
        if self.state_n == 0 || self.mlp_ratio == 0 {
            return fail("state_n and mlp_ratio must be positive".into());
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Keys whose values differ, as `key: self vs other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let (a, b) = (serde_json::to_value(self).unwrap(), serde_json::to_value(other).unwrap());
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out
    }
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            for (k, va) in ma {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match mb.get(k) {
                    Some(vb) => diff_values(&key, va, vb, out),
                    None => out.push(format!("{key}: {va} vs <missing>")),
                }
            }
        }
        _ if a != b => out.push(format!("{prefix}: {a} vs {b}")),
        _ => {}
    }
}
