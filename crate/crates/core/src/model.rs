//! Trunk plus task head, from raw image pairs to full-resolution fields.

use denviscom_tensor::{Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::{disparity_match_1d, flow_global_match, upsample_field, Task};
use crate::nn::{Bound, ParamStore};
use crate::trunk::{normalize_image, pad_replicate, CropMeta, Trunk};

#[derive(Debug, Clone)]
pub struct Model {
    pub trunk: Trunk,
    pub params: ParamStore,
}

/// Normalized, padded network input for one image pair.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub img1: Tensor,
    pub img2: Tensor,
    pub crop: CropMeta,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (trunk, params) = Trunk::build(config, seed)?;
        Ok(Self { trunk, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.trunk.config
    }

    /// Checks sizes, maps `[0, 1]` images to `[-1, 1]` and replicate-pads them.
    pub fn prepare(&self, img1: &Tensor, img2: &Tensor) -> Result<PreparedPair> {
        if img1.shape() != img2.shape() {
            return Err(Error::Input(format!(
                "image shapes differ: {:?} vs {:?}",
                img1.shape(),
                img2.shape()
            )));
        }
        if img1.rank() != 3 || img1.shape()[0] != 3 {
            return Err(Error::Input(format!("expected [3, H, W] images, got {:?}", img1.shape())));
        }
        let m = self.config().pad_multiple();
        let (a, crop) = pad_replicate(&normalize_image(img1), m)?;
        let (b, _) = pad_replicate(&normalize_image(img2), m)?;
        Ok(PreparedPair { img1: a, img2: b, crop })
    }

    /// Full-resolution prediction on `tape` using bound parameters `p`.
    pub fn forward<'t>(&self, p: &Bound<'t>, task: Task, pair: &PreparedPair) -> Result<Var<'t>> {
        let tape = p.tape();
        let out = self
            .trunk
            .forward(p, tape.constant(pair.img1.clone()), tape.constant(pair.img2.clone()))?;
        let low = match task {
            Task::Flow => flow_global_match(out.left, out.right)?,
            Task::Disparity => disparity_match_1d(out.left, out.right)?,
        };
        upsample_field(low, self.config().downsample, &pair.crop)
    }

    /// `[2, H, W]` flow or `[H, W]` disparity for images in `[0, 1]`.
    pub fn infer(&self, task: Task, img1: &Tensor, img2: &Tensor) -> Result<Tensor> {
        let pair = self.prepare(img1, img2)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, task, &pair)?;
        Ok((*out.value()).clone())
    }
}
