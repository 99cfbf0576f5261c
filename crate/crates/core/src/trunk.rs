//! Feature trunk: paired residual CNN encoders, shared positional embedding,
//! patching, and two stages of mixer + attention blocks.

use std::rc::Rc;

use denviscom_tensor::{concat, Tensor, Var};

use crate::attention::AttentionBlock;
use crate::config::ModelConfig;
use crate::denviscom::{BlockDims, DenViscomBlock, PatchSet};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamGroup, ParamId, ParamStore, TRUNK_INIT_STD};

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal weights for a ReLU network.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let g = ParamGroup::Encoder;
        Self {
            weight: store.add(format!("{name}.weight"), g, init.normal(&[c_out, c_in, k, k], std)),
            bias: store.add(format!("{name}.bias"), g, Tensor::zeros(&[c_out])),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv2d(p.get(self.weight), p.get(self.bias), self.stride, self.padding)?)
    }
}

/// `relu(conv3x3(relu(conv3x3_s2(x))) + conv1x1_s2(x))`.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), c_in, c_out, 3, 2),
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip: Conv2d::new(store, init, &format!("{name}.skip"), c_in, c_out, 1, 2),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv2.forward(p, self.conv1.forward(p, x)?.relu()?)?;
        Ok(h.add(self.skip.forward(p, x)?)?.relu()?)
    }
}

/// Stem plus two residual stages to 1/8 resolution, then a 1x1 projection
/// from the last encoder width to the embedding width.
#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    pub stem: Conv2d,
    pub stage1: ResBlock,
    pub stage2: ResBlock,
    pub proj: Conv2d,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: &[usize], embed: usize) -> Self {
        Self {
            stem: Conv2d::new(store, init, &format!("{name}.stem"), 3, channels[0], 3, 2),
            stage1: ResBlock::new(store, init, &format!("{name}.res1"), channels[0], channels[1]),
            stage2: ResBlock::new(store, init, &format!("{name}.res2"), channels[1], channels[2]),
            proj: Conv2d::new(store, init, &format!("{name}.proj"), channels[2], embed, 1, 1),
        }
    }

    /// `[3, H, W]` to `[embed, H/8, W/8]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, img: Var<'t>) -> Result<Var<'t>> {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Input(format!("expected a [3, H, W] image, got {s:?}")));
        }
        let h = self.stem.forward(p, img)?.relu()?;
        let h = self.stage2.forward(p, self.stage1.forward(p, h)?)?;
        self.proj.forward(p, h)
    }
}

/// Where the original image sits inside a padded input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropMeta {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl CropMeta {
    pub fn new(height: usize, width: usize, multiple: usize) -> Self {
        Self {
            height,
            width,
            padded_height: height.div_ceil(multiple) * multiple,
            padded_width: width.div_ceil(multiple) * multiple,
        }
    }
}

/// Replicate-pads `[C, H, W]` on the bottom and right to multiples of `multiple`.
pub fn pad_replicate(img: &Tensor, multiple: usize) -> Result<(Tensor, CropMeta)> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Input(format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let meta = CropMeta::new(h, w, multiple);
    let (ph, pw) = (meta.padded_height, meta.padded_width);
    let padded = Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        img.data()[(ch * h + y.min(h - 1)) * w + x.min(w - 1)]
    });
    Ok((padded, meta))
}

/// Maps 8-bit style `[0, 1]` intensities to `[-1, 1]`.
pub fn normalize_image(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

/// Learned `[embed, side, side]` embedding tiled over every window of the
/// feature map and shared by both sides.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub side: usize,
}

impl PositionalEmbedding {
    pub fn new(store: &mut ParamStore, init: &mut Init, embed: usize, side: usize) -> Self {
        Self {
            table: store.add("pos.table", ParamGroup::Pos, init.normal(&[embed, side, side], TRUNK_INIT_STD)),
            side,
        }
    }

    /// The embedding laid out over an `[embed, h, w]` map.
    pub fn expand<'t>(&self, p: &Bound<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let table = p.get(self.table);
        let e = table.shape()[0];
        let s = self.side;
        let idx: Rc<[usize]> = (0..e * h * w)
            .map(|i| {
                let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                (c * s + y % s) * s + x % s
            })
            .collect();
        Ok(table.gather(idx, &[e, h, w])?)
    }
}

/// Adds `pos` to both feature maps and stacks them as `[2, embed, h, w]`.
pub fn add_pos_and_concat<'t>(f_l: Var<'t>, f_r: Var<'t>, pos: Var<'t>) -> Result<Var<'t>> {
    let (sl, sr, sp) = (f_l.shape(), f_r.shape(), pos.shape());
    if sl.len() != 3 || sl != sr || sl != sp {
        return Err(Error::Contract(format!(
            "feature maps {sl:?} / {sr:?} and embedding {sp:?} must agree"
        )));
    }
    let mut stacked = vec![1];
    stacked.extend_from_slice(&sl);
    let l = f_l.add(pos)?.reshape(&stacked)?;
    let r = f_r.add(pos)?.reshape(&stacked)?;
    Ok(concat(&[l, r], 0)?)
}

/// Source index into `[2, e, h, w]` for every element of the `[p, side^2, e]` patch set.
pub fn patch_indices(e: usize, h: usize, w: usize, side: usize) -> Result<Vec<usize>> {
    if side == 0 || h % side != 0 || w % side != 0 {
        return Err(Error::Contract(format!("{h}x{w} map is not divisible into {side}x{side} windows")));
    }
    let (wy, wx) = (h / side, w / side);
    let len = side * side;
    let mut idx = Vec::with_capacity(2 * e * h * w);
    for s in 0..2 {
        for win in 0..wy * wx {
            let (oy, ox) = ((win / wx) * side, (win % wx) * side);
            for l in 0..len {
                let (y, x) = (oy + l / side, ox + l % side);
                for c in 0..e {
                    idx.push(((s * e + c) * h + y) * w + x);
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation of a gather map.
fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (i, &j) in idx.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Patch layout of one stage over an `[embed, h, w]` feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub embed: usize,
    pub height: usize,
    pub width: usize,
    pub side: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        2 * (self.height / self.side) * (self.width / self.side)
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        [self.num_patches(), self.side * self.side, self.embed]
    }

    fn indices(&self) -> Result<Vec<usize>> {
        patch_indices(self.embed, self.height, self.width, self.side)
    }
}

/// `[2, e, h, w]` to patches of `side x side` windows: row-major windows,
/// row-major within each window, left image first.
pub fn patchify<'t>(f_c: Var<'t>, side: usize) -> Result<PatchSet<'t>> {
    let s = f_c.shape();
    if s.len() != 4 || s[0] != 2 {
        return Err(Error::Contract(format!("patchify expects [2, e, h, w], got {s:?}")));
    }
    let grid = PatchGrid {
        embed: s[1],
        height: s[2],
        width: s[3],
        side,
    };
    let idx: Rc<[usize]> = grid.indices()?.into();
    PatchSet::new(f_c.gather(idx, &grid.patch_shape())?)
}

pub fn unpatchify<'t>(x: &PatchSet<'t>, grid: &PatchGrid) -> Result<Var<'t>> {
    if x.data().shape() != grid.patch_shape() {
        return Err(Error::Contract(format!(
            "patch set {:?} does not match grid {:?}",
            x.data().shape(),
            grid.patch_shape()
        )));
    }
    let idx: Rc<[usize]> = invert(&grid.indices()?).into();
    Ok(x.data().gather(idx, &[2, grid.embed, grid.height, grid.width])?)
}

/// Re-windows a patch set from `from.side` to `to_side` in one gather.
pub fn repatch<'t>(x: &PatchSet<'t>, from: &PatchGrid, to_side: usize) -> Result<(PatchSet<'t>, PatchGrid)> {
    if x.data().shape() != from.patch_shape() {
        return Err(Error::Contract(format!(
            "patch set {:?} does not match grid {:?}",
            x.data().shape(),
            from.patch_shape()
        )));
    }
    let to = PatchGrid {
        side: to_side,
        ..from.clone()
    };
    let spatial = invert(&from.indices()?);
    let idx: Rc<[usize]> = to.indices()?.into_iter().map(|i| spatial[i]).collect();
    Ok((PatchSet::new(x.data().gather(idx, &to.patch_shape())?)?, to))
}

#[derive(Debug, Clone, Copy)]
pub struct Stage {
    pub mixer: DenViscomBlock,
    pub attention: AttentionBlock,
}

/// The full parameterized feature trunk.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub config: ModelConfig,
    pub encoder_l: Encoder,
    /// `None` when both images share `encoder_l`.
    pub encoder_r: Option<Encoder>,
    pub pos: PositionalEmbedding,
    pub stage1: Vec<Stage>,
    pub stage2: Vec<Stage>,
}

/// Trunk outputs: per-side `[embed, h, w]` features.
pub struct TrunkOutput<'t> {
    pub left: Var<'t>,
    pub right: Var<'t>,
}

impl Trunk {
    /// Registers every parameter into a fresh store, seeded deterministically.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let enc = &config.encoder_channels;
        let encoder_l = Encoder::new(&mut store, &mut init, "encoder_l", enc, config.embed);
        let encoder_r = (!config.flags.share_encoders)
            .then(|| Encoder::new(&mut store, &mut init, "encoder_r", enc, config.embed));
        let pos = PositionalEmbedding::new(&mut store, &mut init, config.embed, config.patch_side_stage1);
        let dims = BlockDims {
            embed: config.embed,
            state: config.state_n,
            kernel: config.conv_kernel,
            mlp_ratio: config.mlp_ratio,
        };
        let mut stage = |store: &mut ParamStore, name: String, heads: usize| -> Result<Stage> {
            let f = &config.flags;
            Ok(Stage {
                mixer: DenViscomBlock::new(
                    store,
                    &mut init,
                    &format!("{name}.mixer"),
                    dims,
                    config.scan_mode,
                    f.no_fusion,
                    f.tie_conv_branches,
                ),
                attention: AttentionBlock::new(
                    store,
                    &mut init,
                    &format!("{name}.attn"),
                    config.embed,
                    heads,
                    config.mlp_ratio,
                    f,
                )?,
            })
        };
        let stage1 = (0..config.depth_n)
            .map(|i| stage(&mut store, format!("stage1.{i}"), config.heads_h))
            .collect::<Result<Vec<_>>>()?;
        let stage2 = (0..config.stage2_depth())
            .map(|i| stage(&mut store, format!("stage2.{i}"), 2 * config.heads_h))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                config: config.clone(),
                encoder_l,
                encoder_r,
                pos,
                stage1,
                stage2,
            },
            store,
        ))
    }

    pub fn encode_pair<'t>(&self, p: &Bound<'t>, img_l: Var<'t>, img_r: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let enc_r = self.encoder_r.as_ref().unwrap_or(&self.encoder_l);
        Ok((self.encoder_l.forward(p, img_l)?, enc_r.forward(p, img_r)?))
    }

    /// Runs the trunk on normalized, padded `[3, H, W]` images.
    pub fn forward<'t>(&self, p: &Bound<'t>, img_l: Var<'t>, img_r: Var<'t>) -> Result<TrunkOutput<'t>> {
        let (sl, sr) = (img_l.shape(), img_r.shape());
        if sl != sr {
            return Err(Error::Input(format!("image shapes differ: {sl:?} vs {sr:?}")));
        }
        let m = self.config.pad_multiple();
        if sl.len() != 3 || sl[1] % m != 0 || sl[2] % m != 0 {
            return Err(Error::Input(format!("image {sl:?} is not padded to multiples of {m}")));
        }
        let (f_l, f_r) = self.encode_pair(p, img_l, img_r)?;
        let fs = f_l.shape();
        let pos = self.pos.expand(p, fs[1], fs[2])?;
        let stacked = add_pos_and_concat(f_l, f_r, pos)?;
        let grid1 = PatchGrid {
            embed: fs[0],
            height: fs[1],
            width: fs[2],
            side: self.config.patch_side_stage1,
        };
        let mut x = patchify(stacked, grid1.side)?;
        for st in &self.stage1 {
            x = st.attention.forward(p, &st.mixer.forward(p, &x)?)?;
        }
        let (mut x, grid2) = repatch(&x, &grid1, self.config.patch_side_stage2)?;
        for st in &self.stage2 {
            x = st.attention.forward(p, &st.mixer.forward(p, &x)?)?;
        }
        let (left, right) = unpatchify(&x, &grid2)?.halves(0)?;
        let out_shape = [fs[0], fs[1], fs[2]];
        Ok(TrunkOutput {
            left: left.reshape(&out_shape)?,
            right: right.reshape(&out_shape)?,
        })
    }
}
