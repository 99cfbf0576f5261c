//! The joint left/right mixer block.
//!
//! Patch sets carry left-image patches in the first half of the patch axis and
//! the spatially corresponding right-image patches in the second half. Half of
//! the embedding goes through two per-side convolution branches; the other
//! half is channel-fused pairwise so one scan sees both views at once.

use denviscom_tensor::{concat, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamGroup, ParamId, ParamStore, ResidualMlp};
use crate::ssm::{ScanMode, SelectiveScan};

/// `[p, L, embed]` patches with left/right halves along the patch axis.
#[derive(Clone, Copy)]
pub struct PatchSet<'t> {
    data: Var<'t>,
}

impl<'t> PatchSet<'t> {
    pub fn new(data: Var<'t>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] % 2 != 0 {
            return Err(Error::Contract(format!(
                "patch set must be [p, L, embed] with even p, got {s:?}"
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> Var<'t> {
        self.data
    }

    pub fn num_patches(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn left_count(&self) -> usize {
        self.num_patches() / 2
    }

    pub fn seq_len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn embed(&self) -> usize {
        self.data.shape()[2]
    }

    /// `(left, right)`, each `[p/2, L, embed]`.
    pub fn sides(&self) -> Result<(Var<'t>, Var<'t>)> {
        Ok(self.data.halves(0)?)
    }

    pub fn from_sides(left: Var<'t>, right: Var<'t>) -> Result<Self> {
        Self::new(concat(&[left, right], 0)?)
    }
}

/// Transposes to `[p, embed, L]` and splits channels into `(f_m, f_s)`.
pub fn split_embed<'t>(x: &PatchSet<'t>) -> Result<(Var<'t>, Var<'t>)> {
    if x.embed() % 2 != 0 {
        return Err(Error::Config(format!("embed {} is not even", x.embed())));
    }
    Ok(x.data().transpose_last2()?.halves(1)?)
}

/// `[p, c, L]` to `[p/2, 2c, L]`: patch `j` gets left channels then right channels.
pub fn fuse_lr<'t>(f: Var<'t>) -> Result<Var<'t>> {
    let s = f.shape();
    if s.len() != 3 || s[0] % 2 != 0 {
        return Err(Error::Contract(format!("fuse_lr needs [p, c, L] with even p, got {s:?}")));
    }
    let (l, r) = f.halves(0)?;
    Ok(concat(&[l, r], 1)?)
}

/// Inverse of [`fuse_lr`].
pub fn unfuse_lr<'t>(f: Var<'t>) -> Result<Var<'t>> {
    let s = f.shape();
    if s.len() != 3 || s[1] % 2 != 0 {
        return Err(Error::Contract(format!(
            "unfuse_lr needs [p/2, 2c, L] with even channels, got {s:?}"
        )));
    }
    let (l, r) = f.halves(1)?;
    Ok(concat(&[l, r], 0)?)
}

/// Depthwise kernel init, uniform in `+-1/sqrt(k)`.
fn conv_kernel(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, k: usize) -> (ParamId, ParamId) {
    let bound = 1.0 / (k as f64).sqrt();
    let g = ParamGroup::TrunkBlocks;
    (
        store.add(format!("{name}.kernel"), g, init.uniform(&[channels, k], -bound, bound)),
        store.add(format!("{name}.conv_bias"), g, Tensor::zeros(&[channels])),
    )
}

/// `SiLU(DWConv1D(Linear(x)))` over `[q, c, L]`, the linear acting on channels.
#[derive(Debug, Clone, Copy)]
pub struct ConvBranch {
    pub linear: Linear,
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvBranch {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, k: usize) -> Self {
        let linear = Linear::new(store, init, &format!("{name}.linear"), ParamGroup::TrunkBlocks, channels, channels);
        let (kernel, bias) = conv_kernel(store, init, name, channels, k);
        Self { linear, kernel, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.linear.forward(p, x.transpose_last2()?)?.transpose_last2()?;
        Ok(h.depthwise_conv1d(p.get(self.kernel), p.get(self.bias))?.silu()?)
    }
}

/// Conv branch followed by a selective scan over `L`.
#[derive(Debug, Clone, Copy)]
pub struct ScanBranch {
    pub conv: ConvBranch,
    pub scan: SelectiveScan,
}

impl ScanBranch {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, k: usize, state: usize, mode: ScanMode) -> Self {
        Self {
            conv: ConvBranch::new(store, init, name, channels, k),
            scan: SelectiveScan::new(store, init, &format!("{name}.ssm"), channels, state, mode),
        }
    }

    /// The signal the scan consumes.
    pub fn pre_scan<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.conv.forward(p, x)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let u = self.pre_scan(p, x)?;
        self.scan.forward(p, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub embed: usize,
    pub state: usize,
    pub kernel: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DenViscomBlock {
    pub norm: LayerNorm,
    pub conv_l: ConvBranch,
    /// `None` when the right branch reuses the left weights.
    pub conv_r: Option<ConvBranch>,
    pub scan: ScanBranch,
    pub proj: Linear,
    pub mlp: ResidualMlp,
    pub no_fusion: bool,
}

impl DenViscomBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dims: BlockDims,
        mode: ScanMode,
        no_fusion: bool,
        tie_conv_branches: bool,
    ) -> Self {
        let c = dims.embed / 2;
        let g = ParamGroup::TrunkBlocks;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), g, dims.embed);
        let conv_l = ConvBranch::new(store, init, &format!("{name}.conv_l"), c, dims.kernel);
        let conv_r = (!tie_conv_branches).then(|| ConvBranch::new(store, init, &format!("{name}.conv_r"), c, dims.kernel));
        let scan = ScanBranch::new(store, init, &format!("{name}.scan"), 2 * c, dims.kernel, dims.state, mode);
        let proj = Linear::new(store, init, &format!("{name}.proj"), g, dims.embed, dims.embed);
        let mlp = ResidualMlp::new(store, init, &format!("{name}.mlp"), dims.embed, dims.mlp_ratio);
        Self {
            norm,
            conv_l,
            conv_r,
            scan,
            proj,
            mlp,
            no_fusion,
        }
    }

    /// Scan half of the mixer on `f_m: [p, c, L]`, returning `[p, c, L]`.
    fn scan_path<'t>(&self, p: &Bound<'t>, f_m: Var<'t>) -> Result<Var<'t>> {
        if !self.no_fusion {
            return unfuse_lr(self.scan.forward(p, fuse_lr(f_m)?)?);
        }
        // Every patch is scanned on its own, occupying its side's channel
        // half next to a zero partner, so the branch width stays 2c.
        let s = f_m.shape();
        let (l, r) = f_m.halves(0)?;
        let zeros = f_m.constant(Tensor::zeros(&[s[0] / 2, s[1], s[2]]));
        let lone = concat(&[concat(&[l, zeros], 1)?, concat(&[zeros, r], 1)?], 0)?;
        let out = self.scan.forward(p, lone)?;
        let (out_l, out_r) = out.halves(0)?;
        Ok(concat(&[out_l.halves(1)?.0, out_r.halves(1)?.1], 0)?)
    }

    /// The mixer without residual or MLP: `Linear(Concat(scan, Concat(conv_l, conv_r)))`.
    pub fn mixer<'t>(&self, p: &Bound<'t>, x: &PatchSet<'t>) -> Result<Var<'t>> {
        let (f_m, f_s) = split_embed(x)?;
        let (s_l, s_r) = f_s.halves(0)?;
        let conv_r = self.conv_r.as_ref().unwrap_or(&self.conv_l);
        let conv = concat(&[self.conv_l.forward(p, s_l)?, conv_r.forward(p, s_r)?], 0)?;
        let scan = self.scan_path(p, f_m)?;
        let mixed = concat(&[scan, conv], 1)?.transpose_last2()?;
        self.proj.forward(p, mixed)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &PatchSet<'t>) -> Result<PatchSet<'t>> {
        let normed = PatchSet::new(self.norm.forward(p, x.data())?)?;
        let h = x.data().add(self.mixer(p, &normed)?)?;
        PatchSet::new(self.mlp.forward(p, h)?)
    }
}

#[cfg(test)]
mod tests {
    use denviscom_tensor::Tape;

    use super::*;

    fn tagged(tape: &Tape, p: usize, c: usize, l: usize) -> Var<'_> {
        tape.constant(Tensor::from_fn(&[p, c, l], |i| i as f64))
    }

    #[test]
    fn split_embed_assigns_channel_halves() {
        let tape = Tape::new();
        // [p=2, L=3, E=4], value = channel index
        let x = PatchSet::new(tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i % 4) as f64))).unwrap();
        let (m, s) = split_embed(&x).unwrap();
        assert_eq!(m.shape(), vec![2, 2, 3]);
        assert!(m.value().data().chunks(3).enumerate().all(|(r, row)| row.iter().all(|&v| v == (r % 2) as f64)));
        assert!(s.value().data().chunks(3).enumerate().all(|(r, row)| row.iter().all(|&v| v == (r % 2 + 2) as f64)));
        let back = concat(&[m, s], 1).unwrap().transpose_last2().unwrap();
        assert_eq!(*back.value(), *x.data().value());
        let odd = PatchSet::new(tape.constant(Tensor::zeros(&[2, 3, 3]))).unwrap();
        assert!(matches!(split_embed(&odd), Err(Error::Config(_))));
    }

    #[test]
    fn fuse_example_and_round_trip() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let fused = fuse_lr(f).unwrap();
        assert_eq!(fused.shape(), vec![1, 2, 2]);
        assert_eq!(fused.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let x = tagged(&tape, 4, 3, 5);
        assert_eq!(*unfuse_lr(fuse_lr(x).unwrap()).unwrap().value(), *x.value());
        let z = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert_eq!(fuse_lr(z).unwrap().value().max_abs(), 0.0);
        assert!(fuse_lr(tagged(&tape, 3, 1, 2)).is_err());
        assert!(unfuse_lr(tagged(&tape, 1, 3, 2)).is_err());
    }

    #[test]
    fn conv_branch_zero_and_identity() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let br = ConvBranch::new(&mut store, &mut init, "b", 3, 3);
        let tape = Tape::new();
        {
            let p = store.bind(&tape, false);
            let y = br.forward(&p, tape.constant(Tensor::zeros(&[2, 3, 5]))).unwrap();
            assert_eq!(y.value().max_abs(), 0.0);
        }
        *store.get_mut(br.linear.weight) = Tensor::eye(3);
        *store.get_mut(br.kernel) = Tensor::from_fn(&[3, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.37).sin()));
        let y = br.forward(&p, x).unwrap();
        assert_eq!(*y.value(), x.value().map(denviscom_tensor::silu));
    }
}
