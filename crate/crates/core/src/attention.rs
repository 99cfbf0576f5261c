//! Multi-head attention and the self/cross attention block that exchanges
//! information between corresponding left and right patch sequences.

use denviscom_tensor::Var;

use crate::config::Flags;
use crate::denviscom::PatchSet;
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamGroup, ParamStore, ResidualMlp};

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub embed: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, embed: usize, heads: usize) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide embed {embed}")));
        }
        let g = ParamGroup::TrunkBlocks;
        let mut lin = |n: &str| Linear::new(store, init, &format!("{name}.{n}"), g, embed, embed);
        Ok(Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
            embed,
        })
    }

    /// `[b, L, E]` to `[b, h, L, E/h]`.
    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        Ok(x.reshape(&[s[0], s[1], self.heads, self.embed / self.heads])?.permute(&[0, 2, 1, 3])?)
    }

    /// Output `[b, Lq, E]` and attention probabilities `[b, h, Lq, Lk]`.
    pub fn forward_with_weights<'t>(&self, p: &Bound<'t>, q: Var<'t>, kv: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (qs, ks) = (q.shape(), kv.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.embed || ks[2] != self.embed {
            return Err(Error::Contract(format!(
                "attention expects [b, L, {}] query and key/value, got {qs:?} and {ks:?}",
                self.embed
            )));
        }
        let qh = self.split_heads(self.q.forward(p, q)?)?;
        let kh = self.split_heads(self.k.forward(p, kv)?)?;
        let vh = self.split_heads(self.v.forward(p, kv)?)?;
        let scale = 1.0 / ((self.embed / self.heads) as f64).sqrt();
        let weights = qh.matmul_nt(kh)?.scale(scale)?.softmax_lastdim()?;
        let out = weights
            .matmul(vh)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[qs[0], qs[1], self.embed])?;
        Ok((self.o.forward(p, out)?, weights))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, q: Var<'t>, kv: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(p, q, kv)?.0)
    }
}

/// Pre-norm attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct NormedAttention {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl NormedAttention {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, embed: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), ParamGroup::TrunkBlocks, embed),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), embed, heads)?,
        })
    }

    /// `attn(q = norm(q), kv = norm(kv))`, without the residual.
    fn apply<'t>(&self, p: &Bound<'t>, q: Var<'t>, kv: Var<'t>) -> Result<Var<'t>> {
        let (q_n, kv_n) = (self.norm.forward(p, q)?, self.norm.forward(p, kv)?);
        self.attn.forward(p, q_n, kv_n)
    }

    fn apply_self<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let n = self.norm.forward(p, x)?;
        self.attn.forward(p, n, n)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CrossMode {
    pub sequential: bool,
    pub attach_query: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    /// Shared by both sides.
    pub self_attn: Option<NormedAttention>,
    pub cross_attn: Option<NormedAttention>,
    pub cross_mode: CrossMode,
    pub mlp: ResidualMlp,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        embed: usize,
        heads: usize,
        mlp_ratio: usize,
        flags: &Flags,
    ) -> Result<Self> {
        let self_attn = match flags.self_attention() {
            true => Some(NormedAttention::new(store, init, &format!("{name}.self"), embed, heads)?),
            false => None,
        };
        let cross_attn = match flags.cross_attention() {
            true => Some(NormedAttention::new(store, init, &format!("{name}.cross"), embed, heads)?),
            false => None,
        };
        Ok(Self {
            self_attn,
            cross_attn,
            cross_mode: CrossMode {
                sequential: flags.sequential_cross,
                attach_query: flags.cross_attach_query,
            },
            mlp: ResidualMlp::new(store, init, &format!("{name}.mlp"), embed, mlp_ratio),
        })
    }

    /// Parameters one pre-norm attention sublayer adds: four `E x E` projections
    /// with biases plus a norm.
    pub fn sublayer_param_count(embed: usize) -> usize {
        4 * embed * embed + 4 * embed + 2 * embed
    }

    /// Cross-attention update of `own`. By default `own` supplies keys and
    /// values and `other` the queries; with `attach_query` the roles flip.
    fn cross_update<'t>(&self, p: &Bound<'t>, attn: &NormedAttention, own: Var<'t>, other: Var<'t>) -> Result<Var<'t>> {
        if self.cross_mode.attach_query {
            Ok(own.add(attn.apply(p, own, other)?)?)
        } else {
            Ok(own.add(attn.apply(p, other, own)?)?)
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &PatchSet<'t>) -> Result<PatchSet<'t>> {
        let (mut f_l, mut f_r) = x.sides()?;
        if let Some(sa) = &self.self_attn {
            f_l = f_l.add(sa.apply_self(p, f_l)?)?;
            f_r = f_r.add(sa.apply_self(p, f_r)?)?;
        }
        if let Some(ca) = &self.cross_attn {
            let (snap_l, snap_r) = (f_l, f_r);
            f_l = self.cross_update(p, ca, snap_l, snap_r)?;
            let partner = if self.cross_mode.sequential { f_l } else { snap_l };
            f_r = self.cross_update(p, ca, snap_r, partner)?;
        }
        let joined = PatchSet::from_sides(f_l, f_r)?;
        PatchSet::new(self.mlp.forward(p, joined.data())?)
    }
}
