//! Differentiable reasoning blocks of the graph generator.
//!
//! - [`BgrBranch`] / [`BgrBlock`]: bipartite graph reasoning between the two
//!   pose code streams. A branch projects the feature stream into an N-node
//!   graph space using a projection derived from the *other* stream, runs a
//!   Laplacian-smoothing graph convolution `(I - A) V W`, projects back, and
//!   adds a residual.
//! - [`IaBlock`]: interaction-and-aggregation. Sigmoid attention from the
//!   concatenated shape codes modulates the appearance code, then both shape
//!   codes are refreshed from the new appearance code with a channel split.
//! - [`aif_fuse`]: attention-based image fusion, a per-pixel convex blend of
//!   the source image and the decoded intermediate under a one-channel mask.
//! - [`PbgrBlock`] / [`PartIaBlock`]: the part-aware variants that decompose
//!   the global transformation into 18 per-sub-pose reasoning branches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, InstanceNorm2d, ParamId, ParamStore};
use crate::tensor::{Dtype, Scalar, Tensor, Val};

/// One direction of bipartite graph reasoning.
///
/// `theta` produces the projection matrix from the node stream, `phi`
/// reduces the feature stream to `cprime` node-feature channels, `psi`
/// projects reasoned features back to `c` channels. The adjacency and edge
/// weights are unconstrained learnable matrices.
#[derive(Debug, Clone, Copy)]
pub struct BgrBranch {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub psi: Conv2d,
    pub adjacency: ParamId,
    pub edge_weights: ParamId,
    pub nodes: usize,
    pub cprime: usize,
}

impl BgrBranch {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        nodes: usize,
        cprime: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if nodes == 0 || cprime == 0 {
            return Err(Error::contract(format!(
                "graph dimensions must be positive, got nodes={nodes} cprime={cprime}"
            )));
        }
        let theta = Conv2d::init(store, &format!("{name}.theta"), c, nodes, 1, 1, 0, rng)?;
        let phi = Conv2d::init(store, &format!("{name}.phi"), c, cprime, 1, 1, 0, rng)?;
        let psi = Conv2d::init(store, &format!("{name}.psi"), cprime, c, 1, 1, 0, rng)?;
        let adjacency = store.add(
            format!("{name}.adjacency"),
            Tensor::randn(&[nodes, nodes], 0.0, crate::nn::INIT_STD, rng)?,
        )?;
        let edge_weights = store.add(
            format!("{name}.edge_weights"),
            Tensor::randn(&[cprime, cprime], 0.0, crate::nn::INIT_STD, rng)?,
        )?;
        Ok(BgrBranch {
            theta,
            phi,
            psi,
            adjacency,
            edge_weights,
            nodes,
            cprime,
        })
    }

    /// Reason `f_feat` against `f_node` and return the updated `f_feat`.
    ///
    /// The chain is: `H = flatten(theta(f_node))`, `V = H * flatten(phi(f_feat))^T`,
    /// `M = (I - A) V W`, output `psi(unflatten(H^T M)) + f_feat`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, f_feat: Val, f_node: Val) -> Result<Val> {
        let sf = cx.tape.shape(f_feat).to_vec();
        let sn = cx.tape.shape(f_node).to_vec();
        if sf != sn {
            return Err(Error::shape(format!(
                "bgr branch inputs must share shape, got {sf:?} vs {sn:?}"
            )));
        }
        if sf.len() != 3 {
            return Err(Error::shape(format!("bgr branch needs rank-3 codes, got {sf:?}")));
        }
        let (h, w) = (sf[1], sf[2]);

        let th = self.theta.forward(cx, f_node)?;
        let h_mat = cx.tape.flatten_spatial(th)?; // [N, L]
        let ph = self.phi.forward(cx, f_feat)?;
        let phi_mat = cx.tape.flatten_spatial(ph)?; // [C', L]
        let phi_t = cx.tape.transpose(phi_mat)?; // [L, C']
        let v = cx.tape.matmul(h_mat, phi_t)?; // [N, C']

        let eye = cx.tape.constant(Tensor::eye(self.nodes)?);
        let a = cx.p(self.adjacency);
        let i_minus_a = cx.tape.sub(eye, a)?;
        let prop = cx.tape.matmul(i_minus_a, v)?;
        let wmat = cx.p(self.edge_weights);
        let m = cx.tape.matmul(prop, wmat)?; // [N, C']

        let h_t = cx.tape.transpose(h_mat)?; // [L, N]
        let back = cx.tape.matmul(h_t, m)?; // [L, C']
        let back_t = cx.tape.transpose(back)?; // [C', L]
        let grid = cx.tape.unflatten_spatial(back_t, h, w)?;
        let projected = self.psi.forward(cx, grid)?;
        cx.tape.add(projected, f_feat)
    }
}

/// Both reasoning directions of one stage: B2A updates the source code from
/// the target code, A2B the reverse. The two branches read the same inputs
/// (no sequential dependency). With `shared` set they reference one
/// parameter set, so optimizer steps keep them bit-identical.
#[derive(Debug, Clone, Copy)]
pub struct BgrBlock {
    pub b2a: BgrBranch,
    pub a2b: BgrBranch,
    pub shared: bool,
}

impl BgrBlock {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        nodes: usize,
        cprime: usize,
        shared: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let b2a = BgrBranch::init(store, &format!("{name}.b2a"), c, nodes, cprime, rng)?;
        let a2b = if shared {
            b2a
        } else {
            BgrBranch::init(store, &format!("{name}.a2b"), c, nodes, cprime, rng)?
        };
        Ok(BgrBlock { b2a, a2b, shared })
    }

    pub fn forward<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        f_pa: Val,
        f_pb: Val,
    ) -> Result<(Val, Val)> {
        let pa = self.b2a.forward(cx, f_pa, f_pb)?;
        let pb = self.a2b.forward(cx, f_pb, f_pa)?;
        Ok((pa, pb))
    }
}

/// Interaction-and-aggregation stage. The first convolution of each stacked
/// pair carries instance norm; this keeps code magnitudes bounded across
/// stages.
#[derive(Debug, Clone, Copy)]
pub struct IaBlock {
    pub att1: Conv2d,
    pub att_norm: InstanceNorm2d,
    pub att2: Conv2d,
    pub upd1: Conv2d,
    pub upd_norm: InstanceNorm2d,
    pub upd2: Conv2d,
    pub channels: usize,
}

impl IaBlock {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Attention path: 2C -> C -> C (pre-sigmoid map matches the
        // appearance width). Update path: 3C -> C -> 2C for the channel split.
        let att1 = Conv2d::init(store, &format!("{name}.att1"), 2 * c, c, 3, 1, 1, rng)?;
        let att_norm = InstanceNorm2d::init(store, &format!("{name}.att_norm"), c)?;
        let att2 = Conv2d::init(store, &format!("{name}.att2"), c, c, 1, 1, 0, rng)?;
        let upd1 = Conv2d::init(store, &format!("{name}.upd1"), 3 * c, c, 3, 1, 1, rng)?;
        let upd_norm = InstanceNorm2d::init(store, &format!("{name}.upd_norm"), c)?;
        let upd2 = Conv2d::init(store, &format!("{name}.upd2"), c, 2 * c, 1, 1, 0, rng)?;
        Ok(IaBlock {
            att1,
            att_norm,
            att2,
            upd1,
            upd_norm,
            upd2,
            channels: c,
        })
    }

    /// Returns the updated `(appearance, source shape, target shape)` codes.
    pub fn forward<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        f_i: Val,
        f_pa_new: Val,
        f_pb_new: Val,
    ) -> Result<(Val, Val, Val)> {
        let c = self.channels;
        for v in [f_i, f_pa_new, f_pb_new] {
            let s = cx.tape.shape(v);
            if s.len() != 3 || s[0] != c {
                return Err(Error::shape(format!(
                    "ia block expects {c}-channel rank-3 codes, got {s:?}"
                )));
            }
        }
        let shapes = cx.tape.concat(&[f_pa_new, f_pb_new])?;
        let a1 = self.att1.forward(cx, shapes)?;
        let a1n = self.att_norm.forward(cx, a1)?;
        let a1r = cx.tape.relu(a1n);
        let a2 = self.att2.forward(cx, a1r)?;
        let att = cx.tape.sigmoid(a2);

        let gated = cx.tape.mul(att, f_i)?;
        let f_i_new = cx.tape.add(gated, f_i)?;

        let joint = cx.tape.concat(&[f_i_new, f_pa_new, f_pb_new])?;
        let u1 = self.upd1.forward(cx, joint)?;
        let u1n = self.upd_norm.forward(cx, u1)?;
        let u1r = cx.tape.relu(u1n);
        let u2 = self.upd2.forward(cx, u1r)?;
        let halves = cx.tape.split_channels(u2, &[c, c])?;
        Ok((f_i_new, halves[0], halves[1]))
    }
}

/// Convex per-pixel blend `i_a * mask + i_b_tilde * (1 - mask)`.
///
/// The one-channel mask broadcasts across the image channels. In the 64-bit
/// verification mode, mask values outside `[0, 1]` raise a contract error.
pub fn aif_fuse<S: Scalar>(cx: &mut Ctx<S>, i_a: Val, i_b_tilde: Val, mask: Val) -> Result<Val> {
    let sa = cx.tape.shape(i_a).to_vec();
    let sb = cx.tape.shape(i_b_tilde).to_vec();
    let sm = cx.tape.shape(mask).to_vec();
    if sa != sb {
        return Err(Error::shape(format!(
            "aif_fuse images must share shape, got {sa:?} vs {sb:?}"
        )));
    }
    if sa.len() != 3 || sm.len() != 3 || sm[0] != 1 || sm[1..] != sa[1..] {
        return Err(Error::shape(format!(
            "aif_fuse mask must be [1, h, w] matching images {sa:?}, got {sm:?}"
        )));
    }
    if S::DTYPE == Dtype::F64 {
        let md = cx.tape.value(mask).data();
        if md.iter().any(|v| *v < S::zero() || *v > S::one()) {
            return Err(Error::contract(
                "aif_fuse mask has values outside [0, 1]".to_string(),
            ));
        }
    }
    let channels = sa[0];
    let mask_full = cx.tape.concat(&vec![mask; channels])?;
    let keep = cx.tape.mul(i_a, mask_full)?;
    let inv = cx.tape.one_minus(mask_full);
    let fill = cx.tape.mul(i_b_tilde, inv)?;
    cx.tape.add(keep, fill)
}

/// Part-aware bipartite graph reasoning: one BGR block per sub-pose, with the
/// per-part `[updated source, updated target]` concatenations summed in fixed
/// part order into the global transformation code.
#[derive(Debug, Clone)]
pub struct PbgrBlock {
    blocks: Vec<BgrBlock>,
    pub parts: usize,
    pub shared: bool,
}

impl PbgrBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        parts: usize,
        c_part: usize,
        nodes: usize,
        cprime: usize,
        shared: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let count = if shared { 1 } else { parts };
        let mut blocks = Vec::with_capacity(count);
        for i in 0..count {
            let label = if shared {
                format!("{name}.part_shared")
            } else {
                format!("{name}.part{i:02}")
            };
            blocks.push(BgrBlock::init(store, &label, c_part, nodes, cprime, false, rng)?);
        }
        Ok(PbgrBlock {
            blocks,
            parts,
            shared,
        })
    }

    pub fn block_for(&self, part: usize) -> &BgrBlock {
        if self.shared {
            &self.blocks[0]
        } else {
            &self.blocks[part]
        }
    }

    /// Reason each `(source, target)` sub-pose pair and sum the concatenated
    /// results. The pair list length must match the configured part count.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, pairs: &[(Val, Val)]) -> Result<Val> {
        if pairs.len() != self.parts {
            return Err(Error::contract(format!(
                "pbgr block expects {} sub-pose pairs, got {}",
                self.parts,
                pairs.len()
            )));
        }
        let mut total: Option<Val> = None;
        for (i, &(pa, pb)) in pairs.iter().enumerate() {
            let (ua, ub) = self.block_for(i).forward(cx, pa, pb)?;
            let cat = cx.tape.concat(&[ua, ub])?;
            total = Some(match total {
                None => cat,
                Some(acc) => cx.tape.add(acc, cat)?,
            });
        }
        Ok(total.expect("parts >= 1"))
    }
}

/// Part-aware interaction and aggregation: sigmoid of the global
/// transformation code gates the appearance code, then each part's code pair
/// is refreshed from the new appearance code with a channel split.
#[derive(Debug, Clone)]
pub struct PartIaBlock {
    upd1: Vec<Conv2d>,
    norms: Vec<InstanceNorm2d>,
    upd2: Vec<Conv2d>,
    pub channels: usize,
    pub parts: usize,
    pub shared: bool,
}

impl PartIaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        mid: usize,
        parts: usize,
        shared: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::contract(format!(
                "part ia block needs an even channel count, got {c}"
            )));
        }
        if mid == 0 {
            return Err(Error::contract("part ia block needs a positive mid width"));
        }
        let count = if shared { 1 } else { parts };
        let mut upd1 = Vec::with_capacity(count);
        let mut norms = Vec::with_capacity(count);
        let mut upd2 = Vec::with_capacity(count);
        for i in 0..count {
            let label = if shared {
                format!("{name}.upd_shared")
            } else {
                format!("{name}.upd{i:02}")
            };
            upd1.push(Conv2d::init(store, &format!("{label}.0"), 2 * c, mid, 3, 1, 1, rng)?);
            norms.push(InstanceNorm2d::init(store, &format!("{label}.norm"), mid)?);
            upd2.push(Conv2d::init(store, &format!("{label}.1"), mid, c, 1, 1, 0, rng)?);
        }
        Ok(PartIaBlock {
            upd1,
            norms,
            upd2,
            channels: c,
            parts,
            shared,
        })
    }

    /// Returns the updated appearance code and per-part code pairs.
    /// `f_p` is the summed transformation code from [`PbgrBlock`]; its channel
    /// count must match the appearance code.
    pub fn forward<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        f_i: Val,
        f_p: Val,
        pairs: &[(Val, Val)],
    ) -> Result<(Val, Vec<(Val, Val)>)> {
        if pairs.len() != self.parts {
            return Err(Error::contract(format!(
                "part ia block expects {} sub-pose pairs, got {}",
                self.parts,
                pairs.len()
            )));
        }
        let si = cx.tape.shape(f_i).to_vec();
        let sp = cx.tape.shape(f_p).to_vec();
        if si != sp {
            return Err(Error::shape(format!(
                "transformation code {sp:?} does not match appearance code {si:?}"
            )));
        }
        let att = cx.tape.sigmoid(f_p);
        let gated = cx.tape.mul(att, f_i)?;
        let f_i_new = cx.tape.add(gated, f_i)?;

        let half = self.channels / 2;
        let mut out = Vec::with_capacity(pairs.len());
        for (i, &(pa, pb)) in pairs.iter().enumerate() {
            let idx = if self.shared { 0 } else { i };
            let joint = cx.tape.concat(&[f_i_new, pa, pb])?;
            let u1 = self.upd1[idx].forward(cx, joint)?;
            let u1n = self.norms[idx].forward(cx, u1)?;
            let u1r = cx.tape.relu(u1n);
            let u2 = self.upd2[idx].forward(cx, u1r)?;
            let halves = cx.tape.split_channels(u2, &[half, half])?;
            out.push((halves[0], halves[1]));
        }
        Ok((f_i_new, out))
    }
}
