//! The bipartite graph reasoning block on toy tensors: the projection /
//! propagation / back-projection chain, its residual structure, and the
//! effect of the learned adjacency.
//!
//! ```sh
//! cargo run --example graph_reasoning
//! ```

use bigraphgan::blocks::BgrBranch;
use bigraphgan::nn::{Ctx, ParamStore};
use bigraphgan::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bigraphgan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, n, cprime) = (4, 3, 2);
    let mut store = ParamStore::<f64>::new();
    let branch = BgrBranch::init(&mut store, "demo", c, n, cprime, &mut rng)?;

    let f_feat = Tensor::<f64>::randn_seeded(&[c, 3, 3], 0.0, 1.0, 10)?;
    let f_node = Tensor::<f64>::randn_seeded(&[c, 3, 3], 0.0, 1.0, 11)?;

    let mut cx = Ctx::new();
    cx.bind(&store, false);
    let va = cx.tape.constant(f_feat.clone());
    let vb = cx.tape.constant(f_node.clone());
    let out = branch.forward(&mut cx, va, vb)?;
    println!(
        "branch({c}x3x3 against {c}x3x3, {n} nodes, {cprime} node channels) -> {:?}",
        cx.tape.value(out).shape()
    );
    let delta: f64 = cx
        .tape
        .value(out)
        .data()
        .iter()
        .zip(f_feat.data())
        .map(|(o, f)| (o - f).abs())
        .sum::<f64>()
        / f_feat.len() as f64;
    println!("mean |output - input| (residual message size): {delta:.5}");
    println!("tape ops: {:?}", cx.tape.op_counts());

    // zero back-projection turns the branch into the identity
    let kshape = store.get(branch.psi.kernel).shape().to_vec();
    let mut zeroed = store.clone();
    zeroed.set(branch.psi.kernel, Tensor::zeros(&kshape)?);
    zeroed.set(branch.psi.bias, Tensor::zeros(&[c])?);
    let mut cx = Ctx::new();
    cx.bind(&zeroed, false);
    let va = cx.tape.constant(f_feat.clone());
    let vb = cx.tape.constant(f_node.clone());
    let out = branch.forward(&mut cx, va, vb)?;
    println!(
        "zero back-projection is the identity: {}",
        cx.tape.value(out).bit_eq(&f_feat)
    );

    // identity adjacency kills the propagated message entirely
    let mut pinned = zeroed.clone();
    pinned.set(branch.adjacency, Tensor::eye(n)?);
    let mut cx = Ctx::new();
    cx.bind(&pinned, false);
    let va = cx.tape.constant(f_feat.clone());
    let vb = cx.tape.constant(f_node);
    let out = branch.forward(&mut cx, va, vb)?;
    println!(
        "identity adjacency with zero psi is still the identity: {}",
        cx.tape.value(out).bit_eq(&f_feat)
    );
    Ok(())
}
