//! Finite-difference gradient checks over the reasoning blocks in the
//! 64-bit verification mode.
//!
//! ```sh
//! cargo run --example gradient_check
//! ```

use bigraphgan::blocks::{aif_fuse, BgrBlock, IaBlock};
use bigraphgan::nn::{Ctx, ParamStore};
use bigraphgan::tensor::{grad_check, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bigraphgan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-3;

    let mut store = ParamStore::<f64>::new();
    let bgr = BgrBlock::init(&mut store, "bgr", 3, 3, 2, false, &mut rng)?;
    let ia = IaBlock::init(&mut store, "ia", 4, &mut rng)?;

    let f_pa = Tensor::<f64>::randn_seeded(&[3, 3, 3], 0.0, 1.0, 1)?;
    let f_pb = Tensor::<f64>::randn_seeded(&[3, 3, 3], 0.0, 1.0, 2)?;
    let st = store.clone();
    let fpb = f_pb.clone();
    let err = grad_check(
        move |t, v| {
            let mut cx = Ctx::with_tape(std::mem::take(t));
            cx.bind(&st, false);
            let vb = cx.tape.constant(fpb.clone());
            let (oa, ob) = bgr.forward(&mut cx, v, vb)?;
            let sa = cx.tape.square(oa)?;
            let sb = cx.tape.square(ob)?;
            let sum = cx.tape.add(sa, sb)?;
            let s = cx.tape.sum(sum);
            *t = cx.into_tape();
            Ok(s)
        },
        &f_pa,
        h,
    )?;
    println!("bgr_block gradient vs finite differences: {err:.3e}");

    let f_i = Tensor::<f64>::randn_seeded(&[4, 4, 4], 0.0, 1.0, 3)?;
    let fa = Tensor::<f64>::randn_seeded(&[4, 4, 4], 0.0, 1.0, 4)?;
    let fb = Tensor::<f64>::randn_seeded(&[4, 4, 4], 0.0, 1.0, 5)?;
    let st = store.clone();
    let err = grad_check(
        move |t, v| {
            let mut cx = Ctx::with_tape(std::mem::take(t));
            cx.bind(&st, false);
            let va = cx.tape.constant(fa.clone());
            let vb = cx.tape.constant(fb.clone());
            let (i2, _, _) = ia.forward(&mut cx, v, va, vb)?;
            let sq = cx.tape.square(i2)?;
            let s = cx.tape.sum(sq);
            *t = cx.into_tape();
            Ok(s)
        },
        &f_i,
        h,
    )?;
    println!("ia_block gradient vs finite differences:  {err:.3e}");

    let i_a = Tensor::<f64>::randn_seeded(&[3, 4, 4], 0.0, 0.5, 6)?;
    let i_b = Tensor::<f64>::randn_seeded(&[3, 4, 4], 0.0, 0.5, 7)?;
    let mask = Tensor::<f64>::randn_seeded(&[1, 4, 4], 0.5, 0.1, 8)?.map(|v| v.clamp(0.2, 0.8));
    let (ib, mk) = (i_b, mask);
    let err = grad_check(
        move |t, v| {
            let mut cx = Ctx::with_tape(std::mem::take(t));
            let vb = cx.tape.constant(ib.clone());
            let vm = cx.tape.constant(mk.clone());
            let out = aif_fuse(&mut cx, v, vb, vm)?;
            let sq = cx.tape.square(out)?;
            let s = cx.tape.sum(sq);
            *t = cx.into_tape();
            Ok(s)
        },
        &i_a,
        h,
    )?;
    println!("aif_fuse gradient vs finite differences:  {err:.3e}");
    println!("all checks use central differences with h = {h}");
    Ok(())
}
