//! Acceptance suite: every criterion below runs at its stated tolerance and
//! prints one `ACCEPTANCE <n> PASS/FAIL` line (written straight to stderr so
//! the lines are visible in normal `cargo test` output).
//!
//! 1. gradient integrity of every block (finite differences, 64-bit)
//! 2. bipartite-branch algebra vs an independent dense oracle
//! 3. residual/identity invariants
//! 4. overfit sanity on a 1-pair corpus
//! 5. toy-corpus generalization over the copy-source baseline
//! 6. ablation ladder ordering across seeds
//! 7. determinism and persistence
//! 8. metric correctness against reference oracles

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bigraphgan::blocks::{aif_fuse, BgrBlock, BgrBranch, IaBlock, PartIaBlock, PbgrBlock};
use bigraphgan::checkpoint::{load_checkpoint, save_checkpoint};
use bigraphgan::cli::{evaluate_pairs, run_training_steps, EVAL_MASK_MARGIN};
use bigraphgan::data::{load_dataset, make_dataset, Split};
use bigraphgan::metrics::{masked_ssim, pose_mask, psnr, ssim};
use bigraphgan::net::{
    generator_loss, Discriminator, LossWeights, ModelConfig, OptimHyper, PerceptualNet,
    TrainState, Variant,
};
use bigraphgan::nn::{Ctx, ParamId, ParamStore};
use bigraphgan::tensor::{grad_check, Tensor, Val};

/// Write a line to the real stderr, bypassing the test harness capture.
fn announce(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

/// Smallest |input| feeding any relu or leaky-relu on a tape, measured
/// relative to that tensor's rms scale. Gradient-check fixtures must keep
/// this clear of zero so the finite-difference probe cannot cross a kink.
fn kink_margin(tape: &bigraphgan::tensor::Tape<f64>) -> f64 {
    let mut m = f64::INFINITY;
    for name in ["relu", "leaky_relu"] {
        for v in tape.nodes_named(name) {
            for input in tape.op_inputs(v) {
                let data = tape.value(input).data();
                let rms =
                    (data.iter().map(|x| x * x).sum::<f64>() / data.len() as f64).sqrt();
                if rms == 0.0 {
                    continue;
                }
                for &x in data {
                    m = m.min(x.abs() / rms);
                }
            }
        }
    }
    m
}

fn verdict(criterion: u32, pass: bool, detail: &str) {
    announce(&format!(
        "ACCEPTANCE {criterion} {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---- criterion 1: gradient integrity ---------------------------------------

/// Finite-difference check of the gradient that flows into one stored
/// parameter. The closure builds a scalar loss assuming the store is bound.
fn param_grad_check(
    store: &ParamStore<f64>,
    id: ParamId,
    h: f64,
    taped: impl Fn(&mut Ctx<f64>) -> Val,
) -> f64 {
    let mut cx = Ctx::new();
    cx.bind(store, true);
    let root = taped(&mut cx);
    let grads = cx.tape.backward(root).expect("backward");
    let analytic = grads.get_or_zeros(cx.p(id), &cx.tape);

    let base = store.get(id).clone();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let eval = |delta: f64| -> f64 {
            let mut s2 = store.clone();
            let mut data = base.data().to_vec();
            data[i] += delta;
            s2.set(id, Tensor::from_vec(base.shape().to_vec(), data).unwrap());
            let mut cx = Ctx::new();
            cx.bind(&s2, false);
            let root = taped(&mut cx);
            cx.tape.value(root).item().unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    max_rel
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let h = 1e-3;
    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut track = |name: &'static str, err: f64| {
        announce(&format!("  c1 grad {name}: {err:.3e}"));
        if err > worst.0 {
            worst = (err, name);
        }
    };

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xACC);

    // bgr_branch: inputs and every learnable matrix kind
    {
        let mut store = ParamStore::<f64>::new();
        let branch = BgrBranch::init(&mut store, "b", 4, 3, 3, &mut rng).unwrap();
        let f_feat = Tensor::<f64>::randn_seeded(&[4, 4, 4], 0.0, 1.0, 1).unwrap();
        let f_node = Tensor::<f64>::randn_seeded(&[4, 4, 4], 0.0, 1.0, 2).unwrap();

        let (ff, fnn) = (f_feat.clone(), f_node.clone());
        let st = store.clone();
        track(
            "bgr_branch/f_feat",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    cx.bind(&st, false);
                    let vb = cx.tape.constant(fnn.clone());
                    let out = branch.forward(&mut cx, v, vb)?;
                    let sq = cx.tape.square(out)?;
                    let s = cx.tape.sum(sq);
                    *t = cx.into_tape();
                    Ok(s)
                },
                &f_feat,
                h,
            )
            .unwrap(),
        );
        let st = store.clone();
        let ffc = ff.clone();
        track(
            "bgr_branch/f_node",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    cx.bind(&st, false);
                    let va = cx.tape.constant(ffc.clone());
                    let out = branch.forward(&mut cx, va, v)?;
                    let sq = cx.tape.square(out)?;
                    let s = cx.tape.sum(sq);
                    *t = cx.into_tape();
                    Ok(s)
                },
                &f_node,
                h,
            )
            .unwrap(),
        );
        for (label, id) in [
            ("bgr_branch/adjacency", branch.adjacency),
            ("bgr_branch/edge_weights", branch.edge_weights),
            ("bgr_branch/theta.kernel", branch.theta.kernel),
            ("bgr_branch/psi.kernel", branch.psi.kernel),
        ] {
            let (ffc, fnc) = (f_feat.clone(), f_node.clone());
            track(
                label,
                param_grad_check(&store, id, h, move |cx| {
                    let va = cx.tape.constant(ffc.clone());
                    let vb = cx.tape.constant(fnc.clone());
                    let out = branch.forward(cx, va, vb).unwrap();
                    let sq = cx.tape.square(out).unwrap();
                    cx.tape.sum(sq)
                }),
            );
        }
    }

    // bgr_block: both outputs against one input
    {
        let mut store = ParamStore::<f64>::new();
        let block = BgrBlock::init(&mut store, "g", 3, 3, 2, false, &mut rng).unwrap();
        let f_pa = Tensor::<f64>::randn_seeded(&[3, 3, 3], 0.0, 1.0, 3).unwrap();
        let f_pb = Tensor::<f64>::randn_seeded(&[3, 3, 3], 0.0, 1.0, 4).unwrap();
        let st = store.clone();
        track(
            "bgr_block/f_pa",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    cx.bind(&st, false);
                    let vb = cx.tape.constant(f_pb.clone());
                    let (oa, ob) = block.forward(&mut cx, v, vb)?;
                    let sa = cx.tape.square(oa)?;
                    let sb = cx.tape.square(ob)?;
                    let both = cx.tape.add(sa, sb)?;
                    let s = cx.tape.sum(both);
                    *t = cx.into_tape();
                    Ok(s)
                },
                &f_pa,
                h,
            )
            .unwrap(),
        );
    }

    // ia_block: appearance input and a stacked convolution kernel. The relu
    // after the block's instance norm is non-differentiable at zero, so the
    // fixture seed is chosen so that every relu input stays clear of the
    // kink under the h = 1e-3 probe.
    {
        let mut store = ParamStore::<f64>::new();
        let block = IaBlock::init(&mut store, "ia", 4, &mut rng).unwrap();

        let fixture = |seed: u64| {
            (
                Tensor::<f64>::randn_seeded(&[4, 4, 4], 0.0, 1.0, 1000 + seed).unwrap(),
                Tensor::<f64>::randn_seeded(&[4, 4, 4], 0.0, 1.0, 2000 + seed).unwrap(),
                Tensor::<f64>::randn_seeded(&[4, 4, 4], 0.0, 1.0, 3000 + seed).unwrap(),
            )
        };
        let margin_of = |seed: u64| {
            let (f_i, fa, fb) = fixture(seed);
            let mut cx = Ctx::new();
            cx.bind(&store, false);
            let vi = cx.tape.constant(f_i);
            let va = cx.tape.constant(fa);
            let vb = cx.tape.constant(fb);
            block.forward(&mut cx, vi, va, vb).unwrap();
            kink_margin(&cx.tape)
        };
        let seed = (0..500)
            .find(|&s| margin_of(s) > 2e-2)
            .expect("a kink-clear ia fixture exists");
        let (f_i, fa, fb) = fixture(seed);

        let st = store.clone();
        let (fac, fbc) = (fa.clone(), fb.clone());
        track(
            "ia_block/f_i",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    cx.bind(&st, false);
                    let va = cx.tape.constant(fac.clone());
                    let vb = cx.tape.constant(fbc.clone());
                    let (i2, pa, pb) = block.forward(&mut cx, v, va, vb)?;
                    let s1 = cx.tape.square(i2)?;
                    let s2 = cx.tape.square(pa)?;
                    let s3 = cx.tape.square(pb)?;
                    let t12 = cx.tape.add(s1, s2)?;
                    let t123 = cx.tape.add(t12, s3)?;
                    let s = cx.tape.sum(t123);
                    *t = cx.into_tape();
                    Ok(s)
                },
                &f_i,
                h,
            )
            .unwrap(),
        );
        let st = store.clone();
        let (fic, fac, fbc) = (f_i.clone(), fa.clone(), fb.clone());
        track(
            "ia_block/f_pa",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    cx.bind(&st, false);
                    let vi = cx.tape.constant(fic.clone());
                    let vb = cx.tape.constant(fbc.clone());
                    let (i2, pa, pb) = block.forward(&mut cx, vi, v, vb)?;
                    let s1 = cx.tape.square(i2)?;
                    let s2 = cx.tape.square(pa)?;
                    let s3 = cx.tape.square(pb)?;
                    let t12 = cx.tape.add(s1, s2)?;
                    let t123 = cx.tape.add(t12, s3)?;
                    let s = cx.tape.sum(t123);
                    *t = cx.into_tape();
                    Ok(s)
                },
                &fa,
                h,
            )
            .unwrap(),
        );
        let (fic, fac, fbc) = (f_i.clone(), fa.clone(), fb.clone());
        track(
            "ia_block/att1.kernel",
            param_grad_check(&store, block.att1.kernel, h, move |cx| {
                let vi = cx.tape.constant(fic.clone());
                let va = cx.tape.constant(fac.clone());
                let vb = cx.tape.constant(fbc.clone());
                let (i2, pa, pb) = block.forward(cx, vi, va, vb).unwrap();
                let s1 = cx.tape.square(i2).unwrap();
                let s2 = cx.tape.square(pa).unwrap();
                let s3 = cx.tape.square(pb).unwrap();
                let t12 = cx.tape.add(s1, s2).unwrap();
                let t123 = cx.tape.add(t12, s3).unwrap();
                cx.tape.sum(t123)
            }),
        );
    }

    // aif_fuse: both images and the mask (kept inside (0,1) under the probe)
    {
        let i_a = Tensor::<f64>::randn_seeded(&[3, 4, 4], 0.0, 0.4, 8).unwrap();
        let i_b = Tensor::<f64>::randn_seeded(&[3, 4, 4], 0.0, 0.4, 9).unwrap();
        let mask = Tensor::<f64>::randn_seeded(&[1, 4, 4], 0.5, 0.08, 10)
            .unwrap()
            .map(|v| v.clamp(0.2, 0.8));
        let (ib, mk) = (i_b.clone(), mask.clone());
        track(
            "aif_fuse/i_a",
            grad_check(
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
            )
            .unwrap(),
        );
        let (ia, ib) = (i_a.clone(), i_b.clone());
        track(
            "aif_fuse/mask",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    let va = cx.tape.constant(ia.clone());
                    let vb = cx.tape.constant(ib.clone());
                    let out = aif_fuse(&mut cx, va, vb, v)?;
                    let sq = cx.tape.square(out)?;
                    let s = cx.tape.sum(sq);
                    *t = cx.into_tape();
                    Ok(s)
                },
                &mask,
                h,
            )
            .unwrap(),
        );
    }

    // pbgr_block through the reduced 2-part variant
    {
        let parts = 2;
        let mut store = ParamStore::<f64>::new();
        let block = PbgrBlock::init(&mut store, "p", parts, 4, 3, 2, true, &mut rng).unwrap();
        let pa0 = Tensor::<f64>::randn_seeded(&[4, 3, 3], 0.0, 1.0, 11).unwrap();
        let pb0 = Tensor::<f64>::randn_seeded(&[4, 3, 3], 0.0, 1.0, 12).unwrap();
        let pa1 = Tensor::<f64>::randn_seeded(&[4, 3, 3], 0.0, 1.0, 13).unwrap();
        let pb1 = Tensor::<f64>::randn_seeded(&[4, 3, 3], 0.0, 1.0, 14).unwrap();
        let st = store.clone();
        track(
            "pbgr_block/part0",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    cx.bind(&st, false);
                    let b0 = cx.tape.constant(pb0.clone());
                    let a1 = cx.tape.constant(pa1.clone());
                    let b1 = cx.tape.constant(pb1.clone());
                    let out = block.forward(&mut cx, &[(v, b0), (a1, b1)])?;
                    let sq = cx.tape.square(out)?;
                    let s = cx.tape.sum(sq);
                    *t = cx.into_tape();
                    Ok(s)
                },
                &pa0,
                h,
            )
            .unwrap(),
        );
    }

    // part_ia_block: appearance and the transformation code
    {
        let mut store = ParamStore::<f64>::new();
        let block = PartIaBlock::init(&mut store, "pia", 4, 2, 2, true, &mut rng).unwrap();
        let f_i = Tensor::<f64>::randn_seeded(&[4, 3, 3], 0.0, 1.0, 15).unwrap();
        let f_p = Tensor::<f64>::randn_seeded(&[4, 3, 3], 0.0, 1.0, 16).unwrap();
        let pa = Tensor::<f64>::randn_seeded(&[2, 3, 3], 0.0, 1.0, 17).unwrap();
        let pb = Tensor::<f64>::randn_seeded(&[2, 3, 3], 0.0, 1.0, 18).unwrap();
        for (label, wrt, vary_fi) in [
            ("part_ia_block/f_i", f_i.clone(), true),
            ("part_ia_block/f_p", f_p.clone(), false),
        ] {
            let st = store.clone();
            let (fic, fpc, pac, pbc) = (f_i.clone(), f_p.clone(), pa.clone(), pb.clone());
            let block = block.clone();
            track(
                label,
                grad_check(
                    move |t, v| {
                        let mut cx = Ctx::with_tape(std::mem::take(t));
                        cx.bind(&st, false);
                        let vpa = cx.tape.constant(pac.clone());
                        let vpb = cx.tape.constant(pbc.clone());
                        let (vi, vp) = if vary_fi {
                            (v, cx.tape.constant(fpc.clone()))
                        } else {
                            (cx.tape.constant(fic.clone()), v)
                        };
                        let (i2, pairs) = block.forward(&mut cx, vi, vp, &[(vpa, vpb), (vpa, vpb)])?;
                        let sq = cx.tape.square(i2)?;
                        let mut acc = cx.tape.sum(sq);
                        for (a, b) in pairs {
                            for part in [a, b] {
                                let sq = cx.tape.square(part)?;
                                let s = cx.tape.sum(sq);
                                acc = cx.tape.add(acc, s)?;
                            }
                        }
                        *t = cx.into_tape();
                        Ok(acc)
                    },
                    &wrt,
                    h,
                )
                .unwrap(),
            );
        }
    }

    // instance_norm
    {
        let x = Tensor::<f64>::randn_seeded(&[3, 4, 4], 0.3, 1.2, 19).unwrap();
        let gamma = Tensor::<f64>::randn_seeded(&[3], 1.0, 0.2, 20).unwrap();
        let beta = Tensor::<f64>::randn_seeded(&[3], 0.0, 0.2, 21).unwrap();
        let (g, b) = (gamma.clone(), beta.clone());
        track(
            "instance_norm/x",
            grad_check(
                move |t, v| {
                    let vg = t.constant(g.clone());
                    let vb = t.constant(b.clone());
                    let y = t.instance_norm(v, vg, vb, 1e-5)?;
                    let sq = t.square(y)?;
                    Ok(t.sum(sq))
                },
                &x,
                h,
            )
            .unwrap(),
        );
        let (xc, bc) = (x.clone(), beta.clone());
        track(
            "instance_norm/gamma",
            grad_check(
                move |t, v| {
                    let vx = t.constant(xc.clone());
                    let vb = t.constant(bc.clone());
                    let y = t.instance_norm(vx, v, vb, 1e-5)?;
                    let sq = t.square(y)?;
                    Ok(t.sum(sq))
                },
                &gamma,
                h,
            )
            .unwrap(),
        );
    }

    // both discriminators, inputs at 8x8. Two strided layers keep every
    // instance-norm plane above one spatial element; the fixture seed keeps
    // the leaky-relu inputs clear of the kink under the probe.
    for (label, channels) in [("d_app", 6usize), ("d_sha", 21usize)] {
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::init(&mut store, label, channels, 2, 4, &mut rng).unwrap();
        let margin_of = |seed: u64| {
            let x = Tensor::<f64>::randn_seeded(&[channels, 8, 8], 0.0, 1.0, seed).unwrap();
            let mut cx = Ctx::new();
            cx.bind(&store, false);
            let vx = cx.tape.constant(x);
            d.forward(&mut cx, vx).unwrap();
            kink_margin(&cx.tape)
        };
        let seed = (4000..4500)
            .find(|&s| margin_of(s) > 2e-2)
            .expect("a kink-clear discriminator fixture exists");
        let x = Tensor::<f64>::randn_seeded(&[channels, 8, 8], 0.0, 1.0, seed).unwrap();

        // guard against a degenerate all-zero gradient
        {
            let mut cx = Ctx::new();
            cx.bind(&store, false);
            let vx = cx.tape.var(x.clone());
            let score = d.forward(&mut cx, vx).unwrap();
            let sq = cx.tape.square(score).unwrap();
            let s = cx.tape.sum(sq);
            let grads = cx.tape.backward(s).unwrap();
            let g = grads.get_or_zeros(vx, &cx.tape);
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{label} input gradient vanished"
            );
        }

        let st = store.clone();
        let dd = d.clone();
        track(
            match label {
                "d_app" => "d_app/input",
                _ => "d_sha/input",
            },
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    cx.bind(&st, false);
                    let score = dd.forward(&mut cx, v)?;
                    let sq = cx.tape.square(score)?;
                    let s = cx.tape.sum(sq);
                    *t = cx.into_tape();
                    Ok(s)
                },
                &x,
                h,
            )
            .unwrap(),
        );
    }

    // total objective with respect to the generated image and the fake scores
    {
        let per = PerceptualNet::<f64>::init(8).unwrap();
        let target = Tensor::<f64>::randn_seeded(&[3, 8, 8], 0.0, 0.4, 23).unwrap();
        // keep |result - target| clear of the kink at zero under the probe
        let result = Tensor::from_vec(
            vec![3, 8, 8],
            target
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + if i % 2 == 0 { 0.11 } else { -0.13 })
                .collect(),
        )
        .unwrap();
        let min_gap = result
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(min_gap > 5.0 * h, "fixture too close to the L1 kink");
        let scores = Tensor::<f64>::randn_seeded(&[1, 2, 2], 0.5, 0.05, 24)
            .unwrap()
            .map(|v| v.clamp(0.3, 0.7));
        let weights = LossWeights::default();

        let (tc, sc, pc) = (target.clone(), scores.clone(), per.clone());
        track(
            "total_loss/result",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    pc.bind(&mut cx);
                    let vt = cx.tape.constant(tc.clone());
                    let va = cx.tape.constant(sc.clone());
                    let vs = cx.tape.constant(sc.clone());
                    let (loss, _) = generator_loss(&mut cx, &weights, v, vt, va, vs, &pc)?;
                    *t = cx.into_tape();
                    Ok(loss)
                },
                &result,
                h,
            )
            .unwrap(),
        );
        let (rc, tc, pc) = (result.clone(), target.clone(), per.clone());
        track(
            "total_loss/fake_scores",
            grad_check(
                move |t, v| {
                    let mut cx = Ctx::with_tape(std::mem::take(t));
                    pc.bind(&mut cx);
                    let vr = cx.tape.constant(rc.clone());
                    let vt = cx.tape.constant(tc.clone());
                    let (loss, _) = generator_loss(&mut cx, &weights, vr, vt, v, v, &pc)?;
                    *t = cx.into_tape();
                    Ok(loss)
                },
                &scores,
                h,
            )
            .unwrap(),
        );
    }

    let elapsed = start.elapsed();
    let pass = worst.0 < 1e-3 && elapsed < Duration::from_secs(300);
    verdict(
        1,
        pass,
        &format!(
            "max relative gradient error {:.3e} ({}), runtime {:.1}s (< 300s)",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

// ---- criterion 2: dense-algebra oracle ---------------------------------------

#[test]
fn criterion_2_bgr_branch_matches_dense_oracle() {
    use common::{bgr_branch_oracle, BranchWeights, Lin, Mat};
    use rand::Rng;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xACED);
    let mut worst = 0.0f64;
    let configs = 12;
    for trial in 0..configs {
        let c = rng.gen_range(1..=4usize);
        let cprime = rng.gen_range(1..=4usize);
        let n = rng.gen_range(1..=4usize);
        let (hh, ww) = (rng.gen_range(1..=3usize), rng.gen_range(1..=3usize));

        let mut store = ParamStore::<f64>::new();
        let branch = BgrBranch::init(&mut store, "b", c, n, cprime, &mut rng).unwrap();
        let f_feat = Tensor::<f64>::randn_seeded(&[c, hh, ww], 0.0, 1.0, 100 + trial).unwrap();
        let f_node = Tensor::<f64>::randn_seeded(&[c, hh, ww], 0.0, 1.0, 200 + trial).unwrap();

        let mut cx = Ctx::new();
        cx.bind(&store, false);
        let va = cx.tape.constant(f_feat.clone());
        let vb = cx.tape.constant(f_node.clone());
        let out = branch.forward(&mut cx, va, vb).unwrap();
        let got = cx.tape.value(out);

        let l = hh * ww;
        let weights = BranchWeights {
            theta: Lin::from_conv1x1(store.get(branch.theta.kernel), store.get(branch.theta.bias)),
            phi: Lin::from_conv1x1(store.get(branch.phi.kernel), store.get(branch.phi.bias)),
            psi: Lin::from_conv1x1(store.get(branch.psi.kernel), store.get(branch.psi.bias)),
            adjacency: Mat::from_tensor(store.get(branch.adjacency), n, n),
            edge_weights: Mat::from_tensor(store.get(branch.edge_weights), cprime, cprime),
        };
        let feat_mat = Mat::from_tensor(&f_feat, c, l);
        let node_mat = Mat::from_tensor(&f_node, c, l);
        let expect = bgr_branch_oracle(&feat_mat, &node_mat, &weights);

        for (g, e) in got.data().iter().zip(&expect.data) {
            worst = worst.max((g - e).abs());
        }
    }
    verdict(
        2,
        worst < 1e-12,
        &format!("max deviation from the dense oracle over {configs} random configs: {worst:.3e} (< 1e-12)"),
    );
}

// ---- criterion 3: residual and identity invariants -----------------------------

#[test]
fn criterion_3_residual_identity_invariants() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xACE3);
    let mut failures: Vec<String> = Vec::new();

    // zero back-projection makes the branch the exact identity
    {
        let mut store = ParamStore::<f64>::new();
        let branch = BgrBranch::init(&mut store, "b", 3, 4, 2, &mut rng).unwrap();
        let kshape = store.get(branch.psi.kernel).shape().to_vec();
        store.set(branch.psi.kernel, Tensor::zeros(&kshape).unwrap());
        store.set(branch.psi.bias, Tensor::zeros(&[3]).unwrap());
        let f_feat = Tensor::<f64>::randn_seeded(&[3, 3, 3], 0.0, 1.0, 31).unwrap();
        let f_node = Tensor::<f64>::randn_seeded(&[3, 3, 3], 0.0, 1.0, 32).unwrap();
        let mut cx = Ctx::new();
        cx.bind(&store, false);
        let va = cx.tape.constant(f_feat.clone());
        let vb = cx.tape.constant(f_node);
        let out = branch.forward(&mut cx, va, vb).unwrap();
        if !cx.tape.value(out).bit_eq(&f_feat) {
            failures.push("zero-psi branch is not the exact identity".into());
        }
    }

    // identity adjacency leaves only the bias map
    {
        let mut store = ParamStore::<f64>::new();
        let branch = BgrBranch::init(&mut store, "b", 2, 3, 2, &mut rng).unwrap();
        store.set(branch.adjacency, Tensor::eye(3).unwrap());
        let kshape = store.get(branch.psi.kernel).shape().to_vec();
        store.set(branch.psi.kernel, Tensor::zeros(&kshape).unwrap());
        store.set(
            branch.psi.bias,
            Tensor::from_vec(vec![2], vec![0.3, -0.7]).unwrap(),
        );
        let f_feat = Tensor::<f64>::randn_seeded(&[2, 2, 2], 0.0, 1.0, 33).unwrap();
        let f_node = Tensor::<f64>::randn_seeded(&[2, 2, 2], 0.0, 1.0, 34).unwrap();
        let mut cx = Ctx::new();
        cx.bind(&store, false);
        let va = cx.tape.constant(f_feat.clone());
        let vb = cx.tape.constant(f_node);
        let out = branch.forward(&mut cx, va, vb).unwrap();
        for ch in 0..2 {
            let bias = [0.3, -0.7][ch];
            for j in 0..4 {
                let got = cx.tape.value(out).data()[ch * 4 + j];
                if (got - (f_feat.data()[ch * 4 + j] + bias)).abs() > 1e-12 {
                    failures.push("identity adjacency is not bias-only".into());
                }
            }
        }
    }

    // AIF mask limits select the inputs exactly
    {
        let i_a = Tensor::<f64>::randn_seeded(&[3, 3, 3], 0.0, 0.5, 35).unwrap();
        let i_b = Tensor::<f64>::randn_seeded(&[3, 3, 3], 0.0, 0.5, 36).unwrap();
        let mut cx = Ctx::<f64>::new();
        let va = cx.tape.constant(i_a.clone());
        let vb = cx.tape.constant(i_b.clone());
        let ones = cx.tape.constant(Tensor::full(&[1, 3, 3], 1.0).unwrap());
        let zeros = cx.tape.constant(Tensor::zeros(&[1, 3, 3]).unwrap());
        let keep = aif_fuse(&mut cx, va, vb, ones).unwrap();
        let fill = aif_fuse(&mut cx, va, vb, zeros).unwrap();
        if !cx.tape.value(keep).bit_eq(&i_a) {
            failures.push("mask == 1 does not select the source exactly".into());
        }
        if !cx.tape.value(fill).bit_eq(&i_b) {
            failures.push("mask == 0 does not select the intermediate exactly".into());
        }
    }

    // attention maps stay strictly inside (0,1) for finite inputs
    {
        let cfg = ModelConfig {
            variant: Variant::B6,
            image_h: 16,
            image_w: 16,
            t_blocks: 1,
            channels: 8,
            graph_nodes: 4,
            graph_cprime: 4,
            d_layers: 2,
            d_base: 4,
            perceptual_channels: 8,
            ..ModelConfig::default()
        };
        let state = TrainState::<f64>::new(cfg.clone(), OptimHyper::default(), 9).unwrap();
        let i_a = Tensor::<f64>::randn_seeded(&[3, 16, 16], 0.0, 0.8, 37).unwrap();
        let p_a = Tensor::<f64>::randn_seeded(&[18, 16, 16], 0.0, 0.8, 38).unwrap();
        let p_b = Tensor::<f64>::randn_seeded(&[18, 16, 16], 0.0, 0.8, 39).unwrap();
        let (_, _, attention) = bigraphgan::net::run_generator(
            &cfg,
            &state.gen,
            &state.gen_params,
            &i_a,
            &p_a,
            &p_b,
        )
        .unwrap();
        let mask = attention.expect("B6 emits a mask");
        if !mask.data().iter().all(|&v| v > 0.0 && v < 1.0) {
            failures.push("fusion mask has values outside (0,1)".into());
        }
    }

    verdict(
        3,
        failures.is_empty(),
        &if failures.is_empty() {
            "zero-psi identity, identity-adjacency bias map, AIF limits, attention range".to_string()
        } else {
            failures.join("; ")
        },
    );
}

// ---- criterion 4: overfit sanity -----------------------------------------------

#[test]
fn criterion_4_overfit_single_pair() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    make_dataset(1, 0, 41, 32, 32, dir.path()).unwrap();
    let dataset = load_dataset(dir.path()).unwrap();
    let train_pairs = dataset.split(Split::Train);

    let cfg = ModelConfig {
        variant: Variant::B6,
        image_h: 32,
        image_w: 32,
        t_blocks: 2,
        channels: 32,
        graph_nodes: 16,
        graph_cprime: 16,
        ..ModelConfig::default()
    };
    let mut state = TrainState::<f32>::new(cfg, OptimHyper::default(), 42).unwrap();
    let records =
        run_training_steps(&mut state, &train_pairs, 300, 1, &LossWeights::default()).unwrap();
    assert_eq!(records.len(), 300);

    let first10: f64 = records[..10].iter().map(|r| r.l1).sum::<f64>() / 10.0;
    let last10: f64 = records[290..].iter().map(|r| r.l1).sum::<f64>() / 10.0;
    let elapsed = start.elapsed();
    let pass = last10 < 0.25 * first10 && elapsed < Duration::from_secs(180);
    verdict(
        4,
        pass,
        &format!(
            "1-pair overfit: first-10 mean L1 {first10:.4}, final-10 mean L1 {last10:.4} \
             (need < {:.4}), runtime {:.0}s (< 180s)",
            0.25 * first10,
            elapsed.as_secs_f64()
        ),
    );
}

// ---- criteria 5 and 6: the toy experiment matrix --------------------------------

struct VariantScore {
    ssim: f64,
    mask_ssim: f64,
}

struct RunMatrix {
    baseline_ssim: f64,
    baseline_mask_ssim: f64,
    scores: BTreeMap<(String, u64), VariantScore>,
    b6_seed1_train_secs: f64,
}

static MATRIX: OnceLock<RunMatrix> = OnceLock::new();

/// Protocol: 512 train / 64 test pairs at 64x64 (corpus seed 7), T = 4,
/// C = 64, published loss weights and Adam settings, batch 1, 2000 steps.
fn experiment_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        image_h: 64,
        image_w: 64,
        t_blocks: 4,
        channels: 64,
        graph_nodes: 32,
        graph_cprime: 32,
        part_cprime: 16,
        part_mid: 16,
        ..ModelConfig::default()
    }
}

fn run_matrix() -> &'static RunMatrix {
    MATRIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        announce("  c5/c6 generating 576-pair corpus (seed 7) ...");
        make_dataset(576, 64, 7, 64, 64, dir.path()).unwrap();
        let dataset = load_dataset(dir.path()).unwrap();
        let train_pairs = dataset.split(Split::Train);
        let test_pairs = dataset.split(Split::Test);
        assert_eq!(train_pairs.len(), 512);
        assert_eq!(test_pairs.len(), 64);

        // copy-source baseline
        let mut base_ssim = 0.0;
        let mut base_mask = 0.0;
        for pair in &test_pairs {
            let mask = pose_mask(&pair.skel_b, 64, 64, EVAL_MASK_MARGIN);
            base_ssim += ssim(&pair.image_a, &pair.image_b).unwrap();
            base_mask += masked_ssim(&pair.image_a, &pair.image_b, &mask).unwrap();
        }
        base_ssim /= test_pairs.len() as f64;
        base_mask /= test_pairs.len() as f64;
        announce(&format!(
            "  c5/c6 copy-source baseline: ssim {base_ssim:.4}, mask-ssim {base_mask:.4}"
        ));

        let mut scores = BTreeMap::new();
        let mut b6_seed1_train_secs = 0.0;
        for variant in [Variant::B1, Variant::B5, Variant::B6, Variant::PlusPlus] {
            for seed in [1u64, 2, 3] {
                let cfg = experiment_config(variant);
                let started = Instant::now();
                let mut state = TrainState::<f32>::new(cfg.clone(), OptimHyper::default(), seed)
                    .expect("state");
                run_training_steps(&mut state, &train_pairs, 2000, 1, &LossWeights::default())
                    .expect("training run");
                let train_secs = started.elapsed().as_secs_f64();
                if variant == Variant::B6 && seed == 1 {
                    b6_seed1_train_secs = train_secs;
                }
                let report =
                    evaluate_pairs(&cfg, &state.gen, &state.gen_params, &test_pairs).expect("eval");
                announce(&format!(
                    "  c5/c6 {} seed {seed}: ssim {:.4}, mask-ssim {:.4} ({:.0}s train)",
                    variant.name(),
                    report.mean_ssim(),
                    report.mean_mask_ssim(),
                    train_secs,
                ));
                scores.insert(
                    (variant.name().to_string(), seed),
                    VariantScore {
                        ssim: report.mean_ssim(),
                        mask_ssim: report.mean_mask_ssim(),
                    },
                );
            }
        }
        RunMatrix {
            baseline_ssim: base_ssim,
            baseline_mask_ssim: base_mask,
            scores,
            b6_seed1_train_secs,
        }
    })
}

fn mean_over_seeds(matrix: &RunMatrix, variant: &str, f: impl Fn(&VariantScore) -> f64) -> f64 {
    let vals: Vec<f64> = matrix
        .scores
        .iter()
        .filter(|((v, _), _)| v == variant)
        .map(|(_, s)| f(s))
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn criterion_5_toy_corpus_generalization() {
    let m = run_matrix();
    let s = &m.scores[&("b6".to_string(), 1)];
    let gap = s.ssim - m.baseline_ssim;
    let mask_ordered = s.mask_ssim > m.baseline_mask_ssim;
    let in_budget = m.b6_seed1_train_secs < 45.0 * 60.0;
    let pass = gap >= 0.03 && mask_ordered && in_budget;
    verdict(
        5,
        pass,
        &format!(
            "test ssim {:.4} vs copy-source {:.4} (gap {:.4}, need >= 0.03); mask-ssim {:.4} vs {:.4} \
             ({}); 2000-step run {:.0}s (< 2700s)",
            s.ssim,
            m.baseline_ssim,
            gap,
            s.mask_ssim,
            m.baseline_mask_ssim,
            if mask_ordered { "same ordering" } else { "ordering violated" },
            m.b6_seed1_train_secs
        ),
    );
}

#[test]
fn criterion_6_ablation_ladder_direction() {
    let m = run_matrix();
    let b1 = mean_over_seeds(m, "b1", |s| s.ssim);
    let b5 = mean_over_seeds(m, "b5", |s| s.ssim);
    let b6 = mean_over_seeds(m, "b6", |s| s.ssim);
    let pp = mean_over_seeds(m, "plus-plus", |s| s.ssim);
    let ladder = b6 >= b5 && b5 >= b1;
    let gap = b6 - b1;
    let parity = pp >= b6 - 0.005;
    let pass = ladder && gap >= 0.01 && parity;
    verdict(
        6,
        pass,
        &format!(
            "mean ssim over 3 seeds: b1 {b1:.4}, b5 {b5:.4}, b6 {b6:.4}, plus-plus {pp:.4}; \
             ladder {}; b6-b1 {gap:.4} (need >= 0.01); part-aware parity {}",
            if ladder { "holds" } else { "violated" },
            if parity { "holds" } else { "violated" }
        ),
    );
}

// ---- criterion 7: determinism and persistence ------------------------------------

#[test]
fn criterion_7_determinism_and_persistence() {
    let mut failures: Vec<String> = Vec::new();

    // identical seeds reproduce corpora byte for byte
    {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_dataset(4, 1, 71, 32, 32, d1.path()).unwrap();
        make_dataset(4, 1, 71, 32, 32, d2.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for name in names {
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            if a != b {
                failures.push(format!("corpus file {name} differs between same-seed runs"));
            }
        }
    }

    // checkpoint resume reproduces an unbroken run bitwise (64-bit mode),
    // including training logs and metric reports
    {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(4, 1, 72, 32, 32, dir.path()).unwrap();
        let dataset = load_dataset(dir.path()).unwrap();
        let train_pairs = dataset.split(Split::Train);
        let test_pairs = dataset.split(Split::Test);
        let cfg = ModelConfig {
            variant: Variant::B6,
            image_h: 32,
            image_w: 32,
            t_blocks: 1,
            channels: 8,
            graph_nodes: 4,
            graph_cprime: 4,
            d_layers: 2,
            d_base: 4,
            perceptual_channels: 8,
            ..ModelConfig::default()
        };
        let weights = LossWeights::default();

        let mut unbroken = TrainState::<f64>::new(cfg.clone(), OptimHyper::default(), 73).unwrap();
        let full_log: Vec<String> =
            run_training_steps(&mut unbroken, &train_pairs, 10, 1, &weights)
                .unwrap()
                .iter()
                .map(|r| r.log_line())
                .collect();

        let mut first = TrainState::<f64>::new(cfg.clone(), OptimHyper::default(), 73).unwrap();
        let mut log: Vec<String> = run_training_steps(&mut first, &train_pairs, 5, 1, &weights)
            .unwrap()
            .iter()
            .map(|r| r.log_line())
            .collect();
        let ckpt = dir.path().join("mid.bgg");
        save_checkpoint(&ckpt, &first, &weights, "seeded").unwrap();
        let (mut resumed, _) = load_checkpoint::<f64>(&ckpt).unwrap();
        log.extend(
            run_training_steps(&mut resumed, &train_pairs, 10, 1, &weights)
                .unwrap()
                .iter()
                .map(|r| r.log_line()),
        );
        if log != full_log {
            failures.push("resumed loss log differs from the unbroken run".into());
        }
        for i in 0..unbroken.gen.len() {
            if !unbroken
                .gen
                .tensor_by_index(i)
                .bit_eq(resumed.gen.tensor_by_index(i))
            {
                failures.push(format!("generator parameter {i} differs after resume"));
                break;
            }
        }

        // metric reports, byte for byte
        let r1 = evaluate_pairs(&cfg, &unbroken.gen, &unbroken.gen_params, &test_pairs).unwrap();
        let r2 = evaluate_pairs(&cfg, &resumed.gen, &resumed.gen_params, &test_pairs).unwrap();
        if r1.summary_lines() != r2.summary_lines() || r1.per_image_lines() != r2.per_image_lines()
        {
            failures.push("metric reports differ between unbroken and resumed runs".into());
        }

        // checkpoint round trip: save -> load -> save is byte-identical
        let ckpt2 = dir.path().join("mid2.bgg");
        let (reloaded, meta) = load_checkpoint::<f64>(&ckpt).unwrap();
        save_checkpoint(&ckpt2, &reloaded, &meta.weights, &meta.perceptual_source).unwrap();
        if std::fs::read(&ckpt).unwrap() != std::fs::read(&ckpt2).unwrap() {
            failures.push("save -> load -> save is not byte-identical".into());
        }
    }

    verdict(
        7,
        failures.is_empty(),
        &if failures.is_empty() {
            "corpora, resumed logs, parameters, metric reports, and checkpoint round trips all match"
                .to_string()
        } else {
            failures.join("; ")
        },
    );
}

// ---- criterion 8: metric correctness -----------------------------------------------

#[test]
fn criterion_8_metric_fixtures() {
    let mut failures: Vec<String> = Vec::new();
    let mut worst = 0.0f64;

    // randomized fixtures against the direct-window oracle
    for seed in 0..4u64 {
        let a = Tensor::<f64>::randn_seeded(&[3, 20, 20], 0.5, 0.2, 800 + seed)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0));
        let b = Tensor::<f64>::randn_seeded(&[3, 20, 20], 0.5, 0.2, 900 + seed)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0));
        let got = ssim(&a, &b).unwrap();
        let expect = common::ssim_oracle(&a, &b);
        worst = worst.max((got - expect).abs());
    }
    // half-plane anticorrelated fixture
    {
        let mut data = vec![0.0f64; 3 * 16 * 16];
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    data[ch * 256 + y * 16 + x] = if x < 8 { 0.0 } else { 1.0 };
                }
            }
        }
        let a = Tensor::from_vec(vec![3, 16, 16], data).unwrap();
        let b = a.map(|v| 1.0 - v);
        let got = ssim(&a, &b).unwrap();
        let expect = common::ssim_oracle(&a, &b);
        worst = worst.max((got - expect).abs());
    }
    if worst > 1e-6 {
        failures.push(format!("ssim deviates from the oracle by {worst:.3e}"));
    }

    // self similarity is exactly one
    let a = Tensor::<f64>::randn_seeded(&[3, 16, 16], 0.5, 0.2, 801)
        .unwrap()
        .map(|v| v.clamp(0.0, 1.0));
    if ssim(&a, &a).unwrap() != 1.0 {
        failures.push("ssim(a, a) != 1".into());
    }

    // psnr closed forms
    let zeros = Tensor::<f64>::zeros(&[3, 4, 4]).unwrap();
    let half = Tensor::<f64>::full(&[3, 4, 4], 0.5).unwrap();
    let p = psnr(&zeros, &half).unwrap();
    let expect = 10.0 * 4.0f64.log10();
    if (p - expect).abs() > 1e-6 {
        failures.push(format!("constant-diff psnr {p} vs {expect}"));
    }
    if (p - 6.0206).abs() > 1e-4 {
        failures.push(format!("constant-diff psnr {p} not 6.0206 dB"));
    }
    if psnr(&a, &a).unwrap() != 100.0 {
        failures.push("identical-image psnr is not clamped to 100 dB".into());
    }

    verdict(
        8,
        failures.is_empty(),
        &if failures.is_empty() {
            format!("ssim oracle deviation {worst:.3e} (<= 1e-6); psnr fixtures exact")
        } else {
            failures.join("; ")
        },
    );
}
