//! Property tests for the differentiation tape: adjoint consistency of the
//! recorded primitives, concat/split structure, and container round trips.

use bigraphgan::tensor::{Tape, Tensor, Val};
use proptest::prelude::*;

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    // keep magnitudes moderate and away from piecewise-linear kinks
    proptest::collection::vec(
        prop_oneof![(-3.0f64..-1e-2), (1e-2f64..3.0)],
        n,
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// <J v, w> == <v, J^T w> for an operation `f`: the forward-map directional
/// derivative against the reverse-mode pullback. For linear ops `Jv = f(v)`.
fn adjoint_check_linear(
    f: impl Fn(&mut Tape<f64>, Val) -> Val,
    x_shape: &[usize],
    v: Vec<f64>,
    w_seed: u64,
) {
    let mut tape = Tape::new();
    let vx = tape.var(Tensor::from_vec(x_shape.to_vec(), v.clone()).unwrap());
    let y = f(&mut tape, vx);
    let y_shape = tape.shape(y).to_vec();
    let w = Tensor::<f64>::randn_seeded(&y_shape, 0.0, 1.0, w_seed).unwrap();

    // <Jv, w> with Jv = f(v) by linearity
    let lhs = dot(tape.value(y).data(), w.data());

    // <v, J^T w> via backward of sum(f(x) * w)
    let wc = tape.constant(w);
    let prod = tape.mul(y, wc).unwrap();
    let root = tape.sum(prod);
    let grads = tape.backward(root).unwrap();
    let jt_w = grads.get_or_zeros(vx, &tape);
    let rhs = dot(&v, jt_w.data());

    assert!(
        (lhs - rhs).abs() < 1e-8,
        "adjoint mismatch: {lhs} vs {rhs}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_is_self_adjoint_under_transpose(v in vec_strategy(2 * 6 * 6), seed in 0u64..1000) {
        adjoint_check_linear(
            |t, x| {
                let k = t.constant(Tensor::randn_seeded(&[3, 2, 3, 3], 0.0, 0.7, seed ^ 0xC0).unwrap());
                t.conv2d(x, k, 1, 1).unwrap()
            },
            &[2, 6, 6],
            v,
            seed,
        );
    }

    #[test]
    fn conv_transpose_adjoint_property(v in vec_strategy(3 * 4 * 4), seed in 0u64..1000) {
        adjoint_check_linear(
            |t, x| {
                let k = t.constant(Tensor::randn_seeded(&[3, 2, 2, 2], 0.0, 0.7, seed ^ 0xC1).unwrap());
                t.conv_transpose2d(x, k, 2, 0).unwrap()
            },
            &[3, 4, 4],
            v,
            seed,
        );
    }

    #[test]
    fn matmul_left_adjoint_property(v in vec_strategy(3 * 4), seed in 0u64..1000) {
        adjoint_check_linear(
            |t, x| {
                let b = t.constant(Tensor::randn_seeded(&[4, 2], 0.0, 1.0, seed ^ 0xC2).unwrap());
                t.matmul(x, b).unwrap()
            },
            &[3, 4],
            v,
            seed,
        );
    }

    #[test]
    fn reshape_transpose_narrow_adjoint_property(v in vec_strategy(4 * 6), seed in 0u64..1000) {
        adjoint_check_linear(
            |t, x| {
                let tr = t.transpose(x).unwrap();
                let nr = t.narrow(tr, 1, 4).unwrap();
                t.reshape(nr, vec![2, 2, 4]).unwrap()
            },
            &[4, 6],
            v,
            seed,
        );
    }

    #[test]
    fn elementwise_adjoints_match_directional_derivative(
        v in vec_strategy(12),
        seed in 0u64..1000,
    ) {
        // nonlinear elementwise ops: compare <Jv, w> from central differences
        // against the reverse-mode pullback
        let x = Tensor::<f64>::randn_seeded(&[12], 0.4, 1.1, seed ^ 0xD0).unwrap();
        let w = Tensor::<f64>::randn_seeded(&[12], 0.0, 1.0, seed ^ 0xD1).unwrap();
        let run = |input: &Tensor<f64>| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let vx = tape.var(input.clone());
            let s = tape.sigmoid(vx);
            let th = tape.tanh(s);
            let y = th;
            let out = tape.value(y).data().to_vec();
            let wc = tape.constant(w.clone());
            let prod = tape.mul(y, wc).unwrap();
            let root = tape.sum(prod);
            let grads = tape.backward(root).unwrap();
            (out, grads.get_or_zeros(vx, &tape).data().to_vec())
        };
        let (_, jt_w) = run(&x);
        let rhs = dot(&v, &jt_w);

        let h = 1e-6;
        let shift = |sign: f64| {
            Tensor::from_vec(
                vec![12],
                x.data().iter().zip(&v).map(|(a, b)| a + sign * h * b).collect(),
            )
            .unwrap()
        };
        let (y_plus, _) = run(&shift(1.0));
        let (y_minus, _) = run(&shift(-1.0));
        let jv: Vec<f64> = y_plus
            .iter()
            .zip(&y_minus)
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect();
        let lhs = dot(&jv, w.data());
        prop_assert!((lhs - rhs).abs() < 1e-7, "directional adjoint mismatch: {lhs} vs {rhs}");
    }

    #[test]
    fn concat_then_split_recovers_parts(
        c1 in 1usize..4,
        c2 in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
        seed in 0u64..1000,
    ) {
        let a = Tensor::<f64>::randn_seeded(&[c1, h, w], 0.0, 1.0, seed).unwrap();
        let b = Tensor::<f64>::randn_seeded(&[c2, h, w], 0.0, 1.0, seed ^ 1).unwrap();
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let cat = tape.concat(&[va, vb]).unwrap();
        prop_assert_eq!(tape.shape(cat), &[c1 + c2, h, w]);
        let parts = tape.split_channels(cat, &[c1, c2]).unwrap();
        prop_assert!(tape.value(parts[0]).bit_eq(&a));
        prop_assert!(tape.value(parts[1]).bit_eq(&b));
    }

    #[test]
    fn skeleton_text_roundtrip(coords in proptest::collection::vec((0.0f64..64.0, 0.0f64..64.0, any::<bool>()), 18)) {
        use bigraphgan::data::{skeleton_from_str, skeleton_to_string, Joint, Skeleton};
        let mut skel = Skeleton::empty();
        for (j, (x, y, vis)) in coords.iter().enumerate() {
            if *vis {
                skel.joints[j] = Some(Joint { x: *x, y: *y });
            }
        }
        let text = skeleton_to_string(&skel);
        let back = skeleton_from_str(&text, "prop").unwrap();
        prop_assert_eq!(skel, back);
    }
}
