//! Finite-difference gradient checks for every differentiable tape op.
//!
//! Each check builds the op inside a closure that re-records a fresh tape per
//! evaluation, reduces the output to a scalar with fixed mixing weights, and
//! compares the tape gradient against central differences on 10 random
//! instances.

mod common;

use caap_core::{Tape, Tensor, Var};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Checks d(mix . op)/d(input k) for an op with several tensor inputs.
///
/// `build` receives the tape and the input vars in order and returns the op
/// output; the output is dotted with fixed pseudo-random weights so the checked
/// function is scalar but exercises every output element.
fn check_op(
    name: &str,
    seed: u64,
    shapes: &[&[usize]],
    values: Vec<Vec<f64>>,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut mix: Option<Vec<f64>> = None;

    let mut eval = |inputs: &[Vec<f64>], mix: &mut Option<Vec<f64>>| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(shapes.iter())
            .map(|(v, s)| {
                tape.input(&Tensor::new(s.to_vec(), v.clone()).unwrap().requires_grad(true))
            })
            .collect();
        let out = build(&mut tape, &vars);
        let w = mix.get_or_insert_with(|| {
            (0..tape.value(out).numel())
                .map(|_| wrng.random_range(0.25..1.0))
                .collect()
        });
        let wt = tape.constant(&Tensor::new(tape.value(out).shape().to_vec(), w.clone()).unwrap());
        let prod = tape.mul(out, wt).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        let g = vars.iter().map(|&v| grads.wrt(v).data().to_vec()).collect();
        (value, g)
    };

    let (_, analytic) = eval(&values, &mut mix);
    for k in 0..values.len() {
        let numeric = central_diff(
            |xk: &[f64]| {
                let mut probe = values.clone();
                probe[k] = xk.to_vec();
                eval(&probe, &mut mix).0
            },
            &values[k],
            FD_STEP,
        );
        assert_close(
            &analytic[k],
            &numeric,
            REL_TOL,
            ABS_TOL,
            &format!("{name} (seed {seed}, input {k})"),
        );
    }
}

fn rng_for(case: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xC0FFEE ^ case)
}

#[test]
fn elementwise_binary_ops() {
    for case in 0..10u64 {
        let mut rng = rng_for(case);
        let n = 6;
        let a = random_values(&mut rng, n, -2.0, 2.0);
        let b = random_values_away_from(&mut rng, n, -2.0, 2.0, &[0.0], 0.2);
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("div", 3),
        ] {
            let op = f;
            check_op(
                name,
                case,
                &[&[n], &[n]],
                vec![a.clone(), b.clone()],
                move |tape, v| match op {
                    0 => tape.add(v[0], v[1]).unwrap(),
                    1 => tape.sub(v[0], v[1]).unwrap(),
                    2 => tape.mul(v[0], v[1]).unwrap(),
                    _ => tape.div(v[0], v[1]).unwrap(),
                },
            );
        }
    }
}

#[test]
fn elementwise_unary_ops() {
    for case in 0..10u64 {
        let mut rng = rng_for(case.wrapping_mul(77));
        let n = 8;
        let smooth = random_values(&mut rng, n, -2.0, 2.0);
        let kinky = random_values_away_from(&mut rng, n, -2.0, 2.0, &[0.0, 0.5], 0.1);
        let positive = random_values(&mut rng, n, 0.2, 3.0);

        check_op("neg", case, &[&[n]], vec![smooth.clone()], |t, v| t.neg(v[0]));
        check_op("sigmoid", case, &[&[n]], vec![smooth.clone()], |t, v| {
            t.sigmoid(v[0])
        });
        check_op("relu", case, &[&[n]], vec![kinky.clone()], |t, v| t.relu(v[0]));
        check_op("abs", case, &[&[n]], vec![kinky.clone()], |t, v| t.abs(v[0]));
        check_op("clamp_min", case, &[&[n]], vec![kinky.clone()], |t, v| {
            t.clamp_min(v[0], 0.5)
        });
        check_op("sqrt", case, &[&[n]], vec![positive.clone()], |t, v| t.sqrt(v[0]));
        check_op("add_scalar", case, &[&[n]], vec![smooth.clone()], |t, v| {
            t.add_scalar(v[0], 0.7)
        });
        check_op("mul_scalar", case, &[&[n]], vec![smooth], |t, v| {
            t.mul_scalar(v[0], -1.3)
        });
    }
}

#[test]
fn matmul_matches_finite_differences() {
    for case in 0..10u64 {
        let mut rng = rng_for(case.wrapping_mul(131));
        let (m, k, n) = (3, 4, 2);
        let a = random_values(&mut rng, m * k, -1.5, 1.5);
        let b = random_values(&mut rng, k * n, -1.5, 1.5);
        check_op(
            "matmul",
            case,
            &[&[m, k], &[k, n]],
            vec![a, b],
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        );
    }
}

#[test]
fn conv1d_matches_finite_differences() {
    for case in 0..10u64 {
        let mut rng = rng_for(case.wrapping_mul(997));
        let (n, c_in, c_out, l, k) = (2, 2, 3, 9, 3);
        let stride = 1 + (case % 2) as usize;
        let padding = (case % 3) as usize;
        let x = random_values(&mut rng, n * c_in * l, -1.0, 1.0);
        let w = random_values(&mut rng, c_out * c_in * k, -1.0, 1.0);
        check_op(
            "conv1d",
            case,
            &[&[n, c_in, l], &[c_out, c_in, k]],
            vec![x, w],
            move |t, v| t.conv1d(v[0], v[1], stride, padding).unwrap(),
        );
    }
}

#[test]
fn softmax_and_losses_match_finite_differences() {
    for case in 0..10u64 {
        let mut rng = rng_for(case.wrapping_mul(31));
        let (n, c) = (4, 5);
        let logits = random_values(&mut rng, n * c, -2.0, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();

        check_op("softmax_axis1", case, &[&[n, c]], vec![logits.clone()], |t, v| {
            t.softmax(v[0], 1).unwrap()
        });
        check_op("softmax_axis0", case, &[&[n, c]], vec![logits.clone()], |t, v| {
            t.softmax(v[0], 0).unwrap()
        });
        let lb = labels.clone();
        check_op(
            "cross_entropy",
            case,
            &[&[n, c]],
            vec![logits.clone()],
            move |t, v| t.cross_entropy(v[0], &lb).unwrap(),
        );
        let lb = labels.clone();
        check_op(
            "cross_entropy_each",
            case,
            &[&[n, c]],
            vec![logits.clone()],
            move |t, v| t.cross_entropy_each(v[0], &lb).unwrap(),
        );
        let lb = labels;
        check_op(
            "softmax_take_per_row",
            case,
            &[&[n, c]],
            vec![logits],
            move |t, v| {
                let sm = t.softmax(v[0], 1).unwrap();
                t.take_per_row(sm, &lb).unwrap()
            },
        );
    }
}

#[test]
fn pooling_and_reductions_match_finite_differences() {
    for case in 0..10u64 {
        let mut rng = rng_for(case.wrapping_mul(555));
        let (n, c, l) = (2, 3, 8);
        let x = random_values(&mut rng, n * c * l, -1.0, 1.0);

        check_op("global_avg_pool", case, &[&[n, c, l]], vec![x.clone()], |t, v| {
            t.global_avg_pool(v[0]).unwrap()
        });
        check_op("avg_pool1d", case, &[&[n, c, l]], vec![x.clone()], |t, v| {
            t.avg_pool1d(v[0], 3, 2).unwrap()
        });
        check_op("max_pool1d", case, &[&[n, c, l]], vec![x.clone()], |t, v| {
            t.max_pool1d(v[0], 3, 2).unwrap()
        });
        check_op("sum", case, &[&[n, c, l]], vec![x.clone()], |t, v| t.sum(v[0]));
        check_op("mean", case, &[&[n, c, l]], vec![x], |t, v| t.mean(v[0]));
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    for case in 0..10u64 {
        let mut rng = rng_for(case.wrapping_mul(2027));
        let (n, a_w, b_w) = (3, 4, 2);
        let a = random_values(&mut rng, n * a_w, -1.0, 1.0);
        let b = random_values(&mut rng, n * b_w, -1.0, 1.0);
        let s = random_values(&mut rng, n, -1.0, 1.0);
        let table = random_values(&mut rng, 5 * 3, -1.0, 1.0);
        let ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let bias = random_values(&mut rng, a_w, -1.0, 1.0);

        check_op(
            "concat_cols",
            case,
            &[&[n, a_w], &[n, b_w]],
            vec![a.clone(), b.clone()],
            |t, v| t.concat_cols(v[0], v[1]).unwrap(),
        );
        check_op("slice_cols", case, &[&[n, a_w]], vec![a.clone()], |t, v| {
            t.slice_cols(v[0], 1, 3).unwrap()
        });
        check_op(
            "scale_rows",
            case,
            &[&[n, a_w], &[n]],
            vec![a.clone(), s.clone()],
            |t, v| t.scale_rows(v[0], v[1]).unwrap(),
        );
        check_op(
            "scale_by",
            case,
            &[&[n, a_w], &[1]],
            vec![a.clone(), vec![s[0]]],
            |t, v| t.scale_by(v[0], v[1]).unwrap(),
        );
        let idc = ids.clone();
        check_op("embed_rows", case, &[&[5, 3]], vec![table], move |t, v| {
            t.embed_rows(v[0], &idc).unwrap()
        });
        check_op(
            "add_bias_rows",
            case,
            &[&[n, a_w], &[a_w]],
            vec![a.clone(), bias.clone()],
            |t, v| t.add_bias(v[0], v[1]).unwrap(),
        );
        let chan = random_values(&mut rng, 2 * 3 * 4, -1.0, 1.0);
        let cbias = random_values(&mut rng, 3, -1.0, 1.0);
        check_op(
            "add_bias_channels",
            case,
            &[&[2, 3, 4], &[3]],
            vec![chan, cbias],
            |t, v| t.add_bias(v[0], v[1]).unwrap(),
        );
        check_op(
            "stack",
            case,
            &[&[a_w], &[a_w], &[a_w]],
            vec![a[..a_w].to_vec(), b[..2].repeat(2), s[..3].iter().chain(&s[..1]).cloned().collect()],
            |t, v| t.stack(v).unwrap(),
        );
        check_op("reshape", case, &[&[n, a_w]], vec![a], |t, v| {
            t.reshape(v[0], vec![a_w, n]).unwrap()
        });
    }
}

/// Saliency against finite differences of the per-sample loss, on random
/// 2-channel length-32 inputs through a real backbone.
#[test]
fn saliency_matches_finite_differences() {
    use caap_core::info_region::saliency;
    use caap_core::{Arch, Backbone, Signal};

    for case in 0..10u64 {
        let bb = Backbone::new(Arch::MiniFcn, 2, 32, 3, 100 + case);
        let mut rng = rng_for(case.wrapping_mul(443));
        let x = random_values(&mut rng, 2 * 32, -1.0, 1.0);
        let y = (case % 3) as usize;
        let sig = Signal::new(2, 32, 100.0, x.clone()).unwrap();
        let analytic = saliency(&bb, &sig, y).unwrap();

        let eval = |xx: &[f64]| -> f64 {
            let t = Tensor::new(vec![1, 2, 32], xx.to_vec()).unwrap();
            let f = bb.features(&t).unwrap();
            let logits = bb.logits(&f).unwrap();
            let row = logits.data();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        };
        // h below the tensor-core default: the relu kinks in the backbone put
        // an O(h) crossing error into central differences.
        let grad = central_diff(eval, &x, 1e-5);
        let numeric: Vec<f64> = (0..32)
            .map(|t| grad[t].abs() + grad[32 + t].abs())
            .collect();
        assert_close(&analytic, &numeric, 1e-3, 1e-6, &format!("saliency case {case}"));
    }
}

/// Composite graph: a small CNN + MLP head, gradients checked for every
/// parameter and the input together.
#[test]
fn composite_cnn_mlp_graph_matches_finite_differences() {
    for case in 0..10u64 {
        let mut rng = rng_for(case.wrapping_mul(31337));
        let (n, c_in, l, c_mid, classes) = (2, 2, 10, 3, 3);
        let x = random_values(&mut rng, n * c_in * l, -1.0, 1.0);
        let w1 = random_values(&mut rng, c_mid * c_in * 3, -0.6, 0.6);
        let b1 = random_values(&mut rng, c_mid, -0.3, 0.3);
        let w2 = random_values(&mut rng, c_mid * classes, -0.6, 0.6);
        let b2 = random_values(&mut rng, classes, -0.3, 0.3);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();

        let lb = labels.clone();
        check_op(
            "composite_cnn_mlp",
            case,
            &[
                &[n, c_in, l],
                &[c_mid, c_in, 3],
                &[c_mid],
                &[c_mid, classes],
                &[classes],
            ],
            vec![x, w1, b1, w2, b2],
            move |t, v| {
                let conv = t.conv1d(v[0], v[1], 1, 1).unwrap();
                let conv = t.add_bias(conv, v[2]).unwrap();
                let act = t.sigmoid(conv); // smooth activation keeps FD clean
                let feat = t.global_avg_pool(act).unwrap();
                let logits = t.matmul(feat, v[3]).unwrap();
                let logits = t.add_bias(logits, v[4]).unwrap();
                t.cross_entropy(logits, &lb).unwrap()
            },
        );
    }
}
