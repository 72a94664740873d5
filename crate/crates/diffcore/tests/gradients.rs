//! Every op's backward is checked against central finite differences on a
//! random linear functional of its output (`loss = sum(op(x) ⊙ r)`).

use diffcore::{finite_diff_check, relative_error, ModelParams, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `sum(f(inputs) ⊙ r)` and compares the tape gradient with central
/// differences for every input entry.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let r = weights.cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let rv = tape.constant(r);
        let prod = tape.mul(out, rv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        (tape, vars, loss, shape)
    };
    let (_, _, _, out_shape) = eval(&inputs, None);
    let weights = random(&mut rng, &out_shape);
    let (tape, vars, loss, _) = eval(&inputs, Some(&weights));
    let grads = tape.backward(loss).unwrap();

    let h = 1e-6;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], x.shape());
        for i in 0..x.numel() {
            let mut up = inputs.clone();
            up[k].data_mut()[i] += h;
            let mut down = inputs.clone();
            down[k].data_mut()[i] -= h;
            let (t1, _, l1, _) = eval(&up, Some(&weights));
            let (t2, _, l2, _) = eval(&down, Some(&weights));
            let numeric = (t1.value(l1).item() - t2.value(l2).item()) / (2.0 * h);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            assert!(
                err < 1e-5 || (a - numeric).abs() < 1e-8,
                "input {k} entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_shared_rhs() {
    let mut r = rng();
    check(vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[4, 5])], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn matmul_batched() {
    let mut r = rng();
    check(vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 4, 2])], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn transpose_and_add_row() {
    let mut r = rng();
    check(vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[3])], |t, v| {
        let x = t.transpose(v[0]).unwrap();
        t.add(x, v[1]).unwrap()
    });
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    check(vec![random(&mut r, &[3, 4]), random(&mut r, &[3, 4])], |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let s = t.sub(v[0], v[1]).unwrap();
        let m = t.mul(a, s).unwrap();
        let c = t.scale(m, 1.7).unwrap();
        t.add_scalar(c, -0.3).unwrap()
    });
}

#[test]
fn concat_slice_split() {
    let mut r = rng();
    check(vec![random(&mut r, &[2, 3, 2]), random(&mut r, &[2, 1, 2])], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1).unwrap();
        let parts = t.split(c, 1, &[1, 3]).unwrap();
        let s = t.square(parts[1]).unwrap();
        let head = t.slice(s, 2, 1, 1).unwrap();
        let mid = t.slice(parts[1], 2, 0, 1).unwrap();
        let both = t.concat(&[head, mid], 2).unwrap();
        t.concat(&[both, parts[0], parts[0]], 1).unwrap()
    });
}

#[test]
fn reductions() {
    let mut r = rng();
    check(vec![random(&mut r, &[2, 3, 4])], |t, v| {
        let s = t.sum(v[0], 1).unwrap();
        let m = t.mean(v[0], 2).unwrap();
        let sq = t.square(s).unwrap();
        let mm = t.transpose(m).unwrap();
        let a = t.sum_all(sq).unwrap();
        let b = t.mean_all(mm).unwrap();
        let ab = t.mul(a, b).unwrap();
        let row = t.reshape(ab, &[1]).unwrap();
        let g = t.gather_rows(row, &[0, 0, 0]).unwrap();
        let w = t.reshape(g, &[3]).unwrap();
        let pm = t.reshape(v[0], &[6, 4]).unwrap();
        let sl = t.slice(pm, 1, 0, 3).unwrap();
        t.add(sl, w).unwrap()
    });
}

#[test]
fn softmax_and_log_softmax_on_each_axis() {
    let mut r = rng();
    for axis in 0..3 {
        check(vec![random(&mut r, &[2, 3, 4])], move |t, v| {
            let s = t.softmax(v[0], axis).unwrap();
            let l = t.log_softmax(v[0], axis).unwrap();
            t.mul(s, l).unwrap()
        });
    }
}

#[test]
fn layer_norm_all_inputs() {
    let mut r = rng();
    for axis in [1, 2] {
        let len = [2, 3, 4][axis];
        check(
            vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[len]), random(&mut r, &[len])],
            move |t, v| t.layer_norm(v[0], v[1], v[2], axis).unwrap(),
        );
    }
}

#[test]
fn activations() {
    let mut r = rng();
    check(vec![random(&mut r, &[4, 5])], |t, v| {
        let a = t.relu(v[0]).unwrap();
        let b = t.sigmoid(v[0]).unwrap();
        let c = t.elu(v[0]).unwrap();
        let d = t.pos(v[0]).unwrap();
        let e = t.tanh(v[0]).unwrap();
        let f = t.exp(v[0]).unwrap();
        let g = t.sqrt(d, 1e-12).unwrap();
        let h = t.log(d, 1e-12).unwrap();
        let ab = t.add(a, b).unwrap();
        let cd = t.mul(c, e).unwrap();
        let fg = t.add(f, g).unwrap();
        let x = t.add(ab, cd).unwrap();
        let y = t.add(fg, h).unwrap();
        t.mul(x, y).unwrap()
    });
}

#[test]
fn normalize_cosine_pairwise() {
    let mut r = rng();
    check(vec![random(&mut r, &[3, 4]), random(&mut r, &[5, 4])], |t, v| {
        let c = t.cosine_similarity(v[0], v[1]).unwrap();
        let d = t.pairwise_sq_dist(v[0], v[1]).unwrap();
        t.add(c, d).unwrap()
    });
    check(vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 2, 4])], |t, v| {
        t.pairwise_sq_dist(v[0], v[1]).unwrap()
    });
}

#[test]
fn gather_pick_mask() {
    let mut r = rng();
    check(vec![random(&mut r, &[4, 3])], |t, v| {
        let g = t.gather_rows(v[0], &[3, 0, 3, 1]).unwrap();
        let mask: Vec<bool> = (0..12).map(|i| i % 5 == 0).collect();
        let m = t.masked_fill(g, &mask, -2.0).unwrap();
        let p = t.pick(m, &[0, 2, 1, 1]).unwrap();
        let rows = t.reshape(p, &[4, 1]).unwrap();
        let wide = t.concat(&[rows, rows, rows], 1).unwrap();
        t.mul(wide, m).unwrap()
    });
}

#[test]
fn linear_model_grad_is_input() {
    // loss = sum(w ⊙ x) ⇒ ∂loss/∂w = x
    let mut tape = Tape::<f64>::new();
    let x = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 3.0]);
    let w = tape.param(Tensor::from_vec(&[4], vec![1.0, 1.0, -1.0, 0.0]));
    let xv = tape.constant(x.clone());
    let p = tape.mul(w, xv).unwrap();
    let loss = tape.sum_all(p).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap(), &x);
    assert!(g.get(xv).is_none());
}

#[test]
fn squared_norm_grad_is_twice_w() {
    let mut tape = Tape::<f64>::new();
    let wt = Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]);
    let w = tape.param(wt.clone());
    let sq = tape.square(w).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap(), &wt.map(|x| 2.0 * x));
}

#[test]
fn softmax_gradient_rows_sum_to_zero() {
    let mut r = rng();
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random(&mut r, &[5, 7]));
    let s = tape.softmax(x, 1).unwrap();
    let w = tape.constant(random(&mut r, &[5, 7]));
    let p = tape.mul(s, w).unwrap();
    let loss = tape.sum_all(p).unwrap();
    let g = tape.backward(loss).unwrap();
    let gx = g.get(x).unwrap();
    for i in 0..5 {
        let total: f64 = gx.row(i).iter().sum();
        assert!(total.abs() < 1e-12, "row {i} sums to {total}");
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut r = rng();
        let mut tape = Tape::<f64>::new();
        let a = tape.param(random(&mut r, &[6, 5]));
        let b = tape.param(random(&mut r, &[5, 4]));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax(m, 1).unwrap();
        let l = tape.log(s, 1e-12).unwrap();
        let loss = tape.sum_all(l).unwrap();
        let g = tape.backward(loss).unwrap();
        (g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(&[2, 2]));
    let err = tape.backward(a).unwrap_err();
    assert!(matches!(err, diffcore::Error::NonScalarLoss(ref s) if s == &[2, 2]));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[4, 2]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn finite_check_reports_offending_op() {
    let mut tape = Tape::<f64>::new().with_finite_check(true);
    let a = tape.param(Tensor::from_vec(&[1], vec![1000.0]));
    let err = tape.exp(a).unwrap_err();
    assert!(matches!(err, diffcore::Error::NonFinite { op: "exp" }));
}

// ---- finite_diff_check --------------------------------------------------

fn mlp_params(seed: u64) -> ModelParams<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    for (i, (fan_in, fan_out)) in [(4, 6), (6, 5), (5, 3)].into_iter().enumerate() {
        p.insert(format!("mlp.{i}.w"), random(&mut r, &[fan_in, fan_out]));
        p.insert(format!("mlp.{i}.b"), random(&mut r, &[fan_out]));
    }
    p
}

fn mlp_loss(p: &ModelParams<f64>, x: &Tensor<f64>, y: &[usize]) -> (f64, ModelParams<f64>) {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let mut h = tape.constant(x.clone());
    for i in 0..3 {
        let w = bound.get(&format!("mlp.{i}.w")).unwrap();
        let b = bound.get(&format!("mlp.{i}.b")).unwrap();
        let z = tape.matmul(h, w).unwrap();
        h = tape.add(z, b).unwrap();
        if i < 2 {
            h = tape.tanh(h).unwrap();
        }
    }
    let lp = tape.log_softmax(h, 1).unwrap();
    let picked = tape.pick(lp, y).unwrap();
    let m = tape.mean_all(picked).unwrap();
    let loss = tape.neg(m).unwrap();
    let g = tape.backward(loss).unwrap();
    (tape.value(loss).item(), p.collect_grads(&bound, &g))
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let p = mlp_params(3);
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut r, &[8, 4]);
    let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let (_, analytic) = mlp_loss(&p, &x, &y);
    let report = finite_diff_check(&p, &analytic, |q| mlp_loss(q, &x, &y).0, 1e-5, 1e-3);
    assert!(report.passed(), "{report}");
}

#[test]
fn linear_model_check_is_tight() {
    let mut p = ModelParams::new();
    p.insert("w", Tensor::from_vec(&[3], vec![0.2, -0.4, 0.9]));
    let x = [1.5, -2.0, 0.25];
    let loss = |q: &ModelParams<f64>| {
        q.get("w")
            .unwrap()
            .data()
            .iter()
            .zip(x)
            .map(|(w, x)| w * x)
            .sum::<f64>()
    };
    let mut analytic = ModelParams::new();
    analytic.insert("w", Tensor::from_vec(&[3], x.to_vec()));
    let report = finite_diff_check(&p, &analytic, loss, 1e-5, 1e-9);
    assert!(report.passed(), "{report}");
    assert!(report.max_rel_error() <= 1e-9);
}

#[test]
fn corrupted_gradient_fails_with_name() {
    let p = mlp_params(5);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut r, &[8, 4]);
    let y: Vec<usize> = (0..8).map(|i| (i + 1) % 3).collect();
    let (_, mut analytic) = mlp_loss(&p, &x, &y);
    analytic.get_mut("mlp.1.w").unwrap().data_mut()[2] += 0.05;
    let report = finite_diff_check(&p, &analytic, |q| mlp_loss(q, &x, &y).0, 1e-5, 1e-3);
    assert!(!report.passed());
    let failed: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["mlp.1.w"]);
}
