use diffcore::{Tape, Tensor};
use proptest::prelude::*;

fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn identity_matmul() {
    let mut tape = Tape::<f64>::new();
    let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
    let i3 = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i3, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[3]));
    let s = tape.softmax(z, 0).unwrap();
    assert!(approx(tape.value(s).data(), &[1.0 / 3.0; 3], 1e-15));
}

#[test]
fn masked_softmax_ignores_filled_positions() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::from_vec(&[1, 3], vec![0.3, 5.0, 0.3]));
    let m = tape.masked_fill(z, &[false, true, false], diffcore::MASK_FILL).unwrap();
    let s = tape.softmax(m, 1).unwrap();
    assert!(approx(tape.value(s).data(), &[0.5, 0.0, 0.5], 1e-15));
}

#[test]
fn pos_has_floor() {
    assert!((diffcore::pos(0.0_f64) - (1.0 + 1e-6)).abs() < 1e-15);
    let v = diffcore::pos(-100.0_f64);
    assert!(v > 0.0 && (v - 1e-6).abs() < 1e-12);
}

#[test]
fn concat_then_split_recovers_parts() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
    let b = tape.constant(Tensor::from_fn(&[2, 1, 3], |i| -(i as f64)));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 3]);
    let parts = tape.split(c, 1, &[2, 1]).unwrap();
    assert_eq!(tape.value(parts[0]), tape.value(a));
    assert_eq!(tape.value(parts[1]), tape.value(b));
}

#[test]
fn add_row_broadcast_only_on_last_axis() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let good = tape.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
    let bad = tape.constant(Tensor::zeros(&[2]));
    let s = tape.add(a, good).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert!(tape.add(a, bad).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[3, 4], data));
        let s = tape.softmax(x, 1).unwrap();
        for r in 0..3 {
            let total: f64 = tape.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_slices_are_standardized(data in prop::collection::vec(-5.0f64..5.0, 20)) {
        let spread = data.chunks(5).all(|c| {
            let m = c.iter().sum::<f64>() / 5.0;
            c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0 > 1e-2
        });
        prop_assume!(spread);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[4, 5], data));
        let g = tape.constant(Tensor::ones(&[5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b, 1).unwrap();
        for r in 0..4 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 2e-3);
        }
    }

    #[test]
    fn cosine_self_similarity_is_one(v in prop::collection::vec(-10.0f64..10.0, 6)) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(&[1, 6], v));
        let c = tape.cosine_similarity(a, a).unwrap();
        prop_assert!((tape.value(c).item() - 1.0).abs() < 1e-12);
    }
}
