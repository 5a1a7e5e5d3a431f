mod common;

use repairlab::nn::{AttentionLayout, Tape};

#[test]
fn supervised_loss_gradients_match_finite_differences() {
    for i in 0..6 {
        let err = common::gradient_check(i);
        assert!(err < 1e-4, "config {i} ({:?}): relative error {err:e}", common::small_config(i));
    }
}

#[test]
fn segment_attention_gradients_match_finite_differences() {
    // Two groups with different sizes; the second has more queries than keys.
    let layout = AttentionLayout {
        q_offsets: vec![0, 2, 5],
        kv_offsets: vec![0, 3, 5],
        heads: 2,
    };
    let values: Vec<f64> = (0..5 * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
    let weights: Vec<f64> = (0..5 * 4).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect();
    let loss = |q: &[f64], k: &[f64], v: &[f64]| -> f64 {
        let mut t = Tape::new();
        let (q, k, v) = (
            t.input(5, 4, q.to_vec()).unwrap(),
            t.input(5, 4, k.to_vec()).unwrap(),
            t.input(5, 4, v.to_vec()).unwrap(),
        );
        let out = t.segment_attention(q, k, v, layout.clone()).unwrap();
        t.value(out).iter().zip(&weights).map(|(a, b)| a * b).sum()
    };

    let mut t = Tape::new();
    let q = t.input(5, 4, values.clone()).unwrap();
    let k = t.input(5, 4, values.iter().map(|x| x * 0.7 + 0.1).collect()).unwrap();
    let v = t.input(5, 4, values.iter().rev().copied().collect()).unwrap();
    let out = t.segment_attention(q, k, v, layout.clone()).unwrap();
    let w = t.input(5, 4, weights.clone()).unwrap();
    let prod = t.mul(out, w).unwrap();
    let total = t.sum(prod).unwrap();
    let grads = t.backward(total).unwrap();

    let inputs = [t.value(q).to_vec(), t.value(k).to_vec(), t.value(v).to_vec()];
    for (which, var) in [q, k, v].into_iter().enumerate() {
        let analytic = grads.wrt(var).unwrap();
        for idx in 0..20 {
            let mut up = inputs.clone();
            let mut down = inputs.clone();
            up[which][idx] += 1e-6;
            down[which][idx] -= 1e-6;
            let numeric = (loss(&up[0], &up[1], &up[2]) - loss(&down[0], &down[1], &down[2])) / 2e-6;
            assert!(
                (analytic[idx] - numeric).abs() < 1e-7,
                "input {which} entry {idx}: {} vs {numeric}",
                analytic[idx]
            );
        }
    }
}
