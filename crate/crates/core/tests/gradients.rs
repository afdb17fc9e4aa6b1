use featalign::suite::gradient_suite;
use featalign::tensor::{grad_check, GradCheckOptions};
use featalign::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for label in 0..5 {
        let z = random(&[5], &mut rng);
        let mut t = Tape::new();
        let zv = t.param(z.clone());
        let loss = t.cross_entropy(zv, label).unwrap();
        let g = t.backward(loss).unwrap();
        let mx = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.data().iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let grad = g.get(zv).unwrap();
        for k in 0..5 {
            let expected = e[k] / s - (k == label) as usize as f64;
            assert!((grad[k] - expected).abs() < 1e-14);
        }
        assert!((t.scalar(loss) - (s.ln() + mx - z.data()[label])).abs() < 1e-13);
    }
}

#[test]
fn norm_and_similarity_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random(&[4, 1, 1], &mut rng);
    let w = random(&[4], &mut rng);
    let nf = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nw = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = f.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() / (nf * nw);

    let mut t = Tape::new();
    let fv = t.param(f.clone());
    let n = t.norm_map(fv).unwrap();
    let loss = t.sum(n).unwrap();
    let g = t.backward(loss).unwrap();
    for (gk, fk) in g.get(fv).unwrap().iter().zip(f.data()) {
        assert!((gk - fk / nf).abs() < 1e-14);
    }

    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let wv = t.param(w.clone());
    let s = t.similarity_map(fv, wv).unwrap();
    let loss = t.sum(s).unwrap();
    assert!((t.scalar(loss) - cos).abs() < 1e-14);
    let g = t.backward(loss).unwrap();
    for k in 0..4 {
        let expected = f.data()[k] / (nf * nw) - cos * w.data()[k] / (nw * nw);
        assert!((g.get(wv).unwrap()[k] - expected).abs() < 1e-14);
    }
}

#[test]
fn strided_padded_conv_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = GradCheckOptions::default();
    for (stride, pad, k) in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2)] {
        let x = random(&[3, 7, 7], &mut rng);
        let kern = random(&[2, 3, k, k], &mut rng);
        let rep = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                let y = t.relu(y);
                let y = t.norm_map(y)?;
                t.sum(y)
            },
            &[x, kern],
            opts,
        )
        .unwrap();
        assert!(rep.passed, "stride {stride} pad {pad} k {k}: {:e}", rep.max_rel_error());
    }
}

#[test]
fn suite_passes_for_several_seeds() {
    for seed in 1..4 {
        let r = gradient_suite(GradCheckOptions::default(), seed).unwrap();
        let failed: Vec<_> = r.entries.iter().filter(|e| !e.passed).map(|e| &e.name).collect();
        assert!(r.passed, "seed {seed}: {failed:?}");
    }
}
