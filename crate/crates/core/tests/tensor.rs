use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use videoagent_core::tensor::{grad_check, matmul, read_checkpoint, write_checkpoint};
use videoagent_core::{Graph, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((m, k, n) in (1usize..7, 1usize..40, 1usize..9), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
        let got = matmul(a.data(), b.data(), m, k, n);
        for (g, w) in got.iter().zip(naive_matmul(a.data(), b.data(), m, k, n)) {
            prop_assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(w in values(12), x in values(8), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        // L1 = mse(x W, y), L2 = mean(relu(x W)); grad(aL1 + bL2) = a grad L1 + b grad L2.
        let build = |g: &mut Graph<f64>, a: f64, b: f64| {
            let wv = g.param(Tensor::matrix(4, 3, w.clone()).unwrap());
            let xv = g.constant(Tensor::matrix(2, 4, x.clone()).unwrap());
            let y = g.constant(Tensor::full(&[2, 3], 0.5));
            let h = g.matmul(xv, wv).unwrap();
            let l1 = g.mse(h, y).unwrap();
            let r = g.relu(h);
            let l2 = g.mean(r);
            let l1 = g.scale(l1, a);
            let l2 = g.scale(l2, b);
            let loss = g.add(l1, l2).unwrap();
            (wv, loss)
        };
        let grad = |a: f64, b: f64| {
            let mut g = Graph::new();
            let (wv, loss) = build(&mut g, a, b);
            g.backward(loss).unwrap().collect(&[wv]).remove(0)
        };
        let (combined, g1, g2) = (grad(alpha, beta), grad(1.0, 0.0), grad(0.0, 1.0));
        for i in 0..12 {
            let want = alpha * g1.data()[i] + beta * g2.data()[i];
            prop_assert!((combined.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn small_mlp_passes_grad_check(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            Tensor::<f64>::randn(&[3, 5], 0.7, &mut rng),
            Tensor::<f64>::randn(&[1, 5], 0.3, &mut rng),
            Tensor::<f64>::randn(&[5, 2], 0.7, &mut rng),
        ];
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                let h = g.matmul(xv, v[0])?;
                let ones = g.constant(Tensor::full(&[4, 1], 1.0));
                let bias = g.matmul(ones, v[1])?;
                let h = g.add(h, bias)?;
                let h = g.sigmoid(h);
                let out = g.matmul(h, v[2])?;
                g.mse(out, yv)
            },
            &params,
            1e-6,
        )
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{report:?}");
        prop_assert_eq!(report.checked, 15 + 5 + 10);
    }

    #[test]
    fn checkpoint_round_trips_bit_exact(data in prop::collection::vec(any::<f32>(), 1..30)) {
        let t = Tensor::vector(data.clone());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].0, "w");
        let bits: Vec<u32> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn checkpoint_reader_rejects_unknown_version() {
    let t = Tensor::vector(vec![1.0f32]);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, [("w", &t)]).unwrap();
    buf[4..8].copy_from_slice(&99u32.to_le_bytes());
    let err = read_checkpoint(buf.as_slice()).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}
