//! Dense tensors, a recording tape with reverse-mode gradients, and the
//! Adam optimizer with global-norm clipping.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState};
pub use tape::{Elementwise, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Max relative error between the tape gradient of `f` and central
    /// differences, for every input.
    fn check_grad<F>(inputs: &[Tensor], f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
            let l = f(&mut t, &vs);
            t.value(l).item()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let g = grads.get_or_zeros(*v, &inputs[k]);
            for i in 0..inputs[k].numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[2.0, 3.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[5, 7]);
        let b = rand_tensor(&mut rng, &[7, 3]);
        let w = rand_tensor(&mut rng, &[5, 3]);
        let err = check_grad(&[a, b, w], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            let d = t.mul(c, v[2]).unwrap();
            t.sum_all(d)
        });
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn activations() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.tanh(x);
        assert_eq!(t.value(y).item(), 0.0);
        let x = t.constant(Tensor::scalar(-2.5));
        let y = t.relu(x);
        assert_eq!(t.value(y).item(), 0.0);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.5).with_grad());
        let y = t.tanh(x);
        let g = t.backward(y).unwrap();
        let expected = 1.0 - 0.5f64.tanh().powi(2);
        assert!((g.get(x).unwrap().item() - expected).abs() < 1e-15);
        assert!((expected - 0.786448).abs() < 1e-6);
        let h = 1e-6;
        let fd = ((0.5f64 + h).tanh() - (0.5f64 - h).tanh()) / (2.0 * h);
        assert!((fd - g.get(x).unwrap().item()).abs() < 1e-7);
    }

    #[test]
    fn elementwise_and_scalar_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let s = rand_tensor(&mut rng, &[1]);
        let err = check_grad(&[a, b, s], |t, v| {
            let x = t.elementwise(Elementwise::Mul, &[v[0], v[1]]).unwrap();
            let x = t.elementwise(Elementwise::Sub, &[x, v[2]]).unwrap();
            let x = t.elementwise(Elementwise::Tanh, &[x]).unwrap();
            let y = t.elementwise(Elementwise::Add, &[x, v[0]]).unwrap();
            let y = t.elementwise(Elementwise::Scale(0.7), &[y]).unwrap();
            let y = t.mul(v[2], y).unwrap();
            t.sum_all(y)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn incompatible_elementwise_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn reduce_mean_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let m = t.reduce_mean(x, 0).unwrap();
        assert_eq!(t.value(m).data(), &[2.0, 3.0]);
        let r = t.constant(Tensor::from_rows(&[vec![5.0, -1.0, 2.5]]).unwrap());
        let m = t.reduce_mean(r, 0).unwrap();
        assert_eq!(t.value(m).data(), &[5.0, -1.0, 2.5]);
        assert!(t.reduce_mean(r, 2).is_err());
    }

    #[test]
    fn reduce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[6]);
        let err = check_grad(&[x.clone(), w.clone()], |t, v| {
            let m = t.reduce_mean(v[0], 0).unwrap();
            let p = t.mul(m, v[1]).unwrap();
            t.sum_all(p)
        });
        assert!(err < 1e-6, "{err}");
        let w2 = rand_tensor(&mut rng, &[4]);
        let err = check_grad(&[x, w2], |t, v| {
            let m = t.reduce_sum(v[0], 1).unwrap();
            let m = t.tanh(m);
            let p = t.mul(m, v[1]).unwrap();
            t.sum_all(p)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_and_layernorm_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3]));
        let s = t.softmax_rows(x);
        for v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Tensor::filled(&[1, 4], 3.7));
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.layernorm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = t.constant(rand_tensor(&mut rng, &[8, 8]));
        let s = t.softmax_rows(x);
        for r in 0..8 {
            let row = t.value(s).row(r);
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let g = rand_tensor(&mut rng, &[5]);
        let b = rand_tensor(&mut rng, &[5]);
        let err = check_grad(&[x, w, g, b], |t, v| {
            let y = t.layernorm(v[0], v[2], v[3]).unwrap();
            let s = t.softmax_rows(y);
            let p = t.mul(s, v[1]).unwrap();
            t.sum_all(p)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[1, 3, 4]);
        let bias = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[2, 9]);
        let err = check_grad(&[a, b, bias, w], |t, v| {
            let bt = t.transpose(v[1]).unwrap();
            let s = t.bmm(v[0], bt).unwrap(); // [2,3,3]
            let s = t.reshape(s, &[2, 9]).unwrap();
            let s = t.mul(s, v[3]).unwrap();
            let s = t.reshape(s, &[6, 3]).unwrap();
            let s = t.add_row(s, v[2]).unwrap();
            let s = t.slice_cols(s, 1, 3).unwrap();
            let s = t.tile_cols(s, 2).unwrap();
            let s = t.tanh(s);
            t.sum_all(s)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gaussian_kl_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = rand_tensor(&mut rng, &[3, 4]);
        let ls = Tensor::new(vec![1, 4], vec![-0.5, 0.2, -1.0, 0.0]).unwrap();
        let tm: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tl: Vec<f64> = (0..12).map(|_| rng.random_range(-1.5..0.5)).collect();
        let err = check_grad(&[m, ls], |t, v| {
            let c = t.clamp(v[1], -5.0, 2.0);
            t.gaussian_kl(v[0], c, &tm, &tl).unwrap()
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn dropout_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(&[4], 2.0));
        assert_eq!(t.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(t.dropout(x, -0.1, Mode::Train, &mut rng).is_err());

        let ones = t.constant(Tensor::filled(&[1_000_000], 1.0));
        let d = t.dropout(ones, 0.1, Mode::Train, &mut rng).unwrap();
        let mean = t.value(d).data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 1e-2, "{mean}");
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0).with_grad());
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);

        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(&[3], 1.0));
        let y = t.sum_all(x);
        assert!(t.backward(y).unwrap().is_empty());

        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(
            t.backward(x),
            Err(crate::Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[6, 5]);
        let b = rand_tensor(&mut rng, &[5, 4]);
        let run = || {
            let mut t = Tape::new();
            let va = t.leaf(a.clone().with_grad());
            let vb = t.leaf(b.clone().with_grad());
            let c = t.matmul(va, vb).unwrap();
            let c = t.softmax_rows(c);
            let l = t.sum_all(c);
            let l = t.mul(l, l).unwrap();
            let g = t.backward(l).unwrap();
            (g.get(va).unwrap().clone(), g.get(vb).unwrap().clone())
        };
        let (g1, g2) = (run(), run());
        assert_eq!(g1.0.data(), g2.0.data());
        assert_eq!(g1.1.data(), g2.1.data());
    }

    #[test]
    fn multiply_counter_tracks_products() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[3, 4]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        t.matmul(a, b).unwrap();
        assert_eq!(t.multiply_count(), 60);
        let x = t.constant(Tensor::zeros(&[2, 3, 4]));
        let y = t.constant(Tensor::zeros(&[1, 4, 2]));
        t.bmm(x, y).unwrap();
        assert_eq!(t.multiply_count(), 60 + 2 * 3 * 4 * 2);
    }
}
