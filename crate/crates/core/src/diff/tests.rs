use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(op(inputs) ⊙ R)` for a fixed random `R` and compares the tape
/// gradient of every input against central differences.
fn fd_inputs(
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let proj = |g: &mut Graph<f64>, out: Var| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let shape = g.shape(out).to_vec();
        let r = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        let m = g.mul(out, r).unwrap();
        g.sum(m)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = proj(&mut g, out);
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let l = proj(&mut g, out);
        g.item(l)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            max_err = max_err.max((a - num).abs());
            scale = scale.max(a.abs()).max(num.abs());
        }
        worst = worst.max(max_err / scale.max(1e-6));
    }
    worst
}

fn trials(name: &str, n: usize, mut f: impl FnMut(&mut ChaCha8Rng, u64) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..n {
        let err = f(&mut rng, t as u64);
        assert!(err < 1e-4, "{name}: trial {t} relative error {err:.3e}");
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let n = 100;
    trials("matmul", n, |r, s| {
        fd_inputs(vec![rand_tensor(r, &[3, 4], -1., 1.), rand_tensor(r, &[4, 2], -1., 1.)], s, |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        })
    });
    trials("add/sub/mul", n, |r, s| {
        let ins = vec![rand_tensor(r, &[2, 3], -1., 1.), rand_tensor(r, &[2, 3], -1., 1.)];
        fd_inputs(ins, s, |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.sub(v[0], v[1]).unwrap();
            g.mul(a, b).unwrap()
        })
    });
    trials("add_row/mul_row/mul_col", n, |r, s| {
        let ins = vec![
            rand_tensor(r, &[3, 4], -1., 1.),
            rand_tensor(r, &[4], -1., 1.),
            rand_tensor(r, &[3], -1., 1.),
        ];
        fd_inputs(ins, s, |g, v| {
            let a = g.add_row(v[0], v[1]).unwrap();
            let b = g.mul_row(a, v[1]).unwrap();
            g.mul_col(b, v[2]).unwrap()
        })
    });
    trials("pointwise", n, |r, s| {
        fd_inputs(vec![rand_tensor(r, &[2, 5], -2., 2.)], s, |g, v| {
            let a = g.tanh(v[0]);
            let b = g.sigmoid(v[0]);
            let c = g.silu(v[0]);
            let d = g.exp(v[0]);
            let e = g.square(v[0]);
            let x = g.add(a, b).unwrap();
            let x = g.add(x, c).unwrap();
            let x = g.add(x, d).unwrap();
            let x = g.add(x, e).unwrap();
            let x = g.scale(x, 0.5);
            g.add_scalar(x, 3.0)
        })
    });
    trials("log", n, |r, s| {
        fd_inputs(vec![rand_tensor(r, &[2, 3], 0.5, 2.0)], s, |g, v| g.log(v[0]))
    });
    trials("clamp_min", n, |r, s| {
        // keep samples away from the kink
        let mut t = rand_tensor(r, &[10], -2., 2.);
        t.data_mut().iter_mut().for_each(|x| {
            if (*x - 0.3).abs() < 1e-3 {
                *x += 0.01
            }
        });
        fd_inputs(vec![t], s, |g, v| g.clamp_min(v[0], 0.3))
    });
    trials("softmax/log_softmax", n, |r, s| {
        fd_inputs(vec![rand_tensor(r, &[3, 4], -2., 2.)], s, |g, v| {
            let a = g.softmax(v[0]);
            let b = g.log_softmax(v[0]);
            g.add(a, b).unwrap()
        })
    });
    trials("layer_norm", n, |r, s| {
        fd_inputs(vec![rand_tensor(r, &[3, 5], -2., 2.)], s, |g, v| g.layer_norm(v[0], 1e-3))
    });
    trials("concat/slice/reshape", n, |r, s| {
        let ins = vec![rand_tensor(r, &[2, 3], -1., 1.), rand_tensor(r, &[2, 2], -1., 1.)];
        fd_inputs(ins, s, |g, v| {
            let c = g.concat(&[v[0], v[1], v[0]]).unwrap();
            let sl = g.slice(c, 2, 4).unwrap();
            let re = g.reshape(sl, &[4, 2]).unwrap();
            g.square(re)
        })
    });
    trials("embedding/pick", n, |r, s| {
        let ins = vec![rand_tensor(r, &[5, 3], -1., 1.)];
        fd_inputs(ins, s, |g, v| {
            let e = g.embedding(v[0], &[Some(1), None, Some(4), Some(1)]).unwrap();
            let sq = g.square(e);
            let p = g.pick(sq, &[0, 2, 1, 2]).unwrap();
            let p = g.reshape(p, &[4, 1]).unwrap();
            g.concat(&[p, e]).unwrap()
        })
    });
    trials("reductions", n, |r, s| {
        fd_inputs(vec![rand_tensor(r, &[3, 4], -1., 1.)], s, |g, v| {
            let sq = g.square(v[0]);
            let rows = g.sum_cols(sq);
            let m = g.mean(v[0]);
            let t = g.sum(rows);
            let c = g.concat(&[rows]).unwrap();
            let tm = g.add(t, m).unwrap();
            let tm = g.reshape(tm, &[1]).unwrap();
            let tm3 = g.concat(&[tm, tm, tm]).unwrap();
            g.mul(c, tm3).unwrap()
        })
    });
    trials("conv2d", 20, |r, s| {
        let ins = vec![
            rand_tensor(r, &[2, 2, 7, 7], -1., 1.),
            rand_tensor(r, &[3, 2, 3, 3], -1., 1.),
            rand_tensor(r, &[3], -1., 1.),
        ];
        fd_inputs(ins, s, |g, v| {
            let c = g.conv2d(v[0], v[1], 2).unwrap();
            g.add_channel(c, v[2]).unwrap()
        })
    });
    trials("conv_transpose2d", 20, |r, s| {
        let ins = vec![rand_tensor(r, &[2, 3, 3, 3], -1., 1.), rand_tensor(r, &[3, 2, 3, 3], -1., 1.)];
        fd_inputs(ins, s, |g, v| g.conv_transpose2d(v[0], v[1], 2).unwrap())
    });
}

#[test]
fn matmul_identity_and_softmax_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3], -5., 5.);
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::identity(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out), &a);

    let z = g.constant(Tensor::zeros(&[1, 3]));
    let s = g.softmax(z);
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

/// Direct sliding-window convolution, independent of im2col.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let mut ho = 0;
    while ho * s + k <= h {
        ho += 1;
    }
    let mut wo = 0;
    while wo * s + k <= wd {
        wo += 1;
    }
    let mut out = Tensor::zeros(&[b, o, ho, wo]);
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let xv = x.data()[((bi * c + ic) * h + oy * s + ky) * wd + ox * s + kx];
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn strided_conv_output_size_and_values_match_sliding_window() {
    assert_eq!(conv_out_size(16, 4, 2), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 16, 16], -1., 1.);
    let w = rand_tensor(&mut rng, &[4, 3, 4, 4], -1., 1.);
    let mut g = Graph::<f64>::no_grad();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 7, 7]);
    let oracle = naive_conv(&x, &w, 2);
    for (a, b) in g.value(y).data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)>
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 2, 9, 9], -1., 1.);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1., 1.);
    let mut g = Graph::<f64>::no_grad();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let cx = g.conv2d(xv, wv, 2).unwrap();
    let y = rand_tensor(&mut rng, g.shape(cx), -1., 1.);
    let yv = g.constant(y.clone());
    let ty = g.conv_transpose2d(yv, wv, 2).unwrap();
    assert_eq!(g.shape(ty), x.shape());
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn analytic_gradients() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 0.25);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads);
    }
    assert_eq!(store.grad(w).data(), &[4.0, 8.0]);
    store.zero_grad();
    assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
}

#[test]
fn backward_on_non_scalar_is_usage_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]"), "{err}");
}

#[test]
fn two_layer_mlp_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let w1 = store.insert_glorot("l1.w", &[5, 7], 5, 7, &mut rng).unwrap();
    let b1 = store.insert("l1.b", rand_tensor(&mut rng, &[7], -0.1, 0.1)).unwrap();
    let w2 = store.insert_glorot("l2.w", &[7, 3], 7, 3, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[4, 5], -1., 1.);
    let report = grad_check(&mut store, &GradCheckOptions::new(1e-4), |s, g| {
        let xv = g.constant(x.clone());
        let (w1, b1, w2) = (g.param(s, w1), g.param(s, b1), g.param(s, w2));
        let h = g.matmul(xv, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        let o = g.square(o);
        Ok(g.mean(o))
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn linear_layer_gradcheck_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let w = store.insert_glorot("w", &[4, 3], 4, 3, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[2, 4], -1., 1.);
    let y = rand_tensor(&mut rng, &[2, 3], -1., 1.);
    let report = grad_check(&mut store, &GradCheckOptions::new(1e-6), |s, g| {
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let wv = g.param(s, w);
        let o = g.matmul(xv, wv)?;
        let d = g.sub(o, yv)?;
        let d = g.square(d);
        Ok(g.sum(d))
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn optimizer_zero_grad_is_noop_and_step_counts() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", Tensor::from_vec(vec![0.5, -0.5])).unwrap();
    let mut opt = Adam::new(&store, AdamConfig::default()).unwrap();
    opt.step(&mut store).unwrap();
    assert_eq!(store.value(w).data(), &[0.5, -0.5]);
    assert_eq!(store.step(), 1);
}

#[test]
fn optimizer_moves_against_gradient_sign() {
    for g0 in [3.0, -0.2, 50.0] {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut opt = Adam::new(&store, AdamConfig::default()).unwrap();
        store.grad_mut(w).data_mut()[0] = g0;
        opt.step(&mut store).unwrap();
        let delta = store.value(w).item() - 1.0;
        assert!(delta * g0 < 0.0, "g={g0} delta={delta}");
        assert_eq!(store.grad(w).item(), 0.0, "gradients zeroed");
    }
}

#[test]
fn optimizer_clips_global_norm() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", Tensor::zeros(&[2])).unwrap();
    let b = store.insert("b", Tensor::zeros(&[1])).unwrap();
    // norm of (120, 160, 0) = 200
    store.grad_mut(a).data_mut().copy_from_slice(&[120.0, 160.0]);
    store.grad_mut(b).data_mut()[0] = 0.0;
    let mut opt = Adam::new(&store, AdamConfig::default()).unwrap();
    let rep = opt.step(&mut store).unwrap();
    assert!((rep.grad_norm - 200.0).abs() < 1e-12);
    assert!((rep.clipped_norm - 100.0).abs() < 1e-9);
}

#[test]
fn optimizer_rejects_nan_naming_parameter() {
    let mut store = ParamStore::<f32>::new();
    store.insert("ok", Tensor::zeros(&[1])).unwrap();
    let bad = store.insert("decoder.bad", Tensor::zeros(&[1])).unwrap();
    store.grad_mut(bad).data_mut()[0] = f32::NAN;
    let mut opt = Adam::new(&store, AdamConfig::default()).unwrap();
    let err = opt.step(&mut store).unwrap_err();
    assert!(err.to_string().contains("decoder.bad"), "{err}");
}

#[test]
fn identical_op_sequences_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![4, 8], (0..32).map(|_| rng.gen::<f32>()).collect()).unwrap());
        let w = g.input(Tensor::new(vec![8, 8], (0..64).map(|_| rng.gen::<f32>()).collect()).unwrap());
        let h = g.matmul(x, w).unwrap();
        let h = g.layer_norm(h, 1e-3);
        let h = g.silu(h);
        let l = g.mean(h);
        let gr = g.backward(l).unwrap();
        (g.value(h).clone(), gr.wrt(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_clip(grads in proptest::collection::vec(-500.0f64..500.0, 1..20)) {
            let mut store = ParamStore::<f64>::new();
            let w = store.insert("w", Tensor::zeros(&[grads.len()])).unwrap();
            store.grad_mut(w).data_mut().copy_from_slice(&grads);
            let pre = store.grad_norm();
            let mut opt = Adam::new(&store, AdamConfig::default()).unwrap();
            let rep = opt.step(&mut store).unwrap();
            prop_assert!(rep.clipped_norm <= 100.0 + 1e-9);
            if pre > 100.0 {
                prop_assert!((rep.clipped_norm - 100.0).abs() < 1e-9);
            } else {
                prop_assert!((rep.clipped_norm - pre).abs() < 1e-12);
            }
        }
    }
}
