use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wfen_core::nn::{BoundParams, ParamId, ParameterStore};
use wfen_core::tensor::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use wfen_core::Error;

fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, vals).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var, Error>) -> Result<Tensor<f64>, Error> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v)?.clone())
}

/// Max relative error of `Σ probe ⊙ f(inputs)` over all input coordinates.
fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, Error>) -> f64 {
    let mut store = ParameterStore::new(0);
    let ids: Vec<ParamId> =
        inputs.iter().enumerate().map(|(i, x)| store.insert(format!("in{i}"), x.clone()).unwrap()).collect();
    let shape = {
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let vars: Vec<Var> = ids.iter().map(|&id| p[id]).collect();
        let y = f(&mut g, &vars).unwrap();
        g.value(y).unwrap().shape().to_vec()
    };
    let probe = random(&shape, 99);
    let report = grad_check(
        &store,
        |g: &mut Graph<f64>, p: &BoundParams| {
            let vars: Vec<Var> = ids.iter().map(|&id| p[id]).collect();
            let y = f(g, &vars)?;
            let r = g.input(probe.clone())?;
            let y = g.mul(y, r)?;
            g.sum(y)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    report.max_rel_error
}

// ------------------------------------------------------------------ forward examples

#[test]
fn conv_examples() {
    let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let y = eval(|g| {
        let xv = g.input(x.clone())?;
        let w = g.input(t(&[1, 1, 1, 1], &[2.0]))?;
        g.conv2d(xv, w, None, 1, 0, 1)
    })
    .unwrap();
    assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);

    let y = eval(|g| {
        let xv = g.input(x.clone())?;
        let w = g.input(Tensor::ones(&[1, 1, 3, 3]))?;
        g.conv2d(xv, w, None, 1, 1, 1)
    })
    .unwrap();
    assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);

    let any = random(&[2, 3, 5, 4], 1);
    let y = eval(|g| {
        let xv = g.input(any.clone())?;
        let w = g.input(Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }))?;
        g.conv2d(xv, w, None, 1, 0, 1)
    })
    .unwrap();
    assert_eq!(y, any);
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4("x").unwrap();
    let [o, ipg, k, _] = w.dims4("w").unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let opg = o / groups;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for bi in 0..n {
        for oc in 0..o {
            let gidx = oc / opg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b[oc];
                    for ic in 0..ipg {
                        let cin = gidx * ipg + ic;
                        for u in 0..k {
                            for v in 0..k {
                                let yy = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    s += x.data()[((bi * c + cin) * h + yy as usize) * wd + xx as usize]
                                        * w.data()[((oc * ipg + ic) * k + u) * k + v];
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * o + oc) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_evaluation() {
    for (cin, cout, k, stride, pad, groups, h, w) in
        [(3, 4, 3, 1, 1, 1, 6, 5), (4, 6, 3, 2, 1, 2, 7, 8), (4, 4, 3, 1, 1, 4, 5, 5), (2, 3, 1, 1, 0, 1, 4, 4), (2, 2, 2, 2, 0, 1, 5, 6)]
    {
        let x = random(&[2, cin, h, w], 3);
        let wt = random(&[cout, cin / groups, k, k], 4);
        let b = random(&[cout], 5);
        let y = eval(|g| {
            let (xv, wv, bv) = (g.input(x.clone())?, g.input(wt.clone())?, g.input(b.clone())?);
            g.conv2d(xv, wv, Some(bv), stride, pad, groups)
        })
        .unwrap();
        let want = naive_conv(&x, &wt, b.data(), stride, pad, groups);
        assert_eq!(y.shape(), want.shape());
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn conv_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let w = g.input(Tensor::zeros(&[4, 3, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, w, None, 1, 1, 2), Err(Error::InvalidArgument { .. } | Error::Shape { .. })));
    let w2 = g.input(Tensor::zeros(&[4, 2, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, w2, None, 1, 1, 1), Err(Error::Shape { .. })));
    let big = g.input(Tensor::zeros(&[1, 3, 7, 7])).unwrap();
    assert!(g.conv2d(x, big, None, 1, 0, 1).is_err());
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let id = eval(|g| {
        let (av, bv) = (g.input(a.clone())?, g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]))?);
        g.matmul(av, bv)
    })
    .unwrap();
    assert_eq!(id, a);
    let col = eval(|g| {
        let (av, bv) = (g.input(a.clone())?, g.input(t(&[2, 1], &[1.0, 1.0]))?);
        g.matmul(av, bv)
    })
    .unwrap();
    assert_eq!(col.data(), &[3.0, 7.0]);
    let batched = eval(|g| {
        let av = g.input(Tensor::concat(&[&a.clone().reshape(&[1, 2, 2]).unwrap(); 2], 0).unwrap())?;
        let bv = g.input(Tensor::from_f64(&[2, 2, 1], &[1.0, 1.0, 1.0, 1.0]).unwrap())?;
        g.matmul(av, bv)
    })
    .unwrap();
    assert_eq!(batched.data(), &[3.0, 7.0, 3.0, 7.0]);
    let mut g = Graph::<f64>::new();
    let (av, bv) = (g.input(a.clone()).unwrap(), g.input(Tensor::zeros(&[3, 1])).unwrap());
    assert!(g.matmul(av, bv).is_err());
}

#[test]
fn layer_norm_examples() {
    let run = |x: Tensor<f64>, gamma: Tensor<f64>, beta: Tensor<f64>| {
        eval(|g| {
            let (xv, gv, bv) = (g.input(x)?, g.input(gamma)?, g.input(beta)?);
            g.layer_norm_channel(xv, gv, bv, 1e-6)
        })
        .unwrap()
    };
    let y = run(t(&[1, 2, 1, 1], &[1.0, 3.0]), Tensor::ones(&[2]), Tensor::zeros(&[2]));
    assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5, "{y:?}");
    let y = run(Tensor::full(&[1, 3, 2, 2], 0.7), Tensor::ones(&[3]), Tensor::zeros(&[3]));
    assert!(y.max_abs() < 1e-9, "{y:?}");
    let y = run(random(&[2, 3, 2, 2], 1), Tensor::zeros(&[3]), Tensor::full(&[3], 5.0));
    assert!(y.data().iter().all(|&v| v == 5.0));
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 0, 2, 2])).unwrap();
    let e = g.input(Tensor::zeros(&[0])).unwrap();
    assert!(g.layer_norm_channel(x, e, e, 1e-6).is_err());
}

#[test]
fn elementwise_examples() {
    let x = t(&[3], &[-1.0, 0.0, 2.0]);
    assert_eq!(eval(|g| { let v = g.input(x.clone())?; g.relu(v) }).unwrap().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(eval(|g| { let v = g.input(t(&[2], &[-3.0, 3.0]))?; g.abs(v) }).unwrap().data(), &[3.0, 3.0]);
    let y = eval(|g| {
        let (a, z) = (g.input(x.clone())?, g.input(Tensor::zeros(&[3]))?);
        g.add(a, z)
    })
    .unwrap();
    assert_eq!(y, x);
    let mut g = Graph::<f64>::new();
    let (a, b) = (g.input(x.clone()).unwrap(), g.input(Tensor::zeros(&[2])).unwrap());
    for r in [g.add(a, b), g.sub(a, b), g.mul(a, b)] {
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}

#[test]
fn data_movement_round_trips() {
    let x = random(&[2, 3, 4, 5], 7).cast::<f32>();
    let mut g = Graph::<f32>::new();
    let v = g.input(x.clone()).unwrap();
    let flat = g.reshape(v, &[120]).unwrap();
    let back = g.reshape(flat, &[2, 3, 4, 5]).unwrap();
    assert_eq!(g.value(back).unwrap(), &x);
    let p = g.permute(v, &[0, 2, 3, 1]).unwrap();
    let q = g.permute(p, &[0, 3, 1, 2]).unwrap();
    assert_eq!(g.value(q).unwrap(), &x);
    let parts = g.split(v, 1, &[1, 2]).unwrap();
    let joined = g.concat(&parts, 1).unwrap();
    assert_eq!(g.value(joined).unwrap(), &x);
    assert!(g.reshape(v, &[7, 17]).is_err());
    assert!(g.split(v, 1, &[1, 1]).is_err());

    let a = Tensor::<f32>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
    let b = Tensor::<f32>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
    let ab = Tensor::concat(&[&a, &b], 0).unwrap();
    assert_eq!(ab.split(0, &[1, 1]).unwrap(), vec![a, b]);
}

#[test]
fn window_and_shift_examples() {
    let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let mut g = Graph::new();
    let v = g.input(x.clone()).unwrap();
    let w = g.window_partition(v, 2).unwrap();
    assert_eq!(g.value(w).unwrap().shape(), &[4, 1, 2, 2]);
    assert_eq!(g.value(w).unwrap().data()[..4], [0.0, 1.0, 4.0, 5.0]);
    let m = g.window_merge(w, 1, 4, 4).unwrap();
    assert_eq!(g.value(m).unwrap(), &x);
    let whole = g.window_partition(v, 4).unwrap();
    assert_eq!(g.value(whole).unwrap(), &x);
    assert!(g.window_partition(v, 3).is_err());

    let big = g.input(Tensor::zeros(&[1, 5, 16, 16])).unwrap();
    let wins = g.window_partition(big, 8).unwrap();
    assert_eq!(g.value(wins).unwrap().shape()[0], 4);

    let same = g.cyclic_shift(v, 0).unwrap();
    assert_eq!(g.value(same).unwrap(), &x);
    let s = g.cyclic_shift(v, 2).unwrap();
    // value at (r, c) moves to ((r + 2) % 4, (c + 2) % 4)
    let want = Tensor::from_fn(&[1, 1, 4, 4], |i| {
        let (r, c) = (i / 4, i % 4);
        (((r + 2) % 4) * 4 + (c + 2) % 4) as f64
    });
    assert_eq!(g.value(s).unwrap(), &want);
    let u = g.cyclic_shift(s, -2).unwrap();
    assert_eq!(g.value(u).unwrap(), &x);
}

// ------------------------------------------------------------------ backward

fn grads_of(x: Tensor<f64>, f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var, Error>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.param(x).unwrap();
    let l = f(&mut g, v).unwrap();
    g.backward(l).unwrap().get(v).unwrap().clone()
}

#[test]
fn backward_examples() {
    assert_eq!(grads_of(random(&[2, 3], 0), |g, v| g.sum(v)), Tensor::ones(&[2, 3]));
    assert_eq!(grads_of(t(&[2], &[-1.0, 2.0]), |g, v| { let r = g.relu(v)?; g.sum(r) }).data(), &[0.0, 1.0]);
    assert_eq!(grads_of(t(&[1], &[0.0]), |g, v| { let r = g.relu(v)?; g.sum(r) }).data(), &[0.0]);
    assert_eq!(grads_of(t(&[1], &[3.0]), |g, v| { let r = g.mul(v, v)?; g.sum(r) }).data(), &[6.0]);
    // two consumers accumulate: d/dx (x + 2x) = 3
    assert_eq!(
        grads_of(t(&[2], &[1.0, 5.0]), |g, v| {
            let d = g.scale(v, 2.0)?;
            let s = g.add(v, d)?;
            g.sum(s)
        })
        .data(),
        &[3.0, 3.0]
    );
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let v = g.param(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward(s).unwrap_err(), Error::GraphCleared);
    assert!(matches!(g.relu(v), Err(Error::GraphCleared)));
}

#[test]
fn non_finite_values_are_detected() {
    let mut g = Graph::<f32>::new();
    let v = g.input(Tensor::full(&[2], 1e30)).unwrap();
    assert!(matches!(g.mul(v, v), Err(Error::NonFinite { .. })));
    let z = g.input(Tensor::zeros(&[1])).unwrap();
    assert!(g.div_scalar(v, z).is_err());
}

#[test]
fn grad_check_examples() {
    let mut store = ParameterStore::new(0);
    let x = store.insert("x", t(&[1], &[3.0])).unwrap();
    let opts = GradCheckOptions { probe_eps: 1e-5, ..Default::default() };
    let r = grad_check(&store, |g, p| { let y = g.mul(p[x], p[x])?; g.sum(y) }, &opts).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
    let r = grad_check(&store, |g, p| { let y = g.scale(p[x], 0.0)?; g.sum(y) }, &opts).unwrap();
    assert_eq!(r.max_rel_error, 0.0);

    let err = grad_check(
        &store,
        |g, p| {
            let big = g.scale(p[x], 1e300)?;
            let y = g.mul(big, big)?;
            g.sum(y)
        },
        &opts,
    );
    assert!(matches!(err, Err(Error::NonFinite { .. }) | Err(Error::NonFiniteProbe(_))));
}

#[test]
fn gradients_of_every_op() {
    const TOL: f64 = 1e-5;
    let x4 = random(&[2, 3, 4, 4], 1);
    let mut cases: Vec<(&str, f64)> = Vec::new();
    cases.push(("conv3x3", check(&[x4.clone(), random(&[5, 3, 3, 3], 2), random(&[5], 3)], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1))));
    cases.push(("conv_stride2", check(&[x4.clone(), random(&[4, 3, 3, 3], 2)], |g, v| g.conv2d(v[0], v[1], None, 2, 1, 1))));
    cases.push(("conv_pointwise", check(&[x4.clone(), random(&[6, 3, 1, 1], 2), random(&[6], 4)], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1))));
    cases.push(("conv_depthwise", check(&[x4.clone(), random(&[3, 1, 3, 3], 2), random(&[3], 4)], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 3))));
    cases.push(("conv_grouped", check(&[random(&[1, 4, 5, 5], 5), random(&[6, 2, 3, 3], 6)], |g, v| g.conv2d(v[0], v[1], None, 1, 1, 2))));
    cases.push(("matmul", check(&[random(&[2, 3, 4], 7), random(&[2, 4, 5], 8)], |g, v| g.matmul(v[0], v[1]))));
    cases.push(("transpose", check(&[random(&[2, 3, 4], 7)], |g, v| g.transpose(v[0]))));
    cases.push(("layer_norm", check(&[x4.clone(), random(&[3], 9), random(&[3], 10)], |g, v| g.layer_norm_channel(v[0], v[1], v[2], 1e-5))));
    cases.push(("relu", check(std::slice::from_ref(&x4), |g, v| g.relu(v[0]))));
    cases.push(("abs", check(std::slice::from_ref(&x4), |g, v| g.abs(v[0]))));
    cases.push(("add_sub_mul", check(&[x4.clone(), random(&[2, 3, 4, 4], 11)], |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(v[0], v[1])?;
        g.mul(a, s)
    })));
    cases.push(("scalar_ops", check(std::slice::from_ref(&x4), |g, v| {
        let a = g.scale(v[0], 1.7)?;
        g.add_scalar(a, 0.3)
    })));
    cases.push(("div_scalar", check(&[x4.clone(), t(&[1], &[0.8])], |g, v| g.div_scalar(v[0], v[1]))));
    cases.push(("mean", check(std::slice::from_ref(&x4), |g, v| g.mean(v[0]))));
    cases.push(("reshape_permute", check(std::slice::from_ref(&x4), |g, v| {
        let p = g.permute(v[0], &[0, 2, 3, 1])?;
        g.reshape(p, &[8, 12])
    })));
    cases.push(("concat_narrow", check(&[x4.clone(), random(&[2, 2, 4, 4], 12)], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        g.narrow(c, 1, 1, 3)
    })));
    cases.push(("cyclic_shift", check(std::slice::from_ref(&x4), |g, v| g.cyclic_shift(v[0], -2))));
    cases.push(("windows", check(std::slice::from_ref(&x4), |g, v| {
        let w = g.window_partition(v[0], 2)?;
        let w = g.scale(w, 2.0)?;
        g.window_merge(w, 2, 4, 4)
    })));
    cases.push(("haar", check(std::slice::from_ref(&x4), |g, v| {
        let b = g.dwt2(v[0])?;
        let ll = g.scale(b.ll, 0.5)?;
        let bands = wfen_core::wavelet::SubbandSet { ll, ..b };
        let y = g.idwt2(&bands)?;
        g.concat(&[y, v[0]], 1)
    })));
    cases.push(("haar_bands", check(std::slice::from_ref(&x4), |g, v| {
        let b = g.dwt2(v[0])?;
        g.concat(&[b.hh, b.lh], 1)
    })));
    cases.push(("avg_pool2", check(std::slice::from_ref(&x4), |g, v| g.avg_pool2(v[0]))));
    cases.push(("bicubic_down", check(&[random(&[1, 2, 8, 6], 13)], |g, v| g.resize_bicubic(v[0], 4, 3))));
    cases.push(("bicubic_up", check(&[random(&[1, 2, 3, 4], 13)], |g, v| g.resize_bicubic(v[0], 7, 9))));
    cases.push(("l2_normalize", check(std::slice::from_ref(&x4), |g, v| g.l2_normalize_last(v[0], 1e-12))));
    for (name, err) in &cases {
        assert!(*err < TOL, "{name}: {err}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let x = random(&[2, 3, 8, 8], 3).cast::<f32>();
        let w = random(&[4, 3, 3, 3], 4).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.input(x).unwrap(), g.param(w).unwrap());
        let y = g.conv2d(xv, wv, None, 1, 1, 1).unwrap();
        let y = g.relu(y).unwrap();
        let s = g.mean(y).unwrap();
        let out = g.value(s).unwrap().clone();
        let gr = g.backward(s).unwrap().get(wv).unwrap().clone();
        (out, gr)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(a in -3.0f32..3.0, b in -3.0f32..3.0, seed in 0u64..1000) {
        let x = random(&[1, 2, 4, 4], seed).cast::<f32>();
        let w = random(&[2, 2, 3, 3], seed + 1).cast::<f32>();
        // f = sum(relu(conv(x))), h = sum(x·x); returns grad of a·f + b·h w.r.t. x
        let grad = |ca: f32, cb: f32| {
            let mut g = Graph::<f32>::new();
            let xv = g.param(x.clone()).unwrap();
            let wv = g.input(w.clone()).unwrap();
            let c = g.conv2d(xv, wv, None, 1, 1, 1).unwrap();
            let r = g.relu(c).unwrap();
            let f = g.sum(r).unwrap();
            let sq = g.mul(xv, xv).unwrap();
            let h = g.sum(sq).unwrap();
            let fa = g.scale(f, ca).unwrap();
            let hb = g.scale(h, cb).unwrap();
            let l = g.add(fa, hb).unwrap();
            g.backward(l).unwrap().get(xv).unwrap().clone()
        };
        let combined = grad(a, b);
        let (gf, gh) = (grad(1.0, 0.0), grad(0.0, 1.0));
        for i in 0..combined.numel() {
            let want = a * gf.data()[i] + b * gh.data()[i];
            let got = combined.data()[i];
            let scale = (a * gf.data()[i]).abs() + (b * gh.data()[i]).abs();
            prop_assert!((got - want).abs() <= 1e-6 * scale.max(1e-6) * 4.0, "{} vs {}", got, want);
        }
    }

    #[test]
    fn movement_round_trips(vals in proptest::collection::vec(-10.0f32..10.0, 96)) {
        let x = Tensor::new(&[2, 3, 4, 4], vals).unwrap();
        let mut g = Graph::<f32>::new();
        let v = g.input(x.clone()).unwrap();
        let s = g.cyclic_shift(v, 3).unwrap();
        let u = g.cyclic_shift(s, -3).unwrap();
        prop_assert_eq!(g.value(u).unwrap(), &x);
        let w = g.window_partition(v, 2).unwrap();
        let m = g.window_merge(w, 2, 4, 4).unwrap();
        prop_assert_eq!(g.value(m).unwrap(), &x);
        let p = x.permute(&[3, 1, 0, 2]).unwrap().permute(&[2, 1, 3, 0]).unwrap();
        prop_assert_eq!(p, x);
    }
}
