//! Forward ops against naive f64 loop oracles and adjoints against central
//! finite differences of the same oracles. Each check returns its worst
//! relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use solidtex::tensor::{
    self, BatchNormRefs, GradTape, Mode, ParamStore, ParamTensor, Tensor4, Var, Weight,
};

pub const STEP: f64 = 1e-3;
pub const ADJOINT_TOL: f64 = 1e-4;
pub const FORWARD_TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Tensor4 {
    Tensor4::from_fn(c, dims, |_, _| rng.gen_range(-1.0..1.0))
}

fn rand_param(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> ParamTensor {
    let n = shape.iter().product();
    ParamTensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
        / scale
}


struct T64 {
    c: usize,
    d: [usize; 3],
    v: Vec<f64>,
}

impl T64 {
    fn from(t: &Tensor4) -> Self {
        Self {
            c: t.channels(),
            d: t.dims(),
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }
    fn with(&self, v: Vec<f64>) -> Self {
        Self { c: self.c, d: self.d, v }
    }
    fn at(&self, c: usize, i: usize, j: usize, l: usize) -> f64 {
        self.v[((c * self.d[0] + i) * self.d[1] + j) * self.d[2] + l]
    }
}

fn conv3d_oracle(x: &T64, w: &[f64], b: &[f64], cout: usize, k: usize) -> T64 {
    let o = [x.d[0] + 1 - k, x.d[1] + 1 - k, x.d[2] + 1 - k];
    let mut v = Vec::new();
    for co in 0..cout {
        for i in 0..o[0] {
            for j in 0..o[1] {
                for l in 0..o[2] {
                    let mut s = b[co];
                    for ci in 0..x.c {
                        for a in 0..k {
                            for bb in 0..k {
                                for cc in 0..k {
                                    let wi = (((co * x.c + ci) * k + a) * k + bb) * k + cc;
                                    s += w[wi] * x.at(ci, i + a, j + bb, l + cc);
                                }
                            }
                        }
                    }
                    v.push(s);
                }
            }
        }
    }
    T64 { c: cout, d: o, v }
}

fn conv2d_oracle(x: &T64, w: &[f64], b: &[f64], cout: usize) -> T64 {
    let [h, wd, _] = x.d;
    let mut v = Vec::new();
    for co in 0..cout {
        for i in 0..h {
            for j in 0..wd {
                let mut s = b[co];
                for ci in 0..x.c {
                    for a in 0..3 {
                        for bb in 0..3 {
                            let (ii, jj) = (i as isize + a as isize - 1, j as isize + bb as isize - 1);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                continue;
                            }
                            s += w[((co * x.c + ci) * 3 + a) * 3 + bb] * x.at(ci, ii as usize, jj as usize, 0);
                        }
                    }
                }
                v.push(s);
            }
        }
    }
    T64 { c: cout, d: [h, wd, 1], v }
}

fn avgpool_oracle(x: &T64) -> T64 {
    let (h, w) = (x.d[0] / 2, x.d[1] / 2);
    let mut v = Vec::new();
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                v.push(
                    (x.at(c, 2 * i, 2 * j, 0) + x.at(c, 2 * i, 2 * j + 1, 0) + x.at(c, 2 * i + 1, 2 * j, 0) + x.at(c, 2 * i + 1, 2 * j + 1, 0))
                        / 4.0,
                );
            }
        }
    }
    T64 { c: x.c, d: [h, w, 1], v }
}

fn upsample_oracle(x: &T64) -> T64 {
    let d = [x.d[0] * 2, x.d[1] * 2, x.d[2] * 2];
    let mut v = Vec::new();
    for c in 0..x.c {
        for i in 0..d[0] {
            for j in 0..d[1] {
                for l in 0..d[2] {
                    v.push(x.at(c, i / 2, j / 2, l / 2));
                }
            }
        }
    }
    T64 { c: x.c, d, v }
}

fn bn_train_oracle(x: &T64, w: &[f64], b: &[f64]) -> T64 {
    let n = x.d.iter().product::<usize>();
    let mut v = Vec::new();
    for c in 0..x.c {
        let ch = &x.v[c * n..(c + 1) * n];
        let m = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + 1e-5).sqrt();
        v.extend(ch.iter().map(|a| (a - m) * is * w[c] + b[c]));
    }
    x.with(v)
}

fn sq(t: &T64) -> f64 {
    t.v.iter().map(|a| a * a).sum()
}

fn sq_shift(t: &T64, r: &[f64]) -> f64 {
    t.v.iter().zip(r).map(|(a, b)| (a + b) * (a + b)).sum()
}

fn fd(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let fp = f(&p);
            p[i] = orig - STEP;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * STEP)
        })
        .collect()
}

fn as64(t: &[f32]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

fn input_grad<'s>(x: &Tensor4, store: &'s ParamStore, build: impl Fn(&mut GradTape<'s>, Var) -> Var) -> Vec<f32> {
    let mut tape = GradTape::new(store);
    let v = tape.leaf(x.clone());
    let loss = build(&mut tape, v);
    let g = tape.backward(loss).unwrap();
    g.wrt(v).unwrap().data().to_vec()
}

pub fn conv3d_forward() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, 2, [4, 4, 4]);
    let w = rand_param(&mut rng, vec![3, 2, 3, 3, 3]);
    let b = rand_param(&mut rng, vec![3]);
    let y = tensor::conv3d_valid(&x, &w, &b).unwrap();
    let want = conv3d_oracle(&T64::from(&x), &as64(&w.data), &as64(&b.data), 3, 3);
    assert_eq!(y.dims(), [2, 2, 2]);
    worst = worst.max(rel_err(y.data(), &want.v));
    worst
}

pub fn conv3d_forward_anisotropic() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, 3, [3, 9, 5]);
    let w = rand_param(&mut rng, vec![5, 3, 3, 3, 3]);
    let b = rand_param(&mut rng, vec![5]);
    let y = tensor::conv3d_valid(&x, &w, &b).unwrap();
    let want = conv3d_oracle(&T64::from(&x), &as64(&w.data), &as64(&b.data), 5, 3);
    assert_eq!(y.dims(), [1, 7, 3]);
    worst = worst.max(rel_err(y.data(), &want.v));
    worst
}

pub fn conv2d_forward() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, 3, [8, 8, 1]);
    let w = rand_param(&mut rng, vec![4, 3, 3, 3]);
    let b = rand_param(&mut rng, vec![4]);
    let y = tensor::conv2d_same(&x, &w, &b).unwrap();
    let want = conv2d_oracle(&T64::from(&x), &as64(&w.data), &as64(&b.data), 4);
    assert_eq!(y.dims(), [8, 8, 1]);
    worst = worst.max(rel_err(y.data(), &want.v));
    worst
}

pub fn avgpool_forward() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 1, [6, 6, 1]);
    let y = tensor::avgpool2(&x).unwrap();
    let want = avgpool_oracle(&T64::from(&x));
    worst = worst.max(rel_err(y.data(), &want.v));
    worst
}

pub fn conv3d_adjoint() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, 2, [4, 4, 4]);
    let mut store = ParamStore::new();
    let wid = store.push("w", rand_param(&mut rng, vec![2, 2, 3, 3, 3]), true);
    let bid = store.push("b", rand_param(&mut rng, vec![2]), true);
    let w64 = as64(&store.get(wid).data);
    let b64 = as64(&store.get(bid).data);
    let x64 = T64::from(&x);

    let build = |t: &mut GradTape<'_>, v: Var| {
        let y = t.conv3d_valid(v, Weight::Param(wid), Weight::Param(bid)).unwrap();
        t.squared_norm(y)
    };
    let gx = input_grad(&x, &store, build);
    let want_x = fd(&x64.v, |p| sq(&conv3d_oracle(&x64.with(p.to_vec()), &w64, &b64, 2, 3)));
    worst = worst.max(rel_err(&gx, &want_x));

    let mut tape = GradTape::new(&store);
    let v = tape.input(x.clone());
    let loss = build(&mut tape, v);
    let g = tape.backward(loss).unwrap();
    let want_w = fd(&w64, |p| sq(&conv3d_oracle(&x64, p, &b64, 2, 3)));
    let want_b = fd(&b64, |p| sq(&conv3d_oracle(&x64, &w64, p, 2, 3)));
    worst = worst.max(rel_err(g.param(wid), &want_w));
    worst = worst.max(rel_err(g.param(bid), &want_b));
    worst
}

pub fn conv3d_pointwise_adjoint() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, 3, [2, 3, 2]);
    let mut store = ParamStore::new();
    let wid = store.push("w", rand_param(&mut rng, vec![2, 3, 1, 1, 1]), true);
    let bid = store.push("b", rand_param(&mut rng, vec![2]), true);
    let (w64, b64, x64) = (as64(&store.get(wid).data), as64(&store.get(bid).data), T64::from(&x));
    let gx = input_grad(&x, &store, |t, v| {
        let y = t.conv3d_valid(v, Weight::Param(wid), Weight::Param(bid)).unwrap();
        t.squared_norm(y)
    });
    let want = fd(&x64.v, |p| sq(&conv3d_oracle(&x64.with(p.to_vec()), &w64, &b64, 2, 1)));
    worst = worst.max(rel_err(&gx, &want));
    worst
}

pub fn conv2d_adjoint() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, 2, [5, 6, 1]);
    let w = rand_param(&mut rng, vec![3, 2, 3, 3]);
    let b = rand_param(&mut rng, vec![3]);
    let (w64, b64, x64) = (as64(&w.data), as64(&b.data), T64::from(&x));
    let store = ParamStore::new();
    let gx = input_grad(&x, &store, |t, v| {
        let y = t.conv2d_same(v, Weight::Fixed(&w), Weight::Fixed(&b)).unwrap();
        t.squared_norm(y)
    });
    let want = fd(&x64.v, |p| sq(&conv2d_oracle(&x64.with(p.to_vec()), &w64, &b64, 3)));
    worst = worst.max(rel_err(&gx, &want));

    let mut store = ParamStore::new();
    let wid = store.push("w", w.clone(), true);
    let bid = store.push("b", b.clone(), true);
    let mut tape = GradTape::new(&store);
    let v = tape.input(x.clone());
    let y = tape.conv2d_same(v, Weight::Param(wid), Weight::Param(bid)).unwrap();
    let loss = tape.squared_norm(y);
    let g = tape.backward(loss).unwrap();
    let want_w = fd(&w64, |p| sq(&conv2d_oracle(&x64, p, &b64, 3)));
    worst = worst.max(rel_err(g.param(wid), &want_w));
    worst
}

pub fn upsample_pool_adjoint() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let store = ParamStore::new();
    let x = rand_tensor(&mut rng, 2, [2, 3, 2]);
    let x64 = T64::from(&x);
    let r: Vec<f64> = (0..2 * 4 * 6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r_t = Tensor4::from_vec(2, [4, 6, 4], r.iter().map(|&v| v as f32).collect()).unwrap();
    let gx = input_grad(&x, &store, |t, v| {
        let y = t.upsample_nn2(v);
        let c = t.input(r_t.clone());
        let s = t.add(y, c).unwrap();
        t.squared_norm(s)
    });
    let want = fd(&x64.v, |p| sq_shift(&upsample_oracle(&x64.with(p.to_vec())), &r));
    worst = worst.max(rel_err(&gx, &want));

    let x = rand_tensor(&mut rng, 2, [6, 4, 1]);
    let x64 = T64::from(&x);
    let gx = input_grad(&x, &store, |t, v| {
        let y = t.avgpool2(v).unwrap();
        t.squared_norm(y)
    });
    let want = fd(&x64.v, |p| sq(&avgpool_oracle(&x64.with(p.to_vec()))));
    worst = worst.max(rel_err(&gx, &want));
    worst
}

pub fn batch_norm_adjoint() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, 2, [3, 2, 2]);
    let mut store = ParamStore::new();
    let refs = BatchNormRefs {
        weight: store.push("w", rand_param(&mut rng, vec![2]), true),
        bias: store.push("b", rand_param(&mut rng, vec![2]), true),
        mean: store.push("m", ParamTensor::filled(vec![2], 0.0), false),
        var: store.push("v", ParamTensor::filled(vec![2], 1.0), false),
    };
    let w64 = as64(&store.get(refs.weight).data);
    let b64 = as64(&store.get(refs.bias).data);
    let r: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r_t = Tensor4::from_vec(2, [3, 2, 2], r.iter().map(|&v| v as f32).collect()).unwrap();
    let x64 = T64::from(&x);
    let build = |t: &mut GradTape<'_>, v: Var| {
        let y = t.batch_norm(v, refs, Mode::Train).unwrap();
        let c = t.input(r_t.clone());
        let s = t.add(y, c).unwrap();
        t.squared_norm(s)
    };
    let gx = input_grad(&x, &store, build);
    let want = fd(&x64.v, |p| sq_shift(&bn_train_oracle(&x64.with(p.to_vec()), &w64, &b64), &r));
    worst = worst.max(rel_err(&gx, &want));

    let mut tape = GradTape::new(&store);
    let v = tape.input(x.clone());
    let loss = build(&mut tape, v);
    let g = tape.backward(loss).unwrap();
    let want_w = fd(&w64, |p| sq_shift(&bn_train_oracle(&x64, p, &b64), &r));
    let want_b = fd(&b64, |p| sq_shift(&bn_train_oracle(&x64, &w64, p), &r));
    worst = worst.max(rel_err(g.param(refs.weight), &want_w));
    worst = worst.max(rel_err(g.param(refs.bias), &want_b));
    // running statistics never receive a gradient
    assert_eq!(g.param(refs.mean), &[0.0, 0.0]);

    // infer mode is affine in x
    let gx = input_grad(&x, &store, |t, v| {
        let y = t.batch_norm(v, refs, Mode::Infer).unwrap();
        t.squared_norm(y)
    });
    let scale: Vec<f64> = (0..2).map(|c| w64[c] / (1.0f64 + 1e-5).sqrt()).collect();
    let want = fd(&x64.v, |p| {
        p.iter()
            .enumerate()
            .map(|(i, &a)| {
                let c = i / 12;
                let y = a * scale[c] + b64[c];
                y * y
            })
            .sum()
    });
    worst = worst.max(rel_err(&gx, &want));
    worst
}

pub fn leaky_crop_concat_slice_adjoint() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let store = ParamStore::new();
    let x = rand_tensor(&mut rng, 2, [4, 3, 5]);
    let x64 = T64::from(&x);
    // leaky relu, then crop, concat with itself, slice along axis 1
    let gx = input_grad(&x, &store, |t, v| {
        let a = t.leaky_relu(v, 0.01);
        let c = t.crop(a, [1, 0, 2], [3, 3, 2]).unwrap();
        let k = t.concat_channels(c, c).unwrap();
        let s = t.slice_axis(k, 1, 2).unwrap();
        t.squared_norm(s)
    });
    let want = fd(&x64.v, |p| {
        let mut s = 0.0;
        for _copy in 0..2 {
            for ch in 0..2 {
                for i in 1..4 {
                    for l in 2..4 {
                        let v = p[((ch * 4 + i) * 3 + 2) * 5 + l];
                        let y = if v >= 0.0 { v } else { 0.01 * v };
                        s += y * y;
                    }
                }
            }
        }
        s
    });
    worst = worst.max(rel_err(&gx, &want));
    worst
}

pub fn gram_distance_adjoint() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let store = ParamStore::new();
    let x = rand_tensor(&mut rng, 3, [4, 5, 1]);
    let target = Tensor4::from_fn(1, [3, 3, 1], |_, _| rng.gen_range(-0.5..0.5));
    let t64 = as64(target.data());
    let x64 = T64::from(&x);
    let gx = input_grad(&x, &store, |t, v| {
        let g = t.gram(v);
        t.gram_distance(g, &target, 1.0 / 9.0).unwrap()
    });
    let want = fd(&x64.v, |p| {
        let n = 20.0;
        let mut s = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let g: f64 = (0..20).map(|k| p[a * 20 + k] * p[b * 20 + k]).sum::<f64>() / n;
                s += (g - t64[a * 3 + b]).powi(2);
            }
        }
        s / 9.0
    });
    worst = worst.max(rel_err(&gx, &want));
    worst
}

pub fn batch_norm_forward() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, 3, [4, 5, 3]);
    let w = as64(&rand_param(&mut rng, vec![3]).data);
    let b = as64(&rand_param(&mut rng, vec![3]).data);
    let f = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<_>>();
    let (y, _) = tensor::batch_norm(&x, &f(&w), &f(&b), &[0.0; 3], &[1.0; 3], Mode::Train).unwrap();
    rel_err(y.data(), &bn_train_oracle(&T64::from(&x), &w, &b).v)
}

pub fn upsample_forward() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, 2, [3, 2, 4]);
    let y = tensor::upsample_nn2(&x);
    assert_eq!(y.dims(), [6, 4, 8]);
    rel_err(y.data(), &upsample_oracle(&T64::from(&x)).v)
}

pub fn leaky_forward() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, 2, [3, 3, 3]);
    let y = tensor::leaky_relu(&x, 0.01);
    let want: Vec<f64> = x.data().iter().map(|&v| if v >= 0.0 { v as f64 } else { 0.01 * v as f64 }).collect();
    rel_err(y.data(), &want)
}

pub fn gram_forward() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&mut rng, 4, [5, 7, 1]);
    let g = solidtex::descriptor::gram(&x);
    let n = 35;
    let want: Vec<f64> = (0..16)
        .map(|ab| (0..n).map(|k| x.data()[(ab / 4) * n + k] as f64 * x.data()[(ab % 4) * n + k] as f64).sum::<f64>() / n as f64)
        .collect();
    rel_err(g.data(), &want)
}

/// `(name, worst relative error)` of every forward check.
pub fn forward_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("conv3d", conv3d_forward()),
        ("conv3d anisotropic", conv3d_forward_anisotropic()),
        ("conv2d same", conv2d_forward()),
        ("avgpool", avgpool_forward()),
        ("batch norm", batch_norm_forward()),
        ("upsample", upsample_forward()),
        ("leaky relu", leaky_forward()),
        ("gram", gram_forward()),
    ]
}

/// `(name, worst relative error)` of every adjoint check.
pub fn adjoint_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("conv3d", conv3d_adjoint()),
        ("conv3d 1x1x1", conv3d_pointwise_adjoint()),
        ("conv2d", conv2d_adjoint()),
        ("upsample, avgpool", upsample_pool_adjoint()),
        ("batch norm", batch_norm_adjoint()),
        ("leaky, crop, concat, slice", leaky_crop_concat_slice_adjoint()),
        ("gram distance", gram_distance_adjoint()),
    ]
}
