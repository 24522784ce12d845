use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use solidtex::container::{self, WEIGHTS_MAGIC};
use solidtex::descriptor::{
    gram, loss2d, loss2d_on, loss3d, loss3d_report, preprocess, weight_manifest, DescriptorNet, ExemplarSet,
};
use solidtex::image::{histogram_match, Orientation};
use solidtex::tensor::{GradTape, ParamTensor};
use solidtex::{Error, Tensor4};

fn noise_image(h: usize, w: usize, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(3, [h, w, 1], |_, _| rng.gen::<f32>())
}

/// Smooth-ish structured image: blobs plus noise.
fn texture(h: usize, w: usize, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    Tensor4::from_fn(3, [h, w, 1], |c, [i, j, _]| {
        let s = ((i as f32 * 0.7 + phase[c] * 6.0).sin() * (j as f32 * 0.45).cos() + 1.0) * 0.4;
        (s + 0.2 * rng.gen::<f32>()).clamp(0.0, 1.0)
    })
}

fn net() -> DescriptorNet {
    DescriptorNet::synthetic(7)
}

#[test]
fn gram_examples() {
    let ones = Tensor4::filled(2, [3, 5, 1], 1.0);
    let g = gram(&ones);
    assert_eq!(g.dims(), [2, 2, 1]);
    assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-7));

    let (a, b) = (1.5f32, -2.0f32);
    let mut f = Tensor4::zeros(2, [4, 1, 1]);
    f.set(0, [2, 0, 0], a);
    f.set(1, [2, 0, 0], b);
    let g = gram(&f);
    let want = [a * a / 4.0, a * b / 4.0, a * b / 4.0, b * b / 4.0];
    for (x, y) in g.data().iter().zip(want) {
        assert!((x - y).abs() < 1e-7);
    }
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn min_eigenvalue(m: usize, a: &[f32]) -> f64 {
    let mut s: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..m {
            for q in p + 1..m {
                off += s[p * m + q] * s[p * m + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = s[p * m + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (s[q * m + q] - s[p * m + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..m {
                    let akp = s[k * m + p];
                    let akq = s[k * m + q];
                    s[k * m + p] = c * akp - sn * akq;
                    s[k * m + q] = sn * akp + c * akq;
                }
                for k in 0..m {
                    let apk = s[p * m + k];
                    let aqk = s[q * m + k];
                    s[p * m + k] = c * apk - sn * aqk;
                    s[q * m + k] = sn * apk + c * aqk;
                }
            }
        }
    }
    (0..m).map(|i| s[i * m + i]).fold(f64::INFINITY, f64::min)
}

#[test]
fn gram_symmetric_psd() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 6;
        // fewer positions than channels forces a singular Gram
        let n = 2 + seed as usize;
        let f = Tensor4::from_fn(m, [n, 1, 1], |_, _| rng.gen_range(-2.0..2.0));
        let g = gram(&f);
        for a in 0..m {
            for b in 0..m {
                assert_eq!(g.get(0, [a, b, 0]), g.get(0, [b, a, 0]));
            }
        }
        assert!(min_eigenvalue(m, g.data()) >= -1e-4);
    }
}

#[test]
fn tap_shapes_at_128() {
    let taps = net().features(&noise_image(128, 128, 1)).unwrap();
    let dims: Vec<[usize; 3]> = taps.iter().map(|t| t.dims()).collect();
    let ch: Vec<usize> = taps.iter().map(|t| t.channels()).collect();
    assert_eq!(dims, vec![[128, 128, 1], [64, 64, 1], [32, 32, 1], [16, 16, 1], [8, 8, 1]]);
    assert_eq!(ch, vec![64, 128, 256, 512, 512]);
}

#[test]
fn undersized_and_non_rgb_rejected() {
    let n = net();
    assert!(matches!(n.features(&noise_image(15, 40, 0)), Err(Error::Invalid { .. })));
    assert!(n.features(&Tensor4::zeros(1, [32, 32, 1])).is_err());
}

#[test]
fn constant_input_constant_interior_response() {
    // Same-padding makes the one-pixel border differ; the interior is constant.
    let taps = net().features(&Tensor4::filled(3, [20, 20, 1], 0.3)).unwrap();
    let f = &taps[0];
    for c in 0..f.channels() {
        let v = f.get(c, [1, 1, 0]);
        for i in 1..19 {
            for j in 1..19 {
                assert_eq!(f.get(c, [i, j, 0]), v);
            }
        }
    }
}

#[test]
fn preprocess_is_affine() {
    let a = noise_image(4, 4, 2);
    let b = noise_image(4, 4, 3);
    let sum = Tensor4::from_vec(3, [4, 4, 1], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
    let (pa, pb, p0, ps) = (
        preprocess(&a).unwrap(),
        preprocess(&b).unwrap(),
        preprocess(&Tensor4::zeros(3, [4, 4, 1])).unwrap(),
        preprocess(&sum).unwrap(),
    );
    for i in 0..pa.len() {
        let lhs = pa.data()[i] + pb.data()[i] - p0.data()[i];
        assert!((lhs - ps.data()[i]).abs() < 1e-3);
    }
}

#[test]
fn self_loss_is_zero_and_contrast_matters() {
    let n = net();
    let u = texture(32, 32, 4);
    let t = n.grams(&u).unwrap();
    assert_eq!(loss2d(&n, &u, &t).unwrap(), 0.0);
    let doubled = u.map(|v| (v - 0.5) * 2.0 + 0.5);
    let l = loss2d(&n, &doubled, &t).unwrap();
    assert!(l > 0.0 && l.is_finite());
}

fn loss_and_grad(n: &DescriptorNet, x: &Tensor4, t: &[Tensor4]) -> (f64, Tensor4) {
    let mut tape = GradTape::detached();
    let v = tape.leaf(x.clone());
    let l = loss2d_on(n, &mut tape, v, t).unwrap();
    let value = tape.value(l).data()[0] as f64;
    let g = tape.backward(l).unwrap();
    (value, g.wrt(v).unwrap().clone())
}

#[test]
fn tape_loss_matches_eager_and_descends() {
    let n = net();
    let t = n.grams(&texture(32, 32, 5)).unwrap();
    let x = noise_image(32, 32, 6);
    let (lt, g) = loss_and_grad(&n, &x, &t);
    let le = loss2d(&n, &x, &t).unwrap();
    assert!(((lt - le) / le).abs() < 1e-6, "{lt} vs {le}");
    let norm2: f64 = g.data().iter().map(|&v| v as f64 * v as f64).sum();
    let step = 1e-3 * le / norm2;
    let moved = Tensor4::from_vec(
        3,
        x.dims(),
        x.data().iter().zip(g.data()).map(|(&a, &d)| a - (step * d as f64) as f32).collect(),
    )
    .unwrap();
    assert!(loss2d(&n, &moved, &t).unwrap() < le);
}

/// f64 reference descriptor with naive loops, reading the weights back from
/// a saved weight file.
struct Oracle {
    layers: Vec<(usize, usize, Vec<f64>, Vec<f64>, bool)>,
}

impl Oracle {
    fn new(net: &DescriptorNet) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.stxw");
        net.save(&p).unwrap();
        let c = container::read_file(&p, WEIGHTS_MAGIC).unwrap();
        let pools = [false, true, false, true, false, false, false, true, false, false, false, true, false];
        let layers = c
            .tensors
            .chunks(2)
            .zip(pools)
            .map(|(wb, pool)| {
                let w = &wb[0].1;
                let f = |t: &ParamTensor| t.data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
                (w.shape[1], w.shape[0], f(w), f(&wb[1].1), pool)
            })
            .collect();
        Self { layers }
    }

    fn grams(&self, img: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
        let means = [123.68, 116.779, 103.939];
        let mut x: Vec<f64> = (0..3 * h * w).map(|i| img[i] * 255.0 - means[i / (h * w)]).collect();
        let (mut h, mut w) = (h, w);
        let mut grams = Vec::new();
        for (li, (cin, cout, wt, b, pool)) in self.layers.iter().enumerate() {
            let mut y = vec![0f64; cout * h * w];
            for co in 0..*cout {
                for p in 0..h * w {
                    y[co * h * w + p] = b[co];
                }
                for ci in 0..*cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = wt[((co * cin + ci) * 3 + ky) * 3 + kx];
                            for r in 0..h {
                                let sr = r as isize + ky as isize - 1;
                                if sr < 0 || sr >= h as isize {
                                    continue;
                                }
                                // output column s reads input column s + kx - 1
                                let (lo, hi) = (usize::from(kx == 0), if kx == 2 { w - 1 } else { w });
                                let src = &x[ci * h * w + sr as usize * w..][..w];
                                let dst = &mut y[co * h * w + r * w..][..w];
                                for (d, &v) in dst[lo..hi].iter_mut().zip(&src[lo + kx - 1..hi + kx - 1]) {
                                    *d += k * v;
                                }
                            }
                        }
                    }
                }
            }
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            if [0, 2, 4, 8, 12].contains(&li) {
                let n = (h * w) as f64;
                let mut g = vec![0f64; cout * cout];
                for a in 0..*cout {
                    for bb in 0..*cout {
                        g[a * cout + bb] = (0..h * w).map(|p| y[a * h * w + p] * y[bb * h * w + p]).sum::<f64>() / n;
                    }
                }
                grams.push(g);
            }
            x = y;
            if *pool && li < 12 {
                let (nh, nw) = (h / 2, w / 2);
                let mut z = vec![0f64; cout * nh * nw];
                for c in 0..*cout {
                    for r in 0..nh {
                        for s in 0..nw {
                            let at = |i: usize, j: usize| x[c * h * w + i * w + j];
                            z[c * nh * nw + r * nw + s] =
                                (at(2 * r, 2 * s) + at(2 * r, 2 * s + 1) + at(2 * r + 1, 2 * s) + at(2 * r + 1, 2 * s + 1)) / 4.0;
                        }
                    }
                }
                x = z;
                h = nh;
                w = nw;
            }
        }
        grams
    }

    fn loss(&self, img: &[f64], h: usize, w: usize, targets: &[Vec<f64>]) -> f64 {
        self.grams(img, h, w)
            .iter()
            .zip(targets)
            .map(|(g, t)| {
                let m2 = g.len() as f64;
                g.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m2
            })
            .sum()
    }
}

/// Directional derivatives of the tape gradient against central
/// differences of the f64 oracle, on 48x48 inputs.
#[test]
fn loss2d_gradient_matches_finite_differences() {
    let n = net();
    let oracle = Oracle::new(&n);
    let tex = texture(48, 48, 8);
    let t = n.grams(&tex).unwrap();
    let x = noise_image(48, 48, 9);

    let t64: Vec<f64> = tex.data().iter().map(|&v| v as f64).collect();
    let targets64 = oracle.grams(&t64, 48, 48);
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let l64 = oracle.loss(&x64, 48, 48, &targets64);
    let l32 = loss2d(&n, &x, &t).unwrap();
    assert!(((l64 - l32) / l64).abs() < 1e-4, "oracle {l64} vs {l32}");

    let (_, g) = loss_and_grad(&n, &x, &t);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..2 {
        let dir: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let shifted = |s: f64| x64.iter().zip(&dir).map(|(&a, &d)| a + s * d).collect::<Vec<f64>>();
        let fd = (oracle.loss(&shifted(h), 48, 48, &targets64) - oracle.loss(&shifted(-h), 48, 48, &targets64)) / (2.0 * h);
        let an: f64 = g.data().iter().zip(&dir).map(|(&a, &d)| a as f64 * d).sum();
        let rel = (fd - an).abs() / an.abs().max(fd.abs());
        assert!(rel <= 1e-3, "fd {fd} analytic {an} rel {rel}");
    }
}

fn stack(img: &Tensor4, axis: usize, n: usize) -> Tensor4 {
    let [h, w, _] = img.dims();
    let dims = match axis {
        0 => [n, h, w],
        1 => [h, n, w],
        _ => [h, w, n],
    };
    Tensor4::from_fn(3, dims, |c, [a, b, l]| match axis {
        0 => img.get(c, [b, l, 0]),
        1 => img.get(c, [a, l, 0]),
        _ => img.get(c, [a, b, 0]),
    })
}

#[test]
fn loss3d_definitions() {
    let n = net();
    let u = texture(16, 16, 11);
    let set = ExemplarSet::new(&n, vec![(0, u.clone(), Orientation::default())]).unwrap();

    // exemplar stacked along the constrained axis
    let stacked = stack(&u, 0, 3);
    assert_eq!(loss3d(&n, &stacked, &set).unwrap(), 0.0);

    // single slice
    let slab = Tensor4::from_fn(3, [1, 16, 16], |c, [_, j, l]| texture(16, 16, 12).get(c, [j, l, 0]));
    let one = loss3d(&n, &slab, &set).unwrap();
    let direct = loss2d(&n, &texture(16, 16, 12), &set.directions[0].grams).unwrap();
    assert_eq!(one, direct);

    // mean over slices
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let vol = Tensor4::from_fn(3, [32, 16, 16], |_, _| rng.gen::<f32>());
    let mut sum = 0.0;
    for i in 0..32 {
        let s = solidtex::tensor::slice_axis(&vol, 0, i).unwrap();
        sum += loss2d(&n, &s, &set.directions[0].grams).unwrap();
    }
    let l3 = loss3d(&n, &vol, &set).unwrap();
    assert!(((sum / 32.0 - l3) / l3).abs() < 1e-12);

    let report = loss3d_report(&n, &vol, &set).unwrap();
    assert_eq!(report.len(), 1);
    assert!((report[0].per_tap.iter().sum::<f64>() - l3).abs() <= 1e-12 * l3);
}

/// Descriptor whose kernels are symmetric under transposition, so every
/// layer commutes with transposing the image.
fn transpose_symmetric_net() -> DescriptorNet {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.stxw");
    net().save(&p).unwrap();
    let mut c = container::read_file(&p, WEIGHTS_MAGIC).unwrap();
    for (name, t) in c.tensors.iter_mut() {
        if name.ends_with(".weight") {
            let d = t.data.clone();
            for (blk, out) in d.chunks(9).zip(t.data.chunks_mut(9)) {
                for a in 0..3 {
                    for b in 0..3 {
                        out[a * 3 + b] = 0.5 * (blk[a * 3 + b] + blk[b * 3 + a]);
                    }
                }
            }
        }
    }
    DescriptorNet::from_container(c).unwrap()
}

#[test]
fn loss3d_axis_permutation() {
    let u = texture(16, 16, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let vol = Tensor4::from_fn(3, [16, 16, 16], |_, _| rng.gen::<f32>());

    // Swapping axes 0 and 1 exchanges those two slice families exactly.
    let n = net();
    let swapped = Tensor4::from_fn(3, [16, 16, 16], |c, [a, b, l]| vol.get(c, [b, a, l]));
    let iso = ExemplarSet::isotropic(&n, u.clone()).unwrap();
    let r0 = loss3d_report(&n, &vol, &iso).unwrap();
    let r1 = loss3d_report(&n, &swapped, &iso).unwrap();
    assert_eq!(r0[0].total, r1[1].total);
    assert_eq!(r0[1].total, r1[0].total);

    // Other permutations transpose slices; with a transpose-equivariant
    // descriptor the total is invariant.
    let sym = transpose_symmetric_net();
    let iso = ExemplarSet::isotropic(&sym, u).unwrap();
    let base = loss3d(&sym, &vol, &iso).unwrap();
    let perms: [[usize; 3]; 2] = [[0, 2, 1], [2, 0, 1]];
    for p in perms {
        let v = Tensor4::from_fn(3, [16, 16, 16], |c, at| vol.get(c, [at[p[0]], at[p[1]], at[p[2]]]));
        let l = loss3d(&sym, &v, &iso).unwrap();
        assert!(((l - base) / base).abs() < 1e-5, "perm {p:?}: {l} vs {base}");
    }
}

#[test]
fn thin_direction_rejected() {
    let n = net();
    let set = ExemplarSet::new(&n, vec![(1, texture(16, 16, 1), Orientation::default())]).unwrap();
    let vol = Tensor4::zeros(3, [8, 4, 16]);
    assert!(loss3d(&n, &vol, &set).is_err());
}

#[test]
fn weight_file_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vgg.stxw");
    let n = net();
    n.save(&p).unwrap();
    let a = DescriptorNet::load(&p).unwrap();
    let b = DescriptorNet::load(&p).unwrap();
    assert_eq!(a.checksum(), n.checksum());
    assert_eq!(a.checksum(), b.checksum());

    let c = container::read_file(&p, WEIGHTS_MAGIC).unwrap();
    let write = |tensors: &[(String, ParamTensor)]| {
        let refs: Vec<(&str, &ParamTensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let q = dir.path().join("bad.stxw");
        container::write_file(&q, WEIGHTS_MAGIC, &c.metadata, &refs).unwrap();
        DescriptorNet::load(&q)
    };
    let mut permuted = c.tensors.clone();
    permuted[0].1.shape = vec![3, 64, 3, 3];
    assert!(matches!(write(&permuted), Err(Error::Format { .. })));
    assert!(matches!(write(&c.tensors[1..]), Err(Error::Format { .. })));
    let mut extra = c.tensors.clone();
    extra.push(("conv5_2.weight".into(), ParamTensor::filled(vec![1], 0.0)));
    assert!(matches!(write(&extra), Err(Error::Format { .. })));
    assert_eq!(weight_manifest().len(), c.tensors.len());
}

#[test]
fn histogram_match_deciles() {
    let src = noise_image(40, 30, 16).map(|v| v * v);
    let reference = texture(25, 25, 17);
    let out = histogram_match(&src, &reference).unwrap();
    for c in 0..3 {
        let mut o = out.channel(c).to_vec();
        let mut r = reference.channel(c).to_vec();
        o.sort_by(f32::total_cmp);
        r.sort_by(f32::total_cmp);
        for dec in 1..10 {
            let qo = o[dec * o.len() / 10];
            let qr = r[dec * r.len() / 10];
            assert!((qo - qr).abs() * 255.0 <= 1.0, "channel {c} decile {dec}: {qo} vs {qr}");
        }
        // monotone in the source values
        let s = src.channel(c);
        let oc = out.channel(c);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] < s[j] {
                    assert!(oc[i] <= oc[j]);
                }
            }
        }
    }
}
