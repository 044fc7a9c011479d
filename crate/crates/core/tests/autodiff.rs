use msdm_core::rng::Stream;
use msdm_core::tensor::gradcheck::{check_gradients, GradCheckOptions};
use msdm_core::tensor::{AdamW, AdamWConfig, ParamStore, Tape};
use msdm_core::Tensor;

const TOL: f64 = 1e-5;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Stream::new(seed))
}

fn check<F>(name: &str, inputs: &[Tensor], f: F, tol: f64)
where
    F: Fn(&mut Tape, &[msdm_core::tensor::Var]) -> msdm_core::Result<msdm_core::tensor::Var>,
{
    let r = check_gradients(inputs, f, GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error < tol, "{name}: max rel error {}", r.max_rel_error);
}

/// Weighted sum with fixed pseudo-random weights so every output entry matters.
fn probe(t: &mut Tape, v: msdm_core::tensor::Var) -> msdm_core::Result<msdm_core::tensor::Var> {
    let n = t.value(v).len();
    let shape = t.shape(v).to_vec();
    let w = t.constant(&shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect())?;
    let p = t.mul(v, w)?;
    t.sum(p)
}

#[test]
fn matmul_gradients() {
    check("matmul", &[rand(&[3, 4], 1), rand(&[4, 2], 2)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y)
    }, 1e-6);
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        let a = if ta { rand(&[4, 3], 3) } else { rand(&[3, 4], 3) };
        let b = if tb { rand(&[2, 4], 4) } else { rand(&[4, 2], 4) };
        check("matmul_t", &[a, b], move |t, v| {
            let y = t.matmul_t(v[0], ta, v[1], tb)?;
            probe(t, y)
        }, 1e-6);
    }
}

#[test]
fn elementwise_gradients() {
    let a = rand(&[2, 3], 5);
    let b = rand(&[2, 3], 6);
    check("add", &[a.clone(), b.clone()], |t, v| { let y = t.add(v[0], v[1])?; probe(t, y) }, TOL);
    check("sub", &[a.clone(), b.clone()], |t, v| { let y = t.sub(v[0], v[1])?; probe(t, y) }, TOL);
    check("mul", &[a.clone(), b.clone()], |t, v| { let y = t.mul(v[0], v[1])?; probe(t, y) }, TOL);
    check("scale", &[a.clone()], |t, v| { let y = t.scale(v[0], -1.7)?; probe(t, y) }, TOL);
    check("add_scalar", &[a.clone()], |t, v| { let y = t.add_scalar(v[0], 0.3)?; probe(t, y) }, TOL);
    check("silu", &[a.clone()], |t, v| { let y = t.silu(v[0])?; probe(t, y) }, TOL);
    check("gelu", &[a.clone()], |t, v| { let y = t.gelu(v[0])?; probe(t, y) }, TOL);
    check("tanh", &[a.clone()], |t, v| { let y = t.tanh(v[0])?; probe(t, y) }, TOL);
    check("exp", &[a.clone()], |t, v| { let y = t.exp(v[0])?; probe(t, y) }, TOL);
    check("mean", &[a.clone()], |t, v| t.mean(v[0]), TOL);
    check("mse", &[a, b], |t, v| t.mse(v[0], v[1]), TOL);
}

#[test]
fn layout_gradients() {
    let x = rand(&[2, 3, 4], 7);
    check("reshape", &[x.clone()], |t, v| { let y = t.reshape(v[0], &[6, 4])?; probe(t, y) }, TOL);
    check("swap_last2", &[x.clone()], |t, v| { let y = t.swap_last2(v[0])?; probe(t, y) }, TOL);
    check("narrow", &[x.clone()], |t, v| { let y = t.narrow(v[0], 1, 1, 2)?; probe(t, y) }, TOL);
    check("concat", &[x.clone(), rand(&[2, 2, 4], 8)], |t, v| { let y = t.concat(&[v[0], v[1]], 1)?; probe(t, y) }, TOL);
    check("softmax_last", &[x.clone()], |t, v| { let y = t.softmax(v[0], 2)?; probe(t, y) }, TOL);
    check("softmax_mid", &[x.clone()], |t, v| { let y = t.softmax(v[0], 1)?; probe(t, y) }, TOL);
    check("add_bias", &[x.clone(), rand(&[3], 9)], |t, v| { let y = t.add_bias(v[0], v[1], 1)?; probe(t, y) }, TOL);
    check("add_batch_channel", &[x.clone(), rand(&[2, 3], 10)], |t, v| {
        let y = t.add_batch_channel(v[0], v[1])?;
        probe(t, y)
    }, TOL);
    check("upsample2x", &[rand(&[2, 3, 2, 2], 11)], |t, v| { let y = t.upsample2x(v[0])?; probe(t, y) }, TOL);
    check("avg_pool2x", &[rand(&[2, 3, 4, 6], 23)], |t, v| { let y = t.avg_pool2x(v[0])?; probe(t, y) }, TOL);
}

#[test]
fn conv_and_norm_gradients() {
    for (h, stride, pad, seed) in [(6, 1, 1, 12), (7, 2, 1, 13), (6, 1, 0, 14)] {
        check("conv2d", &[rand(&[2, 3, h, h], seed), rand(&[4, 3, 3, 3], seed + 100)], move |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            probe(t, y)
        }, TOL);
    }
    check("group_norm", &[rand(&[2, 4, 3, 3], 15), rand(&[4], 16), rand(&[4], 17)], |t, v| {
        let y = t.group_norm(v[0], 2, v[1], v[2])?;
        probe(t, y)
    }, TOL);
    check("group_norm_rank3", &[rand(&[4, 3, 3], 18), rand(&[4], 19), rand(&[4], 20)], |t, v| {
        let y = t.group_norm(v[0], 4, v[1], v[2])?;
        probe(t, y)
    }, TOL);
}

fn conv_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_matches_loop_reference() {
    for (h, stride, pad) in [(8, 1, 0), (8, 1, 1), (9, 2, 1), (7, 2, 2)] {
        let x = rand(&[3, h, h], 21);
        let w = rand(&[5, 3, 3, 3], 22);
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let wv = t.leaf(&w);
        let y = t.conv2d(xv, wv, stride, pad).unwrap();
        let want = conv_reference(&x, &w, stride, pad);
        let got = t.value(y);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}

fn trajectory(seed: u64) -> Vec<u64> {
    let mut rng = Stream::new(seed);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[4, 3], 0.5, &mut rng)).unwrap();
    let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let target = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..Default::default() }).unwrap();
    for _ in 0..100 {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let xv = t.leaf(&x);
        let tv = t.leaf(&target);
        let y = t.linear(xv, b.var(w), None).unwrap();
        let l = t.mse(y, tv).unwrap();
        t.backward(l).unwrap();
        store.collect_grads(&t, &b).unwrap();
        opt.step(&mut store.trainable_mut()).unwrap();
    }
    store.get(w).data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn optimizer_trajectories_are_deterministic() {
    assert_eq!(trajectory(42), trajectory(42));
    assert_ne!(trajectory(42), trajectory(43));
}
