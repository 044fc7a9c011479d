use msdm_core::lora::LoraBinding;
use msdm_core::nets::unet::{add_attention, cross_attention, ATTN_BLOCKS};
use msdm_core::nets::vae::kl_term;
use msdm_core::nets::{zero_params, TextEmbedding, TextEncoder, Unet, UnetConfig, Vae, VaeConfig, View};
use msdm_core::rng::Stream;
use msdm_core::tensor::gradcheck::{check_gradients, GradCheckOptions};
use msdm_core::tensor::{ParamStore, Tape};
use msdm_core::Tensor;

const C: usize = 8;
const CTX: usize = 6;
const ATT: usize = 5;

fn attn_store(seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    add_attention(&mut p, "a", C, CTX, ATT, &mut Stream::new(seed)).unwrap();
    for name in ["a.ff1.b", "a.ff2.b"] {
        let id = p.id(name).unwrap();
        let mut r = Stream::new(seed + 1);
        for v in p.get_mut(id).data_mut() {
            *v = 0.1 * r.normal();
        }
    }
    p
}

struct AttnRun {
    out: Vec<f64>,
    attended: Vec<f64>,
    weights: Vec<Vec<f64>>,
    weight_shapes: Vec<Vec<usize>>,
}

fn run_attention(p: &ParamStore, h: &Tensor, n: usize, ctx: &Tensor, spans: &[(usize, usize)]) -> AttnRun {
    let mut t = Tape::new();
    let b = p.bind(&mut t);
    let view = View::new(p, &b);
    let hv = t.leaf(h);
    let cv = t.leaf(ctx);
    let r = cross_attention(&mut t, &view, &LoraBinding::empty(), "a", hv, n, cv, spans).unwrap();
    AttnRun {
        out: t.value(r.out).to_vec(),
        attended: t.value(r.attended).to_vec(),
        weights: r.weights.iter().map(|&w| t.value(w).to_vec()).collect(),
        weight_shapes: r.weights.iter().map(|&w| t.shape(w).to_vec()).collect(),
    }
}

#[test]
fn single_token_attention_ignores_queries() {
    let mut r = Stream::new(1);
    let h = Tensor::randn(&[5, C], 1.0, &mut r);
    let ctx = Tensor::randn(&[1, CTX], 1.0, &mut r);
    let p1 = attn_store(10);
    let mut p2 = p1.clone();
    let q = p2.id("a.q.w").unwrap();
    *p2.get_mut(q) = Tensor::randn(&[ATT, C], 3.0, &mut r);

    let a = run_attention(&p1, &h, 5, &ctx, &[(0, 1)]);
    let b = run_attention(&p2, &h, 5, &ctx, &[(0, 1)]);
    assert!(a.weights[0].iter().all(|w| *w == 1.0));
    assert_eq!(a.attended, b.attended);

    // h + O·(Wv·c) for every row.
    let v = ctx.matmul(&p1.by_name("a.v.w").unwrap().transpose().unwrap()).unwrap();
    let o = v.matmul(&p1.by_name("a.o.w").unwrap().transpose().unwrap()).unwrap();
    for i in 0..5 {
        for j in 0..C {
            let want = h.data()[i * C + j] + o.data()[j];
            assert!((a.attended[i * C + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_value_and_feed_forward_is_pure_residual() {
    let mut r = Stream::new(2);
    let h = Tensor::randn(&[6, C], 1.0, &mut r);
    let ctx = Tensor::randn(&[7, CTX], 1.0, &mut r);
    let mut p = attn_store(11);
    zero_params(&mut p, |n| n == "a.v.w" || n.starts_with("a.ff2"));
    let a = run_attention(&p, &h, 3, &ctx, &[(0, 4), (4, 3)]);
    assert_eq!(a.out, h.data());
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = Stream::new(3);
    let h = Tensor::randn(&[8, C], 2.0, &mut r);
    let ctx = Tensor::randn(&[9, CTX], 2.0, &mut r);
    let p = attn_store(12);
    let a = run_attention(&p, &h, 4, &ctx, &[(0, 5), (5, 4)]);
    assert_eq!(a.weight_shapes, vec![vec![4, 5], vec![4, 4]]);
    for (w, s) in a.weights.iter().zip(&a.weight_shapes) {
        for row in w.chunks(s[1]) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|x| *x > 0.0));
        }
    }
}

#[test]
fn attention_dimension_mismatch() {
    let p = attn_store(13);
    let mut t = Tape::new();
    let b = p.bind(&mut t);
    let view = View::new(&p, &b);
    let h = t.constant(&[4, C + 1], vec![0.0; 4 * (C + 1)]).unwrap();
    let ctx = t.constant(&[2, CTX], vec![0.0; 2 * CTX]).unwrap();
    assert!(cross_attention(&mut t, &view, &LoraBinding::empty(), "a", h, 4, ctx, &[(0, 2)]).is_err());
}

#[test]
fn tiny_logvar_collapses_to_mean() {
    let mut t = Tape::new();
    let m = t.constant(&[4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
    let lv = t.constant(&[4], vec![-60.0; 4]).unwrap();
    let z = Vae::reparameterize(&mut t, m, lv, &mut Stream::new(1)).unwrap();
    for (a, b) in t.value(z).iter().zip(t.value(m)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn reparameterization_variance_monte_carlo() {
    let n = 10_000;
    let logvar = -0.7f64;
    let mut t = Tape::new();
    let m = t.constant(&[n], vec![1.5; n]).unwrap();
    let lv = t.constant(&[n], vec![logvar; n]).unwrap();
    let z = Vae::reparameterize(&mut t, m, lv, &mut Stream::new(4)).unwrap();
    let d: Vec<f64> = t.value(z).iter().map(|v| v - 1.5).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want = logvar.exp();
    assert!((var - want).abs() < 3.0 * want * (2.0 / (n - 1) as f64).sqrt(), "{var} vs {want}");
}

#[test]
fn reparameterization_gradients() {
    let mut r = Stream::new(5);
    let mean = Tensor::randn(&[2, 3], 1.0, &mut r);
    let logvar = Tensor::randn(&[2, 3], 0.5, &mut r);
    let target = Tensor::randn(&[2, 3], 1.0, &mut r);
    let rep = check_gradients(
        &[mean, logvar],
        |t, v| {
            let z = Vae::reparameterize(t, v[0], v[1], &mut Stream::new(6))?;
            let tv = t.constant(&[2, 3], target.data().to_vec())?;
            let rec = t.mse(z, tv)?;
            let kl = kl_term(t, v[0], v[1])?;
            t.add(rec, kl)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{}", rep.max_rel_error);
}

fn vae_loss_value(vae: &Vae, x: &Tensor) -> f64 {
    let mut t = Tape::new();
    let b = vae.params.bind(&mut t);
    let view = View::new(&vae.params, &b);
    let l = vae.loss_on_batch(&mut t, &view, x, &mut Stream::new(77)).unwrap();
    t.value(l)[0]
}

#[test]
fn vae_loss_graph_matches_finite_differences() {
    let mut vae = Vae::new(VaeConfig::default(), 8).unwrap();
    let x = Tensor::randn(&[2, 3, 8, 8], 0.5, &mut Stream::new(9));
    let mut t = Tape::new();
    let b = vae.params.bind(&mut t);
    let view = View::new(&vae.params, &b);
    let l = vae.loss_on_batch(&mut t, &view, &x, &mut Stream::new(77)).unwrap();
    t.backward(l).unwrap();
    vae.params.collect_grads(&t, &b).unwrap();

    let mut r = Stream::new(10);
    let ids: Vec<_> = vae.params.ids().collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let id = ids[r.index(ids.len())];
        let i = r.index(vae.params.get(id).numel());
        let analytic = vae.params.get(id).grad().unwrap()[i];
        let orig = vae.params.get(id).data()[i];
        vae.params.get_mut(id).data_mut()[i] = orig + h;
        let plus = vae_loss_value(&vae, &x);
        vae.params.get_mut(id).data_mut()[i] = orig - h;
        let minus = vae_loss_value(&vae, &x);
        vae.params.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn encode_decode_preserves_image_shape() {
    let vae = Vae::new(VaeConfig::default(), 3).unwrap();
    for (h, w) in [(8, 8), (16, 24), (32, 32)] {
        let x = Tensor::randn(&[2, 3, h, w], 0.5, &mut Stream::new(1));
        let e = vae.encode_tensor(&x, None).unwrap();
        assert_eq!(e.mean.shape(), &[2, 4, h / 4, w / 4]);
        assert_eq!(vae.decode_tensor(&e.mean).unwrap().shape(), x.shape());
    }
}

fn unet_out(unet: &Unet, x: &Tensor, t: usize, text: &TextEmbedding) -> Tensor {
    let mut tape = Tape::new();
    let b = unet.params.bind(&mut tape);
    let view = View::new(&unet.params, &b);
    let xv = tape.constant(x.shape(), x.data().to_vec()).unwrap();
    let y = unet.forward(&mut tape, &view, &LoraBinding::empty(), xv, &[t], std::slice::from_ref(text)).unwrap();
    tape.to_tensor(y)
}

#[test]
fn zero_parameters_give_zero_output() {
    let mut unet = Unet::new(UnetConfig::default(), 1).unwrap();
    zero_params(&mut unet.params, |_| true);
    let x = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut Stream::new(2));
    let y = unet_out(&unet, &x, 17, &TextEncoder::new(1).encode("a polyp"));
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn prompt_changes_output() {
    let unet = Unet::new(UnetConfig::default(), 1).unwrap();
    let enc = TextEncoder::new(1);
    let x = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut Stream::new(2));
    let a = unet_out(&unet, &x, 17, &enc.encode("generate an image containing a polyp"));
    let b = unet_out(&unet, &x, 17, &enc.encode("generate an image containing biopsy forceps"));
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn zeroed_attention_outputs_make_unet_text_invariant() {
    let mut unet = Unet::new(UnetConfig::default(), 1).unwrap();
    zero_params(&mut unet.params, |n| {
        ATTN_BLOCKS.iter().any(|b| n == format!("{b}.o.w") || n.starts_with(&format!("{b}.ff2")))
    });
    let enc = TextEncoder::new(1);
    let x = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut Stream::new(2));
    let a = unet_out(&unet, &x, 5, &enc.encode("a polyp"));
    let b = unet_out(&unet, &x, 5, &enc.encode("three instruments in xray"));
    let c = unet_out(&unet, &x, 5, &enc.null());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&a), bits(&c));
}

#[test]
fn unet_gradients_match_finite_differences() {
    let cfg = UnetConfig { channels: [4, 8], context_dim: 6, attn_dim: 5, timesteps: 10, ..Default::default() };
    let mut unet = Unet::new(cfg, 3).unwrap();
    let enc = TextEncoder::new(1);
    let texts = vec![enc.encode("a polyp"), enc.encode("two instruments")];
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut Stream::new(2));
    let target = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut Stream::new(3));
    let loss = |u: &Unet| -> (Tape, msdm_core::tensor::params::Binding, msdm_core::tensor::Var) {
        let mut tape = Tape::new();
        let b = u.params.bind(&mut tape);
        let view = View::new(&u.params, &b);
        let xv = tape.constant(x.shape(), x.data().to_vec()).unwrap();
        let tv = tape.constant(target.shape(), target.data().to_vec()).unwrap();
        let y = u.forward(&mut tape, &view, &LoraBinding::empty(), xv, &[3, 9], &texts).unwrap();
        let l = tape.mse(y, tv).unwrap();
        (tape, b, l)
    };
    let (mut tape, b, l) = loss(&unet);
    tape.backward(l).unwrap();
    unet.params.collect_grads(&tape, &b).unwrap();
    let mut r = Stream::new(4);
    let ids: Vec<_> = unet.params.ids().collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let id = ids[r.index(ids.len())];
        let i = r.index(unet.params.get(id).numel());
        let analytic = unet.params.get(id).grad().unwrap()[i];
        let orig = unet.params.get(id).data()[i];
        unet.params.get_mut(id).data_mut()[i] = orig + h;
        let (t1, _, l1) = loss(&unet);
        unet.params.get_mut(id).data_mut()[i] = orig - h;
        let (t2, _, l2) = loss(&unet);
        unet.params.get_mut(id).data_mut()[i] = orig;
        let numeric = (t1.value(l1)[0] - t2.value(l2)[0]) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
    }
    assert!(worst < 1e-5, "{worst}");
}
