use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::check_param_elements;
use crate::tensor::ParamId;
use crate::train::loss::{
    ideal_mask, loss_asym, loss_echo_weighted, loss_mask, loss_total, loss_vad, LossConfig, LossVars,
};

fn tiny() -> NetConfig {
    NetConfig {
        pe_channels: 4,
        encoder_channels: vec![4, 6],
        tfcm_layers: 2,
        zom_stcm_hidden: 8,
        fom_stcm_hidden: 8,
        fom_context: 2,
        dprnn_hidden: 4,
        vad_channels: 2,
        vad_hidden: 4,
        bins: 16,
        ..NetConfig::desk()
    }
}

fn rand_tensor<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect(),
    }
}

fn rand_map<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> ComplexMap<T> {
    ComplexMap {
        re: rand_tensor(shape, rng),
        im: rand_tensor(shape, rng),
    }
}

fn rand_input<T: Real>(cfg: &NetConfig, frames: usize, seed: u64) -> NetInput<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.subbands, frames, cfg.bins];
    NetInput {
        d: rand_map(&shape, &mut rng),
        e: rand_map(&shape, &mut rng),
        x: rand_map(&shape, &mut rng),
    }
}

/// Runs `net_forward` in evaluation mode and hands back the tape.
fn run(cfg: &NetConfig, store: &ParamStore<f64>, input: &NetInput<f64>) -> (Tape<f64>, NetVars) {
    let mut store = store.clone();
    let mut tape = Tape::new();
    let mut g = Graph {
        tape: &mut tape,
        store: &mut store,
        mode: BatchNormMode::Eval,
        init: None,
    };
    let v = net_forward(&mut g, cfg, input).unwrap();
    (tape, v)
}

fn set(store: &mut ParamStore<f64>, name: &str, f: impl Fn(&[usize], usize) -> f64) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let p = store.get_mut(id);
    let shape = p.value.shape.clone();
    for (i, v) in p.value.data.iter_mut().enumerate() {
        *v = f(&shape, i);
    }
}

/// Identity `(2, 3)` kernel under the causal padding: tap `[c, c, 1, 1]`.
fn identity_kernel(shape: &[usize], i: usize) -> f64 {
    let (ci, kh, kw) = (shape[1], shape[2], shape[3]);
    let (o, rest) = (i / (ci * kh * kw), i % (ci * kh * kw));
    let (c, t, f) = (rest / (kh * kw), (rest / kw) % kh, rest % kw);
    if o == c && t == 1 && f == 1 {
        1.0
    } else {
        0.0
    }
}

fn gated_identity(gate_bias: f64) -> (NetConfig, ParamStore<f64>) {
    let cfg = NetConfig {
        pe_channels: 4,
        ..tiny()
    };
    let mut store = init_params::<f64>(&cfg, 1).unwrap();
    for n in ["pe.d", "pe.e", "pe.x", "pe.c2r"] {
        set(&mut store, &format!("{n}.w_re"), identity_kernel);
        set(&mut store, &format!("{n}.w_im"), |_, _| 0.0);
    }
    set(&mut store, "pe.gate.weight", |_, _| 0.0);
    set(&mut store, "pe.gate.bias", |_, _| gate_bias);
    (cfg, store)
}

#[test]
fn open_gate_with_identity_kernels_gives_modulus_of_sum() {
    let (cfg, store) = gated_identity(1e3);
    let input = rand_input::<f64>(&cfg, 5, 2);
    let (tape, v) = run(&cfg, &store, &input);
    let mag = tape.value(v.features.mag);
    let (d, e, x) = (&input.d, &input.e, &input.x);
    for i in 0..mag.numel() {
        let re = d.re.data[i] + e.re.data[i] + x.re.data[i];
        let im = d.im.data[i] + e.im.data[i] + x.im.data[i];
        assert!((mag.data[i] - re.hypot(im)).abs() < 1e-6, "bin {i}");
    }
}

#[test]
fn closed_gate_zeroes_the_feature() {
    let (cfg, store) = gated_identity(-1e3);
    let (tape, v) = run(&cfg, &store, &rand_input(&cfg, 5, 3));
    assert!(tape.value(v.features.mag).data.iter().all(|&m| m.abs() < 1e-12));
}

#[test]
fn random_weights_shapes_and_finiteness() {
    let cfg = tiny();
    let store = init_params::<f64>(&cfg, 4).unwrap();
    let (tape, v) = run(&cfg, &store, &rand_input(&cfg, 7, 5));
    assert_eq!(tape.shape(v.features.mag), [cfg.pe_channels, 7, cfg.bins]);
    assert_eq!(tape.shape(v.features.re), [cfg.pe_channels, 7, cfg.bins]);
    for var in [v.enhanced_re, v.enhanced_im, v.zom.zero_order_mag, v.first_re, v.first_im] {
        assert_eq!(tape.shape(var), [cfg.subbands, 7, cfg.bins]);
        assert!(tape.value(var).is_finite());
    }
    assert_eq!(tape.shape(v.vad), [7]);
    assert_eq!(tape.shape(v.zom.bottleneck), [6, 7, cfg.bins / 4]);
    assert!(tape.value(v.zom.zero_order_mag).data.iter().all(|&m| m >= 0.0));
}

#[test]
fn stride_bookkeeping() {
    let mut cfg = NetConfig::desk();
    assert!(cfg.validate().is_ok());
    cfg.bins = 129;
    assert!(cfg.validate().is_err());
    assert!(init_params::<f32>(&cfg, 0).is_err());
}

#[test]
fn zero_input_gives_zero_output_magnitude() {
    let cfg = tiny();
    let store = init_params::<f64>(&cfg, 6).unwrap();
    let shape = [cfg.subbands, 4, cfg.bins];
    let input = NetInput {
        d: ComplexMap::zeros(&shape),
        e: ComplexMap::zeros(&shape),
        x: ComplexMap::zeros(&shape),
    };
    let (tape, v) = run(&cfg, &store, &input);
    assert!(tape.value(v.zom.mask).is_finite());
    assert!(tape.value(v.zom.zero_order_mag).data.iter().all(|&m| m == 0.0));
}

#[test]
fn future_frames_do_not_affect_the_past() {
    for gated in [true, false] {
        let cfg = tiny().with_ablation(true, gated);
        let store = init_params::<f64>(&cfg, 7).unwrap();
        let frames = 12;
        let cut = 6;
        let a = rand_input::<f64>(&cfg, frames, 8);
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in [&mut b.d, &mut b.e, &mut b.x] {
            for plane in [&mut m.re, &mut m.im] {
                for band in 0..cfg.subbands {
                    for t in cut + 1..frames {
                        let base = (band * frames + t) * cfg.bins;
                        for v in &mut plane.data[base..base + cfg.bins] {
                            *v = rng.gen_range(-3.0..3.0);
                        }
                    }
                }
            }
        }
        let (ta, va) = run(&cfg, &store, &a);
        let (tb, vb) = run(&cfg, &store, &b);
        let past = |tape: &Tape<f64>, var: Var| -> Vec<f64> {
            let t = tape.value(var);
            let (c, f) = (t.shape[0], t.shape[2]);
            (0..c)
                .flat_map(|ch| {
                    let base = ch * frames * f;
                    t.data[base..base + (cut + 1) * f].to_vec()
                })
                .collect()
        };
        for (x, y) in [
            (va.enhanced_re, vb.enhanced_re),
            (va.enhanced_im, vb.enhanced_im),
            (va.zom.mask, vb.zom.mask),
        ] {
            let (p, q) = (past(&ta, x), past(&tb, y));
            assert!(p.iter().zip(&q).all(|(u, w)| (u - w).abs() < 1e-12));
        }
        assert_eq!(ta.value(va.vad).data[..=cut], tb.value(vb.vad).data[..=cut]);
        // The perturbation does reach later frames.
        assert_ne!(ta.value(va.enhanced_re).data, tb.value(vb.enhanced_re).data);
    }
}

#[test]
fn zero_heads_give_zero_residual() {
    let cfg = tiny();
    let mut store = init_params::<f64>(&cfg, 10).unwrap();
    for n in ["fom.real", "fom.imag"] {
        set(&mut store, &format!("{n}.weight"), |_, _| 0.0);
        set(&mut store, &format!("{n}.bias"), |_, _| 0.0);
    }
    let (tape, v) = run(&cfg, &store, &rand_input(&cfg, 5, 11));
    assert!(tape.value(v.first_re).data.iter().all(|&x| x == 0.0));
    assert!(tape.value(v.first_im).data.iter().all(|&x| x == 0.0));
    assert_eq!(tape.shape(v.first_re), [cfg.subbands, 5, cfg.bins]);
}

#[test]
fn vad_is_bounded_and_settles() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut g = Graph {
        tape: &mut tape,
        store: &mut store,
        mode: BatchNormMode::Eval,
        init: Some(&mut rng),
    };
    let frames = 400;
    let x = g.constant(Tensor::full(&[6, frames, 4], 0.7));
    let p = vad_forward(&mut g, &cfg, x).unwrap();
    let v = &tape.value(p).data;
    assert_eq!(v.len(), frames);
    assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
    let tail = &v[frames - 10..];
    assert!(tail.iter().all(|&p| (p - tail[0]).abs() < 1e-4));
}

#[test]
fn taylor_combination_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shape = [2, 3, 4];
    let s: ComplexMap<f64> = rand_map(&shape, &mut rng);
    // Oracle: |S| e^{j arg S} + 0 = S.
    let (cos, sin) = s.phase();
    let mut tape = Tape::new();
    let mag = tape.constant(s.magnitude());
    let (c, si) = (tape.constant(cos.clone()), tape.constant(sin.clone()));
    let zero = tape.constant(Tensor::zeros(&shape));
    let (er, ei) = taylor_combine(&mut tape, mag, c, si, zero, zero).unwrap();
    for i in 0..s.re.numel() {
        assert!((tape.value(er).data[i] - s.re.data[i]).abs() < 1e-12);
        assert!((tape.value(ei).data[i] - s.im.data[i]).abs() < 1e-12);
    }

    // Random first-order term: the remainder keeps the phase of D and the
    // difference has the modulus of the residual.
    let d: ComplexMap<f64> = rand_map(&shape, &mut rng);
    let first: ComplexMap<f64> = rand_map(&shape, &mut rng);
    let zmag = rand_tensor::<f64>(&shape, &mut rng);
    let zmag = Tensor {
        data: zmag.data.iter().map(|v| v.abs()).collect(),
        ..zmag
    };
    let (dc, ds) = d.phase();
    let mut tape = Tape::new();
    let (m, c, s_) = (tape.constant(zmag.clone()), tape.constant(dc.clone()), tape.constant(ds.clone()));
    let (fr, fi) = (tape.constant(first.re.clone()), tape.constant(first.im.clone()));
    let (er, ei) = taylor_combine(&mut tape, m, c, s_, fr, fi).unwrap();
    for i in 0..zmag.numel() {
        let rr = tape.value(er).data[i] - first.re.data[i];
        let ri = tape.value(ei).data[i] - first.im.data[i];
        if rr.hypot(ri) > 1e-8 {
            let cross = rr * ds.data[i] - ri * dc.data[i];
            let dot = rr * dc.data[i] + ri * ds.data[i];
            assert!(cross.abs() / rr.hypot(ri) < 1e-6 && dot > 0.0);
        }
        let zr = zmag.data[i] * dc.data[i];
        let zi = zmag.data[i] * ds.data[i];
        let diff = (tape.value(er).data[i] - zr).hypot(tape.value(ei).data[i] - zi);
        assert!((diff - first.re.data[i].hypot(first.im.data[i])).abs() < 1e-12);
    }
}

#[test]
fn ablation_parameter_counts_increase() {
    let base = param_count(&NetConfig::desk().with_ablation(false, false)).unwrap();
    let tfcm = param_count(&NetConfig::desk().with_ablation(true, false)).unwrap();
    let full = param_count(&NetConfig::desk()).unwrap();
    assert!(base < tfcm && tfcm < full, "{base} {tfcm} {full}");
    assert!(full <= 2_000_000, "{full}");
    let wide = param_count(&NetConfig::wide()).unwrap();
    println!("parameters: desk {full}, wide preset {wide}");
    assert!(wide > full);
}

#[test]
fn untrained_forward_is_bounded_and_keeps_length() {
    use crate::simulate::{speech_like, white_noise};
    let net = TaylorAecNet::new(NetConfig::desk(), 14).unwrap();
    let n = 12_345;
    let d = speech_like(n, 48_000, 1);
    let e = d.scaled(0.5);
    let x = white_noise(n, 48_000, 2);
    let (out, o) = net.forward(&d, &e, &x).unwrap();
    assert_eq!(out.len(), n);
    assert!(out.samples.iter().all(|v| v.is_finite()));
    assert!(out.power().sqrt() <= 10.0 * d.power().sqrt());
    assert!(o.vad_prob.iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(o.vad_prob.len(), net.frontend.frames(n));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig {
        bins: 128,
        ..tiny()
    };
    let net = TaylorAecNet::new(cfg.clone(), 15).unwrap();
    let p = dir.path().join("net.ckpt");
    net.save(&p).unwrap();
    let back = TaylorAecNet::load(cfg.clone(), &p).unwrap();
    assert_eq!(store_entries(&back.store), store_entries(&net.store));
    let other = NetConfig {
        pe_channels: 5,
        ..cfg
    };
    assert!(TaylorAecNet::load(other, &p).is_err());
}

/// Total training loss on a tiny random problem, for gradient checks.
fn total_loss(
    tape: &mut Tape<f64>,
    store: &mut ParamStore<f64>,
    cfg: &NetConfig,
    input: &NetInput<f64>,
    target: &ComplexMap<f64>,
    labels: &[u8],
) -> crate::Result<Var> {
    let lc = LossConfig::default();
    let mut g = Graph {
        tape,
        store,
        mode: BatchNormMode::Train,
        init: None,
    };
    let v = net_forward(&mut g, cfg, input)?;
    let est = (v.enhanced_re, v.enhanced_im);
    let ideal = ideal_mask(&input.d, target)?;
    let parts = LossVars {
        echo_weighted: loss_echo_weighted(tape, est, target, labels, &lc)?,
        asym: loss_asym(tape, est, target, &lc)?,
        mask: loss_mask(tape, v.zom.mask, &ideal)?,
        vad: loss_vad(tape, v.vad, labels)?,
    };
    loss_total(tape, &parts, &lc)
}

#[test]
fn module_gradients_match_finite_differences() {
    let cfg = tiny();
    let frames = 6;
    let mut store = init_params::<f64>(&cfg, 16).unwrap();
    let input = rand_input::<f64>(&cfg, frames, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let target = rand_map::<f64>(&[cfg.subbands, frames, cfg.bins], &mut rng);
    let labels: Vec<u8> = (0..frames).map(|t| (t % 2) as u8).collect();
    for module in ["pe.", "zom.", "fom.", "vad."] {
        let mut all: Vec<(ParamId, usize)> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(module))
            .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
            .collect();
        assert!(!all.is_empty(), "{module}");
        all.shuffle(&mut rng);
        all.truncate(20);
        let r = check_param_elements(&mut store, &all, |t, s| {
            total_loss(t, s, &cfg, &input, &target, &labels)
        })
        .unwrap();
        assert_eq!(r.checked, 20);
        assert!(r.max_rel_err < 1e-4, "{module}: {r:?}");
    }
}
