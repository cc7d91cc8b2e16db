use super::gradcheck::check_inputs;
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = rand_t(shape, seed);
    t.data.iter_mut().for_each(|v| *v = v.abs() + 0.2);
    t
}

/// Reduces any value to a scalar with a fixed random projection so every
/// output element carries a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var) -> crate::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_t(&shape, 991));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_ok(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>) {
    let r = check_inputs(inputs, |t, v| {
        let y = f(t, v)?;
        project(t, y)
    })
    .unwrap();
    assert!(r.max_rel_err < TOL, "{name}: {r:?}");
}

#[test]
fn elementwise_ops() {
    let a = || rand_t(&[3, 4], 1);
    let b = || rand_t(&[3, 4], 2);
    assert_ok("add", &[a(), b()], |t, v| t.add(v[0], v[1]));
    assert_ok("sub", &[a(), b()], |t, v| t.sub(v[0], v[1]));
    assert_ok("mul", &[a(), b()], |t, v| t.mul(v[0], v[1]));
    assert_ok("scale", &[a()], |t, v| t.scale(v[0], -2.5));
    assert_ok("add_scalar", &[a()], |t, v| t.add_scalar(v[0], 0.7));
    assert_ok("square", &[a()], |t, v| t.square(v[0]));
    assert_ok("sigmoid", &[a()], |t, v| t.sigmoid(v[0]));
    assert_ok("tanh", &[a()], |t, v| t.tanh(v[0]));
    assert_ok("exp", &[a()], |t, v| t.exp(v[0]));
    assert_ok("relu", &[a()], |t, v| t.relu(v[0]));
    assert_ok("leaky_relu", &[a()], |t, v| t.leaky_relu(v[0], 0.01));
    assert_ok("clamp", &[a()], |t, v| t.clamp(v[0], -0.5, 0.5));
    let p = || positive(&[3, 4], 3);
    assert_ok("ln", &[p()], |t, v| t.ln(v[0]));
    assert_ok("sqrt", &[p()], |t, v| t.sqrt(v[0]));
    assert_ok("powf", &[p()], |t, v| t.powf(v[0], 0.3));
    assert_ok("magnitude", &[a(), b()], |t, v| t.magnitude(v[0], v[1], 1e-8));
    assert_ok("mag_pow", &[a(), b()], |t, v| t.mag_pow(v[0], v[1], 0.3, 1e-8));
    assert_ok("mag_pow_neg", &[a(), b()], |t, v| t.mag_pow(v[0], v[1], -0.7, 1e-8));
    assert_ok("mean", &[a()], |t, v| t.mean(v[0]));
    assert_ok("add_n", &[a(), b(), a()], |t, v| t.add_n(v));
}

#[test]
fn broadcast_and_linear_ops() {
    assert_ok("add_broadcast", &[rand_t(&[4, 2, 3], 1), rand_t(&[2, 3], 2)], |t, v| {
        t.add_broadcast(v[0], v[1])
    });
    assert_ok("mul_broadcast", &[rand_t(&[4, 2, 3], 1), rand_t(&[2, 3], 2)], |t, v| {
        t.mul_broadcast(v[0], v[1])
    });
    assert_ok("matmul", &[rand_t(&[3, 5], 3), rand_t(&[5, 2], 4)], |t, v| t.matmul(v[0], v[1]));
    assert_ok("prelu", &[rand_t(&[3, 2, 4], 5), rand_t(&[3], 6)], |t, v| t.prelu(v[0], v[1]));
}

#[test]
fn shape_ops() {
    let x = || rand_t(&[2, 3, 4], 7);
    assert_ok("reshape", &[x()], |t, v| t.reshape(v[0], &[6, 4]));
    assert_ok("permute", &[x()], |t, v| t.permute(v[0], &[2, 0, 1]));
    assert_ok("narrow", &[x()], |t, v| t.narrow(v[0], 2, 1, 2));
    assert_ok("concat", &[x(), rand_t(&[2, 1, 4], 8)], |t, v| t.concat(v, 1));
    assert_ok("repeat_axis", &[x()], |t, v| t.repeat_axis(v[0], 2, 3));
}

#[test]
fn convolutions() {
    let specs = [
        Conv2dSpec::default(),
        Conv2dSpec {
            stride: (1, 2),
            padding: [1, 0, 1, 1],
            ..Default::default()
        },
        Conv2dSpec {
            dilation: (2, 1),
            padding: [4, 0, 1, 1],
            groups: 2,
            ..Default::default()
        },
    ];
    for (i, spec) in specs.into_iter().enumerate() {
        assert_ok(
            &format!("conv2d #{i}"),
            &[rand_t(&[2, 5, 6], 10), rand_t(&[4, 2 / spec.groups, 3, 3], 11), rand_t(&[4], 12)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec),
        );
    }
    for (i, spec) in [
        Conv2dSpec {
            dilation: (2, 1),
            padding: [4, 0, 1, 1],
            groups: 3,
            ..Default::default()
        },
        Conv2dSpec {
            stride: (2, 2),
            padding: [0, 1, 2, 0],
            groups: 3,
            ..Default::default()
        },
    ]
    .into_iter()
    .enumerate()
    {
        assert_ok(
            &format!("depthwise #{i}"),
            &[rand_t(&[3, 6, 7], 16), rand_t(&[3, 1, 3, 3], 17), rand_t(&[3], 18)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec),
        );
    }
    assert_ok(
        "pointwise",
        &[rand_t(&[3, 4, 5], 19), rand_t(&[2, 3, 1, 1], 20), rand_t(&[2], 21)],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::default()),
    );
    let tspecs = [
        ConvTranspose2dSpec::default(),
        ConvTranspose2dSpec {
            stride: (1, 2),
            crop: [1, 0, 1, 0],
            ..Default::default()
        },
        ConvTranspose2dSpec {
            dilation: (2, 1),
            groups: 2,
            ..Default::default()
        },
    ];
    for (i, spec) in tspecs.into_iter().enumerate() {
        assert_ok(
            &format!("conv_transpose2d #{i}"),
            &[rand_t(&[4, 3, 4], 13), rand_t(&[4, 3, 2, 3], 14), rand_t(&[3 * spec.groups], 15)],
            move |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), spec),
        );
    }
}

#[test]
fn batch_norm_both_modes() {
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        assert_ok(
            &format!("batch_norm {mode:?}"),
            &[rand_t(&[3, 4, 5], 20), positive(&[3], 21), rand_t(&[3], 22)],
            move |t, v| {
                let mut store = ParamStore::new();
                store.set_buffer("bn.running_mean", rand_t(&[3], 23));
                store.set_buffer("bn.running_var", positive(&[3], 24));
                t.batch_norm(v[0], v[1], v[2], &mut store, "bn", mode, 0.1, 1e-5)
            },
        );
    }
}

#[test]
fn composed_gru_like_cell() {
    // h' = (1 - z) * n + z * h with sigmoid/tanh gates, a typical
    // multi-use graph where operands feed several consumers.
    assert_ok(
        "gru cell",
        &[rand_t(&[2, 3], 30), rand_t(&[3, 3], 31), rand_t(&[2, 3], 32)],
        |t, v| {
            let (x, w, h) = (v[0], v[1], v[2]);
            let a = t.matmul(x, w)?;
            let z = t.sigmoid(a)?;
            let hx = t.add(a, h)?;
            let n = t.tanh(hx)?;
            let zn = t.mul(z, n)?;
            let one_minus = t.sub(n, zn)?;
            let zh = t.mul(z, h)?;
            t.add(one_minus, zh)
        },
    );
}
