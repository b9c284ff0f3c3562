//! Full finite-difference sweep over every differentiable primitive: 50
//! random shape/value cases each, centered differences with h = 1e-5,
//! max relative error 1e-4.

use cdlab::autograd::check::{check_all_primitives, PRIMITIVE_KINDS};

#[test]
fn all_primitives_match_finite_differences() {
    let report = check_all_primitives(0xC0FFEE, 50, 1e-5, 1e-4).expect("gradient check failed");
    assert_eq!(report.cases, 50 * PRIMITIVE_KINDS);
    assert!(
        report.max_rel_err <= 1e-4,
        "worst {} at {:.3e}",
        report.worst_case,
        report.max_rel_err
    );
}

#[test]
fn backward_is_linear_in_the_output() {
    // For h = a*f + b*g built on one tape, grad(h) must equal the same
    // combination of the separately computed gradients of f and g.
    use cdlab::autograd::{Tape, Tensor};

    let x0 = Tensor::from_vec(vec![3], vec![0.4, -1.2, 2.0]).unwrap();
    let (a, b) = (1.75, -0.6);

    let grad_of = |mode: u8| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone().requires_grad(true));
        let f = {
            let s = tape.tanh(x).unwrap();
            tape.sum(s).unwrap()
        };
        let g = {
            let m = tape.mul(x, x).unwrap();
            tape.mean(m).unwrap()
        };
        let out = match mode {
            0 => f,
            1 => g,
            _ => {
                let fa = tape.scale(f, a).unwrap();
                let gb = tape.scale(g, b).unwrap();
                tape.add(fa, gb).unwrap()
            }
        };
        tape.backward(out).unwrap().take(x).unwrap()
    };

    let gf = grad_of(0);
    let gg = grad_of(1);
    let gh = grad_of(2);
    for i in 0..3 {
        let expect = a * gf[i] + b * gg[i];
        assert!((gh[i] - expect).abs() < 1e-12, "coordinate {i}: {} vs {}", gh[i], expect);
    }
}

#[test]
fn three_layer_network_gradients_match() {
    // End-to-end composite: conv -> relu -> pool -> flatten -> dense -> CE.
    use cdlab::autograd::check::gradcheck_scalar;
    use cdlab::autograd::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let kernel = Tensor::randn(&[2, 1, 3, 3], 0.5, &mut rng);
    let dense = Tensor::randn(&[2 * 3 * 3, 3], 0.5, &mut rng);
    let img: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();

    let err = gradcheck_scalar(&[2, 1, 3, 3], kernel.data(), 1e-5, |tape, k| {
        let x = tape.constant(Tensor::from_vec(vec![1, 1, 6, 6], img.clone()).unwrap());
        let c = tape.conv2d(x, k, 1)?;
        let r = tape.relu(c)?;
        let p = tape.mean_pool2(r)?;
        let flat = tape.reshape(p, &[1, 2 * 3 * 3])?;
        let w = tape.constant(dense.clone());
        let logits = tape.matmul(flat, w)?;
        tape.softmax_cross_entropy(logits, &[1])
    })
    .unwrap();
    assert!(err <= 1e-4, "composite network gradcheck error {err:.3e}");
}
