use std::collections::BTreeMap;

use chatnmt_core::tensor::{Adam, AdamConfig};
use chatnmt_core::Tensor;

/// Textbook scalar Adam, written independently of the library's loop.
fn reference_adam(x0: f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.998f64, 1e-9);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut path = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        x -= lr * mh / (vh.sqrt() + eps);
        path.push(x);
    }
    path
}

#[test]
fn minimizes_a_parabola_like_the_reference() {
    let expected = reference_adam(1.0, 0.1, 100);
    let mut params = BTreeMap::from([("x".to_string(), Tensor::scalar(1.0))]);
    let mut adam = Adam::new(AdamConfig::default());
    for (step, want) in expected.iter().enumerate() {
        let x = params["x"].data()[0];
        let grads = BTreeMap::from([("x".to_string(), vec![2.0 * x])]);
        adam.step(&mut params, &grads, 0.1).unwrap();
        let got = params["x"].data()[0];
        assert!((got - want).abs() < 1e-12, "step {step}: {got} vs {want}");
    }
    assert_eq!(adam.step_count(), 100);
    assert!(params["x"].data()[0].abs() < 0.2);
}
