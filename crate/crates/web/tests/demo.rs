use acla_web::{gate_explorer, module_cost, sample_keys, GATE_BINS, KEY_FIELDS};

#[test]
fn gate_explorer_layout_and_limits() {
    let out = gate_explorer(0.8, 0.1, 4000, 1).unwrap();
    assert_eq!(out.len(), 4 + GATE_BINS);
    assert_eq!(out[1], 1.0);
    let hist: f64 = out[4..].iter().sum();
    assert!((hist - 1.0).abs() < 1e-12);
    let edge = out[4] + out[3 + GATE_BINS];
    assert!(edge > 0.8, "mass at the ends {edge}");
    // P(on) = sigmoid(alpha) for logistic noise, whatever tau is
    let p = 1.0 / (1.0 + (-0.8f64).exp());
    assert!((out[3] - p).abs() < 0.03, "{} vs {p}", out[3]);
    assert!(gate_explorer(0.0, 0.0, 10, 1).is_err());
}

#[test]
fn sample_keys_reports_k_per_layer_at_most() {
    let (size, layers, k) = (12, 3, 4);
    let out = sample_keys(size, layers, k, 5, 6, 0.5, 1.0, 7).unwrap();
    let keys = &out[size * size..];
    assert_eq!(keys.len() % KEY_FIELDS, 0);
    assert_eq!(keys.len() / KEY_FIELDS, layers * k);
    for rec in keys.chunks(KEY_FIELDS) {
        assert!((1.0..=layers as f64).contains(&rec[0]));
        assert!(rec[5] == 0.0 || rec[5] == 1.0);
    }
    let wsum: f64 = keys.chunks(KEY_FIELDS).map(|r| r[4]).sum();
    assert!((wsum - 1.0).abs() < 1e-9);
    let still = sample_keys(size, layers, k, 5, 6, 0.0, 1.0, 7).unwrap();
    for rec in still[size * size..].chunks(KEY_FIELDS) {
        assert_eq!((rec[2], rec[3]), (5.0, 6.0));
    }
    assert!(sample_keys(size, layers, k, 12, 0, 0.5, 1.0, 7).is_err());
}

#[test]
fn module_cost_worked_case() {
    assert_eq!(module_cost(4, 2, 2, vec![1.0], vec![1.0, 1.0], false).unwrap(), vec![64.0, 256.0, 320.0]);
    assert_eq!(module_cost(4, 2, 2, vec![0.0], vec![1.0, 1.0], false).unwrap()[2], 0.0);
    assert!(module_cost(4, 2, 2, vec![1.0, 1.0], vec![1.0, 1.0], false).is_err());
}
