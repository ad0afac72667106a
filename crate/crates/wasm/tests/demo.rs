use derm_wasm::{fd_put_json, heston_smile_json, train_put_json};

#[test]
fn fd_put_reports_a_rising_boundary() {
    let v = fd_put_json(40.0, 40.0, 1.0, 0.06, 0.4).unwrap();
    let price = v["price"].as_f64().unwrap();
    assert!((price - 5.311).abs() < 0.02, "{price}");
    assert!(price > v["european"].as_f64().unwrap());
    let b: Vec<f64> = v["boundary"].as_array().unwrap().iter().filter_map(|x| x.as_f64()).collect();
    assert!(b.len() > 10 && b.windows(2).all(|w| w[0] <= w[1] + 1e-9));
}

#[test]
fn flat_heston_smile_recovers_the_constant_volatility() {
    // with no vol-of-vol the variance is deterministic and equal to v0 when theta = v0
    let v = heston_smile_json(0.04, 1.0, 0.04, 1e-4, 0.0, 0.5, 80.0, 120.0, 5).unwrap();
    for iv in v["implied_vols"].as_array().unwrap() {
        assert!((iv.as_f64().unwrap() - 0.2).abs() < 1e-3, "{iv}");
    }
    let skew = heston_smile_json(0.04, 1.0, 0.04, 0.5, -0.7, 0.5, 80.0, 120.0, 5).unwrap();
    let ivs: Vec<f64> = skew["implied_vols"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(ivs[0] > ivs[4], "negative correlation skews the smile down: {ivs:?}");
}

#[test]
fn small_training_is_close_to_fd() {
    let v = train_put_json(300, 1).unwrap();
    assert!(v["relative_error"].as_f64().unwrap().abs() < 0.05, "{v}");
    assert_eq!(v["losses"].as_array().unwrap().len(), 300);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(fd_put_json(40.0, -1.0, 1.0, 0.06, 0.4).is_err());
    assert!(heston_smile_json(0.04, 1.0, 0.04, 0.3, 0.0, 0.5, 120.0, 80.0, 5).is_err());
    assert!(train_put_json(0, 1).is_err());
}
