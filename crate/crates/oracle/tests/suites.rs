use sptok_core::network::{ModelConfig, Network};
use sptok_core::{loss, Rng, Tensor};
use sptok_oracle::{run_suite, straightline_forward, Suite};

fn assert_suite(suite: Suite, trials: usize) {
    let reports = run_suite(suite, trials, 2024).unwrap();
    assert_eq!(reports.len(), trials);
    for r in &reports {
        assert!(r.pass, "{r}");
    }
}

#[test]
fn mask_suite() {
    assert_suite(Suite::Mask, 50);
}

#[test]
fn topk_suite() {
    assert_suite(Suite::Topk, 50);
}

#[test]
fn scatter_suite() {
    assert_suite(Suite::Scatter, 50);
}

#[test]
fn sagem_suite() {
    assert_suite(Suite::Sagem, 50);
}

#[test]
fn salrm_suite() {
    assert_suite(Suite::Salrm, 50);
}

#[test]
fn forward_suite() {
    assert_suite(Suite::Forward, 10);
}

#[test]
fn reports_are_deterministic() {
    let a = run_suite(Suite::Sagem, 3, 9).unwrap();
    let b = run_suite(Suite::Sagem, 3, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zeroed_network_gives_constant_maps() {
    let mut net = Network::new(ModelConfig::tiny()).unwrap();
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        let bias = net.store.name(id) == "dec1.head.b";
        net.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = if bias { 0.7 } else { 0.0 });
    }
    let mut rng = Rng::new(3);
    let rgb = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let depth = Tensor::uniform(&[1, 32, 32], 0.0, 1.0, &mut rng);
    let expected = 1.0 / (1.0 + (-0.7f64).exp());
    let got = net.predict(&rgb, &depth).unwrap();
    let want = straightline_forward(&net.store, &net.config, &rgb, &depth).unwrap();
    for map in [got.prediction(), want.prediction()] {
        assert!(map.data().iter().all(|v| (v - expected).abs() < 1e-12));
    }
}

#[test]
fn weight_perturbation_moves_both_implementations() {
    let mut net = Network::new(ModelConfig { seed: 5, ..ModelConfig::tiny() }).unwrap();
    let mut rng = Rng::new(8);
    let rgb = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let depth = Tensor::uniform(&[1, 32, 32], 0.0, 1.0, &mut rng);
    let before = net.predict(&rgb, &depth).unwrap();
    let id = net.store.id("fuse2.attn.v.w").unwrap();
    net.store.get_mut(id).data_mut()[3] += 0.25;
    let after = net.predict(&rgb, &depth).unwrap();
    let oracle = straightline_forward(&net.store, &net.config, &rgb, &depth).unwrap();
    let moved = before.prediction().max_abs_diff(after.prediction()).unwrap();
    assert!(moved > 1e-6);
    for (a, b) in after.maps.iter().zip(&oracle.maps) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-8);
    }
}

#[test]
fn loss_matches_scalar_loop() {
    let mut rng = Rng::new(12);
    for _ in 0..20 {
        let pred = Tensor::uniform(&[6, 7], 0.0, 1.0, &mut rng);
        let gt: Vec<f64> = (0..42).map(|_| f64::from(u8::from(rng.next_f64() < 0.4))).collect();
        let gt = Tensor::new(&[6, 7], gt).unwrap();
        let got = loss::evaluate(&pred, &gt).unwrap();
        let (bce, iou) = sptok_oracle::loss::hybrid(pred.data(), gt.data());
        assert!((got.bce - bce).abs() < 1e-12);
        assert!((got.iou - iou).abs() < 1e-12);
    }
}
