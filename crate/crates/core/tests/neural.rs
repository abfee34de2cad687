mod common;

use cgct::bae::{bae_loss, train_bae, BaeConfig, BalancingEncoder};
use cgct::baselines::{fit_ann, fit_drnet, AnnConfig, AnnModel, DrnetConfig, DrnetModel};
use cgct::nn::{grl_scale, Activation, AdamState, DenseGrads, DenseLayer, DenseNet, Mode, OptimizerKind};
use cgct::sample::Sample;
use common::nets::{dual_losses, randomize};
use common::{fd_gradient, relative_error};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn mse_of(net: &DenseNet, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (net.predict(x).unwrap() - y).norm_squared() / x.nrows() as f64
}

#[test]
fn dense_net_gradients_match_finite_differences() {
    let mut rng = common::rng(1);
    for trial in 0..25 {
        let dims = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3)];
        let mut net = DenseNet::mlp(&dims, 0.0, trial).unwrap();
        randomize(&mut net, &mut rng);
        let x = common::random_matrix(&mut rng, 4, dims[0], -1.0, 1.0);
        let y = common::random_matrix(&mut rng, 4, dims[2], -1.0, 1.0);
        let (out, cache) = net.forward(&x, Mode::Inference).unwrap();
        let up = (out - &y) * (2.0 / 4.0);
        let (g, _) = net.backward(&cache, &up).unwrap();
        let fd = fd_gradient(&net.flat_params(), FD_STEP, |p| {
            let mut n = net.clone();
            n.set_flat_params(p).unwrap();
            mse_of(&n, &x, &y)
        });
        let err = relative_error(&g.flatten(), &fd);
        assert!(err < FD_TOL, "trial {trial}: {err}");
    }
}

fn bae_cfg(theta: f64) -> BaeConfig {
    BaeConfig {
        layer_size: 3,
        repr_size: 2,
        learning_rate: 1e-3,
        dropout: 0.0,
        epochs: 1,
        batch_size: 4,
        theta,
        optimizer: OptimizerKind::Adam,
    }
}

#[test]
fn bae_gradients_match_finite_differences() {
    let mut rng = common::rng(2);
    for trial in 0..20 {
        let theta = [0.05, 0.5, 1.0, 5.0][trial % 4];
        let mut model = BalancingEncoder::new(3, &bae_cfg(theta), trial as u64).unwrap();
        for net in [&mut model.encoder, &mut model.decoder, &mut model.head] {
            randomize(net, &mut rng);
        }
        let x = common::random_matrix(&mut rng, 5, 3, 0.0, 1.0);
        let a = common::random_vector(&mut rng, 5, 0.0, 1.0);
        let g = model.gradients(&x, &a, None).unwrap();
        let fd_enc = fd_gradient(&model.encoder.flat_params(), FD_STEP, |p| {
            let mut m = model.clone();
            m.encoder.set_flat_params(p).unwrap();
            m.loss(&x, &a).unwrap().total
        });
        let fd_dec = fd_gradient(&model.decoder.flat_params(), FD_STEP, |p| {
            let mut m = model.clone();
            m.decoder.set_flat_params(p).unwrap();
            m.loss(&x, &a).unwrap().total
        });
        let fd_head = fd_gradient(&model.head.flat_params(), FD_STEP, |p| {
            let mut m = model.clone();
            m.head.set_flat_params(p).unwrap();
            m.loss(&x, &a).unwrap().treatment
        });
        for (name, got, want) in [
            ("encoder", g.encoder.flatten(), fd_enc),
            ("decoder", g.decoder.flatten(), fd_dec),
            ("head", g.head.flatten(), fd_head),
        ] {
            let err = relative_error(&got, &want);
            assert!(err < FD_TOL, "trial {trial} {name}: {err}");
        }
    }
}

fn toy_sample(rng: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> Sample {
    Sample::new(
        common::random_vector(rng, n, -1.0, 1.0),
        common::random_vector(rng, n, 0.0, 1.0),
        common::random_matrix(rng, n, k, 0.0, 1.0),
    )
    .unwrap()
}

#[test]
fn ann_gradients_match_finite_differences() {
    let mut rng = common::rng(3);
    for trial in 0..20 {
        let s = toy_sample(&mut rng, 6, 2);
        let cfg = AnnConfig::with_layer(3, 1e-3, 0.0, 1, 4);
        let (mut model, _) = AnnModel::init(2, &cfg, trial).unwrap();
        randomize(&mut model.net, &mut rng);
        let (_, g) = model.mse_gradients(&s).unwrap();
        let fd = fd_gradient(&model.net.flat_params(), FD_STEP, |p| {
            let mut m = model.clone();
            m.net.set_flat_params(p).unwrap();
            m.mse_gradients(&s).unwrap().0
        });
        let err = relative_error(&g.flatten(), &fd);
        assert!(err < FD_TOL, "trial {trial}: {err}");
    }
}

#[test]
fn drnet_gradients_match_finite_differences() {
    let mut rng = common::rng(4);
    for trial in 0..20 {
        let s = toy_sample(&mut rng, 8, 2);
        let cfg = DrnetConfig {
            layer_size: 3,
            repr_size: 2,
            heads: 1 + trial as usize % 3,
            learning_rate: 1e-3,
            dropout: 0.0,
            epochs: 1,
            batch_size: 4,
        };
        let (lo, hi) = s.treatment_range();
        let (mut model, _) = DrnetModel::init(2, &cfg, lo, hi, trial).unwrap();
        randomize(&mut model.shared, &mut rng);
        for h in model.heads.iter_mut() {
            randomize(h, &mut rng);
        }
        let (_, gs, gh) = model.mse_gradients(&s).unwrap();
        let mut analytic = gs.flatten();
        for h in &gh {
            analytic.extend(h.flatten());
        }
        let mut params = model.shared.flat_params();
        for h in &model.heads {
            params.extend(h.flat_params());
        }
        let fd = fd_gradient(&params, FD_STEP, |p| {
            let mut m = model.clone();
            let mut off = m.shared.parameter_count();
            m.shared.set_flat_params(&p[..off]).unwrap();
            for h in m.heads.iter_mut() {
                let c = h.parameter_count();
                h.set_flat_params(&p[off..off + c]).unwrap();
                off += c;
            }
            m.mse_gradients(&s).unwrap().0
        });
        let err = relative_error(&analytic, &fd);
        assert!(err < FD_TOL, "trial {trial}: {err}");
    }
}

#[test]
fn treatment_derivatives_match_finite_differences() {
    let mut rng = common::rng(5);
    let s = toy_sample(&mut rng, 30, 2);
    let ann = fit_ann(&s, &AnnConfig::with_layer(4, 1e-2, 0.0, 5, 8), 1).unwrap();
    let cfg = DrnetConfig {
        layer_size: 4,
        repr_size: 3,
        heads: 3,
        learning_rate: 1e-2,
        dropout: 0.0,
        epochs: 5,
        batch_size: 8,
    };
    let dr = fit_drnet(&s, &cfg, 1).unwrap();
    for _ in 0..20 {
        let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        // Stay clear of stratum edges so the finite difference sees one head.
        let a = 0.05 + 0.25 * rng.random_range(0.0..1.0);
        let fd_ann = (ann.predict(a + FD_STEP, &x).unwrap() - ann.predict(a - FD_STEP, &x).unwrap()) / (2.0 * FD_STEP);
        let fd_dr = (dr.predict(a + FD_STEP, &x).unwrap() - dr.predict(a - FD_STEP, &x).unwrap()) / (2.0 * FD_STEP);
        assert!(relative_error(&[ann.derivative(a, &x).unwrap()], &[fd_ann]) < FD_TOL);
        assert!(relative_error(&[dr.derivative(a, &x).unwrap()], &[fd_dr]) < FD_TOL);
    }
}

#[test]
fn two_layer_relu_net_matches_manual_arithmetic() {
    let l1 = DenseLayer {
        weights: DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.25]),
        bias: DVector::from_vec(vec![0.1, -0.3]),
        activation: Activation::Relu,
    };
    let l2 = DenseLayer {
        weights: DMatrix::from_row_slice(1, 2, &[2.0, -1.0]),
        bias: DVector::from_vec(vec![0.5]),
        activation: Activation::Linear,
    };
    let net = DenseNet::from_layers(vec![l1, l2], 0.0).unwrap();
    let x = [0.4, 0.7];
    let h1 = (1.0f64 * 0.4 - 2.0 * 0.7 + 0.1).max(0.0);
    let h2 = (0.5f64 * 0.4 + 0.25 * 0.7 - 0.3).max(0.0);
    assert_eq!(net.predict_row(&x).unwrap(), vec![2.0 * h1 - h2 + 0.5]);
}

#[test]
fn adam_two_steps_match_hand_recursion() {
    let layer = DenseLayer {
        weights: DMatrix::from_element(1, 1, 0.3),
        bias: DVector::from_element(1, 0.0),
        activation: Activation::Linear,
    };
    let mut net = DenseNet::from_layers(vec![layer], 0.0).unwrap();
    let mut adam = AdamState::new(&net, 0.1);
    let g = DenseGrads {
        layers: vec![(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1))],
    };
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        adam.step(&mut net, &g).unwrap();
        m = b1 * m + (1.0 - b1);
        v = b2 * v + (1.0 - b2);
        w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        assert!((net.layers[0].weights[(0, 0)] - w).abs() < 1e-15);
    }
    assert_eq!(adam.step, 2);
}

#[test]
fn grl_examples() {
    let g = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
    assert_eq!(grl_scale(&g, 1.0), DMatrix::from_row_slice(1, 2, &[-1.0, 2.0]));
    assert_eq!(grl_scale(&DMatrix::from_element(1, 1, 4.0), 0.5)[(0, 0)], -2.0);
}

#[test]
fn single_sgd_step_reproduces_reversed_update() {
    let mut rng = common::rng(6);
    for trial in 0..5u64 {
        let cfg = BaeConfig {
            layer_size: 2,
            repr_size: 1,
            learning_rate: 0.05,
            dropout: 0.0,
            epochs: 1,
            batch_size: 16,
            theta: [0.5, 1.0, 5.0, 0.1, 0.05][trial as usize],
            optimizer: OptimizerKind::Sgd,
        };
        let x = common::random_matrix(&mut rng, 6, 2, 0.0, 1.0);
        let a = common::random_vector(&mut rng, 6, 0.0, 1.0);
        let before = BalancingEncoder::new(2, &cfg, trial).unwrap();
        let (after, _) = train_bae(&x, &a, &cfg, trial).unwrap();
        let (eta, theta) = (cfg.learning_rate, cfg.theta);
        for (which, net_before, net_after) in [
            (0, &before.encoder, &after.encoder),
            (1, &before.decoder, &after.decoder),
            (2, &before.head, &after.head),
        ] {
            let wb = net_before.flat_params();
            let wa = net_after.flat_params();
            for k in 0..wb.len() {
                let (lx, la) = dual_losses(&before, &x, &a, which, k);
                let (g_x, g_a) = (lx.1, la.1);
                let expected = match which {
                    // W_phi - eta (g1 - theta g2)
                    0 => wb[k] - eta * (g_x - theta * g_a),
                    // W_gx - eta g3
                    1 => wb[k] - eta * g_x,
                    // W_ga - eta theta g4
                    _ => wb[k] - eta * theta * g_a,
                };
                assert!(
                    (wa[k] - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
                    "trial {trial} net {which} param {k}: {} vs {expected}",
                    wa[k]
                );
            }
        }
    }
}

#[test]
fn loss_examples_and_recomputation() {
    let x = DMatrix::from_row_slice(1, 2, &[0.25, 0.5]);
    let xh = DMatrix::from_row_slice(1, 2, &[1.25, 1.5]);
    let a = DVector::from_vec(vec![0.3]);
    let l = bae_loss(&x, &xh, &a, &a, 2.0);
    assert_eq!((l.total, l.reconstruction, l.treatment), (1.0, 1.0, 0.0));
    let l = bae_loss(&x, &x, &a, &a, 2.0);
    assert_eq!((l.total, l.reconstruction, l.treatment), (0.0, 0.0, 0.0));

    let mut rng = common::rng(7);
    for _ in 0..10 {
        let x = common::random_matrix(&mut rng, 3, 4, 0.0, 1.0);
        let xh = common::random_matrix(&mut rng, 3, 4, 0.0, 1.0);
        let a = common::random_vector(&mut rng, 3, 0.0, 1.0);
        let ah = common::random_vector(&mut rng, 3, 0.0, 1.0);
        let theta = rng.random_range(0.05..5.0);
        let mut lx = 0.0;
        let mut la = 0.0;
        for i in 0..3 {
            lx += (0..4).map(|j| (x[(i, j)] - xh[(i, j)]).powi(2)).sum::<f64>() / 4.0 / 3.0;
            la += (a[i] - ah[i]).powi(2) / 3.0;
        }
        let l = bae_loss(&x, &xh, &a, &ah, theta);
        assert!((l.total - (lx - theta * la)).abs() < 1e-14);
    }
}

fn r_squared(features: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let design = cgct::linalg::with_intercept(features);
    let beta = common::normal_equations(&design, y);
    let fitted = &design * DVector::from_vec(beta);
    let mean = y.mean();
    let ss_res = (y - fitted).norm_squared();
    let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    1.0 - ss_res / ss_tot
}

#[test]
fn representation_is_less_predictive_of_treatment() {
    let mut rng = common::rng(8);
    let n = 200;
    let a = common::random_vector(&mut rng, n, 0.0, 1.0);
    let x2 = common::random_vector(&mut rng, n, 0.0, 1.0);
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { a[i] } else { x2[i] });
    let cfg = BaeConfig {
        layer_size: 7,
        repr_size: 1,
        learning_rate: 1e-3,
        dropout: 0.0,
        epochs: 200,
        batch_size: 22,
        theta: 5.0,
        optimizer: OptimizerKind::Adam,
    };
    let (enc, _) = train_bae(&x, &a, &cfg, 3).unwrap();
    let z = enc.embed(&x).unwrap();
    let (rz, rx) = (r_squared(&z, &a), r_squared(&x, &a));
    assert!(rz < rx, "R²(a~Z)={rz} R²(a~X)={rx}");
}

#[test]
fn small_theta_behaves_like_plain_autoencoder() {
    let mut rng = common::rng(9);
    let x = common::random_matrix(&mut rng, 60, 4, 0.0, 1.0);
    let a = common::random_vector(&mut rng, 60, 0.0, 1.0);
    let cfg = BaeConfig {
        layer_size: 7,
        repr_size: 2,
        learning_rate: 1e-3,
        dropout: 0.0,
        epochs: 100,
        batch_size: 11,
        theta: 1e-9,
        optimizer: OptimizerKind::Adam,
    };
    let initial = BalancingEncoder::new(4, &cfg, 5).unwrap().loss(&x, &a).unwrap();
    let (trained, _) = train_bae(&x, &a, &cfg, 5).unwrap();
    assert!(trained.loss(&x, &a).unwrap().reconstruction <= initial.reconstruction);
}

#[test]
fn training_is_deterministic_and_embedding_consistent() {
    let mut rng = common::rng(10);
    let x = common::random_matrix(&mut rng, 30, 5, 0.0, 1.0);
    let a = common::random_vector(&mut rng, 30, 0.0, 1.0);
    let cfg = BaeConfig {
        dropout: 0.1,
        epochs: 5,
        ..bae_cfg(1.0)
    };
    let (m1, _) = train_bae(&x, &a, &cfg, 4).unwrap();
    let (m2, _) = train_bae(&x, &a, &cfg, 4).unwrap();
    assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
    assert_eq!(m1.embed(&DMatrix::zeros(0, 5)).unwrap().nrows(), 0);
    let twin = DMatrix::from_fn(2, 5, |_, j| x[(0, j)]);
    let z = m1.embed(&twin).unwrap();
    assert_eq!(z.row(0), z.row(1));
    let z = m1.embed(&x).unwrap();
    let via_ops = bae_loss(&x, &m1.decode(&z).unwrap(), &a, &m1.predict_treatment(&z).unwrap().column(0).into_owned(), m1.theta);
    assert_eq!(via_ops, m1.loss(&x, &a).unwrap());
    assert!(BalancingEncoder::new(5, &BaeConfig { repr_size: 5, ..cfg }, 1).is_err());
}

#[test]
fn single_head_drnet_equals_ann_with_matching_layers() {
    let mut rng = common::rng(11);
    let s = toy_sample(&mut rng, 40, 3);
    for dropout in [0.0, 0.2] {
        let dcfg = DrnetConfig {
            layer_size: 5,
            repr_size: 3,
            heads: 1,
            learning_rate: 1e-2,
            dropout,
            epochs: 10,
            batch_size: 6,
        };
        let acfg = AnnConfig {
            hidden: vec![5, 3, 5],
            learning_rate: 1e-2,
            dropout,
            epochs: 10,
            batch_size: 6,
        };
        let dr = fit_drnet(&s, &dcfg, 21).unwrap();
        let ann = fit_ann(&s, &acfg, 21).unwrap();
        for i in 0..s.n() {
            let x: Vec<f64> = s.features.row(i).iter().copied().collect();
            assert_eq!(dr.predict(s.a[i], &x).unwrap(), ann.predict(s.a[i], &x).unwrap());
        }
    }
}

#[test]
fn first_epoch_lowers_loss_on_default_settings() {
    use cgct::data::{impute_knn, load_panel, DEFAULT_KNN_K};
    use cgct::pipeline::HyperParams;
    use cgct::semi_synthetic::SemiSynthetic;
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/hiv_panel.csv");
    let panel = impute_knn(&load_panel(path).unwrap(), DEFAULT_KNN_K).unwrap();
    let setup = SemiSynthetic::standard(&panel.for_year(2016).unwrap(), &panel.for_year(2017).unwrap()).unwrap();
    let x = setup.scalers.scale_covariates(&setup.train).unwrap();
    let a = setup.scalers.scale_treatments(&setup.train).unwrap();
    let cfg = BaeConfig { epochs: 1, ..HyperParams::default().bae_config() };
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 0..10 {
        before += BalancingEncoder::new(x.ncols(), &cfg, seed).unwrap().loss(&x, &a).unwrap().total;
        after += train_bae(&x, &a, &cfg, seed).unwrap().0.loss(&x, &a).unwrap().total;
    }
    assert!(after < before, "mean loss {} -> {}", before / 10.0, after / 10.0);
}
