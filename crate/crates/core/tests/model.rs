use tcvae_core::dataio::{make_windows, make_windows_for, stamp_of, synthetic};
use tcvae_core::latent::Draw;
use tcvae_core::model::{loss_terms, Batch, ForwardOptions, ModelConfig, Switches, Tcvae, TcvaeNet};
use tcvae_core::train::{Dataset, TrainConfig};
use tcvae_numerics::{standard_normal, Graph, ParamStore, Tensor};

fn tiny_batch(n: usize) -> tcvae_core::dataio::WindowBatch {
    let series = synthetic::sine_series(60, 3, 24.0, 0.1, 2);
    make_windows(&series, 8, 4).unwrap().select(&(0..n).map(|i| 3 * i).collect::<Vec<_>>())
}

#[test]
fn tiny_config_shapes() {
    let mut store = ParamStore::<f64>::new();
    let net = TcvaeNet::build(ModelConfig::tiny(3), &mut store).unwrap();
    let batch = Batch::<f64>::from_windows(&tiny_batch(2), net.config.token_len).unwrap();
    let mut g = Graph::new();
    let out = net.forward(&mut g, &store, &batch, ForwardOptions::train(1)).unwrap();
    assert_eq!(g.shape(out.encoded.memory), &[2, 8, 16]);
    assert_eq!(g.shape(out.encoded.factors.factors), &[2, 9, 16]);
    assert_eq!(g.shape(out.encoded.posterior.mean), &[2, 8, 8]);
    assert_eq!(g.shape(out.encoded.prior.unwrap().0.logvar), &[2, 8, 8]);
    assert_eq!(g.shape(out.backcast.unwrap()), &[2, 8, 3]);
    assert_eq!(g.shape(out.forecast), &[2, 4, 3]);
    assert!(g.value(out.loss.unwrap().total).is_finite());
}

#[test]
fn fewer_targets_than_inputs() {
    let mut cfg = ModelConfig::tiny(3);
    cfg.target_columns = vec![2, 0];
    let model = Tcvae::<f64>::new(cfg).unwrap();
    let series = synthetic::sine_series(40, 3, 24.0, 0.1, 2);
    let windows = make_windows_for(&series, 8, 4, &[2, 0]).unwrap();
    let pred = model.predict(&windows, Draw::Sample(0)).unwrap();
    assert_eq!(pred.shape(), &[windows.len(), 4, 2]);
}

#[test]
fn latent_conditions_the_forecast() {
    let mut store = ParamStore::<f64>::new();
    let net = TcvaeNet::build(ModelConfig::tiny(3), &mut store).unwrap();
    let batch = Batch::<f64>::from_windows(&tiny_batch(2), net.config.token_len).unwrap();
    let run = |seed: u64| {
        let mut g = Graph::new();
        let enc = net.encode(&mut g, &store, &batch, false).unwrap();
        let z = g.constant(standard_normal(&[2, 8, 8], seed));
        let (_, _, forecast) = net.decode(&mut g, &store, &batch, enc.memory, z).unwrap();
        g.value(forecast).clone()
    };
    assert_ne!(run(1), run(2));
    assert_eq!(run(1), run(1));
}

#[test]
fn loss_hand_example() {
    let mut g = Graph::<f64>::new();
    let x = standard_normal::<f64>(&[2, 8, 3], 1);
    let y = standard_normal::<f64>(&[2, 4, 3], 2);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let back = g.constant(x.map(|v| v + 1.0));
    let fore = g.constant(y);
    let kl = g.scalar(7.0);
    let terms = loss_terms(&mut g, Some(back), fore, xv, yv, Some(kl), 0.0).unwrap();
    assert!((g.scalar_value(terms.total).unwrap() - 1.0).abs() < 1e-12);

    let exact = loss_terms(&mut g, Some(xv), yv, xv, yv, Some(kl), 0.1).unwrap();
    assert!((g.scalar_value(exact.total).unwrap() - 0.7).abs() < 1e-12);
}

#[test]
fn disabling_backcast_drops_reconstruction() {
    let mut cfg = ModelConfig::tiny(3);
    cfg.switches = Switches::all().without("backcast").unwrap();
    let mut store = ParamStore::<f64>::new();
    let net = TcvaeNet::build(cfg, &mut store).unwrap();
    let batch = Batch::<f64>::from_windows(&tiny_batch(2), net.config.token_len).unwrap();
    let mut g = Graph::new();
    let out = net.forward(&mut g, &store, &batch, ForwardOptions::train(1)).unwrap();
    assert!(out.backcast.is_none());
    assert!(out.loss.unwrap().reconstruction.is_none());
}

#[test]
fn all_switches_off_leaves_a_forecasting_transformer() {
    let mut cfg = ModelConfig::tiny(3);
    for name in Switches::NAMES {
        cfg.switches.set(name, false).unwrap();
    }
    let mut store = ParamStore::<f64>::new();
    let net = TcvaeNet::build(cfg, &mut store).unwrap();
    let batch = Batch::<f64>::from_windows(&tiny_batch(2), net.config.token_len).unwrap();
    let mut g = Graph::new();
    let out = net.forward(&mut g, &store, &batch, ForwardOptions::train(1)).unwrap();
    let loss = out.loss.unwrap();
    assert!(loss.kl.is_none() && loss.reconstruction.is_none());
    assert_eq!(g.scalar_value(loss.total).unwrap(), g.scalar_value(loss.forecasting).unwrap());
    assert_eq!(g.value(out.posterior.transformed), g.value(out.posterior.latent));
}

#[test]
fn predictions_are_seeded() {
    let model = Tcvae::<f64>::new(ModelConfig::tiny(3)).unwrap();
    let w = tiny_batch(4);
    assert_eq!(model.predict(&w, Draw::Sample(3)).unwrap(), model.predict(&w, Draw::Sample(3)).unwrap());
    assert_ne!(model.predict(&w, Draw::Sample(3)).unwrap(), model.predict(&w, Draw::Sample(4)).unwrap());
}

#[test]
fn collapsed_posterior_ignores_the_seed() {
    let series = synthetic::sine_series(60, 3, 24.0, 0.1, 2);
    let mut model = Tcvae::<f64>::new(ModelConfig::tiny(3)).unwrap();
    model.scaler = Some(tcvae_core::dataio::Scaler::fit(&series).unwrap());
    let head = model.net.latent.posterior_head.clone();
    let k = model.config().latent_dim;
    let mut w = model.params.value(head.w).clone();
    let cols = 2 * k;
    for row in 0..w.shape()[0] {
        for c in k..cols {
            w.data_mut()[row * cols + c] = 0.0;
        }
    }
    model.params.set_value(head.w, w).unwrap();
    let mut b = model.params.value(head.b.unwrap()).clone();
    b.data_mut()[k..].iter_mut().for_each(|v| *v = -1500.0);
    model.params.set_value(head.b.unwrap(), b).unwrap();

    let window = series.values.clone().reshape(&[60, 3]).unwrap();
    let window = Tensor::new(&[8, 3], window.data()[..24].to_vec()).unwrap();
    let stamps: Vec<_> = series.timestamps[..8].iter().map(stamp_of).collect();
    let future: Vec<_> = series.timestamps[8..12].iter().map(stamp_of).collect();
    let a = model.forecast(&window, &stamps, &future, Draw::Sample(1)).unwrap();
    let b = model.forecast(&window, &stamps, &future, Draw::Sample(2)).unwrap();
    assert_eq!(a.shape(), &[4, 3]);
    assert_eq!(a, b);
    assert!(model.forecast(&Tensor::zeros(&[7, 3]), &stamps[..7], &future, Draw::Mean).is_err());
}

#[test]
fn noiseless_sine_training_converges() {
    let series = synthetic::sine_series(400, 3, 24.0, 0.0, 1);
    let cfg = ModelConfig::tiny(3);
    let ds = Dataset::prepare(&series, [0.7, 0.1, 0.2], 8, 4, &cfg.target_columns).unwrap();
    let train = TrainConfig { epochs: 50, ..TrainConfig::default() };
    let mut model = Tcvae::<f64>::new(cfg).unwrap();
    let losses = model.fit(&ds.train, None, &train, |_| {}).unwrap().losses();
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
    let avg: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let (first, last) = (avg[0], *avg.last().unwrap());
    assert!(last < first);
    for block in avg.chunks(5).collect::<Vec<_>>().windows(2) {
        let (a, b) = (block[0][0], block[1][0]);
        assert!(b <= a, "moving average rose from {a} to {b}: {avg:?}");
    }
}
