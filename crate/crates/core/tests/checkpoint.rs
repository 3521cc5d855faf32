use tcvae_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, AnyModel, Checkpoint, FORMAT_VERSION};
use tcvae_core::dataio::{make_windows, synthetic, Scaler};
use tcvae_core::latent::Draw;
use tcvae_core::model::{ModelConfig, Switches};
use tcvae_core::train::TrainConfig;
use tcvae_core::CoreError;
use tcvae_numerics::Precision;

fn checkpoint(precision: Precision) -> (Checkpoint, tcvae_core::dataio::WindowBatch) {
    let series = synthetic::sine_series(80, 2, 24.0, 0.1, 1);
    let mut cfg = ModelConfig::tiny(2);
    cfg.switches = Switches::all().without("gam").unwrap();
    cfg.lambda = 0.1;
    cfg.init_seed = 5;
    let mut model = AnyModel::new(cfg, precision).unwrap();
    model.set_scaler(Scaler::fit(&series).unwrap());
    let windows = make_windows(&series, 8, 4).unwrap();
    let train = TrainConfig { epochs: 1, ..TrainConfig::default() };
    model.fit(&windows, None, &train, |_| {}).unwrap();
    let ck = Checkpoint { model, train: Some(train), run: Some(serde_json::json!({ "seed": 3 })) };
    (ck, windows)
}

#[test]
fn saved_models_forecast_identically() {
    let dir = tempfile::tempdir().unwrap();
    for precision in [Precision::F32, Precision::F64] {
        let (ck, windows) = checkpoint(precision);
        let path = dir.path().join(format!("{}.tcva", precision.as_str()));
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.config(), ck.model.config());
        assert_eq!(back.train, ck.train);
        assert_eq!(back.run, ck.run);
        for seed in [0, 7, 123] {
            let a = ck.model.predict(&windows, Draw::Sample(seed)).unwrap();
            let b = back.model.predict(&windows, Draw::Sample(seed)).unwrap();
            let bits = |t: &tcvae_numerics::Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }
}

#[test]
fn every_corrupted_region_is_detected() {
    let (ck, _) = checkpoint(Precision::F32);
    let bytes = encode(&ck).unwrap();
    for pos in [8, 12, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(matches!(decode(&bad), Err(CoreError::Checksum)), "byte {pos}");
    }
    assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode(b"TCV").is_err());
}

#[test]
fn other_versions_name_both() {
    let (ck, _) = checkpoint(Precision::F32);
    let mut bytes = encode(&ck).unwrap();
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = decode(&bytes).unwrap_err();
    assert!(matches!(err, CoreError::VersionMismatch { found, expected } if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION));
    let text = err.to_string();
    assert!(text.contains(&FORMAT_VERSION.to_string()) && text.contains(&(FORMAT_VERSION + 1).to_string()));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path().join("none.tcva")), Err(CoreError::Io { .. })));
}
