use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sttn::autodiff::Tensor;
use sttn::checkpoint::{load_checkpoint, load_params, save_checkpoint};
use sttn::config::TrainConfig;
use sttn::data::ZScoreStats;
use sttn::graph::TrafficGraph;
use sttn::model::{ModelConfig, SpatialMode, Sttn};
use sttn::Error;

fn ring(n: usize, k: usize) -> TrafficGraph {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let j = (i + 1) % n;
        a.set(&[i, j], 0.7);
        a.set(&[j, i], 0.7);
    }
    TrafficGraph::from_adjacency(a, k).unwrap()
}

fn setup(d_g: usize) -> (TrainConfig, Sttn) {
    let mut cfg = TrainConfig { seed: 3, grad_clip: Some(5.0), kernel_sigma: Some(812.5), ..TrainConfig::default() };
    cfg.model = ModelConfig { window: 6, horizon: 3, d_g, n_blocks: 2, local_mask: Some(1), ..cfg.model };
    let sttn = Sttn::new(cfg.model.clone(), ring(5, cfg.model.cheb_order)).unwrap();
    (cfg, sttn)
}

const STATS: ZScoreStats = ZScoreStats { mean: 57.123456789, std: 8.0000000001 };

fn checkpoint_error(e: Error) -> String {
    match e {
        Error::Checkpoint(m) => m,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, sttn) = setup(8);
    let params = sttn.init_params(11).unwrap();
    save_checkpoint(dir.path(), &params, &cfg, STATS, 5).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.stats, STATS);
    assert_eq!(ck.n_nodes, 5);
    for ((a, x), (b, y)) in params.named_owned().iter().zip(ck.params.named_owned().iter()) {
        assert_eq!(a, b);
        assert!(x.bits_eq(y), "{a}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::new(&[6, 5], (0..30).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let before = sttn.predict(&params, &w).unwrap();
    let after = sttn.predict(&ck.params, &w).unwrap();
    assert!(before.bits_eq(&after));
}

fn saved(dir: &Path) -> TrainConfig {
    let (cfg, sttn) = setup(16);
    save_checkpoint(dir, &sttn.init_params(0).unwrap(), &cfg, STATS, 5).unwrap();
    cfg
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    saved(dir.path());
    let blob = dir.path().join("params.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    checkpoint_error(load_checkpoint(dir.path()).unwrap_err());
}

#[test]
fn extra_bytes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    saved(dir.path());
    let blob = dir.path().join("params.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes.extend_from_slice(&0.0f64.to_le_bytes());
    fs::write(&blob, bytes).unwrap();
    let msg = checkpoint_error(load_checkpoint(dir.path()).unwrap_err());
    assert!(msg.contains("bytes"), "{msg}");
}

#[test]
fn width_mismatch_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = saved(dir.path());
    let wide = ModelConfig { d_g: 32, ..cfg.model };
    let msg = checkpoint_error(load_params(dir.path(), &wide, 5).unwrap_err());
    assert!(msg.starts_with("shape mismatch for input_lift.weight"), "{msg}");
    assert!(msg.contains("16") && msg.contains("32"), "{msg}");
    assert!(load_params(dir.path(), &cfg.model, 5).is_ok());
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Vec<String>)) {
    let p = dir.join("manifest.txt");
    let mut lines: Vec<String> = fs::read_to_string(&p).unwrap().lines().map(String::from).collect();
    f(&mut lines);
    fs::write(p, lines.join("\n") + "\n").unwrap();
}

#[test]
fn manifest_anomalies_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    saved(dir.path());
    edit_manifest(dir.path(), |l| l[2] = l[2].replacen("input_lift", "input_lyft", 1));
    let msg = checkpoint_error(load_checkpoint(dir.path()).unwrap_err());
    assert!(msg.contains("unknown parameter input_lyft"), "{msg}");

    saved(dir.path());
    edit_manifest(dir.path(), |l| {
        let dup = l[2].clone();
        l.insert(3, dup);
    });
    let msg = checkpoint_error(load_checkpoint(dir.path()).unwrap_err());
    assert!(msg.contains("twice"), "{msg}");

    saved(dir.path());
    edit_manifest(dir.path(), |l| {
        l.pop();
    });
    let msg = checkpoint_error(load_checkpoint(dir.path()).unwrap_err());
    assert!(msg.contains("missing parameter"), "{msg}");

    saved(dir.path());
    edit_manifest(dir.path(), |l| l[0] = "# something else".into());
    checkpoint_error(load_checkpoint(dir.path()).unwrap_err());

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(empty.path()), Err(Error::Io { .. })));
}

#[test]
fn node_count_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = saved(dir.path());
    // the spatial embedding is one row per node
    assert!(load_params(dir.path(), &cfg.model, 6).is_err());
}

#[test]
fn config_text_round_trips() {
    let mut cfg = TrainConfig::default();
    cfg.model.spatial_mode = SpatialMode::FixedOnly;
    cfg.model.skip_connections = true;
    cfg.model.local_mask = Some(2);
    cfg.lr0 = 0.1 + 0.2;
    cfg.grad_clip = Some(1.5);
    assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(TrainConfig::parse(&TrainConfig::default().to_text()).unwrap(), TrainConfig::default());
}

#[test]
fn config_parse_errors_name_the_line() {
    let partial = TrainConfig::parse("# comment\nepochs = 7\n\nd_g = 16\n").unwrap();
    assert_eq!((partial.epochs, partial.model.d_g, partial.batch_size), (7, 16, 50));
    for (text, line) in [
        ("epochs = 7\nbogus = 1\n", "line 2"),
        ("epochs = seven\n", "line 1"),
        ("epochs 7\n", "line 1"),
        ("seed = 1\nspatial_mode = sideways\n", "line 2"),
    ] {
        let msg = TrainConfig::parse(text).unwrap_err().to_string();
        assert!(msg.contains(line), "{text:?}: {msg}");
    }
    assert!(TrainConfig::parse("batch_size = 0\n").is_err());
    assert!(TrainConfig::parse("train_fraction = 0.9\n").is_err());
}
