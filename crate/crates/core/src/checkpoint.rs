//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.txt   header lines, then `name shape byte_offset` per tensor
//! <dir>/params.bin     little-endian f64 values in manifest order
//! <dir>/config.txt     the TrainConfig that produced the parameters
//! <dir>/stats.txt      z-score statistics of the training split
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::data::{format_f64, ZScoreStats};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "params.bin";
const CONFIG: &str = "config.txt";
const STATS: &str = "stats.txt";
const MAGIC: &str = "# sttn checkpoint v1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub stats: ZScoreStats,
    pub n_nodes: usize,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    config: &TrainConfig,
    stats: ZScoreStats,
    n_nodes: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    params.check_shapes(&config.model, n_nodes)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut manifest = format!("{MAGIC}\nn_nodes {n_nodes}\n");
    let mut blob = Vec::with_capacity(8 * params.num_scalars());
    params.for_each("", &mut |name, t| {
        let _ = writeln!(manifest, "{name} {} {}", shape_str(t.shape()), blob.len());
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    write(&dir.join(MANIFEST), manifest.as_bytes())?;
    write(&dir.join(BLOB), &blob)?;
    write(&dir.join(CONFIG), config.to_text().as_bytes())?;
    let stats_text = format!("mean = {}\nstd = {}\n", format_f64(stats.mean), format_f64(stats.std));
    write(&dir.join(STATS), stats_text.as_bytes())
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

fn parse_manifest(text: &str) -> Result<(usize, Vec<(String, Entry)>)> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("manifest header missing"));
    }
    let n_nodes = lines
        .next()
        .and_then(|l| l.strip_prefix("n_nodes "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| corrupt("manifest lacks n_nodes"))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || corrupt(format!("manifest line {}: {line:?}", i + 3));
        if fields.len() != 3 {
            return Err(bad());
        }
        let shape = fields[1]
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad())?;
        let offset = fields[2].parse().map_err(|_| bad())?;
        entries.push((fields[0].to_string(), Entry { shape, offset }));
    }
    Ok((n_nodes, entries))
}

/// Reads the parameters and checks them against `model` on `n_nodes` nodes.
pub fn load_params(dir: impl AsRef<Path>, model: &ModelConfig, n_nodes: usize) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let (_, entries) = parse_manifest(&read_text(&dir.join(MANIFEST))?)?;
    let blob = read(&dir.join(BLOB))?;
    let expected = ModelParams::shapes(model, n_nodes);

    let mut by_name: HashMap<&str, &Entry> = HashMap::new();
    for (name, e) in &entries {
        if by_name.insert(name, e).is_some() {
            return Err(corrupt(format!("{name} listed twice")));
        }
    }
    let known = expected.names();
    if let Some((name, _)) = entries.iter().find(|(n, _)| !known.contains(n)) {
        return Err(corrupt(format!("unknown parameter {name}")));
    }

    let mut used = 0;
    let params = expected.try_map("", &mut |name, shape| {
        let e = by_name
            .get(name)
            .ok_or_else(|| corrupt(format!("missing parameter {name}")))?;
        if &e.shape != shape {
            return Err(corrupt(format!(
                "shape mismatch for {name}: checkpoint has {:?}, configuration expects {shape:?}",
                e.shape
            )));
        }
        let count: usize = shape.iter().product();
        let end = e.offset + 8 * count;
        if end > blob.len() {
            return Err(corrupt(format!(
                "{name} needs bytes {}..{end} but params.bin has {}",
                e.offset,
                blob.len()
            )));
        }
        used += 8 * count;
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(shape, data)
    })?;
    if used != blob.len() {
        return Err(corrupt(format!(
            "params.bin has {} bytes, manifest accounts for {used}",
            blob.len()
        )));
    }
    Ok(params)
}

fn parse_stats(text: &str) -> Result<ZScoreStats> {
    let mut mean = None;
    let mut std = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v: f64 = v.trim().parse().map_err(|_| corrupt(format!("stats line {line:?}")))?;
            match k.trim() {
                "mean" => mean = Some(v),
                "std" => std = Some(v),
                _ => return Err(corrupt(format!("stats line {line:?}"))),
            }
        }
    }
    match (mean, std) {
        (Some(mean), Some(std)) if std > 0.0 => Ok(ZScoreStats { mean, std }),
        _ => Err(corrupt("stats.txt needs mean and a positive std")),
    }
}

/// Loads a checkpoint using the configuration stored alongside it.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let (n_nodes, _) = parse_manifest(&read_text(&dir.join(MANIFEST))?)?;
    let config = TrainConfig::parse(&read_text(&dir.join(CONFIG))?)?;
    let params = load_params(dir, &config.model, n_nodes)?;
    let stats = parse_stats(&read_text(&dir.join(STATS))?)?;
    Ok(Checkpoint {
        params,
        config,
        stats,
        n_nodes,
    })
}
