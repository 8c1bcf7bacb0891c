//! Speed and distance CSV ingestion, normalisation, splitting and windowing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::Distance;

/// `L x N` speed matrix, one row per 5-minute step, one column per sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedSeries {
    pub sensor_ids: Vec<String>,
    values: Tensor,
}

impl SpeedSeries {
    pub fn new(sensor_ids: Vec<String>, values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != sensor_ids.len() {
            return Err(Error::Data(format!(
                "{} sensor ids for a value matrix of shape {:?}",
                sensor_ids.len(),
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Data("speed values must be finite".into()));
        }
        Ok(SpeedSeries { sensor_ids, values })
    }

    /// Numbered sensor ids `0..n`.
    pub fn from_values(values: Tensor) -> Result<Self> {
        let n = values.shape().get(1).copied().unwrap_or(0);
        Self::new((0..n).map(|i| i.to_string()).collect(), values)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[1]
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Shortest decimal that reads back to the same double, at 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a header of sensor ids followed by one row of speeds per step.
pub fn load_speed_csv(path: impl AsRef<Path>) -> Result<SpeedSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(open(path)?);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(parse_err(path, 1, "empty file"));
    }
    let ids: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let n = ids.len();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n {
            return Err(parse_err(
                path,
                line,
                format!("expected {n} fields, found {}", record.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                parse_err(path, line, format!("column {col}: `{cell}` is not a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {col}: missing or non-finite value")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(path, 1, "no data rows"));
    }
    SpeedSeries::new(ids, Tensor::new(&[rows, n], data)?)
}

pub fn write_speed_csv(path: impl AsRef<Path>, series: &SpeedSeries) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(out, "{}", series.sensor_ids.join(","))?;
        for r in 0..series.len() {
            let row: Vec<String> = series.values.row(r).iter().map(|&v| format_f64(v)).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Reads `from,to,distance` rows (an optional header is skipped). Repeated
/// pairs keep the shortest distance.
pub fn load_distance_csv(path: impl AsRef<Path>, n: usize) -> Result<Vec<Distance>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(open(path)?);
    let mut out: Vec<Distance> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if i == 0 && record.get(0).is_some_and(|f| f.trim().parse::<f64>().is_err()) {
            continue;
        }
        if record.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, found {}", record.len())));
        }
        let index = |k: usize| -> Result<usize> {
            let cell = record[k].trim();
            let v: usize = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("`{cell}` is not a node index")))?;
            if v >= n {
                return Err(parse_err(path, line, format!("node index {v} out of range for {n} nodes")));
            }
            Ok(v)
        };
        let (from, to) = (index(0)?, index(1)?);
        let cell = record[2].trim();
        let d: f64 = cell
            .parse()
            .map_err(|_| parse_err(path, line, format!("`{cell}` is not a distance")))?;
        if !d.is_finite() || d < 0.0 {
            return Err(parse_err(path, line, format!("distance {d} must be finite and >= 0")));
        }
        match out.iter_mut().find(|e| e.0 == from && e.1 == to) {
            Some(e) => e.2 = e.2.min(d),
            None => out.push((from, to, d)),
        }
    }
    Ok(out)
}

pub fn write_distance_csv(path: impl AsRef<Path>, distances: &[Distance]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(out, "from,to,distance")?;
        for &(i, j, d) in distances {
            writeln!(out, "{i},{j},{}", format_f64(d))?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Scalar z-score statistics over every sensor of the training segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZScoreStats {
    pub mean: f64,
    pub std: f64,
}

impl ZScoreStats {
    /// Population statistics of `values`; a constant input is a data error.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot normalise an empty segment".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std.is_nan() || std <= 0.0 {
            return Err(Error::Data("training segment is constant (std = 0)".into()));
        }
        Ok(ZScoreStats { mean, std })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn normalize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.normalize(v))
    }

    pub fn denormalize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.denormalize(v))
    }
}

/// Chronological train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || self.train <= 0.0 {
            return Err(Error::Config(format!("invalid split fractions {parts:?}")));
        }
        if ((self.train + self.val + self.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} do not sum to 1")));
        }
        Ok(())
    }

    /// Row counts; train and validation are rounded, test takes the rest.
    pub fn lengths(&self, rows: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let train = (self.train * rows as f64).round() as usize;
        let val = ((self.val * rows as f64).round() as usize).min(rows - train.min(rows));
        let train = train.min(rows);
        Ok([train, val, rows - train - val])
    }
}

/// Normalises the whole series with statistics from its training segment.
pub fn zscore(series: &Tensor, fractions: SplitFractions) -> Result<(Tensor, ZScoreStats)> {
    let rows = series.shape()[0];
    let cols = series.len() / rows.max(1);
    let [train, _, _] = fractions.lengths(rows)?;
    let stats = ZScoreStats::fit(&series.data()[..train * cols])?;
    Ok((stats.normalize_tensor(series), stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Input/target window pairs from one contiguous segment.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    /// Normalised `[M, N]` windows.
    pub inputs: Vec<Tensor>,
    /// `[T, N]` targets in original units.
    pub targets: Vec<Tensor>,
    pub stats: ZScoreStats,
    pub split: Split,
    /// Absolute series row of each window's first input step.
    pub start_rows: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn window(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.shape()[0])
    }

    pub fn horizon(&self) -> usize {
        self.targets.first().map_or(0, |t| t.shape()[0])
    }

    pub fn n_nodes(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.shape()[1])
    }
}

fn rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let cols = t.shape()[1];
    Tensor::new(&[len, cols], t.data()[start * cols..(start + len) * cols].to_vec())
        .expect("row range within tensor")
}

/// All `L - M - T + 1` windows of a raw `[L, N]` segment: inputs are rows
/// `[s, s+M)` normalised with `stats`, targets rows `[s+M, s+M+T)` as given.
pub fn make_windows(
    segment: &Tensor,
    m: usize,
    t: usize,
    stats: ZScoreStats,
    split: Split,
    row_offset: usize,
) -> Result<WindowedDataset> {
    let l = segment.shape()[0];
    if m == 0 || t == 0 || l < m + t {
        return Err(Error::Data(format!(
            "{split} segment has {l} rows, fewer than M + T = {}",
            m + t
        )));
    }
    let count = l - m - t + 1;
    let normalized = stats.normalize_tensor(segment);
    let mut out = WindowedDataset {
        inputs: Vec::with_capacity(count),
        targets: Vec::with_capacity(count),
        stats,
        split,
        start_rows: Vec::with_capacity(count),
    };
    for s in 0..count {
        out.inputs.push(rows(&normalized, s, m));
        out.targets.push(rows(segment, s + m, t));
        out.start_rows.push(row_offset + s);
    }
    Ok(out)
}

/// Train, validation and test windows cut from consecutive time segments.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

impl Datasets {
    pub fn stats(&self) -> ZScoreStats {
        self.train.stats
    }
}

/// Splits chronologically, fits the z-score on the training rows and windows
/// each segment on its own.
pub fn prepare_datasets(
    series: &SpeedSeries,
    m: usize,
    t: usize,
    fractions: SplitFractions,
) -> Result<Datasets> {
    let (_, stats) = zscore(series.values(), fractions)?;
    prepare_datasets_with_stats(series, m, t, fractions, stats)
}

/// As [`prepare_datasets`] but normalising with given statistics, e.g. those
/// stored with a trained model.
pub fn prepare_datasets_with_stats(
    series: &SpeedSeries,
    m: usize,
    t: usize,
    fractions: SplitFractions,
    stats: ZScoreStats,
) -> Result<Datasets> {
    let values = series.values();
    let [train, val, test] = fractions.lengths(series.len())?;
    let segment = |start: usize, len: usize, split: Split| {
        if len == 0 && split != Split::Train {
            return Ok(WindowedDataset {
                inputs: Vec::new(),
                targets: Vec::new(),
                stats,
                split,
                start_rows: Vec::new(),
            });
        }
        make_windows(&rows(values, start, len), m, t, stats, split, start)
    };
    Ok(Datasets {
        train: segment(0, train, Split::Train)?,
        val: segment(train, val, Split::Val)?,
        test: segment(train + val, test, Split::Test)?,
    })
}
