// SPDX-License-Identifier: MIT OR Apache-2.0

//! UEA `.ts` loading, length normalization and per-channel standardization.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Raw contents of a `.ts` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TsFile {
    pub problem_name: Option<String>,
    /// Declared class labels, sorted lexicographically; a record's label
    /// index is its position here.
    pub class_labels: Vec<String>,
    pub dimensions: usize,
    pub records: Vec<TsRecord>,
}

/// One variable-length multichannel series.
#[derive(Clone, Debug, PartialEq)]
pub struct TsRecord {
    /// `channels[c][t]`.
    pub channels: Vec<Vec<f32>>,
    pub label: usize,
}

impl TsRecord {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_bool(v: Option<&str>, line: usize) -> Result<bool> {
    match v.map(str::to_ascii_lowercase).as_deref() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        other => Err(parse_err(line, format!("expected true/false, got {other:?}"))),
    }
}

fn parse_value(s: &str, line: usize) -> Result<f32> {
    let s = s.trim();
    if s == "?" {
        return Err(parse_err(line, "missing values are not supported"));
    }
    s.parse::<f32>()
        .map_err(|_| parse_err(line, format!("invalid number `{s}`")))
}

/// Parses one dimension of a record, dense (`1,2,3`) or timestamped
/// (`(0,1),(1,2)`); timestamps are dropped.
fn parse_dimension(field: &str, timestamps: bool, line: usize) -> Result<Vec<f32>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    if !timestamps {
        return field.split(',').map(|v| parse_value(v, line)).collect();
    }
    let mut out = Vec::new();
    for tuple in field.split(')') {
        let tuple = tuple.trim_start_matches(',').trim();
        if tuple.is_empty() {
            continue;
        }
        let inner = tuple
            .strip_prefix('(')
            .ok_or_else(|| parse_err(line, format!("malformed timestamped value `{tuple}`")))?;
        let (_, value) = inner
            .rsplit_once(',')
            .ok_or_else(|| parse_err(line, format!("malformed timestamped value `{tuple}`")))?;
        out.push(parse_value(value, line)?);
    }
    Ok(out)
}

/// Parses the text of a UEA `.ts` file.
pub fn parse_ts_str(text: &str) -> Result<TsFile> {
    let mut problem_name = None;
    let mut timestamps = false;
    let mut univariate = None;
    let mut dimensions = None;
    let mut labels: Option<Vec<String>> = None;
    let mut in_data = false;
    let mut raw_records: Vec<(Vec<Vec<f32>>, String, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let Some(rest) = line.strip_prefix('@') else {
                return Err(parse_err(line_no, "data before @data tag"));
            };
            let mut parts = rest.split_whitespace();
            let tag = parts.next().unwrap_or_default().to_ascii_lowercase();
            match tag.as_str() {
                "problemname" => problem_name = parts.next().map(str::to_string),
                "timestamps" => timestamps = parse_bool(parts.next(), line_no)?,
                "missing" | "equallength" | "serieslength" | "targetlabel" => {}
                "univariate" => univariate = Some(parse_bool(parts.next(), line_no)?),
                "dimension" | "dimensions" => {
                    let v = parts
                        .next()
                        .and_then(|s| s.parse::<usize>().ok())
                        .filter(|&v| v > 0)
                        .ok_or_else(|| parse_err(line_no, "invalid @dimensions"))?;
                    dimensions = Some(v);
                }
                "classlabel" => {
                    if parse_bool(parts.next(), line_no)? {
                        let mut ls: Vec<String> = parts.map(str::to_string).collect();
                        if ls.is_empty() {
                            return Err(parse_err(line_no, "@classLabel true without labels"));
                        }
                        ls.sort();
                        ls.dedup();
                        labels = Some(ls);
                    }
                }
                "data" => in_data = true,
                other => return Err(parse_err(line_no, format!("unknown header tag @{other}"))),
            }
            continue;
        }

        let mut fields: Vec<&str> = line.split(':').collect();
        let label = if labels.is_some() {
            fields
                .pop()
                .map(|s| s.trim().to_string())
                .ok_or_else(|| parse_err(line_no, "missing class label"))?
        } else {
            return Err(parse_err(line_no, "unlabelled data is not supported"));
        };
        let channels = fields
            .iter()
            .map(|f| parse_dimension(f, timestamps, line_no))
            .collect::<Result<Vec<_>>>()?;
        raw_records.push((channels, label, line_no));
    }

    if !in_data {
        return Err(parse_err(text.lines().count(), "missing @data section"));
    }
    let labels = labels.ok_or_else(|| parse_err(0, "missing @classLabel header"))?;
    let dims = match (univariate, dimensions) {
        (Some(true), _) => 1,
        (_, Some(d)) => d,
        (_, None) => raw_records.first().map_or(1, |r| r.0.len()),
    };

    let mut records = Vec::with_capacity(raw_records.len());
    for (channels, label, line_no) in raw_records {
        if channels.len() != dims {
            return Err(parse_err(
                line_no,
                format!("expected {dims} channels, found {}", channels.len()),
            ));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(parse_err(line_no, "channels of one record differ in length"));
        }
        let label_idx = labels
            .binary_search(&label)
            .map_err(|_| parse_err(line_no, format!("unknown class label `{label}`")))?;
        records.push(TsRecord {
            channels,
            label: label_idx,
        });
    }
    Ok(TsFile {
        problem_name,
        class_labels: labels,
        dimensions: dims,
        records,
    })
}

pub fn parse_ts_file(path: &Path) -> Result<TsFile> {
    parse_ts_str(&std::fs::read_to_string(path)?)
}

/// Truncates or zero-pads (at the end) every channel to `seq_len` frames,
/// producing a `C×seq_len` tensor.
pub fn normalize_length(channels: &[Vec<f32>], seq_len: usize) -> Result<Tensor<f32>> {
    let len = channels.first().map_or(0, Vec::len);
    if channels.is_empty() || len == 0 {
        return Err(Error::InvalidArgument("cannot normalize an empty series".into()));
    }
    let mut data = vec![0.0f32; channels.len() * seq_len];
    for (c, ch) in channels.iter().enumerate() {
        let keep = ch.len().min(seq_len);
        data[c * seq_len..c * seq_len + keep].copy_from_slice(&ch[..keep]);
    }
    Tensor::new(&[channels.len(), seq_len], data)
}

/// One length-normalized instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesInstance {
    /// Position in its split's file order.
    pub id: usize,
    /// `C×T`.
    pub values: Tensor<f32>,
    pub label: usize,
    /// Frames before padding or truncation.
    pub original_length: usize,
}

impl TimeSeriesInstance {
    /// Frames that carry signal (not padding).
    pub fn valid_frames(&self) -> usize {
        self.original_length.min(self.values.cols())
    }
}

/// Per-channel mean and standard deviation fitted on the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels whose standard deviation falls below this are not scaled.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Train and test splits with shared class names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<TimeSeriesInstance>,
    pub test: Vec<TimeSeriesInstance>,
    pub class_names: Vec<String>,
    pub channels: usize,
    pub seq_len: usize,
    standardization: Option<ChannelStats>,
}

fn to_instances(file: &TsFile, seq_len: usize) -> Result<Vec<TimeSeriesInstance>> {
    file.records
        .iter()
        .enumerate()
        .map(|(id, r)| {
            Ok(TimeSeriesInstance {
                id,
                values: normalize_length(&r.channels, seq_len)?,
                label: r.label,
                original_length: r.len(),
            })
        })
        .collect()
}

impl Dataset {
    pub fn from_files(train: &TsFile, test: &TsFile, seq_len: usize) -> Result<Self> {
        if train.class_labels != test.class_labels {
            return Err(Error::InvalidArgument(format!(
                "train labels {:?} differ from test labels {:?}",
                train.class_labels, test.class_labels
            )));
        }
        if train.dimensions != test.dimensions {
            return Err(Error::InvalidArgument(format!(
                "train has {} channels, test has {}",
                train.dimensions, test.dimensions
            )));
        }
        Ok(Self {
            train: to_instances(train, seq_len)?,
            test: to_instances(test, seq_len)?,
            class_names: train.class_labels.clone(),
            channels: train.dimensions,
            seq_len,
            standardization: None,
        })
    }

    pub fn load(train_path: &Path, test_path: &Path, seq_len: usize) -> Result<Self> {
        Self::from_files(&parse_ts_file(train_path)?, &parse_ts_file(test_path)?, seq_len)
    }

    pub fn split(&self, split: Split) -> &[TimeSeriesInstance] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn standardization(&self) -> Option<&ChannelStats> {
        self.standardization.as_ref()
    }

    /// Fits per-channel mean/std over the non-padded frames of the train
    /// split and applies them to the non-padded frames of both splits.
    /// Padding stays zero. Fails if the dataset is already standardized.
    pub fn standardize(&mut self) -> Result<ChannelStats> {
        if self.standardization.is_some() {
            return Err(Error::InvalidArgument("dataset is already standardized".into()));
        }
        let stats = fit_channel_stats(&self.train, self.channels);
        for (c, s) in stats.std.iter().enumerate() {
            if *s < STD_EPS {
                warn!("channel {c} has zero variance on the train split; centering only");
            }
        }
        for inst in self.train.iter_mut().chain(self.test.iter_mut()) {
            apply_channel_stats(inst, &stats);
        }
        self.standardization = Some(stats.clone());
        Ok(stats)
    }

    /// CSV dump with one row per (split, instance, channel).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,id,label,original_length,channel");
        for t in 0..self.seq_len {
            let _ = write!(out, ",t{t}");
        }
        out.push('\n');
        for split in [Split::Train, Split::Test] {
            for inst in self.split(split) {
                for c in 0..self.channels {
                    let _ = write!(
                        out,
                        "{},{},{},{},{}",
                        split.as_str(),
                        inst.id,
                        inst.label,
                        inst.original_length,
                        c
                    );
                    for v in inst.values.row(c) {
                        let _ = write!(out, ",{v}");
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Two-pass per-channel mean and population std over valid frames.
pub fn fit_channel_stats(instances: &[TimeSeriesInstance], channels: usize) -> ChannelStats {
    let mut mean = vec![0.0f64; channels];
    let mut count = 0usize;
    for inst in instances {
        let n = inst.valid_frames();
        for (c, m) in mean.iter_mut().enumerate() {
            *m += inst.values.row(c)[..n].iter().map(|&v| v as f64).sum::<f64>();
        }
        count += n;
    }
    let nf = count.max(1) as f64;
    for m in mean.iter_mut() {
        *m /= nf;
    }
    let mut var = vec![0.0f64; channels];
    for inst in instances {
        let n = inst.valid_frames();
        for (c, s) in var.iter_mut().enumerate() {
            *s += inst.values.row(c)[..n]
                .iter()
                .map(|&v| (v as f64 - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let std = var.into_iter().map(|v| (v / nf).sqrt()).collect();
    ChannelStats { mean, std }
}

fn apply_channel_stats(inst: &mut TimeSeriesInstance, stats: &ChannelStats) {
    let n = inst.valid_frames();
    let t = inst.values.cols();
    let data = inst.values.data_mut();
    for c in 0..stats.mean.len() {
        let scale = if stats.std[c] < STD_EPS { 1.0 } else { stats.std[c] };
        for v in &mut data[c * t..c * t + n] {
            *v = ((*v as f64 - stats.mean[c]) / scale) as f32;
        }
    }
}
