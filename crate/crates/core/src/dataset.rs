//! On-disk dataset: a JSON-lines index plus a binary feature blob.
//!
//! The index's first line is a header carrying `format_version` and the blob
//! file name (relative to the index). Each following line describes one
//! sample and points at `count` little-endian `f32` values starting at byte
//! `offset` of the blob, laid out `[frame][row][col][channel]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, TemporalWindow, Tube};
use crate::synth::{InvariantError, VideoSample};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("{path} line {line}: {msg}")]
    Index { path: PathBuf, line: usize, msg: String },
    #[error("sample {id}: field {field}: {msg}")]
    Sample { id: String, field: &'static str, msg: String },
}

impl From<InvariantError> for DatasetError {
    fn from(e: InvariantError) -> Self {
        DatasetError::Sample {
            id: e.id,
            field: e.field,
            msg: e.msg,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    blob: String,
    layout: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    duration: f64,
    fps: f64,
    grid: [usize; 2],
    feature_dim: usize,
    signature_count: usize,
    noise: f64,
    query: String,
    target_signature: usize,
    window: [f64; 2],
    boxes: BTreeMap<usize, [f64; 4]>,
    offset: u64,
    count: u64,
}

/// Sidecar blob path for an index path: same stem, `.bin` extension.
pub fn blob_path(index: &Path) -> PathBuf {
    index.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_dataset(samples: &[VideoSample], index: &Path) -> Result<(), DatasetError> {
    let blob = blob_path(index);
    let blob_name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| DatasetError::Header {
            path: index.to_path_buf(),
            msg: "index path has no file name".into(),
        })?
        .to_string();
    let mut idx = BufWriter::new(fs::File::create(index).map_err(io_err(index))?);
    let mut bin = BufWriter::new(fs::File::create(&blob).map_err(io_err(&blob))?);
    let header = Header {
        format_version: FORMAT_VERSION,
        blob: blob_name,
        layout: "f32le[frame][row][col][channel]".into(),
    };
    writeln!(idx, "{}", line(&header)).map_err(io_err(index))?;
    let mut offset = 0u64;
    for s in samples {
        s.validate()?;
        let rec = Record {
            id: s.id.clone(),
            duration: s.duration,
            fps: s.fps,
            grid: [s.grid_h, s.grid_w],
            feature_dim: s.feature_dim,
            signature_count: s.signature_count,
            noise: s.noise,
            query: s.query.clone(),
            target_signature: s.target_signature,
            window: [s.gt.window().start(), s.gt.window().end()],
            boxes: s.gt.boxes().iter().map(|(f, b)| (*f, b.corners())).collect(),
            offset,
            count: s.features.len() as u64,
        };
        writeln!(idx, "{}", line(&rec)).map_err(io_err(index))?;
        for v in &s.features {
            bin.write_all(&v.to_le_bytes()).map_err(io_err(&blob))?;
        }
        offset += 4 * s.features.len() as u64;
    }
    idx.flush().map_err(io_err(index))?;
    bin.flush().map_err(io_err(&blob))?;
    Ok(())
}

fn line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("index records serialize")
}

/// Reads and validates every sample. An empty index file is an empty dataset.
pub fn read_dataset(index: &Path) -> Result<Vec<VideoSample>, DatasetError> {
    let text = fs::read_to_string(index).map_err(io_err(index))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Header = serde_json::from_str(first).map_err(|e| DatasetError::Header {
        path: index.to_path_buf(),
        msg: e.to_string(),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(DatasetError::Header {
            path: index.to_path_buf(),
            msg: format!("unsupported format_version {}", header.format_version),
        });
    }
    let blob_file = index.with_file_name(&header.blob);
    let mut records = Vec::new();
    for (i, l) in lines {
        let rec: Record = serde_json::from_str(l).map_err(|e| DatasetError::Index {
            path: index.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let blob = fs::read(&blob_file).map_err(io_err(&blob_file))?;
    records.into_iter().map(|r| decode(r, &blob)).collect()
}

fn decode(r: Record, blob: &[u8]) -> Result<VideoSample, DatasetError> {
    let bad = |field, msg: String| DatasetError::Sample {
        id: r.id.clone(),
        field,
        msg,
    };
    let start = usize::try_from(r.offset).map_err(|_| bad("offset", "does not fit in memory".into()))?;
    let len = usize::try_from(r.count)
        .ok()
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| bad("count", "too large".into()))?;
    let end = start.checked_add(len).ok_or_else(|| bad("offset", "overflows".into()))?;
    if end > blob.len() {
        return Err(bad(
            "features",
            format!("blob truncated: needs bytes {start}..{end}, has {}", blob.len()),
        ));
    }
    let features = blob[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let window = TemporalWindow::new(r.window[0], r.window[1]).map_err(|e| bad("window", e.to_string()))?;
    let boxes = r
        .boxes
        .iter()
        .map(|(f, c)| BoundingBox::corner(c[0], c[1], c[2], c[3]).map(|b| (*f, b)))
        .collect::<Result<_, _>>()
        .map_err(|e| bad("boxes", e.to_string()))?;
    let frames = crate::synth::frame_count(r.duration, r.fps);
    let gt = Tube::new(window, r.fps, frames, boxes).map_err(|e| bad("gt", e.to_string()))?;
    let s = VideoSample {
        id: r.id.clone(),
        duration: r.duration,
        fps: r.fps,
        grid_h: r.grid[0],
        grid_w: r.grid[1],
        feature_dim: r.feature_dim,
        signature_count: r.signature_count,
        noise: r.noise,
        features,
        query: r.query.clone(),
        target_signature: r.target_signature,
        gt,
    };
    s.validate()?;
    Ok(s)
}
