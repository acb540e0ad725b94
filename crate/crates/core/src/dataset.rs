//! Identity-clustered feature datasets.
//!
//! Samples are fixed-length `f32` vectors tagged with a hidden identity, a
//! camera index and a split tag. Training never reads the identities; they
//! are only used by the supervised reference metrics and the label
//! corruption experiments.
//!
//! On-disk format (text):
//!
//! ```text
//! PEGDS v1 <N> <D>
//! <id>,<camera>,<T|Q|G>,<f_1>,...,<f_D>
//! ```
//!
//! The binary variant shares the header line and is followed by `N` records
//! of `(i32 id, i32 camera, u8 split, D x f32)`, all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PegError, Result};
use crate::seed;

const MAGIC: &str = "PEGDS";
const VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    fn tag(self) -> char {
        match self {
            Split::Train => 'T',
            Split::Query => 'Q',
            Split::Gallery => 'G',
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "T" => Some(Split::Train),
            "Q" => Some(Split::Query),
            "G" => Some(Split::Gallery),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Gallery),
            _ => None,
        }
    }
}

/// Unlabeled sample vectors plus the hidden annotations used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub features: Array2<f32>,
    pub ids: Vec<i32>,
    pub cameras: Vec<i32>,
    pub split: Vec<Split>,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// All samples as `f64`; the fully unsupervised setting trains on every row.
    pub fn inputs(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn num_identities(&self) -> usize {
        let mut ids = self.ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || self.dim() == 0 {
            return Err(PegError::Config("dataset must have N >= 1 and D >= 1".into()));
        }
        if self.ids.len() != n || self.cameras.len() != n || self.split.len() != n {
            return Err(PegError::Config(format!(
                "annotation lengths ({}, {}, {}) do not match N = {n}",
                self.ids.len(),
                self.cameras.len(),
                self.split.len()
            )));
        }
        let mut gallery_ids: Vec<i32> = (0..n)
            .filter(|&i| self.split[i] == Split::Gallery)
            .map(|i| self.ids[i])
            .collect();
        gallery_ids.sort_unstable();
        for i in 0..n {
            if self.split[i] == Split::Query && gallery_ids.binary_search(&self.ids[i]).is_err() {
                return Err(PegError::Config(format!(
                    "query identity {} has no gallery sample",
                    self.ids[i]
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the Gaussian identity mixture with per-camera offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub dim: usize,
    pub intra_std: f64,
    pub camera_count: usize,
    pub camera_shift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_identities: 20,
            samples_per_identity: 40,
            dim: 32,
            intra_std: 0.8,
            camera_count: 4,
            camera_shift: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(PegError::Config("num_identities must be >= 2".into()));
        }
        if self.samples_per_identity < 2 {
            return Err(PegError::Config("samples_per_identity must be >= 2".into()));
        }
        if self.dim == 0 || self.camera_count == 0 {
            return Err(PegError::Config("dim and camera_count must be >= 1".into()));
        }
        if !(self.intra_std >= 0.0 && self.intra_std.is_finite()) {
            return Err(PegError::Config("intra_std must be finite and >= 0".into()));
        }
        if !(self.camera_shift >= 0.0 && self.camera_shift.is_finite()) {
            return Err(PegError::Config("camera_shift must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Draws identity centers from a unit normal, then samples around them with
/// `intra_std` plus the camera's fixed offset. All samples start tagged
/// [`Split::Train`].
pub fn generate_synthetic(spec: &SynthSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.num_identities * spec.samples_per_identity;
    let d = spec.dim;

    let centers: Vec<Vec<f64>> = (0..spec.num_identities)
        .map(|_| (0..d).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let shifts: Vec<Vec<f64>> = (0..spec.camera_count)
        .map(|_| (0..d).map(|_| spec.camera_shift * unit.sample(&mut rng)).collect())
        .collect();

    let mut features = Array2::<f32>::zeros((n, d));
    let mut ids = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    for id in 0..spec.num_identities {
        for j in 0..spec.samples_per_identity {
            let row = id * spec.samples_per_identity + j;
            let cam = (id + j) % spec.camera_count;
            for k in 0..d {
                let noise = spec.intra_std * unit.sample(&mut rng);
                features[[row, k]] = (centers[id][k] + shifts[cam][k] + noise) as f32;
            }
            ids.push(id as i32);
            cameras.push(cam as i32);
        }
    }
    Ok(FeatureDataset {
        features,
        ids,
        cameras,
        split: vec![Split::Train; n],
    })
}

/// Replaces exactly `round(fraction * N)` labels, chosen uniformly without
/// replacement, with a uniformly drawn label different from the original.
pub fn corrupt_labels(ids: &[i32], fraction: f64, num_ids: usize, seed: u64) -> Result<Vec<i32>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(PegError::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    let count = (fraction * ids.len() as f64).round() as usize;
    if count == 0 {
        return Ok(ids.to_vec());
    }
    if num_ids < 2 {
        return Err(PegError::Config(
            "cannot draw a different label with fewer than 2 identities".into(),
        ));
    }
    let mut rng = seed::rng(seed);
    let mut out = ids.to_vec();
    for idx in rand::seq::index::sample(&mut rng, ids.len(), count) {
        let old = ids[idx];
        let mut new = rng.random_range(0..num_ids as i32 - 1);
        if old >= 0 && (old as usize) < num_ids && new >= old {
            new += 1;
        }
        out[idx] = new;
    }
    Ok(out)
}

/// Tags `round(query_fraction * n_i)` samples of each identity as query
/// (at most `n_i - 1`) and the rest as gallery.
pub fn split_query_gallery(
    ds: &FeatureDataset,
    query_fraction: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    if !(0.0..=1.0).contains(&query_fraction) {
        return Err(PegError::Config(format!(
            "query_fraction {query_fraction} outside [0, 1]"
        )));
    }
    let mut by_id: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ds.ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let mut rng = seed::rng(seed);
    let mut split = vec![Split::Gallery; ds.len()];
    for (id, mut members) in by_id {
        if members.len() < 2 {
            return Err(PegError::Split(format!("identity {id} has a single sample")));
        }
        members.shuffle(&mut rng);
        let q = ((query_fraction * members.len() as f64).round() as usize).min(members.len() - 1);
        for &i in &members[..q] {
            split[i] = Split::Query;
        }
    }
    let out = FeatureDataset {
        split,
        ..ds.clone()
    };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Text,
    Binary,
}

pub fn save_dataset(ds: &FeatureDataset, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    let path = path.as_ref();
    ds.validate()?;
    let header = format!("{MAGIC} {VERSION} {} {}\n", ds.len(), ds.dim());
    let mut buf = header.into_bytes();
    match encoding {
        Encoding::Text => {
            use std::fmt::Write;
            let mut text = String::new();
            for (i, row) in ds.features.axis_iter(Axis(0)).enumerate() {
                write!(text, "{},{},{}", ds.ids[i], ds.cameras[i], ds.split[i].tag()).unwrap();
                for v in row {
                    write!(text, ",{v}").unwrap();
                }
                text.push('\n');
            }
            buf.extend_from_slice(text.as_bytes());
        }
        Encoding::Binary => {
            for (i, row) in ds.features.axis_iter(Axis(0)).enumerate() {
                buf.extend_from_slice(&ds.ids[i].to_le_bytes());
                buf.extend_from_slice(&ds.cameras[i].to_le_bytes());
                buf.push(ds.split[i].code());
                for v in row {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| PegError::io(path, e))
}

/// Loads either encoding; a body containing NUL bytes or invalid UTF-8 is
/// read as binary.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PegError::io(path, e))?;
    parse_dataset(&bytes)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<FeatureDataset> {
    let (n, d, body_start) = parse_header(bytes)?;
    let body = &bytes[body_start..];
    let binary = body.contains(&0) || std::str::from_utf8(body).is_err();
    let ds = if binary {
        parse_binary_body(body, body_start, n, d)?
    } else {
        parse_text_body(std::str::from_utf8(body).unwrap(), body_start, n, d)?
    };
    ds.validate().map_err(|e| PegError::Parse {
        line: 0,
        byte: 0,
        msg: e.to_string(),
    })?;
    Ok(ds)
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    let missing = || PegError::Parse {
        line: 1,
        byte: 0,
        msg: "missing header".into(),
    };
    if bytes.is_empty() {
        return Err(missing());
    }
    let end = bytes.iter().position(|&b| b == b'\n').ok_or_else(missing)?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| missing())?;
    let parts: Vec<&str> = line.trim_end_matches('\r').split(' ').collect();
    let bad = |msg: &str| PegError::Parse {
        line: 1,
        byte: 0,
        msg: format!("malformed header `{line}`: {msg}"),
    };
    if parts.len() != 4 || parts[0] != MAGIC {
        return Err(bad("expected `PEGDS v1 <N> <D>`"));
    }
    if parts[1] != VERSION {
        return Err(bad("unsupported version"));
    }
    let n: usize = parts[2].parse().map_err(|_| bad("bad N"))?;
    let d: usize = parts[3].parse().map_err(|_| bad("bad D"))?;
    if n == 0 || d == 0 {
        return Err(bad("N and D must be positive"));
    }
    Ok((n, d, end + 1))
}

fn parse_text_body(body: &str, offset: usize, n: usize, d: usize) -> Result<FeatureDataset> {
    let mut features = Array2::<f32>::zeros((n, d));
    let mut ids = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let mut byte = offset;
    let mut lines = body.split_inclusive('\n');
    for row in 0..n {
        let line_no = row + 2;
        let raw = lines.next().ok_or_else(|| PegError::Parse {
            line: line_no,
            byte,
            msg: format!("truncated: expected {n} records, found {row}"),
        })?;
        let err = |msg: String| PegError::Parse {
            line: line_no,
            byte,
            msg,
        };
        let line = raw.trim_end_matches('\n').trim_end_matches('\r');
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 3 {
            return Err(err(format!(
                "row has {} fields, expected {}",
                fields.len(),
                d + 3
            )));
        }
        ids.push(fields[0].parse().map_err(|_| err(format!("bad id `{}`", fields[0])))?);
        cameras.push(
            fields[1]
                .parse()
                .map_err(|_| err(format!("bad camera `{}`", fields[1])))?,
        );
        split.push(
            Split::from_tag(fields[2]).ok_or_else(|| err(format!("unknown split tag `{}`", fields[2])))?,
        );
        for k in 0..d {
            let v: f32 = fields[k + 3]
                .parse()
                .map_err(|_| err(format!("bad feature `{}`", fields[k + 3])))?;
            features[[row, k]] = v;
        }
        byte += raw.len();
    }
    if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
        return Err(PegError::Parse {
            line: n + 2,
            byte,
            msg: format!("trailing data after {n} records: `{}`", extra.trim_end()),
        });
    }
    Ok(FeatureDataset {
        features,
        ids,
        cameras,
        split,
    })
}

fn parse_binary_body(body: &[u8], offset: usize, n: usize, d: usize) -> Result<FeatureDataset> {
    let record = 9 + 4 * d;
    if body.len() != n * record {
        let complete = body.len() / record;
        return Err(PegError::Parse {
            line: 2,
            byte: offset + complete * record,
            msg: format!(
                "binary body is {} bytes, expected {} ({n} records of {record})",
                body.len(),
                n * record
            ),
        });
    }
    let mut features = Array2::<f32>::zeros((n, d));
    let mut ids = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for (row, rec) in body.chunks_exact(record).enumerate() {
        ids.push(i32::from_le_bytes(rec[0..4].try_into().unwrap()));
        cameras.push(i32::from_le_bytes(rec[4..8].try_into().unwrap()));
        split.push(Split::from_code(rec[8]).ok_or_else(|| PegError::Parse {
            line: 2,
            byte: offset + row * record + 8,
            msg: format!("unknown split code {}", rec[8]),
        })?);
        for (k, chunk) in rec[9..].chunks_exact(4).enumerate() {
            features[[row, k]] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(FeatureDataset {
        features,
        ids,
        cameras,
        split,
    })
}
