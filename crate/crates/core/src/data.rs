//! Binary datasets stored as whitespace-separated `0`/`1` text, one example
//! per line. Files ending in `.gz` are decompressed transparently.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::error::{MadeError, Result};
use crate::scalar::Scalar;
use crate::seed::{self, Stream};

pub type BinaryMatrix = Array2<u8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn suffix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

impl FromStr for Split {
    type Err = MadeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(MadeError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub train: BinaryMatrix,
    pub valid: BinaryMatrix,
    pub test: BinaryMatrix,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        train: BinaryMatrix,
        valid: BinaryMatrix,
        test: BinaryMatrix,
    ) -> Result<Self> {
        let dim = train.ncols();
        for (split, m) in [(Split::Valid, &valid), (Split::Test, &test)] {
            if m.ncols() != dim && m.nrows() > 0 {
                return Err(MadeError::Shape(format!(
                    "{split} split has D={} but train has D={dim}",
                    m.ncols()
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            dim,
            train,
            valid,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &BinaryMatrix {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.nrows(), self.valid.nrows(), self.test.nrows())
    }
}

/// Parses the text format. Blank lines are ignored.
pub fn parse_split<R: BufRead>(reader: R) -> Result<BinaryMatrix> {
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MadeError::io("<split>", e))?;
        let before = data.len();
        for (j, tok) in line.split_whitespace().enumerate() {
            match tok {
                "0" => data.push(0u8),
                "1" => data.push(1u8),
                other => {
                    return Err(MadeError::Parse {
                        line: i + 1,
                        column: j + 1,
                        message: format!("expected 0 or 1, found {other:?}"),
                    })
                }
            }
        }
        let n = data.len() - before;
        if n == 0 {
            continue;
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(MadeError::Shape(format!(
                    "line {} has {n} values, previous lines have {w}",
                    i + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.unwrap_or(0);
    Ok(Array2::from_shape_vec((rows, width), data).expect("row widths checked"))
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| MadeError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

pub fn load_split(path: impl AsRef<Path>) -> Result<BinaryMatrix> {
    let path = path.as_ref();
    parse_split(BufReader::new(open(path)?)).map_err(|e| match e {
        MadeError::Io { source, .. } => MadeError::io(path, source),
        other => other,
    })
}

/// Canonical writer: single spaces, LF line ends, trailing newline.
pub fn write_split<W: Write>(matrix: ArrayView2<'_, u8>, out: &mut W) -> std::io::Result<()> {
    let mut line = String::with_capacity(matrix.ncols() * 2);
    for row in matrix.rows() {
        line.clear();
        for (j, &v) in row.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            line.push(if v == 0 { '0' } else { '1' });
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn find_file(candidates: &[PathBuf]) -> Result<PathBuf> {
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| {
            MadeError::io(
                candidates[0].clone(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            )
        })
}

/// Path of `<name>.<split>` (or its `.gz` variant) under `dir`.
pub fn split_path(dir: &Path, name: &str, split: Split) -> Result<PathBuf> {
    let plain = dir.join(format!("{name}.{split}"));
    let gz = dir.join(format!("{name}.{split}.gz"));
    find_file(&[plain, gz])
}

/// Loads `<name>.train`, `<name>.valid` and `<name>.test` from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>, name: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    if name == "binarized_mnist" && split_path(dir, name, Split::Train).is_err() {
        return binarized_mnist_loader(dir);
    }
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        splits.push(load_split(split_path(dir, name, split)?)?);
    }
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Dataset::new(name, train, valid, test)
}

pub const MNIST_DIM: usize = 784;

/// Fixed-binarization MNIST: `binarized_mnist_{train,valid,test}.amat`
/// (optionally gzipped) or `binarized_mnist.{train,valid,test}`.
pub fn binarized_mnist_loader(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let path = find_file(&[
            dir.join(format!("binarized_mnist_{split}.amat")),
            dir.join(format!("binarized_mnist_{split}.amat.gz")),
            dir.join(format!("binarized_mnist.{split}")),
            dir.join(format!("binarized_mnist.{split}.gz")),
        ])?;
        let m = load_split(path)?;
        if m.ncols() != MNIST_DIM {
            return Err(MadeError::Shape(format!(
                "binarized MNIST {split} split has D={}, expected {MNIST_DIM}",
                m.ncols()
            )));
        }
        splits.push(m);
    }
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Dataset::new("binarized_mnist", train, valid, test)
}

/// Row indices of `n` examples shuffled by `epoch_seed`, chunked into batches.
/// The last batch may be smaller.
pub fn minibatch_indices(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream_rng(epoch_seed, Stream::Shuffle, 0));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn minibatches(
    matrix: ArrayView2<'_, u8>,
    batch_size: usize,
    epoch_seed: u64,
) -> Vec<BinaryMatrix> {
    minibatch_indices(matrix.nrows(), batch_size, epoch_seed)
        .iter()
        .map(|idx| matrix.select(Axis(0), idx))
        .collect()
}

/// 0/1 bytes as scalars, ready for the network.
pub fn to_scalar<F: Scalar>(matrix: ArrayView2<'_, u8>) -> Array2<F> {
    matrix.mapv(|v| if v == 0 { F::zero() } else { F::one() })
}

pub fn gather<F: Scalar>(matrix: ArrayView2<'_, u8>, rows: &[usize]) -> Array2<F> {
    to_scalar(matrix.select(Axis(0), rows).view())
}
