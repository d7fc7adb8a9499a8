//! Orderings, connectivity constraints and the binary masks derived from them.
//!
//! An [`Ordering`] stores `m⁰`: `position(d)` is the 1-based place of input
//! dimension `d` in the product of conditionals. Hidden unit `k` of layer `l`
//! carries a connectivity value `mˡ(k)` in `1..=D-1`, the largest ordering
//! position it may (transitively) read. Masks are then
//!
//! * hidden: `M^{Wˡ}[k', k] = 1` iff `mˡ(k') >= m^{l-1}(k)`,
//! * output: `M^V[d, k] = 1` iff `m⁰(d) > m^L(k)`,
//! * direct: `M^A[d', d] = 1` iff `m⁰(d') > m⁰(d)`,
//!
//! which makes every output depend only on inputs earlier in the ordering.

use std::fmt;
use std::io::{BufRead, Write};

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{MadeError, Result};
use crate::scalar::Scalar;
use crate::seed::{self, Stream};

/// Position of each input dimension in the autoregressive product (`m⁰`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ordering {
    positions: Vec<usize>,
}

impl Ordering {
    /// Builds an ordering from 1-based positions, one per input dimension.
    pub fn new(positions: Vec<usize>) -> Result<Self> {
        if positions.is_empty() {
            return Err(MadeError::InvalidDimension("ordering needs D >= 1".into()));
        }
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &p)| p != i + 1) {
            return Err(MadeError::InvalidDimension(format!(
                "{positions:?} is not a permutation of 1..={}",
                positions.len()
            )));
        }
        Ok(Ordering { positions })
    }

    pub fn natural(dim: usize) -> Result<Self> {
        natural_ordering(dim)
    }

    pub fn dim(&self) -> usize {
        self.positions.len()
    }

    /// `m⁰(d)` for a 0-based dimension index.
    pub fn position(&self, d: usize) -> usize {
        self.positions[d]
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Dimension indices listed in conditioning order (first conditional first).
    pub fn dims_in_order(&self) -> Vec<usize> {
        let mut dims = vec![0; self.dim()];
        for (d, &p) in self.positions.iter().enumerate() {
            dims[p - 1] = d;
        }
        dims
    }
}

/// Per-layer connectivity values `mˡ(k)` for hidden layers `1..=L`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Connectivity {
    dim: usize,
    layers: Vec<Vec<usize>>,
}

impl Connectivity {
    /// Validates `1 <= mˡ(k) <= D-1` and the previous-layer minimum rule.
    pub fn new(dim: usize, layers: Vec<Vec<usize>>) -> Result<Self> {
        if dim < 2 {
            return Err(MadeError::InvalidDimension(format!(
                "connectivity needs D >= 2, got {dim}"
            )));
        }
        let mut prev_min = 1;
        for (l, layer) in layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(MadeError::Shape(format!("hidden layer {} is empty", l + 1)));
            }
            if let Some(&bad) = layer.iter().find(|&&m| m < prev_min || m > dim - 1) {
                return Err(MadeError::InvalidDimension(format!(
                    "layer {} value {bad} outside {prev_min}..={}",
                    l + 1,
                    dim - 1
                )));
            }
            prev_min = *layer.iter().min().unwrap();
        }
        Ok(Connectivity { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }
}

/// Where a mask set came from, so it can be regenerated instead of stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedRecord {
    pub master: u64,
    pub stream: Stream,
    pub index: u64,
}

/// All masks for one sampled (ordering, connectivity) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    ordering: Ordering,
    connectivity: Option<Connectivity>,
    hidden: Vec<Array2<u8>>,
    output: Array2<u8>,
    direct: Option<Array2<u8>>,
    seed: Option<SeedRecord>,
}

impl MaskSet {
    /// Assembles a mask set from explicit matrices. Only shapes are checked;
    /// use [`verify_autoregressive`] to check the masks themselves.
    pub fn from_parts(
        ordering: Ordering,
        connectivity: Option<Connectivity>,
        hidden: Vec<Array2<u8>>,
        output: Array2<u8>,
        direct: Option<Array2<u8>>,
    ) -> Result<Self> {
        let dim = ordering.dim();
        if hidden.is_empty() {
            return Err(MadeError::Shape(
                "at least one hidden mask is required".into(),
            ));
        }
        let mut cols = dim;
        for (l, m) in hidden.iter().enumerate() {
            if m.ncols() != cols || m.nrows() == 0 {
                return Err(MadeError::Shape(format!(
                    "hidden mask {} is {}x{}, expected ?x{cols}",
                    l + 1,
                    m.nrows(),
                    m.ncols()
                )));
            }
            cols = m.nrows();
        }
        if output.dim() != (dim, cols) {
            return Err(MadeError::Shape(format!(
                "output mask is {:?}, expected ({dim}, {cols})",
                output.dim()
            )));
        }
        if let Some(a) = &direct {
            if a.dim() != (dim, dim) {
                return Err(MadeError::Shape(format!(
                    "direct mask is {:?}, expected ({dim}, {dim})",
                    a.dim()
                )));
            }
        }
        if let Some(c) = &connectivity {
            let sizes: Vec<usize> = hidden.iter().map(Array2::nrows).collect();
            if c.dim() != dim || c.layer_sizes() != sizes {
                return Err(MadeError::Shape(
                    "connectivity does not match the mask shapes".into(),
                ));
            }
        }
        Ok(MaskSet {
            ordering,
            connectivity,
            hidden,
            output,
            direct,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: SeedRecord) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn dim(&self) -> usize {
        self.ordering.dim()
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn connectivity(&self) -> Option<&Connectivity> {
        self.connectivity.as_ref()
    }

    pub fn seed(&self) -> Option<SeedRecord> {
        self.seed
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.hidden.iter().map(Array2::nrows).collect()
    }

    /// `M^{Wˡ}` for 0-based hidden layer `l`.
    pub fn hidden(&self, l: usize) -> &Array2<u8> {
        &self.hidden[l]
    }

    pub fn hidden_masks(&self) -> &[Array2<u8>] {
        &self.hidden
    }

    pub fn output(&self) -> &Array2<u8> {
        &self.output
    }

    pub fn direct(&self) -> Option<&Array2<u8>> {
        self.direct.as_ref()
    }

    pub fn has_direct(&self) -> bool {
        self.direct.is_some()
    }
}

/// Converts a 0/1 mask to the scalar type for elementwise products.
pub(crate) fn as_scalar<F: Scalar>(mask: &Array2<u8>) -> Array2<F> {
    mask.mapv(|v| if v == 0 { F::zero() } else { F::one() })
}

pub fn natural_ordering(dim: usize) -> Result<Ordering> {
    if dim == 0 {
        return Err(MadeError::InvalidDimension("D must be >= 1".into()));
    }
    Ok(Ordering {
        positions: (1..=dim).collect(),
    })
}

/// Uniformly random ordering of `dim` inputs.
pub fn sample_ordering<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Ordering> {
    let mut ordering = natural_ordering(dim)?;
    ordering.positions.shuffle(rng);
    Ok(ordering)
}

/// Uniformly random ordering in which every dimension of `observed` comes
/// before every other dimension. Used to set up imputation.
pub fn sample_ordering_observed_first<R: Rng + ?Sized>(
    dim: usize,
    observed: &[usize],
    rng: &mut R,
) -> Result<Ordering> {
    if dim == 0 {
        return Err(MadeError::InvalidDimension("D must be >= 1".into()));
    }
    let mut is_observed = vec![false; dim];
    for &d in observed {
        if d >= dim {
            return Err(MadeError::Shape(format!("observed index {d} >= D={dim}")));
        }
        is_observed[d] = true;
    }
    let (mut first, mut rest): (Vec<usize>, Vec<usize>) = (0..dim).partition(|&d| is_observed[d]);
    first.shuffle(rng);
    rest.shuffle(rng);
    let mut positions = vec![0; dim];
    for (i, &d) in first.iter().chain(rest.iter()).enumerate() {
        positions[d] = i + 1;
    }
    Ok(Ordering { positions })
}

/// Draws `mˡ(k)` uniformly on `{min_{k'} m^{l-1}(k'), …, D-1}` layer by layer,
/// starting from `prev_min` for the first hidden layer.
pub fn sample_connectivity<R: Rng + ?Sized>(
    layer_sizes: &[usize],
    prev_min: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Connectivity> {
    if dim < 2 {
        return Err(MadeError::InvalidDimension(format!(
            "no legal connectivity values exist for D={dim}"
        )));
    }
    if prev_min < 1 || prev_min > dim - 1 {
        return Err(MadeError::InvalidDimension(format!(
            "previous-layer minimum {prev_min} outside 1..={}",
            dim - 1
        )));
    }
    let mut lo = prev_min;
    let mut layers = Vec::with_capacity(layer_sizes.len());
    for (l, &size) in layer_sizes.iter().enumerate() {
        if size == 0 {
            return Err(MadeError::Shape(format!(
                "hidden layer {} has zero units",
                l + 1
            )));
        }
        let layer: Vec<usize> = (0..size).map(|_| rng.gen_range(lo..=dim - 1)).collect();
        lo = *layer.iter().min().unwrap();
        layers.push(layer);
    }
    Ok(Connectivity { dim, layers })
}

fn ge_mask(rows: &[usize], cols: &[usize]) -> Array2<u8> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
        u8::from(rows[i] >= cols[j])
    })
}

fn gt_mask(rows: &[usize], cols: &[usize]) -> Array2<u8> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
        u8::from(rows[i] > cols[j])
    })
}

/// Builds every mask implied by an ordering and a connectivity.
pub fn build_masks(
    ordering: &Ordering,
    connectivity: &Connectivity,
    use_direct: bool,
) -> Result<MaskSet> {
    if ordering.dim() != connectivity.dim() {
        return Err(MadeError::Shape(format!(
            "ordering has D={} but connectivity was sampled for D={}",
            ordering.dim(),
            connectivity.dim()
        )));
    }
    let m0 = ordering.positions();
    let mut hidden = Vec::with_capacity(connectivity.layers.len());
    let mut prev = m0;
    for layer in &connectivity.layers {
        hidden.push(ge_mask(layer, prev));
        prev = layer;
    }
    let output = gt_mask(m0, prev);
    let direct = use_direct.then(|| gt_mask(m0, m0));
    Ok(MaskSet {
        ordering: ordering.clone(),
        connectivity: Some(connectivity.clone()),
        hidden,
        output,
        direct,
        seed: None,
    })
}

/// One full sampling pass (ordering and connectivity) from a dedicated stream.
pub fn sample_mask_set(
    dim: usize,
    layer_sizes: &[usize],
    use_direct: bool,
    record: SeedRecord,
) -> Result<MaskSet> {
    let mut rng = seed::stream_rng(record.master, record.stream, record.index);
    let ordering = sample_ordering(dim, &mut rng)?;
    let connectivity = sample_connectivity(layer_sizes, 1, dim, &mut rng)?;
    Ok(build_masks(&ordering, &connectivity, use_direct)?.with_seed(record))
}

/// Natural ordering with sampled connectivity: the single-mask configuration.
pub fn fixed_mask(
    dim: usize,
    layer_sizes: &[usize],
    master_seed: u64,
    use_direct: bool,
) -> Result<MaskSet> {
    let record = SeedRecord {
        master: master_seed,
        stream: Stream::Fixed,
        index: 0,
    };
    let mut rng = seed::stream_rng(record.master, record.stream, record.index);
    let ordering = natural_ordering(dim)?;
    let connectivity = sample_connectivity(layer_sizes, 1, dim, &mut rng)?;
    Ok(build_masks(&ordering, &connectivity, use_direct)?.with_seed(record))
}

/// `count` mask sets drawn from `stream`; entry `i` depends only on
/// `(master_seed, stream, i)`.
pub fn mask_stream(
    count: usize,
    dim: usize,
    layer_sizes: &[usize],
    master_seed: u64,
    stream: Stream,
    use_direct: bool,
) -> Result<Vec<MaskSet>> {
    if count == 0 {
        return Err(MadeError::InvalidCount(
            "mask list needs at least one entry".into(),
        ));
    }
    (0..count as u64)
        .map(|index| {
            sample_mask_set(
                dim,
                layer_sizes,
                use_direct,
                SeedRecord {
                    master: master_seed,
                    stream,
                    index,
                },
            )
        })
        .collect()
}

/// Finite list of `count` independently sampled mask sets for cycling.
pub fn make_mask_list(
    count: usize,
    dim: usize,
    layer_sizes: &[usize],
    master_seed: u64,
    use_direct: bool,
) -> Result<Vec<MaskSet>> {
    mask_stream(
        count,
        dim,
        layer_sizes,
        master_seed,
        Stream::MaskList,
        use_direct,
    )
}

fn matmul_u64(a: &Array2<u64>, b: &Array2<u64>) -> Array2<u64> {
    let (n, inner) = a.dim();
    let m = b.ncols();
    let mut out = Array2::<u64>::zeros((n, m));
    for i in 0..n {
        for k in 0..inner {
            let aik = a[(i, k)];
            if aik == 0 {
                continue;
            }
            let brow = b.row(k);
            let mut orow = out.row_mut(i);
            Zip::from(&mut orow)
                .and(&brow)
                .for_each(|o, &bv| *o += aik * bv);
        }
    }
    out
}

/// Number of masked paths from input `d` to output `d'`, as a `D x D` matrix
/// indexed `[d', d]`. Direct connections add one path where present.
pub fn connectivity_product(masks: &MaskSet) -> Array2<u64> {
    // Path counts are bounded by the product of layer widths; while that stays
    // below 2^53 the float product is exact and much faster.
    let bound = masks
        .hidden
        .iter()
        .fold(1f64, |acc, m| acc * m.nrows() as f64);
    let mut product = if bound < 9.0e15 {
        let mut acc: Array2<f64> = as_scalar(&masks.hidden[0]);
        for m in &masks.hidden[1..] {
            acc = as_scalar::<f64>(m).dot(&acc);
        }
        as_scalar::<f64>(&masks.output).dot(&acc).mapv(|v| v as u64)
    } else {
        let widen = |m: &Array2<u8>| m.mapv(u64::from);
        let mut acc = widen(&masks.hidden[0]);
        for m in &masks.hidden[1..] {
            acc = matmul_u64(&widen(m), &acc);
        }
        matmul_u64(&widen(&masks.output), &acc)
    };
    if let Some(a) = &masks.direct {
        Zip::from(&mut product)
            .and(a)
            .for_each(|p, &v| *p += u64::from(v));
    }
    product
}

/// Outcome of checking the autoregressive property of a mask set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationReport {
    /// `(d', d)` pairs (0-based output, input) with a path although
    /// `m⁰(d') <= m⁰(d)`.
    pub violations: Vec<(usize, usize)>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "autoregressive: ok");
        }
        write!(f, "autoregressive: {} violation(s)", self.violations.len())?;
        for (out, inp) in &self.violations {
            write!(f, "\n  output {out} depends on input {inp}")?;
        }
        Ok(())
    }
}

pub fn verify_autoregressive(masks: &MaskSet) -> VerificationReport {
    let product = connectivity_product(masks);
    let m0 = masks.ordering.positions();
    let violations = product
        .indexed_iter()
        .filter(|&((out, inp), &paths)| paths != 0 && m0[out] <= m0[inp])
        .map(|(idx, _)| idx)
        .collect();
    VerificationReport { violations }
}

/// Writes a mask set as plain 0/1 text.
///
/// ```text
/// ordering=<m⁰ values>
/// m<l>=<connectivity of layer l>      (optional, one line per hidden layer)
/// layer=<l> rows=<rows> cols=<cols>   (hidden 1..=L, output L+1, direct L+2)
/// <rows lines of space-separated 0/1>
/// ```
///
/// Blocks are separated by a blank line.
pub fn write_dump<W: Write>(masks: &MaskSet, out: &mut W) -> std::io::Result<()> {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    writeln!(out, "ordering={}", join(masks.ordering.positions()))?;
    if let Some(c) = &masks.connectivity {
        for (l, layer) in c.layers().iter().enumerate() {
            writeln!(out, "m{}={}", l + 1, join(layer))?;
        }
    }
    let blocks = masks
        .hidden
        .iter()
        .chain(std::iter::once(&masks.output))
        .chain(masks.direct.iter());
    for (l, m) in blocks.enumerate() {
        writeln!(out)?;
        writeln!(out, "layer={} rows={} cols={}", l + 1, m.nrows(), m.ncols())?;
        for row in m.rows() {
            let line: Vec<&str> = row
                .iter()
                .map(|&v| if v == 0 { "0" } else { "1" })
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

fn parse_usizes(text: &str, line: usize) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| MadeError::Parse {
                line,
                column: 0,
                message: format!("expected an integer, found {t:?}"),
            })
        })
        .collect()
}

/// Reads the format produced by [`write_dump`]. The number of hidden layers
/// is taken from the `m<l>=` lines when present; otherwise a block is the
/// direct mask exactly when it is square, follows a `D`-row output block, and
/// is the last block.
pub fn read_dump<R: BufRead>(input: R) -> Result<MaskSet> {
    let mut ordering = None;
    let mut conn_layers: Vec<Vec<usize>> = Vec::new();
    let mut blocks: Vec<Array2<u8>> = Vec::new();
    let mut current: Option<(usize, usize, Vec<u8>)> = None;
    let finish = |cur: &mut Option<(usize, usize, Vec<u8>)>, blocks: &mut Vec<Array2<u8>>, line| {
        if let Some((rows, cols, data)) = cur.take() {
            if data.len() != rows * cols {
                return Err(MadeError::Parse {
                    line,
                    column: 0,
                    message: format!(
                        "block declared {rows}x{cols} but holds {} values",
                        data.len()
                    ),
                });
            }
            blocks.push(Array2::from_shape_vec((rows, cols), data).unwrap());
        }
        Ok(())
    };
    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| MadeError::io("<mask dump>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("ordering=") {
            ordering = Some(Ordering::new(parse_usizes(rest, lineno)?)?);
        } else if let Some(rest) = line.strip_prefix("layer=") {
            finish(&mut current, &mut blocks, lineno)?;
            let mut rows = None;
            let mut cols = None;
            for field in rest.split_whitespace().skip(1) {
                if let Some(v) = field.strip_prefix("rows=") {
                    rows = v.parse().ok();
                } else if let Some(v) = field.strip_prefix("cols=") {
                    cols = v.parse().ok();
                }
            }
            match (rows, cols) {
                (Some(r), Some(c)) => current = Some((r, c, Vec::with_capacity(r * c))),
                _ => {
                    return Err(MadeError::Parse {
                        line: lineno,
                        column: 0,
                        message: "layer header needs rows= and cols=".into(),
                    })
                }
            }
        } else if line.starts_with('m') && line.contains('=') && current.is_none() {
            let (_, rest) = line.split_once('=').unwrap();
            conn_layers.push(parse_usizes(rest, lineno)?);
        } else if let Some((_, _, data)) = current.as_mut() {
            for (j, tok) in line.split_whitespace().enumerate() {
                match tok {
                    "0" => data.push(0),
                    "1" => data.push(1),
                    other => {
                        return Err(MadeError::Parse {
                            line: lineno,
                            column: j + 1,
                            message: format!("expected 0 or 1, found {other:?}"),
                        })
                    }
                }
            }
        } else {
            return Err(MadeError::Parse {
                line: lineno,
                column: 0,
                message: format!("unexpected line {line:?}"),
            });
        }
    }
    finish(&mut current, &mut blocks, 0)?;
    let ordering =
        ordering.ok_or_else(|| MadeError::Format("mask dump has no ordering line".into()))?;
    let dim = ordering.dim();
    let n_hidden = if !conn_layers.is_empty() {
        conn_layers.len()
    } else {
        let n = blocks.len();
        let last_is_direct =
            n >= 3 && blocks[n - 1].dim() == (dim, dim) && blocks[n - 2].nrows() == dim;
        if last_is_direct {
            n - 2
        } else {
            n.saturating_sub(1)
        }
    };
    if blocks.len() < n_hidden + 1 || blocks.len() > n_hidden + 2 {
        return Err(MadeError::Format(format!(
            "mask dump has {} blocks for {n_hidden} hidden layers",
            blocks.len()
        )));
    }
    let direct = (blocks.len() == n_hidden + 2).then(|| blocks.pop().unwrap());
    let output = blocks.pop().unwrap();
    let connectivity = if conn_layers.is_empty() {
        None
    } else {
        Some(Connectivity::new(dim, conn_layers)?)
    };
    MaskSet::from_parts(ordering, connectivity, blocks, output, direct)
}
