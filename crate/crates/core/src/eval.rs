//! Evaluation: ensemble likelihoods, exhaustive oracles, sampling and
//! imputation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::data::to_scalar;
use crate::error::{MadeError, Result};
use crate::masks::MaskSet;
use crate::network::{self, Activation, MadeParams};
use crate::scalar::Scalar;

/// Rows evaluated per forward pass when scanning a whole split.
const EVAL_CHUNK: usize = 2048;

/// Largest dimension accepted by [`brute_force_pmf`].
pub const MAX_ENUMERATION_DIM: usize = 20;

fn logsumexp<F: Scalar>(values: impl Iterator<Item = F> + Clone) -> F {
    let max = values.clone().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + values
        .map(|v| (v - max).exp())
        .fold(F::zero(), |a, b| a + b)
        .ln()
}

/// Log of the probability averaged over every mask set in `ensemble`:
/// `logsumexp_r log p_r(x) - log R`.
pub fn ensemble_log_prob<F: Scalar>(
    params: &MadeParams<F>,
    ensemble: &[MaskSet],
    x: ArrayView2<'_, F>,
) -> Result<Array1<F>> {
    if ensemble.is_empty() {
        return Err(MadeError::InvalidCount(
            "ensemble needs at least one mask set".into(),
        ));
    }
    if ensemble.len() == 1 {
        return network::log_prob(params, &ensemble[0], x);
    }
    let per_mask = ensemble
        .iter()
        .map(|m| network::log_prob(params, m, x))
        .collect::<Result<Vec<_>>>()?;
    let log_r = F::of(ensemble.len() as f64).ln();
    Ok(Array1::from_shape_fn(x.nrows(), |i| {
        logsumexp(per_mask.iter().map(|lp| lp[i])) - log_r
    }))
}

/// Per-example `-log p̄(x)` over a whole split, evaluated in chunks.
pub fn example_nlls<F: Scalar>(
    params: &MadeParams<F>,
    ensemble: &[MaskSet],
    split: ArrayView2<'_, u8>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(split.nrows());
    for chunk in split.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        let x: Array2<F> = to_scalar(chunk);
        out.extend(
            ensemble_log_prob(params, ensemble, x.view())?
                .iter()
                .map(|v| -v.widen()),
        );
    }
    Ok(out)
}

/// Mean NLL with a Gaussian 95% confidence half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllEstimate {
    pub mean: f64,
    pub ci95: f64,
    pub count: usize,
}

impl NllEstimate {
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(MadeError::Config("cannot evaluate an empty split".into()));
        }
        // Shifted by the first value so identical inputs give exactly zero spread.
        let shift = values[0];
        let offset = values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
        let mean = shift + offset;
        // A single example carries no spread information; the half-width is 0.
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = values
                .iter()
                .map(|v| (v - shift - offset).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        Ok(NllEstimate {
            mean,
            ci95,
            count: n,
        })
    }
}

pub fn test_nll<F: Scalar>(
    params: &MadeParams<F>,
    ensemble: &[MaskSet],
    split: ArrayView2<'_, u8>,
) -> Result<NllEstimate> {
    if split.nrows() == 0 {
        return Err(MadeError::Config("cannot evaluate an empty split".into()));
    }
    NllEstimate::from_samples(&example_nlls(params, ensemble, split)?)
}

/// All `2^D` binary vectors; bit `d` of the row index is `x_d`.
pub fn enumerate_inputs<F: Scalar>(dim: usize) -> Array2<F> {
    Array2::from_shape_fn((1usize << dim, dim), |(i, d)| {
        if (i >> d) & 1 == 1 {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// `p(x)` for every `x ∈ {0,1}^D`, indexed as in [`enumerate_inputs`].
pub fn brute_force_pmf<F: Scalar>(params: &MadeParams<F>, masks: &MaskSet) -> Result<Array1<F>> {
    let dim = params.arch.dim;
    if dim > MAX_ENUMERATION_DIM {
        return Err(MadeError::Refused(format!(
            "enumerating 2^{dim} inputs exceeds the D <= {MAX_ENUMERATION_DIM} guard"
        )));
    }
    let all = enumerate_inputs::<F>(dim);
    let mut pmf = Array1::zeros(all.nrows());
    for (i, chunk) in all.axis_chunks_iter(Axis(0), 1 << 14).enumerate() {
        let lp = network::log_prob(params, masks, chunk)?;
        let start = i << 14;
        pmf.slice_mut(s![start..start + lp.len()])
            .assign(&lp.mapv(F::exp));
    }
    Ok(pmf)
}

/// Row index of a binary vector in [`enumerate_inputs`] order.
pub fn pattern_index(x: ArrayView1<'_, u8>) -> usize {
    x.iter()
        .enumerate()
        .fold(0, |acc, (d, &v)| acc | (usize::from(v != 0) << d))
}

/// Fills the dimensions at ordering positions `from..=D` of every row of `x`
/// by ancestral sampling. One forward pass per position.
fn fill_ancestral<F: Scalar, R: Rng + ?Sized>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    x: &mut Array2<F>,
    from: usize,
    rng: &mut R,
) -> Result<()> {
    let order = masks.ordering().dims_in_order();
    for &d in &order[from - 1..] {
        let trace = network::forward(params, masks, x.view())?;
        for (row, z) in trace.logits.column(d).iter().enumerate() {
            let p = z.sigmoid().widen();
            x[(row, d)] = if rng.gen::<f64>() < p {
                F::one()
            } else {
                F::zero()
            };
        }
    }
    Ok(())
}

const SAMPLE_CHUNK: usize = 1 << 16;

/// Ancestral sampling of `n` vectors, visiting dimensions in ordering
/// sequence. Unfilled dimensions hold `fill` (they are never read by a valid
/// mask set).
pub fn sample_with_fill<F: Scalar, R: Rng + ?Sized>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    n: usize,
    fill: u8,
    rng: &mut R,
) -> Result<Array2<u8>> {
    params.check_masks(masks)?;
    let dim = params.arch.dim;
    let mut out = Array2::<u8>::zeros((n, dim));
    let fill = if fill == 0 { F::zero() } else { F::one() };
    let mut start = 0;
    while start < n {
        let rows = SAMPLE_CHUNK.min(n - start);
        let mut x = Array2::from_elem((rows, dim), fill);
        fill_ancestral(params, masks, &mut x, 1, rng)?;
        out.slice_mut(s![start..start + rows, ..])
            .assign(&x.mapv(|v| u8::from(v != F::zero())));
        start += rows;
    }
    Ok(out)
}

pub fn sample<F: Scalar, R: Rng + ?Sized>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    n: usize,
    rng: &mut R,
) -> Result<Array2<u8>> {
    sample_with_fill(params, masks, n, 0, rng)
}

/// Samples `n` rows in groups of `group` consecutive rows; group `g` uses
/// `masks[g % masks.len()]`.
pub fn sample_cycling<F: Scalar, R: Rng + ?Sized>(
    params: &MadeParams<F>,
    masks: &[MaskSet],
    n: usize,
    group: usize,
    rng: &mut R,
) -> Result<Array2<u8>> {
    if masks.is_empty() || group == 0 {
        return Err(MadeError::InvalidCount(
            "need at least one mask and a group size >= 1".into(),
        ));
    }
    let mut out = Array2::<u8>::zeros((n, params.arch.dim));
    for (g, start) in (0..n).step_by(group).enumerate() {
        let rows = group.min(n - start);
        let block = sample(params, &masks[g % masks.len()], rows, rng)?;
        out.slice_mut(s![start..start + rows, ..]).assign(&block);
    }
    Ok(out)
}

pub const TILE_SIDE: usize = 28;

/// Writes 28x28 binary samples as a binary PGM (`P5`) grid, `columns` tiles
/// wide. Ones are white. Writes nothing for an empty sample matrix.
pub fn write_pgm_grid<W: std::io::Write>(
    samples: ArrayView2<'_, u8>,
    columns: usize,
    out: &mut W,
) -> Result<()> {
    let pixels = TILE_SIDE * TILE_SIDE;
    if samples.ncols() != pixels {
        return Err(MadeError::Shape(format!(
            "PGM tiles need D={pixels}, samples have D={}",
            samples.ncols()
        )));
    }
    let n = samples.nrows();
    if n == 0 {
        return Ok(());
    }
    let columns = columns.clamp(1, n);
    let grid_rows = n.div_ceil(columns);
    let (width, height) = (columns * TILE_SIDE, grid_rows * TILE_SIDE);
    let mut image = vec![0u8; width * height];
    for (i, row) in samples.rows().into_iter().enumerate() {
        let (ty, tx) = (i / columns, i % columns);
        for (p, &v) in row.iter().enumerate() {
            let (py, px) = (p / TILE_SIDE, p % TILE_SIDE);
            image[(ty * TILE_SIDE + py) * width + tx * TILE_SIDE + px] =
                if v != 0 { 255 } else { 0 };
        }
    }
    let io = |e| MadeError::io("<pgm>", e);
    writeln!(out, "P5 {width} {height} 255").map_err(io)?;
    out.write_all(&image).map_err(io)
}

/// Completes `x` by sampling its unobserved dimensions conditioned on the
/// observed ones. The mask set's ordering must put every observed dimension
/// first; see [`crate::masks::sample_ordering_observed_first`].
pub fn impute<F: Scalar, R: Rng + ?Sized>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    x: ArrayView1<'_, u8>,
    observed: &[usize],
    rng: &mut R,
) -> Result<Array1<u8>> {
    params.check_masks(masks)?;
    let dim = params.arch.dim;
    if x.len() != dim {
        return Err(MadeError::Shape(format!(
            "vector has {} entries, D={dim}",
            x.len()
        )));
    }
    let mut is_observed = vec![false; dim];
    for &d in observed {
        if d >= dim {
            return Err(MadeError::Shape(format!("observed index {d} >= D={dim}")));
        }
        is_observed[d] = true;
    }
    let n_obs = is_observed.iter().filter(|&&o| o).count();
    let ordering = masks.ordering();
    if let Some(d) = (0..dim).find(|&d| is_observed[d] && ordering.position(d) > n_obs) {
        return Err(MadeError::OrderingMismatch(format!(
            "observed dimension {d} sits at position {} but only {n_obs} dimensions are observed",
            ordering.position(d)
        )));
    }
    let mut row = Array2::from_shape_fn((1, dim), |(_, d)| {
        if is_observed[d] && x[d] != 0 {
            F::one()
        } else {
            F::zero()
        }
    });
    if n_obs < dim {
        fill_ancestral(params, masks, &mut row, n_obs + 1, rng)?;
    }
    Ok(row.row(0).mapv(|v| u8::from(v != F::zero())))
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a perturbation moved a ReLU pre-activation
    /// across (or onto) its kink.
    pub excluded: usize,
}

pub const KINK_TOLERANCE: f64 = 1e-6;

/// Smallest denominator of the relative error. A central difference with
/// `h = 1e-5` on a loss of a few nats carries about `1e-10` of rounding
/// error, so gradients much smaller than this are compared against it
/// instead of against themselves.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

fn loss_and_pattern<F: Scalar>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    x: ArrayView2<'_, F>,
) -> Result<(f64, Vec<Array2<F>>)> {
    let trace = network::forward(params, masks, x)?;
    let loss = trace.nll(x).mean().unwrap().widen();
    Ok((loss, trace.pre))
}

fn crosses_kink<F: Scalar>(base: &[Array2<F>], moved: &[Array2<F>]) -> bool {
    let tol = F::of(KINK_TOLERANCE);
    base.iter().zip(moved).any(|(b, m)| {
        b.iter().zip(m.iter()).any(|(&b, &m)| {
            let zero = F::zero();
            (b > zero) != (m > zero) || (b.abs() < tol && b != m)
        })
    })
}

/// Max over parameter entries of `|analytic - numeric| / max(|analytic|,
/// |numeric|, RELATIVE_ERROR_FLOOR)`, with central differences of step `h` on
/// the mean NLL of `x`.
pub fn gradient_check<F: Scalar>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    x: ArrayView2<'_, F>,
    h: f64,
) -> Result<GradCheckReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(MadeError::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let (_, analytic) = network::loss_and_gradients(params, masks, x)?;
    let (_, base_pre) = loss_and_pattern(params, masks, x)?;
    let relu = params.arch.activation == Activation::Relu;
    let analytic: Vec<Vec<f64>> = analytic
        .tensors()
        .iter()
        .map(|t| t.iter().map(|v| v.widen()).collect())
        .collect();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let original = probe.tensors()[t]
                .as_slice()
                .expect("owned tensors are contiguous")[i];
            let mut eval_at = |value: F| -> Result<(f64, Vec<Array2<F>>)> {
                probe.tensors_mut()[t]
                    .as_slice_mut()
                    .expect("owned tensors are contiguous")[i] = value;
                loss_and_pattern(&probe, masks, x)
            };
            let (up, up_pre) = eval_at(original + F::of(h))?;
            let (down, down_pre) = eval_at(original - F::of(h))?;
            eval_at(original)?;
            if relu && (crosses_kink(&base_pre, &up_pre) || crosses_kink(&base_pre, &down_pre)) {
                report.excluded += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let denom = g.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            report.max_rel_error = report.max_rel_error.max((g - numeric).abs() / denom);
            report.checked += 1;
        }
    }
    Ok(report)
}
