//! Masked autoencoder parameters, forward pass and exact gradients.
//!
//! Batches are row-major `B x D` matrices. Masks are applied by elementwise
//! product at use time, so the same parameters can be evaluated under any
//! [`MaskSet`] of matching shape.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use crate::error::{MadeError, Result};
use crate::masks::{as_scalar, MaskSet};
use crate::scalar::Scalar;

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of batched forward passes run on the current thread.
pub fn forward_passes() -> u64 {
    FORWARD_PASSES.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => x.max(F::zero()),
            Activation::Softplus => x.softplus(),
        }
    }

    /// Derivative at a pre-activation. ReLU uses `g'(0) = 0`.
    fn derivative<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Softplus => x.sigmoid(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        })
    }
}

impl FromStr for Activation {
    type Err = MadeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            other => Err(MadeError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub use_direct: bool,
    pub use_conditioning: bool,
}

impl Architecture {
    pub fn new(dim: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        Architecture {
            dim,
            hidden,
            activation,
            use_direct: false,
            use_conditioning: false,
        }
    }

    pub fn with_direct(mut self, on: bool) -> Self {
        self.use_direct = on;
        self
    }

    pub fn with_conditioning(mut self, on: bool) -> Self {
        self.use_conditioning = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(MadeError::InvalidDimension(format!(
                "architecture needs D >= 2, got {}",
                self.dim
            )));
        }
        if self.hidden.is_empty() {
            return Err(MadeError::Config(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(MadeError::Config(
                "hidden layers need at least one unit".into(),
            ));
        }
        Ok(())
    }

    /// Input width of hidden layer `l` (0-based).
    fn fan_in(&self, l: usize) -> usize {
        if l == 0 {
            self.dim
        } else {
            self.hidden[l - 1]
        }
    }

    fn last_hidden(&self) -> usize {
        *self.hidden.last().expect("validated architecture")
    }

    /// Names and shapes of every tensor in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, &k) in self.hidden.iter().enumerate() {
            out.push((format!("w{}", l + 1), vec![k, self.fan_in(l)]));
        }
        for (l, &k) in self.hidden.iter().enumerate() {
            out.push((format!("b{}", l + 1), vec![k]));
        }
        out.push(("v".into(), vec![self.dim, self.last_hidden()]));
        out.push(("c".into(), vec![self.dim]));
        if self.use_direct {
            out.push(("a".into(), vec![self.dim, self.dim]));
        }
        if self.use_conditioning {
            for (l, &k) in self.hidden.iter().enumerate() {
                out.push((format!("u{}", l + 1), vec![k, self.fan_in(l)]));
            }
            out.push(("u_out".into(), vec![self.dim, self.last_hidden()]));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// All learnable tensors. Also used to hold gradients, which share shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct MadeParams<F> {
    pub arch: Architecture,
    pub w: Vec<Array2<F>>,
    pub b: Vec<Array1<F>>,
    pub v: Array2<F>,
    pub c: Array1<F>,
    pub a: Option<Array2<F>>,
    pub u: Option<Vec<Array2<F>>>,
    pub u_out: Option<Array2<F>>,
}

/// Gradient tensors, one per parameter tensor.
pub type Gradients<F> = MadeParams<F>;

impl<F: Scalar> MadeParams<F> {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let d = arch.dim;
        let kl = arch.last_hidden();
        let per_layer = |l: usize, k: usize| Array2::zeros((k, arch.fan_in(l)));
        Ok(MadeParams {
            arch: arch.clone(),
            w: arch
                .hidden
                .iter()
                .enumerate()
                .map(|(l, &k)| per_layer(l, k))
                .collect(),
            b: arch.hidden.iter().map(|&k| Array1::zeros(k)).collect(),
            v: Array2::zeros((d, kl)),
            c: Array1::zeros(d),
            a: arch.use_direct.then(|| Array2::zeros((d, d))),
            u: arch.use_conditioning.then(|| {
                arch.hidden
                    .iter()
                    .enumerate()
                    .map(|(l, &k)| per_layer(l, k))
                    .collect()
            }),
            u_out: arch.use_conditioning.then(|| Array2::zeros((d, kl))),
        })
    }

    /// Every entry, biases included, drawn from `Uniform(-scale, scale)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        arch: &Architecture,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for mut t in p.tensors_mut() {
            t.mapv_inplace(|_| F::of(rng.gen_range(-scale..=scale)));
        }
        Ok(p)
    }

    /// Views of every tensor in [`Architecture::tensor_shapes`] order.
    pub fn tensors(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out: Vec<ArrayViewD<'_, F>> = Vec::new();
        out.extend(self.w.iter().map(|t| t.view().into_dyn()));
        out.extend(self.b.iter().map(|t| t.view().into_dyn()));
        out.push(self.v.view().into_dyn());
        out.push(self.c.view().into_dyn());
        out.extend(self.a.iter().map(|t| t.view().into_dyn()));
        if let Some(u) = &self.u {
            out.extend(u.iter().map(|t| t.view().into_dyn()));
        }
        out.extend(self.u_out.iter().map(|t| t.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out: Vec<ArrayViewMutD<'_, F>> = Vec::new();
        out.extend(self.w.iter_mut().map(|t| t.view_mut().into_dyn()));
        out.extend(self.b.iter_mut().map(|t| t.view_mut().into_dyn()));
        out.push(self.v.view_mut().into_dyn());
        out.push(self.c.view_mut().into_dyn());
        out.extend(self.a.iter_mut().map(|t| t.view_mut().into_dyn()));
        if let Some(u) = &mut self.u {
            out.extend(u.iter_mut().map(|t| t.view_mut().into_dyn()));
        }
        out.extend(self.u_out.iter_mut().map(|t| t.view_mut().into_dyn()));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Checks that `masks` fits this architecture.
    pub fn check_masks(&self, masks: &MaskSet) -> Result<()> {
        if masks.dim() != self.arch.dim || masks.layer_sizes() != self.arch.hidden {
            return Err(MadeError::Shape(format!(
                "mask set is D={} layers {:?}, network is D={} layers {:?}",
                masks.dim(),
                masks.layer_sizes(),
                self.arch.dim,
                self.arch.hidden
            )));
        }
        if self.arch.use_direct && !masks.has_direct() {
            return Err(MadeError::Shape(
                "network has direct connections but the mask set has no direct mask".into(),
            ));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<F: Scalar, R: Rng + ?Sized>(
    arch: &Architecture,
    rng: &mut R,
) -> Result<MadeParams<F>> {
    let mut p = MadeParams::<F>::zeros(arch)?;
    let mut glorot = |t: &mut Array2<F>| {
        let (fan_out, fan_in) = t.dim();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        t.mapv_inplace(|_| F::of(rng.gen_range(-bound..bound)));
    };
    p.w.iter_mut().for_each(&mut glorot);
    glorot(&mut p.v);
    if let Some(a) = p.a.as_mut() {
        glorot(a);
    }
    if let Some(u) = p.u.as_mut() {
        u.iter_mut().for_each(&mut glorot);
    }
    if let Some(u_out) = p.u_out.as_mut() {
        glorot(u_out);
    }
    Ok(p)
}

/// Intermediate values of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    /// Hidden pre-activations per layer, `B x Kˡ`.
    pub pre: Vec<Array2<F>>,
    /// Hidden activations per layer, `B x Kˡ`.
    pub hidden: Vec<Array2<F>>,
    /// Output logits, `B x D`.
    pub logits: Array2<F>,
}

impl<F: Scalar> ForwardTrace<F> {
    /// Conditional probabilities `x̂ = sigmoid(logits)`.
    pub fn probabilities(&self) -> Array2<F> {
        self.logits.mapv(Scalar::sigmoid)
    }

    /// Per-row negative log-likelihood of `x`, which must be the batch that
    /// produced this trace.
    pub fn nll(&self, x: ArrayView2<'_, F>) -> Array1<F> {
        Array1::from_iter(
            x.rows()
                .into_iter()
                .zip(self.logits.rows())
                .map(|(xr, lr)| nll(xr, lr)),
        )
    }
}

/// `-Σ_d [x_d log σ(z_d) + (1-x_d) log(1-σ(z_d))] = Σ_d softplus(z_d) - x_d z_d`.
pub fn nll<F: Scalar>(x: ArrayView1<'_, F>, logits: ArrayView1<'_, F>) -> F {
    x.iter()
        .zip(logits.iter())
        .fold(F::zero(), |acc, (&xd, &z)| acc + z.softplus() - xd * z)
}

fn check_batch<F: Scalar>(params: &MadeParams<F>, x: &ArrayView2<'_, F>) -> Result<()> {
    if x.ncols() != params.arch.dim {
        return Err(MadeError::Shape(format!(
            "batch has {} columns, network expects D={}",
            x.ncols(),
            params.arch.dim
        )));
    }
    if let Some(((r, c), v)) = x
        .indexed_iter()
        .find(|(_, &v)| v != F::zero() && v != F::one())
    {
        return Err(MadeError::Domain(format!("entry ({r}, {c}) = {v}")));
    }
    Ok(())
}

struct MaskedWeights<F> {
    w: Vec<Array2<F>>,
    v: Array2<F>,
    a: Option<Array2<F>>,
    hidden_masks: Vec<Array2<F>>,
    output_mask: Array2<F>,
    direct_mask: Option<Array2<F>>,
    /// `(Uˡ ⊙ M^{Wˡ})·1`, per hidden layer.
    hidden_cond: Option<Vec<Array1<F>>>,
    /// `(U^out ⊙ M^V)·1`.
    output_cond: Option<Array1<F>>,
}

fn masked<F: Scalar>(params: &MadeParams<F>, masks: &MaskSet) -> MaskedWeights<F> {
    let hidden_masks: Vec<Array2<F>> = masks.hidden_masks().iter().map(as_scalar).collect();
    let output_mask: Array2<F> = as_scalar(masks.output());
    let direct_mask = if params.arch.use_direct {
        masks.direct().map(as_scalar::<F>)
    } else {
        None
    };
    let w = params
        .w
        .iter()
        .zip(&hidden_masks)
        .map(|(w, m)| w * m)
        .collect();
    let v = &params.v * &output_mask;
    let a = params
        .a
        .as_ref()
        .zip(direct_mask.as_ref())
        .map(|(a, m)| a * m);
    let hidden_cond = params.u.as_ref().map(|u| {
        u.iter()
            .zip(&hidden_masks)
            .map(|(u, m)| (u * m).sum_axis(Axis(1)))
            .collect()
    });
    let output_cond = params
        .u_out
        .as_ref()
        .map(|u| (u * &output_mask).sum_axis(Axis(1)));
    MaskedWeights {
        w,
        v,
        a,
        hidden_masks,
        output_mask,
        direct_mask,
        hidden_cond,
        output_cond,
    }
}

fn run_forward<F: Scalar>(
    params: &MadeParams<F>,
    mw: &MaskedWeights<F>,
    x: ArrayView2<'_, F>,
) -> ForwardTrace<F> {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
    let act = params.arch.activation;
    let mut pre = Vec::with_capacity(mw.w.len());
    let mut hidden: Vec<Array2<F>> = Vec::with_capacity(mw.w.len());
    for (l, w) in mw.w.iter().enumerate() {
        let input = if l == 0 { x } else { hidden[l - 1].view() };
        let mut z = input.dot(&w.t());
        z += &params.b[l];
        if let Some(cond) = &mw.hidden_cond {
            z += &cond[l];
        }
        hidden.push(z.mapv(|v| act.apply(v)));
        pre.push(z);
    }
    let mut logits = hidden.last().unwrap().dot(&mw.v.t());
    logits += &params.c;
    if let Some(a) = &mw.a {
        logits += &x.dot(&a.t());
    }
    if let Some(cond) = &mw.output_cond {
        logits += cond;
    }
    ForwardTrace {
        pre,
        hidden,
        logits,
    }
}

/// One batched pass through the masked network.
pub fn forward<F: Scalar>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    x: ArrayView2<'_, F>,
) -> Result<ForwardTrace<F>> {
    params.check_masks(masks)?;
    check_batch(params, &x)?;
    let mw = masked(params, masks);
    Ok(run_forward(params, &mw, x))
}

/// `log p(x)` for every row of `x`, in a single forward pass.
pub fn log_prob<F: Scalar>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    x: ArrayView2<'_, F>,
) -> Result<Array1<F>> {
    let trace = forward(params, masks, x)?;
    Ok(trace.nll(x).mapv(|v| -v))
}

/// Mean per-example NLL of the batch and its gradient with respect to every
/// parameter tensor.
pub fn loss_and_gradients<F: Scalar>(
    params: &MadeParams<F>,
    masks: &MaskSet,
    x: ArrayView2<'_, F>,
) -> Result<(F, Gradients<F>)> {
    params.check_masks(masks)?;
    check_batch(params, &x)?;
    let batch = x.nrows();
    if batch == 0 {
        return Err(MadeError::Shape("empty batch".into()));
    }
    let mw = masked(params, masks);
    let trace = run_forward(params, &mw, x);
    let inv_b = F::one() / F::of(batch as f64);
    let loss = trace.nll(x).sum() * inv_b;

    let mut grads = MadeParams::<F>::zeros(&params.arch)?;
    let n_layers = params.w.len();

    // Output layer: d(nll)/d(logit) = x̂ - x.
    let mut delta = trace.probabilities();
    delta -= &x;
    delta *= inv_b;
    let delta_sum = delta.sum_axis(Axis(0));
    grads.c.assign(&delta_sum);
    grads.v = delta.t().dot(&trace.hidden[n_layers - 1]) * &mw.output_mask;
    if let (Some(ga), Some(ma)) = (grads.a.as_mut(), mw.direct_mask.as_ref()) {
        *ga = delta.t().dot(&x) * ma;
    }
    if let Some(gu) = grads.u_out.as_mut() {
        Zip::from(gu.rows_mut())
            .and(mw.output_mask.rows())
            .and(&delta_sum)
            .for_each(|mut g, m, &s| g.assign(&(&m * s)));
    }
    let mut back = delta.dot(&mw.v);

    for l in (0..n_layers).rev() {
        let act = params.arch.activation;
        Zip::from(&mut back)
            .and(&trace.pre[l])
            .for_each(|t, &z| *t *= act.derivative(z));
        let back_sum = back.sum_axis(Axis(0));
        let input = if l == 0 {
            x
        } else {
            trace.hidden[l - 1].view()
        };
        grads.w[l] = back.t().dot(&input) * &mw.hidden_masks[l];
        if let Some(gu) = grads.u.as_mut() {
            Zip::from(gu[l].rows_mut())
                .and(mw.hidden_masks[l].rows())
                .and(&back_sum)
                .for_each(|mut g, m, &s| g.assign(&(&m * s)));
        }
        grads.b[l] = back_sum;
        if l > 0 {
            back = back.dot(&mw.w[l]);
        }
    }
    Ok((loss, grads))
}
