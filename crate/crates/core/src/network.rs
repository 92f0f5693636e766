//! Layer-stack model definition, architecture validation, and the five
//! forward semantics: deterministic DNN, DNN*, exact-enumeration
//! simplified-SFNN, Monte Carlo simplified-SFNN, and sample-propagating SFNN.
//!
//! A network is a stack of hidden layers plus an output affine map implied by
//! the output head. Stochastic binary layers hold per-unit marginals
//! `P(h_i = 1 | x)`; a squash layer directly above averages `s(W h + b)` over
//! the binary vector below and re-activates with `f`. The forward mode decides
//! how that average is computed (exactly, by Monte Carlo, moved inside `s`
//! for DNN*) or whether sampled states propagate all the way to the output
//! (SFNN).

use serde::{Deserialize, Serialize};

use crate::math::{affine, log_sum_exp, ActivationKind, Matrix, SquashKind};
use crate::rng::{sample_bernoulli, RngStream};
use crate::{Error, Result};

/// Exact enumeration is capped at 2^20 binary configurations.
pub const ENUM_WIDTH_CAP: usize = 20;

/// Natural log of the softmax probability floor (1e-300).
pub const LOG_PROB_FLOOR: f64 = -690.775527898214;

// ---------------------------------------------------------------------------
// Specs and parameters
// ---------------------------------------------------------------------------

/// How a stochastic binary layer maps its pre-activation to marginals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalKind {
    /// `P(h_i = 1 | x) = sigmoid(W_i x + b_i)`.
    DirectSigmoid,
    /// `min{alpha f(W_i x + b_i), 1}`, or with `centered` set,
    /// `clamp(alpha f(W_i x + b_i) + 1/2, 0, 1)` for general activations.
    ClippedScaled {
        alpha: f64,
        activation: ActivationKind,
        centered: bool,
    },
}

impl MarginalKind {
    pub fn centered(&self) -> bool {
        matches!(
            self,
            MarginalKind::ClippedScaled { centered: true, .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Deterministic {
        width: usize,
        activation: ActivationKind,
    },
    StochasticBinary {
        width: usize,
        marginal: MarginalKind,
    },
    /// Deterministic layer of form `f(alpha (E[s(W h + b)] - s(0) - centering))`
    /// sitting directly above a stochastic layer.
    Squash {
        width: usize,
        alpha: f64,
        squash: SquashKind,
        activation: ActivationKind,
        centered: bool,
    },
}

impl LayerSpec {
    pub fn width(&self) -> usize {
        match *self {
            LayerSpec::Deterministic { width, .. }
            | LayerSpec::StochasticBinary { width, .. }
            | LayerSpec::Squash { width, .. } => width,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, LayerSpec::StochasticBinary { .. })
    }
}

/// Output distribution of the network. The final affine map of the network
/// produces this head's natural parameter (logits or Gaussian mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Softmax { classes: usize },
    Gaussian { dim: usize, sigma_y: f64 },
}

impl OutputHead {
    /// Gaussian head with the default sigma_y = 0.05.
    pub fn gaussian(dim: usize) -> Self {
        OutputHead::Gaussian { dim, sigma_y: 0.05 }
    }

    pub fn dim(&self) -> usize {
        match *self {
            OutputHead::Softmax { classes } => classes,
            OutputHead::Gaussian { dim, .. } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Hidden layers, bottom to top. The output affine map sits above the
    /// last one and feeds the head.
    pub layers: Vec<LayerSpec>,
    pub head: OutputHead,
}

impl NetworkSpec {
    /// Plain DNN: all hidden layers deterministic with one activation.
    pub fn dnn(input_dim: usize, widths: &[usize], activation: ActivationKind, head: OutputHead) -> Self {
        NetworkSpec {
            input_dim,
            layers: widths
                .iter()
                .map(|&width| LayerSpec::Deterministic { width, activation })
                .collect(),
            head,
        }
    }

    /// Input dimension of hidden layer `idx`.
    pub fn layer_input_dim(&self, idx: usize) -> usize {
        if idx == 0 {
            self.input_dim
        } else {
            self.layers[idx - 1].width()
        }
    }

    pub fn has_stochastic(&self) -> bool {
        self.layers.iter().any(LayerSpec::is_stochastic)
    }

    pub fn stochastic_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_stochastic())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn max_stochastic_width(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.is_stochastic())
            .map(LayerSpec::width)
            .max()
            .unwrap_or(0)
    }

    /// Structural validation. Returns every violated invariant; hard
    /// violations make the network unusable, while a missing squash pair
    /// only rules out the simplified-SFNN forward modes (sample propagation
    /// still works, as for simple-transformed networks).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.input_dim == 0 {
            out.push(Violation::ZeroWidth { layer: usize::MAX });
        }
        if self.head.dim() == 0 {
            out.push(Violation::ZeroWidth { layer: self.layers.len() });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.width() == 0 {
                out.push(Violation::ZeroWidth { layer: i });
            }
            match layer {
                LayerSpec::StochasticBinary { marginal, .. } => match self.layers.get(i + 1) {
                    None => out.push(Violation::LastLayerStochastic { layer: i }),
                    Some(LayerSpec::StochasticBinary { .. }) => {
                        out.push(Violation::AdjacentStochastic {
                            first: i,
                            second: i + 1,
                        })
                    }
                    Some(LayerSpec::Squash { centered, .. }) => {
                        if marginal.centered() != *centered {
                            out.push(Violation::CenteredMismatch {
                                stochastic: i,
                                squash: i + 1,
                            });
                        }
                    }
                    Some(LayerSpec::Deterministic { .. }) => {
                        out.push(Violation::StochasticWithoutSquash { layer: i })
                    }
                },
                LayerSpec::Squash { .. } => {
                    let below_is_stochastic = i > 0 && self.layers[i - 1].is_stochastic();
                    if !below_is_stochastic {
                        out.push(Violation::SquashWithoutStochastic { layer: i });
                    }
                }
                LayerSpec::Deterministic { .. } => {}
            }
        }
        out
    }

    /// Hard violations only (everything except the missing-squash-pair
    /// advisory, which still leaves SFNN semantics available).
    pub fn hard_violations(&self) -> Vec<Violation> {
        self.validate().into_iter().filter(Violation::is_hard).collect()
    }

    /// Is the requested forward mode defined for this architecture?
    pub fn check_mode(&self, mode: &ForwardMode) -> Result<()> {
        let hard = self.hard_violations();
        if let Some(v) = hard.first() {
            return Err(Error::InvalidNetwork(v.to_string()));
        }
        let squash_paired = !self
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::StochasticWithoutSquash { .. }));
        match mode {
            ForwardMode::Dnn => {
                if self.has_stochastic() {
                    return Err(Error::ModeNotAdmissible {
                        mode: "dnn",
                        reason: "network has stochastic layers".into(),
                    });
                }
            }
            ForwardMode::DnnStar => {}
            ForwardMode::ExactEnum => {
                if !squash_paired {
                    return Err(Error::ModeNotAdmissible {
                        mode: "exact-enum",
                        reason: "stochastic layer without squash layer above".into(),
                    });
                }
                let w = self.max_stochastic_width();
                if w > ENUM_WIDTH_CAP {
                    return Err(Error::EnumTooWide {
                        width: w,
                        cap: ENUM_WIDTH_CAP,
                    });
                }
            }
            ForwardMode::SimplifiedMc { samples, .. } => {
                if !squash_paired {
                    return Err(Error::ModeNotAdmissible {
                        mode: "simplified-mc",
                        reason: "stochastic layer without squash layer above".into(),
                    });
                }
                if *samples == 0 {
                    return Err(Error::ModeNotAdmissible {
                        mode: "simplified-mc",
                        reason: "needs at least one sample".into(),
                    });
                }
            }
            ForwardMode::SfnnPropagate { samples, .. } => {
                if *samples == 0 {
                    return Err(Error::ModeNotAdmissible {
                        mode: "sfnn",
                        reason: "needs at least one sample".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Shape- and finiteness-check `params` against this spec.
    pub fn check_params(&self, params: &Params) -> Result<()> {
        if params.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} hidden layers in spec, {} in params",
                self.layers.len(),
                params.layers.len()
            )));
        }
        for (i, (layer, aff)) in self.layers.iter().zip(params.layers.iter()).enumerate() {
            let expect = (layer.width(), self.layer_input_dim(i));
            let got = (aff.weight.rows(), aff.weight.cols());
            if expect != got || aff.bias.len() != layer.width() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: expected weight {}x{}, got {}x{} (bias {})",
                    expect.0,
                    expect.1,
                    got.0,
                    got.1,
                    aff.bias.len()
                )));
            }
            if !aff.weight.all_finite() || !aff.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        let last_width = self.layers.last().map_or(self.input_dim, LayerSpec::width);
        if params.output.weight.rows() != self.head.dim()
            || params.output.weight.cols() != last_width
            || params.output.bias.len() != self.head.dim()
        {
            return Err(Error::ShapeMismatch("output affine".into()));
        }
        if !params.output.weight.all_finite()
            || !params.output.bias.iter().all(|b| b.is_finite())
        {
            return Err(Error::NonFinite("output parameters".into()));
        }
        Ok(())
    }
}

/// A structural invariant violation, with the offending layer index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    AdjacentStochastic { first: usize, second: usize },
    LastLayerStochastic { layer: usize },
    SquashWithoutStochastic { layer: usize },
    CenteredMismatch { stochastic: usize, squash: usize },
    ZeroWidth { layer: usize },
    /// Advisory: the layer is only usable under sample-propagation (SFNN)
    /// or mean-field (DNN*) semantics.
    StochasticWithoutSquash { layer: usize },
}

impl Violation {
    pub fn is_hard(&self) -> bool {
        !matches!(self, Violation::StochasticWithoutSquash { .. })
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::AdjacentStochastic { first, second } => {
                write!(f, "adjacent stochastic layers at {first},{second}")
            }
            Violation::LastLayerStochastic { layer } => {
                write!(f, "last hidden layer {layer} is stochastic")
            }
            Violation::SquashWithoutStochastic { layer } => {
                write!(f, "squash layer {layer} is not directly above a stochastic layer")
            }
            Violation::CenteredMismatch { stochastic, squash } => write!(
                f,
                "centered flag differs between stochastic layer {stochastic} and squash layer {squash}"
            ),
            Violation::ZeroWidth { layer } => write!(f, "zero width at layer {layer}"),
            Violation::StochasticWithoutSquash { layer } => write!(
                f,
                "stochastic layer {layer} has no squash layer above it \
                 (simplified-SFNN modes unavailable; sample propagation only)"
            ),
        }
    }
}

/// One affine map: `weight` is `out x in`, row j holds unit j's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }
}

/// All weights and biases of a network: one affine per hidden layer plus the
/// output affine. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<Affine>,
    pub output: Affine,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| Affine::zeros(l.width(), spec.layer_input_dim(i)))
            .collect();
        let last_width = spec.layers.last().map_or(spec.input_dim, LayerSpec::width);
        Params {
            layers,
            output: Affine::zeros(spec.head.dim(), last_width),
        }
    }

    /// Glorot-uniform initialization over +/- sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(spec: &NetworkSpec, stream: RngStream) -> Self {
        use rand::Rng;
        let mut params = Params::zeros(spec);
        let mut rng = stream.rng();
        for aff in params.affines_mut() {
            let (fan_out, fan_in) = (aff.weight.rows(), aff.weight.cols());
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in aff.weight.data_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            // biases start at zero
        }
        params
    }

    /// Hidden affines bottom-up, then the output affine.
    pub fn affines(&self) -> impl Iterator<Item = &Affine> {
        self.layers.iter().chain(std::iter::once(&self.output))
    }

    pub fn affines_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.layers.iter_mut().chain(std::iter::once(&mut self.output))
    }

    pub fn n_params(&self) -> usize {
        self.affines()
            .map(|a| a.weight.data().len() + a.bias.len())
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for a in self.affines() {
            out.extend_from_slice(a.weight.data());
            out.extend_from_slice(&a.bias);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Forward modes
// ---------------------------------------------------------------------------

/// Which semantics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    /// Plain deterministic network; stochastic layers are not allowed.
    Dnn,
    /// Expectation moved inside the squash function: fully deterministic.
    DnnStar,
    /// Expectations over stochastic layers by full enumeration.
    ExactEnum,
    /// Expectations estimated with M Monte Carlo samples; randomness stops
    /// at each squash layer.
    SimplifiedMc { samples: usize, stream: RngStream },
    /// Binary samples propagate all the way to the output; yields M outputs.
    SfnnPropagate { samples: usize, stream: RngStream },
}

impl ForwardMode {
    pub fn name(&self) -> &'static str {
        match self {
            ForwardMode::Dnn => "dnn",
            ForwardMode::DnnStar => "dnn-star",
            ForwardMode::ExactEnum => "exact-enum",
            ForwardMode::SimplifiedMc { .. } => "simplified-mc",
            ForwardMode::SfnnPropagate { .. } => "sfnn",
        }
    }
}

/// Marginal probabilities of a stochastic layer from its pre-activation.
pub fn stochastic_marginals(kind: &MarginalKind, preact: &Matrix) -> Result<Matrix> {
    if !preact.all_finite() {
        return Err(Error::NonFinite("stochastic pre-activation".into()));
    }
    let p = match kind {
        MarginalKind::DirectSigmoid => preact.map(crate::math::sigmoid),
        MarginalKind::ClippedScaled {
            alpha,
            activation,
            centered,
        } => {
            let shift = if *centered { 0.5 } else { 0.0 };
            preact.map(|a| (alpha * activation.apply(a) + shift).clamp(0.0, 1.0))
        }
    };
    Ok(p)
}

/// Elementwise derivative dP/d(pre-activation). Zero wherever the marginal
/// is clamped at 0 or 1 (subgradient of the clamp).
pub fn marginal_derivative(kind: &MarginalKind, preact: &Matrix) -> Matrix {
    match kind {
        MarginalKind::DirectSigmoid => preact.map(|a| {
            let s = crate::math::sigmoid(a);
            s * (1.0 - s)
        }),
        MarginalKind::ClippedScaled {
            alpha,
            activation,
            centered,
        } => {
            let shift = if *centered { 0.5 } else { 0.0 };
            preact.map(|a| {
                let raw = alpha * activation.apply(a) + shift;
                if raw > 0.0 && raw < 1.0 {
                    alpha * activation.derivative(a)
                } else {
                    0.0
                }
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Enumeration over binary configurations
// ---------------------------------------------------------------------------

/// Joint probabilities of all 2^n binary configurations under independent
/// marginals `p`, indexed by bitmask (bit i = unit i).
pub(crate) fn config_weights(p: &[f64]) -> Vec<f64> {
    let mut weights = vec![1.0];
    for (i, &pi) in p.iter().enumerate() {
        let half = 1usize << i;
        weights.resize(half * 2, 0.0);
        for mask in 0..half {
            let w = weights[mask];
            weights[mask] = w * (1.0 - pi);
            weights[mask + half] = w * pi;
        }
    }
    weights
}

/// Incoming signals `beta_j(h) = W_j h + b_j` for every configuration,
/// indexed by bitmask, for one output unit j.
pub(crate) fn config_signals(w_row: &[f64], b: f64) -> Vec<f64> {
    let mut betas = vec![b];
    for (i, &wi) in w_row.iter().enumerate() {
        let half = 1usize << i;
        betas.resize(half * 2, 0.0);
        for mask in 0..half {
            betas[mask + half] = betas[mask] + wi;
        }
    }
    betas
}

/// `E[s(W_j h + b_j)]` for every unit j of a squash affine, by full
/// enumeration over the 2^n binary configurations of `p`.
pub(crate) fn enum_expectation_units(
    p: &[f64],
    w: &Matrix,
    b: &[f64],
    s: SquashKind,
    linearize: bool,
) -> Result<Vec<f64>> {
    let n = p.len();
    if n > ENUM_WIDTH_CAP {
        return Err(Error::EnumTooWide {
            width: n,
            cap: ENUM_WIDTH_CAP,
        });
    }
    if linearize {
        // E[s0 + s'(0) beta] is exact: no enumeration needed.
        let (s0, sp0) = s.at_zero();
        return Ok((0..w.rows())
            .map(|j| {
                let mean_beta: f64 = w
                    .row(j)
                    .iter()
                    .zip(p.iter())
                    .map(|(wi, pi)| wi * pi)
                    .sum::<f64>()
                    + b[j];
                s0 + sp0 * mean_beta
            })
            .collect());
    }
    let weights = config_weights(p);
    let mut out = Vec::with_capacity(w.rows());
    for j in 0..w.rows() {
        let betas = config_signals(w.row(j), b[j]);
        let e: f64 = weights
            .iter()
            .zip(betas.iter())
            .map(|(&wt, &beta)| wt * s.value(beta))
            .sum();
        out.push(e);
    }
    Ok(out)
}

/// The centering corrections `(s'(0)/2) sum_i W_ji` per unit j, active only
/// for centered squash layers.
fn centering_terms(w: &Matrix, squash: SquashKind, centered: bool) -> Vec<f64> {
    if !centered {
        return vec![0.0; w.rows()];
    }
    let (_, sp0) = squash.at_zero();
    (0..w.rows())
        .map(|j| 0.5 * sp0 * w.row(j).iter().sum::<f64>())
        .collect()
}

// ---------------------------------------------------------------------------
// Forward engine (deterministic-value modes)
// ---------------------------------------------------------------------------

/// Per-layer record kept by a traced forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Affine pre-activation for deterministic and stochastic layers; the
    /// scaled pre-squash signal `alpha (E - s(0) - centering)` for squash layers.
    pub pre_activation: Matrix,
    /// Marginals `P(h_i = 1 | x)` for stochastic layers.
    pub marginals: Option<Matrix>,
    /// Raw expectation estimate `E[s(W h + b)]` for squash layers.
    pub expectation: Option<Matrix>,
    /// Sampled binary states, one matrix per Monte Carlo sample, when the
    /// caller asked to keep them.
    pub samples: Option<Vec<Matrix>>,
    /// The deterministic value this layer feeds upward (marginals for
    /// stochastic layers under deterministic-value semantics).
    pub activation: Matrix,
}

#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
    pub output: Matrix,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ForwardCfg {
    /// Replace s by its first-order expansion s(0) + s'(0) x inside squash
    /// layers. Diagnostic hook for the first-order recovery checks.
    pub linearize_squash: bool,
    /// Keep sampled binary states in the trace (Monte Carlo modes).
    pub keep_samples: bool,
}

pub(crate) fn run_value(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    mode: &ForwardMode,
    cfg: ForwardCfg,
    want_trace: bool,
) -> Result<(Matrix, Option<ActivationTrace>)> {
    spec.check_mode(mode)?;
    spec.check_params(params)?;
    if x.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            spec.input_dim
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("network input".into()));
    }

    let mut traces: Vec<LayerTrace> = Vec::new();
    let mut value = x.clone();
    // Set right after a stochastic layer; consumed by the layer above.
    let mut pending_marginals: Option<Matrix> = None;

    for (idx, layer) in spec.layers.iter().enumerate() {
        let aff = &params.layers[idx];
        match layer {
            LayerSpec::Deterministic { activation, .. } => {
                // Under DNN* a deterministic layer above a stochastic one
                // consumes the marginals directly (mean-field).
                let input = pending_marginals.take().unwrap_or(value);
                let pre = affine(&input, &aff.weight, &aff.bias)?;
                value = activation.apply_matrix(&pre);
                if want_trace {
                    traces.push(LayerTrace {
                        pre_activation: pre,
                        marginals: None,
                        expectation: None,
                        samples: None,
                        activation: value.clone(),
                    });
                }
            }
            LayerSpec::StochasticBinary { marginal, .. } => {
                let pre = affine(&value, &aff.weight, &aff.bias)?;
                let p = stochastic_marginals(marginal, &pre)?;
                if want_trace {
                    traces.push(LayerTrace {
                        pre_activation: pre,
                        marginals: Some(p.clone()),
                        expectation: None,
                        samples: None,
                        activation: p.clone(),
                    });
                }
                pending_marginals = Some(p);
                value = Matrix::zeros(0, 0); // moved out of circulation
            }
            LayerSpec::Squash {
                width,
                alpha,
                squash,
                activation,
                centered,
            } => {
                let p = pending_marginals
                    .take()
                    .expect("validated: squash sits above a stochastic layer");
                let (s0, _) = squash.at_zero();
                let batch = p.rows();
                let mut expectation = Matrix::zeros(batch, *width);
                let mut kept_samples: Option<Vec<Matrix>> = None;
                match mode {
                    ForwardMode::DnnStar => {
                        // E[s(Wh+b)] ~= s(W p + b)
                        let mean_pre = affine(&p, &aff.weight, &aff.bias)?;
                        expectation = if cfg.linearize_squash {
                            let (s0, sp0) = squash.at_zero();
                            mean_pre.map(|v| s0 + sp0 * v)
                        } else {
                            mean_pre.map(|v| squash.value(v))
                        };
                    }
                    ForwardMode::ExactEnum => {
                        for r in 0..batch {
                            let es = enum_expectation_units(
                                p.row(r),
                                &aff.weight,
                                &aff.bias,
                                *squash,
                                cfg.linearize_squash,
                            )?;
                            expectation.row_mut(r).copy_from_slice(&es);
                        }
                    }
                    ForwardMode::SimplifiedMc { samples, stream } => {
                        let layer_stream = stream.substream(idx as u64);
                        let mut sample_store: Vec<Matrix> = if cfg.keep_samples {
                            (0..*samples).map(|_| Matrix::zeros(batch, p.cols())).collect()
                        } else {
                            Vec::new()
                        };
                        let (lin_s0, lin_sp0) = squash.at_zero();
                        for r in 0..batch {
                            let row_stream = layer_stream.substream(r as u64);
                            let p_row = Matrix::row_vector(p.row(r).to_vec());
                            // Running mean: exact when all samples agree
                            // (degenerate marginals must reproduce the exact
                            // enumeration bit for bit).
                            let mut mean = vec![0.0; *width];
                            for m in 0..*samples {
                                let h = sample_bernoulli(&p_row, row_stream.substream(m as u64))?;
                                let inv = 1.0 / (m + 1) as f64;
                                for (j, mj) in mean.iter_mut().enumerate() {
                                    let beta: f64 = aff.weight
                                        .row(j)
                                        .iter()
                                        .zip(h.data().iter())
                                        .map(|(w, hv)| w * hv)
                                        .sum::<f64>()
                                        + aff.bias[j];
                                    let s_val = if cfg.linearize_squash {
                                        lin_s0 + lin_sp0 * beta
                                    } else {
                                        squash.value(beta)
                                    };
                                    *mj += (s_val - *mj) * inv;
                                }
                                if cfg.keep_samples {
                                    sample_store[m].row_mut(r).copy_from_slice(h.data());
                                }
                            }
                            expectation.row_mut(r).copy_from_slice(&mean);
                        }
                        if cfg.keep_samples {
                            kept_samples = Some(sample_store);
                        }
                    }
                    ForwardMode::Dnn | ForwardMode::SfnnPropagate { .. } => {
                        unreachable!("mode admissibility checked above")
                    }
                }
                let centering = centering_terms(&aff.weight, *squash, *centered);
                let mut pre = Matrix::zeros(batch, *width);
                for r in 0..batch {
                    for j in 0..*width {
                        pre.set(r, j, alpha * (expectation.get(r, j) - s0 - centering[j]));
                    }
                }
                value = activation.apply_matrix(&pre);
                if want_trace {
                    traces.push(LayerTrace {
                        pre_activation: pre,
                        marginals: None,
                        expectation: Some(expectation),
                        samples: kept_samples,
                        activation: value.clone(),
                    });
                }
            }
        }
    }

    // Output affine. Under DNN* the marginals of a trailing stochastic layer
    // would land here, but validation forbids ending on a stochastic layer.
    debug_assert!(pending_marginals.is_none());
    let out = affine(&value, &params.output.weight, &params.output.bias)?;
    if !out.all_finite() {
        return Err(Error::NonFinite("network output".into()));
    }
    let trace = want_trace.then(|| ActivationTrace {
        layers: traces,
        output: out.clone(),
    });
    Ok((out, trace))
}

// ---------------------------------------------------------------------------
// Forward engine (sample propagation)
// ---------------------------------------------------------------------------

/// State of a sample-propagating pass: all samples still agree until the
/// first stochastic layer, so the shared prefix is computed once.
enum SampleState {
    Collapsed(Matrix),
    PerSample(Vec<Matrix>),
}

pub(crate) fn run_sfnn(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    samples: usize,
    stream: RngStream,
) -> Result<Vec<Matrix>> {
    spec.check_mode(&ForwardMode::SfnnPropagate { samples, stream })?;
    spec.check_params(params)?;
    if x.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            spec.input_dim
        )));
    }

    let mut state = SampleState::Collapsed(x.clone());
    for (idx, layer) in spec.layers.iter().enumerate() {
        let aff = &params.layers[idx];
        match layer {
            LayerSpec::Deterministic { activation, .. } => {
                state = match state {
                    SampleState::Collapsed(v) => {
                        let pre = affine(&v, &aff.weight, &aff.bias)?;
                        SampleState::Collapsed(activation.apply_matrix(&pre))
                    }
                    SampleState::PerSample(vs) => SampleState::PerSample(
                        vs.iter()
                            .map(|v| {
                                affine(v, &aff.weight, &aff.bias)
                                    .map(|pre| activation.apply_matrix(&pre))
                            })
                            .collect::<Result<_>>()?,
                    ),
                };
            }
            LayerSpec::StochasticBinary { marginal, .. } => {
                let layer_stream = stream.substream(idx as u64);
                let draw = |p: &Matrix, m: usize| -> Result<Matrix> {
                    let mut h = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let row_stream = layer_stream.substream(r as u64).substream(m as u64);
                        let p_row = Matrix::row_vector(p.row(r).to_vec());
                        let bits = sample_bernoulli(&p_row, row_stream)?;
                        h.row_mut(r).copy_from_slice(bits.data());
                    }
                    Ok(h)
                };
                state = match state {
                    SampleState::Collapsed(v) => {
                        let pre = affine(&v, &aff.weight, &aff.bias)?;
                        let p = stochastic_marginals(marginal, &pre)?;
                        SampleState::PerSample(
                            (0..samples).map(|m| draw(&p, m)).collect::<Result<_>>()?,
                        )
                    }
                    SampleState::PerSample(vs) => SampleState::PerSample(
                        vs.iter()
                            .enumerate()
                            .map(|(m, v)| {
                                let pre = affine(v, &aff.weight, &aff.bias)?;
                                let p = stochastic_marginals(marginal, &pre)?;
                                draw(&p, m)
                            })
                            .collect::<Result<_>>()?,
                    ),
                };
            }
            LayerSpec::Squash {
                width,
                alpha,
                squash,
                activation,
                centered,
            } => {
                // Expectation taken out: the squash acts on the sampled h.
                let (s0, _) = squash.at_zero();
                let centering = centering_terms(&aff.weight, *squash, *centered);
                let apply = |h: &Matrix| -> Result<Matrix> {
                    let pre = affine(h, &aff.weight, &aff.bias)?;
                    let mut out = Matrix::zeros(pre.rows(), *width);
                    for r in 0..pre.rows() {
                        for j in 0..*width {
                            let u = alpha * (squash.value(pre.get(r, j)) - s0 - centering[j]);
                            out.set(r, j, activation.apply(u));
                        }
                    }
                    Ok(out)
                };
                state = match state {
                    SampleState::Collapsed(v) => SampleState::Collapsed(apply(&v)?),
                    SampleState::PerSample(vs) => SampleState::PerSample(
                        vs.iter().map(&apply).collect::<Result<_>>()?,
                    ),
                };
            }
        }
    }

    let outputs = match state {
        SampleState::Collapsed(v) => {
            let out = affine(&v, &params.output.weight, &params.output.bias)?;
            vec![out; samples]
        }
        SampleState::PerSample(vs) => vs
            .iter()
            .map(|v| affine(v, &params.output.weight, &params.output.bias))
            .collect::<Result<_>>()?,
    };
    for o in &outputs {
        if !o.all_finite() {
            return Err(Error::NonFinite("sfnn output".into()));
        }
    }
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// Public forward API
// ---------------------------------------------------------------------------

pub fn forward_dnn(spec: &NetworkSpec, params: &Params, x: &Matrix) -> Result<Matrix> {
    run_value(spec, params, x, &ForwardMode::Dnn, ForwardCfg::default(), false).map(|(v, _)| v)
}

pub fn forward_dnn_star(spec: &NetworkSpec, params: &Params, x: &Matrix) -> Result<Matrix> {
    run_value(spec, params, x, &ForwardMode::DnnStar, ForwardCfg::default(), false)
        .map(|(v, _)| v)
}

pub fn forward_simplified_exact(spec: &NetworkSpec, params: &Params, x: &Matrix) -> Result<Matrix> {
    run_value(spec, params, x, &ForwardMode::ExactEnum, ForwardCfg::default(), false)
        .map(|(v, _)| v)
}

pub fn forward_simplified_mc(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    samples: usize,
    stream: RngStream,
) -> Result<Matrix> {
    run_value(
        spec,
        params,
        x,
        &ForwardMode::SimplifiedMc { samples, stream },
        ForwardCfg::default(),
        false,
    )
    .map(|(v, _)| v)
}

/// One output matrix per Monte Carlo sample.
pub fn forward_sfnn(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    samples: usize,
    stream: RngStream,
) -> Result<Vec<Matrix>> {
    run_sfnn(spec, params, x, samples, stream)
}

/// Deterministic-value forward for any mode but SFNN propagation.
pub fn forward_value(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    mode: &ForwardMode,
) -> Result<Matrix> {
    if matches!(mode, ForwardMode::SfnnPropagate { .. }) {
        return Err(Error::ModeNotAdmissible {
            mode: "sfnn",
            reason: "sample propagation yields per-sample outputs; use forward_sfnn".into(),
        });
    }
    run_value(spec, params, x, mode, ForwardCfg::default(), false).map(|(v, _)| v)
}

/// Forward pass that records per-layer pre-activations, marginals,
/// expectation estimates, and activations.
pub fn forward_traced(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    mode: &ForwardMode,
) -> Result<(Matrix, ActivationTrace)> {
    if matches!(mode, ForwardMode::SfnnPropagate { .. }) {
        return Err(Error::ModeNotAdmissible {
            mode: "sfnn",
            reason: "tracing is defined for deterministic-value modes".into(),
        });
    }
    let (v, t) = run_value(spec, params, x, mode, ForwardCfg::default(), true)?;
    Ok((v, t.expect("trace requested")))
}

// ---------------------------------------------------------------------------
// Output heads and likelihoods
// ---------------------------------------------------------------------------

/// Target of one example.
#[derive(Debug, Clone, Copy)]
pub enum TargetRow<'a> {
    Label(usize),
    Values(&'a [f64]),
}

/// Per-example targets for a batch.
#[derive(Debug, Clone, Copy)]
pub enum TargetsRef<'a> {
    Labels(&'a [usize]),
    Values(&'a Matrix),
}

impl<'a> TargetsRef<'a> {
    pub fn len(&self) -> usize {
        match self {
            TargetsRef::Labels(l) => l.len(),
            TargetsRef::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, r: usize) -> TargetRow<'a> {
        match self {
            TargetsRef::Labels(l) => TargetRow::Label(l[r]),
            TargetsRef::Values(v) => TargetRow::Values(v.row(r)),
        }
    }
}

/// Log-likelihood of one example's target under the head, given the
/// network's output row (logits or Gaussian mean).
pub fn head_log_prob(head: &OutputHead, out: &[f64], target: TargetRow<'_>) -> f64 {
    match (head, target) {
        (OutputHead::Softmax { .. }, TargetRow::Label(k)) => {
            let lp = out[k] - log_sum_exp(out);
            lp.max(LOG_PROB_FLOOR)
        }
        (OutputHead::Gaussian { sigma_y, .. }, TargetRow::Values(y)) => {
            let norm = (sigma_y * (2.0 * std::f64::consts::PI).sqrt()).ln();
            y.iter()
                .zip(out.iter())
                .map(|(yi, mu)| {
                    let z = (yi - mu) / sigma_y;
                    -0.5 * z * z - norm
                })
                .sum()
        }
        _ => panic!("target kind does not match output head"),
    }
}

/// Per-example negative log-likelihood under the given forward semantics.
/// Deterministic modes score the single network output; SFNN propagation
/// scores the sample mixture via log-sum-exp minus log M.
pub fn predict_nll(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    targets: TargetsRef<'_>,
    mode: &ForwardMode,
) -> Result<Vec<f64>> {
    if targets.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs vs {} targets",
            x.rows(),
            targets.len()
        )));
    }
    match mode {
        ForwardMode::SfnnPropagate { samples, stream } => {
            let outs = forward_sfnn(spec, params, x, *samples, *stream)?;
            let ln_m = (*samples as f64).ln();
            let mut nll = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let lls: Vec<f64> = outs
                    .iter()
                    .map(|o| head_log_prob(&spec.head, o.row(r), targets.row(r)))
                    .collect();
                nll.push(-(log_sum_exp(&lls) - ln_m));
            }
            Ok(nll)
        }
        _ => {
            let out = forward_value(spec, params, x, mode)?;
            Ok((0..x.rows())
                .map(|r| -head_log_prob(&spec.head, out.row(r), targets.row(r)))
                .collect())
        }
    }
}

/// Classification error rate under a deterministic-value mode, or, for SFNN
/// propagation, with class probabilities averaged over samples.
pub fn error_rate(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    labels: &[usize],
    mode: &ForwardMode,
) -> Result<f64> {
    let classes = match spec.head {
        OutputHead::Softmax { classes } => classes,
        _ => return Err(Error::Data("error rate needs a softmax head".into())),
    };
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch("labels vs inputs".into()));
    }
    let mut wrong = 0usize;
    match mode {
        ForwardMode::SfnnPropagate { samples, stream } => {
            let outs = forward_sfnn(spec, params, x, *samples, *stream)?;
            for r in 0..n {
                // average class probabilities over the sample mixture
                let mut probs = vec![0.0; classes];
                for o in &outs {
                    let row = o.row(r);
                    let lse = log_sum_exp(row);
                    for (pk, &logit) in probs.iter_mut().zip(row.iter()) {
                        *pk += (logit - lse).exp();
                    }
                }
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if argmax != labels[r] {
                    wrong += 1;
                }
            }
        }
        _ => {
            let out = forward_value(spec, params, x, mode)?;
            for r in 0..n {
                let row = out.row(r);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if argmax != labels[r] {
                    wrong += 1;
                }
            }
        }
    }
    Ok(wrong as f64 / n as f64)
}
