//! Parameter transformations between the three models, gamma computation
//! over a dataset, transfer-bound evaluation, and the knowledge-transfer
//! loss metric.
//!
//! The simple transformations swap a deterministic sigmoid/ReLU layer for a
//! stochastic one with matching marginals. The theorem transforms
//! additionally rescale the layer above into a squash layer so the
//! simplified-SFNN reproduces the source DNN up to a bound that shrinks
//! like 1/gamma_upper.

use serde::{Deserialize, Serialize};

use crate::math::{ActivationKind, Matrix, SquashKind};
use crate::network::{
    forward_traced, ForwardMode, LayerSpec, MarginalKind, NetworkSpec, Params,
};
use crate::rng::RngStream;
use crate::{Error, Result};

/// Default free constant for the upper layer of a transferred pair.
pub const DEFAULT_GAMMA_UPPER: f64 = 50.0;

/// Epsilon floor applied to a degenerate gamma when explicitly allowed.
pub const GAMMA_FLOOR: f64 = 1e-6;

/// Monte Carlo sample count used by [`transfer_loss`] when exact enumeration
/// is out of reach.
pub const TRANSFER_LOSS_MC_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    SimpleSigmoid,
    SimpleRelu,
    Theorem1,
    /// Theorem 1 applied to several stochastic layers at once.
    Theorem2,
    Theorem3,
}

/// Per-converted-layer constants and bound values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTransfer {
    /// Index of the stochastic layer in the hidden stack.
    pub layer: usize,
    /// gamma_l: max |f| of the source layer over the dataset.
    pub gamma_lower: f64,
    /// Largest |W h + b| observed at the source layer over the dataset.
    pub max_preactivation: f64,
    /// Free constant of the upper layer; absent for simple transforms.
    pub gamma_upper: Option<f64>,
    /// Worst-unit single-pair bound on the upper-layer activation gap.
    pub theorem1_bound: Option<f64>,
    /// Units in the stochastic layer (N^l).
    pub n_units: usize,
    /// max |W^(l+1)_ij| of the source network.
    pub w_max_upper: f64,
    /// max |b^(l+1)_j| of the source network.
    pub b_max_upper: f64,
    /// Propagation factor through the layers above (product of
    /// N^(l'-1) W_max^(l') for l' past the converted pair).
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub mode: TransferMode,
    pub squash: SquashKind,
    pub layers: Vec<LayerTransfer>,
    /// Composed bound on the last-hidden-layer gap (sum of propagated
    /// per-layer terms); zero for simple transforms.
    pub end_to_end_bound: f64,
}

/// A transformed network with its report.
#[derive(Debug, Clone)]
pub struct Transferred {
    pub spec: NetworkSpec,
    pub params: Params,
    pub report: TransferReport,
}

// ---------------------------------------------------------------------------
// Gamma
// ---------------------------------------------------------------------------

fn dnn_only(spec: &NetworkSpec) -> Result<()> {
    if spec.has_stochastic() || spec.layers.iter().any(|l| matches!(l, LayerSpec::Squash { .. }))
    {
        return Err(Error::InvalidNetwork(
            "transforms start from a plain deterministic network".into(),
        ));
    }
    Ok(())
}

/// `gamma_l = max_{i, x in D} |f(W_i h^(l-1)(x) + b_i)|` via the
/// deterministic forward pass. A dead layer (gamma = 0) is a hard error
/// unless the epsilon floor is allowed.
pub fn compute_gamma(
    spec: &NetworkSpec,
    params: &Params,
    layer: usize,
    inputs: &Matrix,
    allow_floor: bool,
) -> Result<f64> {
    dnn_only(spec)?;
    if inputs.rows() == 0 {
        return Err(Error::Data("gamma needs a non-empty dataset".into()));
    }
    let (_, trace) = forward_traced(spec, params, inputs, &ForwardMode::Dnn)?;
    let gamma = trace.layers[layer]
        .activation
        .data()
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if gamma == 0.0 {
        if allow_floor {
            return Ok(GAMMA_FLOOR);
        }
        return Err(Error::DegenerateGamma { layer });
    }
    Ok(gamma)
}

// ---------------------------------------------------------------------------
// Simple transformations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimpleTransformKind {
    Sigmoid,
    Relu,
}

/// Replace the first hidden layer by a stochastic one with matching
/// marginals. The sigmoid variant keeps every parameter bit-identical; the
/// ReLU variant sets `alpha = 1/gamma_1` and rescales the upper weights by
/// `gamma_1` so the mean-field evaluation reproduces the source network.
pub fn simple_transform(
    spec: &NetworkSpec,
    params: &Params,
    kind: SimpleTransformKind,
    inputs: &Matrix,
) -> Result<Transferred> {
    dnn_only(spec)?;
    spec.check_params(params)?;
    let first = spec
        .layers
        .first()
        .ok_or_else(|| Error::InvalidNetwork("network has no hidden layers".into()))?;
    let activation = match first {
        LayerSpec::Deterministic { activation, .. } => *activation,
        _ => unreachable!("dnn_only checked"),
    };

    let mut new_spec = spec.clone();
    let mut new_params = params.clone();
    let mut layers_report = Vec::new();

    match kind {
        SimpleTransformKind::Sigmoid => {
            if activation != ActivationKind::Sigmoid {
                return Err(Error::InvalidNetwork(format!(
                    "simple sigmoid transform needs a sigmoid first layer, found {activation}"
                )));
            }
            new_spec.layers[0] = LayerSpec::StochasticBinary {
                width: first.width(),
                marginal: MarginalKind::DirectSigmoid,
            };
        }
        SimpleTransformKind::Relu => {
            if activation != ActivationKind::Relu {
                return Err(Error::InvalidNetwork(format!(
                    "simple ReLU transform needs a ReLU first layer, found {activation}"
                )));
            }
            let gamma = compute_gamma(spec, params, 0, inputs, false)?;
            new_spec.layers[0] = LayerSpec::StochasticBinary {
                width: first.width(),
                marginal: MarginalKind::ClippedScaled {
                    alpha: 1.0 / gamma,
                    activation: ActivationKind::Relu,
                    centered: false,
                },
            };
            // W^2 <- hat W^2 / alpha = gamma * hat W^2 ; biases unchanged
            let upper = if spec.layers.len() >= 2 {
                &mut new_params.layers[1]
            } else {
                &mut new_params.output
            };
            for w in upper.weight.data_mut() {
                *w *= gamma;
            }
            let (_, trace) = forward_traced(spec, params, inputs, &ForwardMode::Dnn)?;
            let max_pre = trace.layers[0]
                .pre_activation
                .data()
                .iter()
                .fold(0.0f64, |a, &v| a.max(v.abs()));
            layers_report.push(LayerTransfer {
                layer: 0,
                gamma_lower: gamma,
                max_preactivation: max_pre,
                gamma_upper: None,
                theorem1_bound: None,
                n_units: first.width(),
                w_max_upper: max_abs(&params_upper_weight(spec, params)),
                b_max_upper: max_abs_slice(&params_upper_bias(spec, params)),
                tau: 1.0,
            });
        }
    }

    if let Some(v) = new_spec.hard_violations().first() {
        return Err(Error::InvalidNetwork(format!(
            "conversion produced an invalid network: {v} \
             (the stochastic layer needs a hidden layer above it)"
        )));
    }
    Ok(Transferred {
        spec: new_spec,
        params: new_params,
        report: TransferReport {
            mode: match kind {
                SimpleTransformKind::Sigmoid => TransferMode::SimpleSigmoid,
                SimpleTransformKind::Relu => TransferMode::SimpleRelu,
            },
            squash: SquashKind::Sigmoid,
            layers: layers_report,
            end_to_end_bound: 0.0,
        },
    })
}

fn params_upper_weight(spec: &NetworkSpec, params: &Params) -> Matrix {
    if spec.layers.len() >= 2 {
        params.layers[1].weight.clone()
    } else {
        params.output.weight.clone()
    }
}

fn params_upper_bias(spec: &NetworkSpec, params: &Params) -> Vec<f64> {
    if spec.layers.len() >= 2 {
        params.layers[1].bias.clone()
    } else {
        params.output.bias.clone()
    }
}

fn max_abs(m: &Matrix) -> f64 {
    m.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()))
}

fn max_abs_slice(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

// ---------------------------------------------------------------------------
// Theorem transforms
// ---------------------------------------------------------------------------

/// Shared implementation of the theorem transforms. `centered` selects the
/// general-activation variant: it halves `alpha_l`, doubles the upper scale,
/// and adds the centering terms on both sides of the pair.
#[allow(clippy::too_many_arguments)]
fn transform_theorem(
    spec: &NetworkSpec,
    params: &Params,
    stochastic_layers: &[usize],
    gamma_upper: &[f64],
    squash: SquashKind,
    inputs: &Matrix,
    allow_floor: bool,
    centered: bool,
    mode: TransferMode,
) -> Result<Transferred> {
    dnn_only(spec)?;
    spec.check_params(params)?;
    if stochastic_layers.is_empty() {
        return Err(Error::InvalidNetwork("no layers selected for conversion".into()));
    }
    if stochastic_layers.len() != gamma_upper.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers selected but {} gamma values",
            stochastic_layers.len(),
            gamma_upper.len()
        )));
    }
    let n_hidden = spec.layers.len();
    for pair in stochastic_layers.windows(2) {
        if pair[1] <= pair[0] + 1 {
            return Err(Error::InvalidNetwork(format!(
                "selected layers {} and {} overlap (a layer and its upper layer \
                 both take part in a conversion)",
                pair[0], pair[1]
            )));
        }
    }
    for (&l, &g) in stochastic_layers.iter().zip(gamma_upper.iter()) {
        if l + 1 >= n_hidden {
            return Err(Error::InvalidNetwork(format!(
                "layer {l} has no hidden layer above it to absorb the squash"
            )));
        }
        if g <= 0.0 {
            return Err(Error::InvalidNetwork(format!(
                "gamma_upper must be positive, got {g}"
            )));
        }
    }

    let (s0, sp0) = squash.at_zero();
    let _ = s0;
    let (_, trace) = forward_traced(spec, params, inputs, &ForwardMode::Dnn)?;

    let mut new_spec = spec.clone();
    let mut new_params = params.clone();
    let mut layers_report = Vec::new();

    for (&l, &g_up) in stochastic_layers.iter().zip(gamma_upper.iter()) {
        let (width_l, act_l) = match spec.layers[l] {
            LayerSpec::Deterministic { width, activation } => (width, activation),
            _ => unreachable!("dnn_only checked"),
        };
        if !centered && !act_l.non_negative() {
            return Err(Error::InvalidNetwork(format!(
                "the non-negative transform cannot convert a {act_l} layer; \
                 use the general-activation variant"
            )));
        }
        let (width_up, act_up) = match spec.layers[l + 1] {
            LayerSpec::Deterministic { width, activation } => (width, activation),
            _ => unreachable!("dnn_only checked"),
        };

        let gamma = compute_gamma(spec, params, l, inputs, allow_floor)?;
        let alpha_l = if centered { 0.5 / gamma } else { 1.0 / gamma };
        let alpha_up = if centered {
            2.0 * gamma * g_up / sp0
        } else {
            gamma * g_up / sp0
        };
        let bias_scale = if centered {
            1.0 / (2.0 * gamma * g_up)
        } else {
            1.0 / (gamma * g_up)
        };

        new_spec.layers[l] = LayerSpec::StochasticBinary {
            width: width_l,
            marginal: MarginalKind::ClippedScaled {
                alpha: alpha_l,
                activation: act_l,
                centered,
            },
        };
        new_spec.layers[l + 1] = LayerSpec::Squash {
            width: width_up,
            alpha: alpha_up,
            squash,
            activation: act_up,
            centered,
        };
        // (W^l, b^l) stay as-is; the upper affine is rescaled.
        let upper_src = &params.layers[l + 1];
        let upper_dst = &mut new_params.layers[l + 1];
        for (dst, &src) in upper_dst
            .weight
            .data_mut()
            .iter_mut()
            .zip(upper_src.weight.data().iter())
        {
            *dst = src / g_up;
        }
        for (dst, &src) in upper_dst.bias.iter_mut().zip(upper_src.bias.iter()) {
            *dst = src * bias_scale;
        }

        // Worst-unit bound: gamma (sum_i |W_ij| + |b_j| / gamma)^2 / (2 s'(0) gamma_up)
        let mut bound: f64 = 0.0;
        for j in 0..width_up {
            let row_l1: f64 = upper_src.weight.row(j).iter().map(|w| w.abs()).sum();
            let num = gamma * (row_l1 + upper_src.bias[j].abs() / gamma).powi(2);
            bound = bound.max(num / (2.0 * sp0 * g_up));
        }

        let max_pre = trace.layers[l]
            .pre_activation
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        layers_report.push(LayerTransfer {
            layer: l,
            gamma_lower: gamma,
            max_preactivation: max_pre,
            gamma_upper: Some(g_up),
            theorem1_bound: Some(bound),
            n_units: width_l,
            w_max_upper: max_abs(&upper_src.weight),
            b_max_upper: max_abs_slice(&upper_src.bias),
            tau: propagation_tau(spec, params, l),
        });
    }

    let hard = new_spec.hard_violations();
    if let Some(v) = hard.first() {
        return Err(Error::InvalidNetwork(format!(
            "conversion produced an invalid network: {v}"
        )));
    }

    let mut report = TransferReport {
        mode,
        squash,
        layers: layers_report,
        end_to_end_bound: 0.0,
    };
    report.end_to_end_bound = lemma_bounds(&report);
    Ok(Transferred {
        spec: new_spec,
        params: new_params,
        report,
    })
}

/// `tau_l`: product of `N^(l'-1) W_max^(l')` over the source layers strictly
/// above the converted pair, i.e. how much a unit-size error at the pair's
/// output can grow by the last hidden layer.
fn propagation_tau(spec: &NetworkSpec, params: &Params, l: usize) -> f64 {
    let mut tau = 1.0;
    for m in (l + 2)..spec.layers.len() {
        let n_prev = spec.layers[m - 1].width();
        tau *= n_prev as f64 * max_abs(&params.layers[m].weight);
    }
    tau
}

/// Non-negative-activation transfer (ReLU or sigmoid source layers):
/// `alpha_l <- 1/gamma_l`, upper layer becomes a squash layer with
/// `alpha_(l+1) = gamma_l gamma_(l+1) / s'(0)`, `W/gamma_(l+1)`,
/// `b/(gamma_l gamma_(l+1))`.
pub fn transform_theorem1(
    spec: &NetworkSpec,
    params: &Params,
    stochastic_layers: &[usize],
    gamma_upper: &[f64],
    squash: SquashKind,
    inputs: &Matrix,
    allow_floor: bool,
) -> Result<Transferred> {
    let mode = if stochastic_layers.len() > 1 {
        TransferMode::Theorem2
    } else {
        TransferMode::Theorem1
    };
    transform_theorem(
        spec,
        params,
        stochastic_layers,
        gamma_upper,
        squash,
        inputs,
        allow_floor,
        false,
        mode,
    )
}

/// General-activation transfer (tanh allowed): marginals get the +1/2
/// centering, `alpha_l <- 1/(2 gamma_l)`, and the upper squash layer doubles
/// its scale and subtracts the matching `s'(0)/2 sum_i W_ij` terms.
pub fn transform_theorem3(
    spec: &NetworkSpec,
    params: &Params,
    stochastic_layers: &[usize],
    gamma_upper: &[f64],
    squash: SquashKind,
    inputs: &Matrix,
    allow_floor: bool,
) -> Result<Transferred> {
    transform_theorem(
        spec,
        params,
        stochastic_layers,
        gamma_upper,
        squash,
        inputs,
        allow_floor,
        true,
        TransferMode::Theorem3,
    )
}

// ---------------------------------------------------------------------------
// Bounds
// ---------------------------------------------------------------------------

/// Lemma-1 style propagation of an error bound through one deterministic
/// layer: `B N^(l-1) W_max^l`.
pub fn lemma1_propagation(bound: f64, n_prev: usize, w_max: f64) -> f64 {
    bound * n_prev as f64 * w_max
}

/// End-to-end bound on the last-hidden-layer gap, composed from the report's
/// per-layer constants: sum over converted layers of
/// `tau_l gamma_l (N^l W_max^(l+1) + b_max^(l+1)/gamma_l)^2 / (2 s'(0) gamma_(l+1))`.
pub fn lemma_bounds(report: &TransferReport) -> f64 {
    let (_, sp0) = report.squash.at_zero();
    report
        .layers
        .iter()
        .map(|l| match l.gamma_upper {
            Some(g_up) => {
                let num = l.gamma_lower
                    * (l.n_units as f64 * l.w_max_upper + l.b_max_upper / l.gamma_lower)
                        .powi(2);
                l.tau * num / (2.0 * sp0 * g_up)
            }
            None => 0.0,
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Transfer loss and DNN* export
// ---------------------------------------------------------------------------

/// Pick the evaluation semantics for one side of the transfer loss: plain
/// forward for deterministic networks, exact enumeration when affordable,
/// Monte Carlo with a fixed large M otherwise.
fn loss_mode(spec: &NetworkSpec, stream: RngStream) -> ForwardMode {
    if !spec.has_stochastic() {
        ForwardMode::Dnn
    } else if spec.check_mode(&ForwardMode::ExactEnum).is_ok() {
        ForwardMode::ExactEnum
    } else {
        ForwardMode::SimplifiedMc {
            samples: TRANSFER_LOSS_MC_SAMPLES,
            stream,
        }
    }
}

/// Mean absolute activation gap at hidden layer `layer`:
/// `(1/|D|)(1/N) sum_x sum_i |h_i(x) - h_hat_i(x)|`.
pub fn transfer_loss(
    a: (&NetworkSpec, &Params),
    b: (&NetworkSpec, &Params),
    inputs: &Matrix,
    layer: usize,
    stream: RngStream,
) -> Result<f64> {
    let (spec_a, params_a) = a;
    let (spec_b, params_b) = b;
    if spec_a.layers[layer].width() != spec_b.layers[layer].width() {
        return Err(Error::ShapeMismatch(format!(
            "layer {layer} widths differ: {} vs {}",
            spec_a.layers[layer].width(),
            spec_b.layers[layer].width()
        )));
    }
    let mode_a = loss_mode(spec_a, stream.substream(0));
    let mode_b = loss_mode(spec_b, stream.substream(1));
    let (_, tr_a) = forward_traced(spec_a, params_a, inputs, &mode_a)?;
    let (_, tr_b) = forward_traced(spec_b, params_b, inputs, &mode_b)?;
    let ha = &tr_a.layers[layer].activation;
    let hb = &tr_b.layers[layer].activation;
    let n = (ha.rows() * ha.cols()) as f64;
    let gap: f64 = ha
        .data()
        .iter()
        .zip(hb.data().iter())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(gap / n)
}

/// Largest per-unit activation gap at `layer` over the dataset, the quantity
/// the single-pair bound controls.
pub fn max_layer_gap(
    a: (&NetworkSpec, &Params),
    b: (&NetworkSpec, &Params),
    inputs: &Matrix,
    layer: usize,
    stream: RngStream,
) -> Result<f64> {
    let mode_a = loss_mode(a.0, stream.substream(0));
    let mode_b = loss_mode(b.0, stream.substream(1));
    let (_, tr_a) = forward_traced(a.0, a.1, inputs, &mode_a)?;
    let (_, tr_b) = forward_traced(b.0, b.1, inputs, &mode_b)?;
    let ha = &tr_a.layers[layer].activation;
    let hb = &tr_b.layers[layer].activation;
    Ok(ha
        .data()
        .iter()
        .zip(hb.data().iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs())))
}

/// Mark a simplified-SFNN for deterministic DNN* evaluation. No parameter
/// changes: the view is realized by the `dnn-star` forward mode.
pub fn export_dnn_star(spec: &NetworkSpec, params: &Params) -> Result<(NetworkSpec, Params)> {
    spec.check_mode(&ForwardMode::DnnStar)?;
    spec.check_params(params)?;
    Ok((spec.clone(), params.clone()))
}

/// Layer activations of the transferred net with the squash linearized
/// (diagnostic: the transferred pair must then reproduce the source exactly
/// to first order).
#[cfg(test)]
fn linearized_activation(
    spec: &NetworkSpec,
    params: &Params,
    inputs: &Matrix,
    layer: usize,
) -> Result<Matrix> {
    let cfg = crate::network::ForwardCfg {
        linearize_squash: true,
        keep_samples: false,
    };
    let (_, trace) =
        crate::network::run_value(spec, params, inputs, &ForwardMode::ExactEnum, cfg, true)?;
    Ok(trace.expect("trace requested").layers[layer].activation.clone())
}
