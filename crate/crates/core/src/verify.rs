//! Independent oracles and certification routines: exact enumeration,
//! transfer-bound checks, gamma sweeps, gradient checks, and Monte Carlo
//! bias tests.
//!
//! The enumeration oracle here is written recursively, on purpose: the
//! forward engine enumerates configurations with an iterative mask-doubling
//! scheme, and the two must agree without sharing code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{ActivationKind, Matrix, SquashKind};
use crate::network::{
    forward_traced, ForwardMode, NetworkSpec, OutputHead, Params, TargetsRef, ENUM_WIDTH_CAP,
};
use crate::rng::{sample_bernoulli, RngStream};
use crate::training::{backprop_dnn, exact_grad_simplified};
use crate::transfer::{max_layer_gap, transfer_loss, transform_theorem1, transform_theorem3};
use crate::{Error, Result};

/// Outcome of one certification routine. `pass` holds exactly when every
/// measured value stays within the bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub pass: bool,
    pub measured: Vec<f64>,
    pub bound: f64,
    pub seeds: Vec<u64>,
    pub detail: String,
}

impl CheckReport {
    fn new(
        check: impl Into<String>,
        measured: Vec<f64>,
        bound: f64,
        seeds: Vec<u64>,
        pass: bool,
        detail: impl Into<String>,
    ) -> Result<Self> {
        let report = CheckReport {
            check: check.into(),
            pass,
            measured,
            bound,
            seeds,
            detail: detail.into(),
        };
        if !report.bound.is_finite() || report.measured.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite(format!("check report {}", report.check)));
        }
        Ok(report)
    }
}

// ---------------------------------------------------------------------------
// Enumeration oracle
// ---------------------------------------------------------------------------

/// Exact `E[s(w . h + b)]` over the product-Bernoulli vector with marginals
/// `p`, by recursive expansion unit by unit.
pub fn enum_expectation_oracle(p: &[f64], w: &[f64], b: f64, s: SquashKind) -> Result<f64> {
    Ok(enum_moments(p, w, b, s)?.0)
}

/// `(E[s(beta)], E[s(beta)^2])` by the same recursion.
pub fn enum_moments(p: &[f64], w: &[f64], b: f64, s: SquashKind) -> Result<(f64, f64)> {
    if p.len() > ENUM_WIDTH_CAP {
        return Err(Error::EnumTooWide {
            width: p.len(),
            cap: ENUM_WIDTH_CAP,
        });
    }
    if p.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} marginals vs {} weights",
            p.len(),
            w.len()
        )));
    }
    fn rec(p: &[f64], w: &[f64], acc: f64, s: SquashKind) -> (f64, f64) {
        match (p.split_first(), w.split_first()) {
            (None, None) => {
                let v = s.value(acc);
                (v, v * v)
            }
            (Some((&p0, pr)), Some((&w0, wr))) => {
                let (e_off, e2_off) = rec(pr, wr, acc, s);
                let (e_on, e2_on) = rec(pr, wr, acc + w0, s);
                (
                    (1.0 - p0) * e_off + p0 * e_on,
                    (1.0 - p0) * e2_off + p0 * e2_on,
                )
            }
            _ => unreachable!("lengths checked"),
        }
    }
    Ok(rec(p, w, b, s))
}

// ---------------------------------------------------------------------------
// Random-network sampler
// ---------------------------------------------------------------------------

/// Small random DNN plus a matching random input set, for bound
/// certification. Alternates ReLU and sigmoid activations across seeds.
pub fn sample_dnn(
    seed: u64,
    input_dim: usize,
    widths: &[usize],
    n_inputs: usize,
) -> (NetworkSpec, Params, Matrix) {
    let activation = if seed.is_multiple_of(2) {
        ActivationKind::Relu
    } else {
        ActivationKind::Sigmoid
    };
    let spec = NetworkSpec::dnn(input_dim, widths, activation, OutputHead::gaussian(1));
    let mut rng = RngStream::new(seed).rng();
    let mut params = Params::zeros(&spec);
    for aff in params.affines_mut() {
        for w in aff.weight.data_mut() {
            *w = rng.gen_range(-0.8..0.8);
        }
        for b in aff.bias.iter_mut() {
            *b = rng.gen_range(-0.3..0.5);
        }
    }
    let inputs = Matrix::from_vec(
        n_inputs,
        input_dim,
        (0..n_inputs * input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    (spec, params, inputs)
}

// ---------------------------------------------------------------------------
// Certification routines
// ---------------------------------------------------------------------------

/// Certify the single-pair transfer bound: for each seed, build a random
/// ReLU/sigmoid DNN, convert its first hidden layer, and check that the
/// exactly-enumerated activation gap at the layer above stays within the
/// reported bound. Degenerate-gamma samples are skipped deterministically.
pub fn check_theorem1_bound(
    n_seeds: usize,
    gamma_upper: f64,
    base_seed: u64,
) -> Result<CheckReport> {
    let mut seeds = Vec::with_capacity(n_seeds);
    let mut worst_ratio = 0.0f64;
    let mut failures = 0usize;
    let mut candidate = base_seed;
    while seeds.len() < n_seeds {
        let seed = candidate;
        candidate += 1;
        let (spec, params, inputs) = sample_dnn(seed, 8, &[12, 4], 64);
        let t = match transform_theorem1(
            &spec,
            &params,
            &[0],
            &[gamma_upper],
            SquashKind::Sigmoid,
            &inputs,
            false,
        ) {
            Ok(t) => t,
            Err(Error::DegenerateGamma { .. }) => continue,
            Err(e) => return Err(e),
        };
        let gap = max_layer_gap(
            (&spec, &params),
            (&t.spec, &t.params),
            &inputs,
            1,
            RngStream::new(seed),
        )?;
        let bound = t.report.layers[0]
            .theorem1_bound
            .expect("theorem transform reports a bound");
        if gap > bound {
            failures += 1;
        }
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(gap / bound);
        }
        seeds.push(seed);
    }
    CheckReport::new(
        "theorem1-bound",
        vec![worst_ratio],
        1.0,
        seeds,
        failures == 0,
        format!(
            "{}/{} networks within bound at gamma_upper {gamma_upper} (worst gap/bound {worst_ratio:.3e})",
            n_seeds - failures,
            n_seeds
        ),
    )
}

/// Sweep gamma_upper over an ascending list on one network and assert the
/// knowledge-transfer loss is non-increasing with first/last ratio >= 10.
/// `general` selects the general-activation (centered) transform.
pub fn gamma_sweep(
    spec: &NetworkSpec,
    params: &Params,
    inputs: &Matrix,
    gammas: &[f64],
    general: bool,
    seed: u64,
) -> Result<CheckReport> {
    if gammas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("gamma list must be ascending".into()));
    }
    let mut losses = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let t = if general {
            transform_theorem3(
                spec,
                params,
                &[0],
                &[g],
                SquashKind::Sigmoid,
                inputs,
                false,
            )?
        } else {
            transform_theorem1(
                spec,
                params,
                &[0],
                &[g],
                SquashKind::Sigmoid,
                inputs,
                false,
            )?
        };
        losses.push(transfer_loss(
            (spec, params),
            (&t.spec, &t.params),
            inputs,
            1,
            RngStream::new(seed),
        )?);
    }
    let monotone = losses.windows(2).all(|w| w[1] <= w[0]);
    let ratio = if *losses.last().unwrap() > 0.0 {
        losses.first().unwrap() / losses.last().unwrap()
    } else {
        f64::INFINITY
    };
    // the ratio gate applies once the sweep spans [2, 250]
    let spans = gammas.first().copied().unwrap_or(0.0) <= 2.0
        && gammas.last().copied().unwrap_or(0.0) >= 250.0;
    let ratio_ok = !spans || ratio >= 10.0;
    let pass = monotone && ratio_ok;
    let mut measured = losses.clone();
    measured.push(if ratio.is_finite() { ratio } else { f64::MAX });
    CheckReport::new(
        "gamma-sweep",
        measured,
        10.0,
        vec![seed],
        pass,
        format!("losses {losses:?}, first/last ratio {ratio:.2}"),
    )
}

/// Which gradient route a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckMode {
    Dnn,
    ExactEnum,
}

/// Central finite differences (step 1e-5) against the analytic gradient on
/// `n_coords` randomly chosen parameter coordinates.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    targets: TargetsRef<'_>,
    mode: GradCheckMode,
    n_coords: usize,
    seed: u64,
    tol: f64,
) -> Result<CheckReport> {
    let loss_of = |p: &Params| -> Result<f64> {
        Ok(match mode {
            GradCheckMode::Dnn => backprop_dnn(spec, p, x, targets)?.0,
            GradCheckMode::ExactEnum => exact_grad_simplified(spec, p, x, targets)?.0,
        })
    };
    let (_, grads) = match mode {
        GradCheckMode::Dnn => backprop_dnn(spec, params, x, targets)?,
        GradCheckMode::ExactEnum => exact_grad_simplified(spec, params, x, targets)?,
    };
    let flat = grads.to_flat();
    let mut rng = RngStream::new(seed).rng();
    let h = 1e-5;
    let mut max_err = 0.0f64;
    for _ in 0..n_coords {
        let coord = rng.gen_range(0..flat.len());
        let mut plus = params.clone();
        perturb_coord(&mut plus, coord, h);
        let mut minus = params.clone();
        perturb_coord(&mut minus, coord, -h);
        let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
        let a = flat[coord];
        let denom = a.abs().max(fd.abs());
        let err = if denom > 1e-6 {
            (a - fd).abs() / denom
        } else {
            (a - fd).abs()
        };
        max_err = max_err.max(err);
    }
    CheckReport::new(
        format!(
            "grad-check-{}",
            match mode {
                GradCheckMode::Dnn => "dnn",
                GradCheckMode::ExactEnum => "exact-enum",
            }
        ),
        vec![max_err],
        tol,
        vec![seed],
        max_err <= tol,
        format!("max relative error {max_err:.3e} over {n_coords} coordinates"),
    )
}

fn perturb_coord(params: &mut Params, coord: usize, delta: f64) {
    let mut k = coord;
    for aff in params.affines_mut() {
        let wl = aff.weight.data().len();
        if k < wl {
            aff.weight.data_mut()[k] += delta;
            return;
        }
        k -= wl;
        if k < aff.bias.len() {
            aff.bias[k] += delta;
            return;
        }
        k -= aff.bias.len();
    }
    panic!("coordinate out of range");
}

/// Test the forward Monte Carlo estimator for bias: the mean of `runs`
/// reseeded M-sample estimates of `E[s(beta_j)]` is compared to the
/// enumeration oracle; the worst per-unit z-score must stay within 4.
pub fn mc_bias_test(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    m_samples: usize,
    runs: usize,
    seed: u64,
) -> Result<CheckReport> {
    // locate the first stochastic/squash pair
    let pair = spec
        .layers
        .iter()
        .position(|l| l.is_stochastic())
        .ok_or_else(|| Error::InvalidNetwork("no stochastic layer".into()))?;
    let (_, trace) = forward_traced(spec, params, x, &ForwardMode::ExactEnum)?;
    let marginals = trace.layers[pair].marginals.as_ref().unwrap();
    let squash_aff = &params.layers[pair + 1];
    let squash = match spec.layers[pair + 1] {
        crate::network::LayerSpec::Squash { squash, .. } => squash,
        _ => return Err(Error::InvalidNetwork("stochastic layer lacks squash".into())),
    };

    let stream = RngStream::new(seed);
    let mut worst_z = 0.0f64;
    for r in 0..x.rows() {
        let p_row = marginals.row(r);
        let p_mat = Matrix::row_vector(p_row.to_vec());
        for j in 0..squash_aff.weight.rows() {
            let w_row = squash_aff.weight.row(j);
            let b = squash_aff.bias[j];
            let (exact, second) = enum_moments(p_row, w_row, b, squash)?;
            let var = (second - exact * exact).max(0.0);
            let mut mean = 0.0;
            for run in 0..runs {
                let run_stream = stream.substream(r as u64).substream(j as u64).substream(run as u64);
                let mut est = 0.0;
                for m in 0..m_samples {
                    let h = sample_bernoulli(&p_mat, run_stream.substream(m as u64))?;
                    let beta: f64 = w_row
                        .iter()
                        .zip(h.data().iter())
                        .map(|(w, hv)| w * hv)
                        .sum::<f64>()
                        + b;
                    est += squash.value(beta);
                }
                mean += est / m_samples as f64 / runs as f64;
            }
            let se = (var / (m_samples * runs) as f64).sqrt();
            let z = if se > 0.0 {
                (mean - exact) / se
            } else {
                // degenerate marginals: the estimate must be exact
                if (mean - exact).abs() < 1e-12 {
                    0.0
                } else {
                    f64::MAX
                }
            };
            worst_z = worst_z.max(z.abs());
        }
    }
    CheckReport::new(
        "mc-bias",
        vec![worst_z],
        4.0,
        vec![seed],
        worst_z <= 4.0,
        format!("worst |z| {worst_z:.3} over {} rows, M {m_samples}, {runs} runs", x.rows()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;
    use crate::network::{forward_simplified_mc, predict_nll, LayerSpec, MarginalKind};

    #[test]
    fn oracle_single_unit_closed_form() {
        let mut rng = RngStream::new(1).rng();
        for _ in 0..50 {
            let p: f64 = rng.gen_range(0.0..1.0);
            let w: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            let e = enum_expectation_oracle(&[p], &[w], b, SquashKind::Sigmoid).unwrap();
            let closed = p * sigmoid(w + b) + (1.0 - p) * sigmoid(b);
            assert!((e - closed).abs() <= 1e-12);
        }
    }

    #[test]
    fn oracle_all_ones_marginals() {
        let w = [0.2, -0.5, 1.1];
        let e = enum_expectation_oracle(&[1.0, 1.0, 1.0], &w, 0.3, SquashKind::Tanh).unwrap();
        assert!((e - (0.2f64 - 0.5 + 1.1 + 0.3).tanh()).abs() < 1e-15);
    }

    #[test]
    fn oracle_rejects_wide_layers() {
        let p = vec![0.5; 21];
        let w = vec![0.1; 21];
        assert!(enum_expectation_oracle(&p, &w, 0.0, SquashKind::Sigmoid).is_err());
    }

    #[test]
    fn oracle_against_mc_one_million() {
        // N = 12 random instance vs plain Monte Carlo: |delta| <= 4 standard errors
        let mut rng = RngStream::new(2).rng();
        let n = 12;
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = 0.1;
        let (exact, second) = enum_moments(&p, &w, b, SquashKind::Sigmoid).unwrap();
        let var = second - exact * exact;
        let m = 1_000_000usize;
        let p_mat = Matrix::row_vector(p.clone());
        // one long stream; draws are cheap enough at this scale
        let mut est = 0.0;
        let stream = RngStream::new(3);
        let mut r = stream.rng();
        for _ in 0..m {
            let mut beta = b;
            for (&pi, &wi) in p.iter().zip(w.iter()) {
                let u: f64 = r.gen();
                if u < pi {
                    beta += wi;
                }
            }
            est += SquashKind::Sigmoid.value(beta) / m as f64;
        }
        let _ = p_mat;
        let se = (var / m as f64).sqrt();
        assert!(
            (est - exact).abs() <= 4.0 * se,
            "MC {est} vs oracle {exact}, se {se}"
        );
    }

    #[test]
    fn oracle_matches_forward_engine_enumeration() {
        // dual route: recursive oracle vs the mask-doubling engine inside
        // the exact-enumeration forward, on a 12-unit layer
        let mut rng = RngStream::new(4).rng();
        let spec = NetworkSpec {
            input_dim: 3,
            layers: vec![
                LayerSpec::StochasticBinary {
                    width: 12,
                    marginal: MarginalKind::DirectSigmoid,
                },
                LayerSpec::Squash {
                    width: 4,
                    alpha: 1.0,
                    squash: SquashKind::Sigmoid,
                    activation: ActivationKind::Relu,
                    centered: false,
                },
            ],
            head: OutputHead::gaussian(1),
        };
        let mut params = Params::zeros(&spec);
        for aff in params.affines_mut() {
            for w in aff.weight.data_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
            for b in aff.bias.iter_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        let x = Matrix::row_vector(vec![0.3, -0.2, 0.7]);
        let (_, trace) = forward_traced(&spec, &params, &x, &ForwardMode::ExactEnum).unwrap();
        let marginals = trace.layers[0].marginals.as_ref().unwrap();
        let engine_e = trace.layers[1].expectation.as_ref().unwrap();
        for j in 0..4 {
            let oracle = enum_expectation_oracle(
                marginals.row(0),
                params.layers[1].weight.row(j),
                params.layers[1].bias[j],
                SquashKind::Sigmoid,
            )
            .unwrap();
            assert!(
                (oracle - engine_e.get(0, j)).abs() <= 1e-12,
                "unit {j}: {oracle} vs {}",
                engine_e.get(0, j)
            );
        }
    }

    #[test]
    fn theorem1_bound_certificate_runs() {
        let report = check_theorem1_bound(10, 50.0, 1000).unwrap();
        assert!(report.pass, "{}", report.detail);
        assert_eq!(report.seeds.len(), 10);
        // loose regime still certifies
        let report = check_theorem1_bound(5, 1.0, 2000).unwrap();
        assert!(report.pass, "{}", report.detail);
    }

    #[test]
    fn gamma_sweep_decreases() {
        let (spec, params, inputs) = sample_dnn(42, 6, &[8, 5], 48);
        let report = gamma_sweep(
            &spec,
            &params,
            &inputs,
            &[2.0, 10.0, 50.0, 250.0],
            false,
            7,
        )
        .unwrap();
        assert!(report.pass, "{}", report.detail);
        // identical-networks control: zero everywhere
        let loss = transfer_loss(
            (&spec, &params),
            (&spec, &params),
            &inputs,
            1,
            RngStream::new(0),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn gamma_sweep_rejects_unsorted() {
        let (spec, params, inputs) = sample_dnn(43, 5, &[6, 4], 16);
        assert!(gamma_sweep(&spec, &params, &inputs, &[10.0, 2.0], false, 0).is_err());
    }

    #[test]
    fn grad_checks_pass() {
        let (spec, params, inputs) = sample_dnn(44, 5, &[6, 4], 4);
        let y = Matrix::from_vec(4, 1, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let report = grad_check(
            &spec,
            &params,
            &inputs,
            TargetsRef::Values(&y),
            GradCheckMode::Dnn,
            100,
            5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{}", report.detail);

        let t = transform_theorem1(
            &spec,
            &params,
            &[0],
            &[50.0],
            SquashKind::Sigmoid,
            &inputs,
            false,
        )
        .unwrap();
        // fresh inputs: on the gamma-defining set itself some marginal sits
        // exactly at the clamp boundary, where the objective has a kink and
        // finite differences cannot converge
        let mut rng = RngStream::new(45).rng();
        let fresh = Matrix::from_vec(4, 5, (0..20).map(|_| rng.gen_range(-0.9..0.9)).collect())
            .unwrap();
        let report = grad_check(
            &t.spec,
            &t.params,
            &fresh,
            TargetsRef::Values(&y),
            GradCheckMode::ExactEnum,
            60,
            6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{}", report.detail);
    }

    #[test]
    fn grad_check_zero_gradient_point() {
        // symmetric construction: zero weights and bias, tanh net, target at
        // the prediction -> gradient vanishes on both routes
        let spec = NetworkSpec::dnn(2, &[4], ActivationKind::Tanh, OutputHead::gaussian(1));
        let params = Params::zeros(&spec);
        let x = Matrix::row_vector(vec![0.5, -0.5]);
        let y = Matrix::row_vector(vec![0.0]);
        let (_, grads) = backprop_dnn(&spec, &params, &x, TargetsRef::Values(&y)).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g.abs() <= 1e-8));
        let report = grad_check(
            &spec,
            &params,
            &x,
            TargetsRef::Values(&y),
            GradCheckMode::Dnn,
            40,
            7,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "{}", report.detail);
    }

    fn small_pair(seed: u64) -> (NetworkSpec, Params, Matrix) {
        let (spec, params, inputs) = sample_dnn(seed, 4, &[8, 4], 2);
        let t = transform_theorem1(
            &spec,
            &params,
            &[0],
            &[50.0],
            SquashKind::Sigmoid,
            &inputs,
            false,
        )
        .unwrap();
        (t.spec, t.params, inputs)
    }

    #[test]
    fn mc_bias_passes_and_degenerate_z_zero() {
        let (spec, params, inputs) = small_pair(48);
        let report = mc_bias_test(&spec, &params, &inputs, 100, 200, 9).unwrap();
        assert!(report.pass, "{}", report.detail);

        // degenerate marginals: z is exactly zero
        let dspec = NetworkSpec {
            input_dim: 1,
            layers: vec![
                LayerSpec::StochasticBinary {
                    width: 2,
                    marginal: MarginalKind::ClippedScaled {
                        alpha: 1.0,
                        activation: ActivationKind::Relu,
                        centered: false,
                    },
                },
                LayerSpec::Squash {
                    width: 1,
                    alpha: 1.0,
                    squash: SquashKind::Sigmoid,
                    activation: ActivationKind::Relu,
                    centered: false,
                },
            ],
            head: OutputHead::gaussian(1),
        };
        let mut dparams = Params::zeros(&dspec);
        dparams.layers[0].bias.copy_from_slice(&[5.0, 5.0]); // marginals pinned at 1
        dparams.layers[1].weight.data_mut().copy_from_slice(&[0.7, -0.4]);
        dparams.output.weight.set(0, 0, 1.0);
        let x = Matrix::row_vector(vec![0.0]);
        let report = mc_bias_test(&dspec, &dparams, &x, 10, 20, 10).unwrap();
        assert!(report.pass);
        assert_eq!(report.measured[0], 0.0);
    }

    #[test]
    fn mc_variance_scales_inversely_with_samples() {
        // empirical std of the forward estimate across reseeded runs tracks
        // the enumerated per-configuration variance of s(beta) divided by M,
        // and shrinks about tenfold when M grows tenfold
        let (spec, params, inputs) = small_pair(50);
        let x = inputs.slice_rows(0, 1);
        let (_, trace) = forward_traced(&spec, &params, &x, &ForwardMode::ExactEnum).unwrap();
        let p = trace.layers[0].marginals.as_ref().unwrap().row(0);
        let w = params.layers[1].weight.row(0);
        let b = params.layers[1].bias[0];
        let (exact, second) = enum_moments(p, w, b, SquashKind::Sigmoid).unwrap();
        let var_one = second - exact * exact;
        let mut emp = Vec::new();
        for m in [40usize, 400] {
            let mut vals = Vec::with_capacity(100);
            for run in 0..100u64 {
                let (_, tr) = crate::network::run_value(
                    &spec,
                    &params,
                    &x,
                    &ForwardMode::SimplifiedMc {
                        samples: m,
                        stream: RngStream::new(51).substream(run),
                    },
                    crate::network::ForwardCfg::default(),
                    true,
                )
                .unwrap();
                vals.push(tr.unwrap().layers[1].expectation.as_ref().unwrap().get(0, 0));
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var_emp: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
            let theory = var_one / m as f64;
            assert!(
                var_emp <= 2.0 * theory && var_emp >= theory / 2.0,
                "M {m}: empirical {var_emp:.3e} vs theory {theory:.3e}"
            );
            emp.push(var_emp);
        }
        let shrink = emp[0] / emp[1];
        assert!(
            (4.0..25.0).contains(&shrink),
            "variance shrink {shrink} not near 10"
        );
    }

    #[test]
    fn mc_error_shrinks_like_inverse_sqrt_m() {
        // 12-unit net, M sweep 1e2 / 1e3 / 1e4: absolute error against the
        // exact enumeration drops roughly as M^(-1/2)
        let mut rng = RngStream::new(55).rng();
        let spec = NetworkSpec {
            input_dim: 3,
            layers: vec![
                LayerSpec::StochasticBinary {
                    width: 12,
                    marginal: MarginalKind::DirectSigmoid,
                },
                LayerSpec::Squash {
                    width: 4,
                    alpha: 2.0,
                    squash: SquashKind::Sigmoid,
                    activation: ActivationKind::Relu,
                    centered: false,
                },
            ],
            head: OutputHead::gaussian(1),
        };
        let mut params = Params::zeros(&spec);
        for aff in params.affines_mut() {
            for w in aff.weight.data_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
            for b in aff.bias.iter_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        let x = Matrix::from_vec(8, 3, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let exact = crate::network::forward_simplified_exact(&spec, &params, &x).unwrap();
        let mut errs = Vec::new();
        for m in [100usize, 1000, 10_000] {
            // average over reseeded runs so the comparison tracks the rate,
            // not one draw
            let mut mean_err = 0.0;
            for run in 0..8u64 {
                let mc = forward_simplified_mc(
                    &spec,
                    &params,
                    &x,
                    m,
                    RngStream::new(56).substream(run),
                )
                .unwrap();
                let err: f64 = mc
                    .data()
                    .iter()
                    .zip(exact.data().iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / mc.data().len() as f64;
                mean_err += err / 8.0;
            }
            errs.push(mean_err);
        }
        assert!(
            errs[1] < errs[0] && errs[2] < errs[1],
            "error not shrinking: {errs:?}"
        );
        // each tenfold M should cut the error by about sqrt(10) ~ 3.16
        for w in errs.windows(2) {
            let factor = w[0] / w[1];
            assert!(
                (1.8..6.0).contains(&factor),
                "shrink factor {factor} far from sqrt(10): {errs:?}"
            );
        }
    }

    #[test]
    fn sfnn_nll_approaches_simplified_on_near_linear_squash() {
        // small-weight squash layers are nearly linear, so sample
        // propagation and in-layer averaging give close mixtures
        let mut rng = RngStream::new(52).rng();
        let spec = NetworkSpec {
            input_dim: 2,
            layers: vec![
                LayerSpec::StochasticBinary {
                    width: 6,
                    marginal: MarginalKind::DirectSigmoid,
                },
                LayerSpec::Squash {
                    width: 4,
                    alpha: 1.0,
                    squash: SquashKind::Sigmoid,
                    activation: ActivationKind::Sigmoid,
                    centered: false,
                },
            ],
            head: OutputHead::gaussian(1),
        };
        let mut params = Params::zeros(&spec);
        for aff in params.affines_mut() {
            for w in aff.weight.data_mut() {
                *w = rng.gen_range(-0.1..0.1); // near-linear regime
            }
        }
        params.output.weight.data_mut().iter_mut().for_each(|w| *w = 0.5);
        let x = Matrix::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let y = Matrix::from_vec(4, 1, (0..4).map(|_| rng.gen_range(0.9..1.2)).collect())
            .unwrap();
        let targets = TargetsRef::Values(&y);
        let mc_nll = predict_nll(
            &spec,
            &params,
            &x,
            targets,
            &ForwardMode::SimplifiedMc {
                samples: 500,
                stream: RngStream::new(53),
            },
        )
        .unwrap();
        let mut gaps = Vec::new();
        for m in [10usize, 500] {
            let sfnn_nll = predict_nll(
                &spec,
                &params,
                &x,
                targets,
                &ForwardMode::SfnnPropagate {
                    samples: m,
                    stream: RngStream::new(54),
                },
            )
            .unwrap();
            let gap = sfnn_nll
                .iter()
                .zip(mc_nll.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            gaps.push(gap);
        }
        assert!(
            gaps[1] <= 0.05,
            "SFNN nll not converging to simplified nll: gaps {gaps:?}"
        );
    }

    #[test]
    fn check_reports_serialize_to_json_lines() {
        let report = check_theorem1_bound(3, 50.0, 9000).unwrap();
        let line = serde_json::to_string(&report).unwrap();
        assert!(line.contains("\"check\":\"theorem1-bound\""));
        let back: CheckReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back.pass, report.pass);
        assert_eq!(back.seeds, report.seeds);
    }

    #[test]
    fn forward_mc_estimate_is_unbiased_high_repetition() {
        // pass rate of the z-test across 100 repetitions with fresh nets
        let mut passes = 0;
        for rep in 0..100u64 {
            let (spec, params, inputs) = small_pair(3000 + rep);
            let x = inputs.slice_rows(0, 1);
            let report = mc_bias_test(&spec, &params, &x, 100, 100, 60 + rep).unwrap();
            if report.pass {
                passes += 1;
            }
        }
        assert!(passes >= 99, "only {passes}/100 z-tests passed");
    }
}
