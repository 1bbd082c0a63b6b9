//! Finite-difference verification of tape gradients in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Outer step of the five-point stencil, scaled by `max(1, |x|)`.
    pub eps: f64,
    /// Denominator floor of the relative error, as a fraction of the largest
    /// analytic gradient entry across all tensors.
    pub floor: f64,
    /// Probes where both gradients fall below `noise_factor · ε_mach · Σ|yᵢrᵢ| / h`
    /// are indistinguishable from rounding noise and count as agreeing.
    pub noise_factor: f64,
    /// Coordinates probed per tensor (all when the tensor is smaller).
    pub per_tensor: usize,
    /// Cap on probed coordinates across all tensors.
    pub max_total: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-4, floor: 1e-3, noise_factor: 100.0, per_tensor: 16, max_total: 256 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// Index into `inputs ++ params`.
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
    pub probes: usize,
    /// Probes whose analytic and numeric values were both at the noise level.
    pub below_noise: usize,
}

/// Compares reverse-mode gradients of `⟨f(inputs, params), r⟩` (with a
/// fixed random `r`) against fourth-order central differences at sampled coordinates.
pub fn check_gradients<F>(
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    cfg: &GradCheckConfig,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = {
        let mut tape = Tape::new();
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let bound = params.bind(&mut tape, false);
        let out = f(&mut tape, &bound, &xs)?;
        tape.shape(out).to_vec()
    };
    let weights = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let evaluate = |inputs: &[Tensor<f64>], params: &ParamStore<f64>, grad: bool| {
        let mut tape = Tape::new();
        let xs: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let bound = params.bind(&mut tape, grad);
        let out = f(&mut tape, &bound, &xs)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        Ok::<_, crate::error::Error>((tape, xs, bound, prod, loss))
    };

    let (tape, xs, bound, prod, loss) = evaluate(inputs, params, true)?;
    let magnitude: f64 = tape.value(prod).data().iter().map(|v| v.abs()).sum();
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = xs.iter().map(|&v| grads.get_slice(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
    analytic.extend(bound.vars().iter().map(|&v| grads.get_slice(v).map(<[f64]>::to_vec).unwrap_or_default()));
    drop(tape);

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).chain(params.iter().map(|(_, _, t)| t.numel())).collect();
    for (i, (a, &n)) in analytic.iter().zip(&sizes).enumerate() {
        if a.len() != n {
            return contract("check_gradients", format!("tensor {i} received no gradient"));
        }
    }
    let mut coords = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        if n <= cfg.per_tensor {
            coords.extend((0..n).map(|i| (t, i)));
        } else {
            coords.extend(sample(&mut rng, n, cfg.per_tensor).into_iter().map(|i| (t, i)));
        }
    }
    if coords.len() > cfg.max_total {
        let keep = sample(&mut rng, coords.len(), cfg.max_total).into_vec();
        coords = keep.into_iter().map(|i| coords[i]).collect();
    }

    let loss_at = |tensor: usize, index: usize, delta: f64| -> Result<f64> {
        let mut ins = inputs.to_vec();
        let mut ps;
        let params_ref = if tensor < inputs.len() {
            ins[tensor].data_mut()[index] += delta;
            params
        } else {
            ps = params.clone();
            let id = ps.iter().nth(tensor - inputs.len()).map(|(id, _, _)| id).expect("param index");
            ps.get_mut(id).data_mut()[index] += delta;
            &ps
        };
        let (tape, _, _, _, loss) = evaluate(&ins, params_ref, false)?;
        Ok(tape.value(loss).data()[0])
    };

    let g_max = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (cfg.floor * g_max).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport::default();
    for (tensor, index) in coords {
        let x = if tensor < inputs.len() {
            inputs[tensor].data()[index]
        } else {
            params.iter().nth(tensor - inputs.len()).map(|(_, _, t)| t.data()[index]).unwrap_or(0.0)
        };
        let h = cfg.eps * x.abs().max(1.0);
        let noise = cfg.noise_factor * f64::EPSILON * magnitude;
        let (numeric, h) = numeric_derivative(|d| loss_at(tensor, index, d), h, noise)?;
        let a = analytic[tensor][index];
        report.probes += 1;
        if a.abs().max(numeric.abs()) <= noise / h {
            report.below_noise += 1;
            continue;
        }
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(Probe { tensor, index, analytic: a, numeric });
        }
    }
    Ok(report)
}

fn five_point(f: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let d1 = f(h)? - f(-h)?;
    let d2 = f(2.0 * h)? - f(-2.0 * h)?;
    Ok((8.0 * d1 - d2) / (12.0 * h))
}

/// Second-order one-sided difference; `dir` is `1.0` (forward) or `-1.0`.
fn one_sided(f: &mut impl FnMut(f64) -> Result<f64>, f0: f64, h: f64, dir: f64) -> Result<f64> {
    let s = dir * h;
    Ok((-3.0 * f0 + 4.0 * f(s)? - f(2.0 * s)?) / (2.0 * s))
}

/// Derivative at 0 and the step it was resolved with. `noise` bounds the
/// rounding error of one function value.
///
/// Two five-point estimates that agree to within truncation and rounding mean
/// the function is smooth across the stencil. Otherwise a kink (bilinear cell edge, `|x|` at zero) lies inside it,
/// and the one-sided estimate from the side that stays self-consistent under
/// step halving is used.
fn numeric_derivative(mut f: impl FnMut(f64) -> Result<f64>, h: f64, noise: f64) -> Result<(f64, f64)> {
    let coarse = five_point(&mut f, h)?;
    let fine = five_point(&mut f, h / 2.0)?;
    if (coarse - fine).abs() <= 1e-7 * coarse.abs().max(fine.abs()) + noise / h {
        return Ok((fine, h / 2.0));
    }
    let k = h / 16.0;
    let f0 = f(0.0)?;
    let mut best = (f64::INFINITY, 0.0);
    for dir in [1.0, -1.0] {
        let a = one_sided(&mut f, f0, k, dir)?;
        let b = one_sided(&mut f, f0, k / 2.0, dir)?;
        let spread = (a - b).abs();
        if spread < best.0 {
            best = (spread, b);
        }
    }
    Ok((best.1, k / 2.0))
}
