use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Result, Tape, Tensor, Var};

/// Relative disagreement between two finite-difference estimates beyond
/// which an entry is taken to straddle a kink. Kept well under the error
/// being measured, since two estimates can share the bias of one kink.
const KINK_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    /// Seeds both the entry sampling and the projection of tensor-valued
    /// outputs onto a scalar.
    pub seed: u64,
    /// Use the fourth-order stencil
    /// `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε` instead of the
    /// two-point central difference.
    ///
    /// The stencil also detects a ReLU kink inside `[θ−2ε, θ+2ε]`: there
    /// the central differences at `ε` and `2ε` disagree at first order, or
    /// agree with each other but not with the stencil at `ε/8`. An estimate
    /// is accepted only when it is self-consistent and matches the next
    /// smaller step; the ladder runs `ε, ε/8, ε/64, ε/512`. An entry with
    /// no such pair is counted in [`GradCheckReport::kinks`] and left out
    /// of the error.
    pub five_point: bool,
    /// Lower bound on the relative-error denominator, so that gradients
    /// which are zero up to rounding compare as absolute errors.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
            five_point: false,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    /// Parameters whose tape gradient is identically zero.
    pub zero_grad_params: Vec<String>,
    pub entries_checked: usize,
    /// Entries skipped because every step size straddled a kink.
    pub kinks: usize,
}

/// Compares tape gradients of `f` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, entry by entry, using the relative error
/// `|a − n| / max(|a|, |n|, floor)`.
///
/// A tensor-valued `f` is reduced to a scalar by a fixed random projection.
pub fn grad_check<F>(f: F, store: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let tape = Tape::new();
    let out = f(&tape, store)?;
    let out_value = out.value();
    let projection: Tensor<f64> = if out_value.numel() == 1 {
        Tensor::ones(out_value.shape())
    } else {
        let w = (0..out_value.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new_unchecked(out_value.shape().to_vec(), w)
    };
    let loss = out.mul(tape.constant(projection.clone()))?.sum();
    let analytic = tape.backward(loss, store)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, s)?.value();
        Ok(v.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (id, param) in store.iter() {
        let grad = analytic.get(id);
        if grad.data().iter().all(|&g| g == 0.0) {
            report.zero_grad_params.push(param.name.clone());
        }
        let n = param.value.numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in entries {
            let base = param.value.to_vec();
            let mut at = |delta: f64| -> Result<f64> {
                let mut moved = base.clone();
                moved[i] += delta;
                probe.set_value(id, Tensor::new_unchecked(param.value.shape().to_vec(), moved))?;
                eval(&probe)
            };
            let numeric = if opts.five_point {
                let close = |a: f64, b: f64| (a - b).abs() <= KINK_TOL * a.abs().max(b.abs()).max(opts.floor);
                let mut stencil = |h: f64| -> Result<Option<f64>> {
                    let d1 = (at(h)? - at(-h)?) / (2.0 * h);
                    let d2 = (at(2.0 * h)? - at(-2.0 * h)?) / (4.0 * h);
                    Ok(close(d1, d2).then_some((4.0 * d1 - d2) / 3.0))
                };
                let mut smooth = None;
                let mut prev = stencil(opts.eps)?;
                for k in 1..4 {
                    let next = stencil(opts.eps / 8f64.powi(k))?;
                    if let (Some(a), Some(b)) = (prev, next) {
                        if close(a, b) {
                            smooth = Some(a);
                            break;
                        }
                    }
                    prev = next;
                }
                match smooth {
                    Some(d) => d,
                    None => {
                        report.kinks += 1;
                        continue;
                    }
                }
            } else {
                (at(opts.eps)? - at(-opts.eps)?) / (2.0 * opts.eps)
            };
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(rel);
            report.entries_checked += 1;
        }
        probe.set_value(id, param.value.clone())?;
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_param.push((param.name.clone(), worst));
    }
    Ok(report)
}
