//! Activations, normalizers, initialization, dropout, gradient clipping and
//! the finite-difference gradient checker.
//!
//! Everything that consumes data at runtime returns `Result`; a non-finite
//! value here usually means training has diverged and the caller wants to
//! abort cleanly rather than crash.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Half-width of the uniform parameter initialization interval.
pub const INIT_HALF_WIDTH: f64 = 0.04;

/// Anything that can hand out its parameter tensors by stable name.
///
/// `entries` and `entries_mut` must agree on order and names; gradient and
/// optimizer-state structs of the same concrete type are zipped positionally.
pub trait NamedParams<S: Scalar> {
    fn entries(&self) -> Vec<(String, &Tensor<S>)>;
    fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<S>)>;

    fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }
}

impl<S: Scalar> NamedParams<S> for Vec<(String, Tensor<S>)> {
    fn entries(&self) -> Vec<(String, &Tensor<S>)> {
        self.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}

pub fn sigmoid<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    x.iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op: "sigmoid",
                    detail: format!("input {v:?}"),
                });
            }
            Ok(S::one() / (S::one() + (-v).exp()))
        })
        .collect()
}

pub fn tanh_v<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    x.iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op: "tanh",
                    detail: format!("input {v:?}"),
                });
            }
            Ok(v.tanh())
        })
        .collect()
}

/// Numerically stable softmax. Errors on empty or non-finite input.
pub fn softmax<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut max = x[0];
    for &v in x {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "softmax",
                detail: format!("input {v:?}"),
            });
        }
        if v > max {
            max = v;
        }
    }
    let exps: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax over the unmasked positions only; masked positions get exactly 0.
///
/// Scores at masked positions are ignored entirely (they may be anything,
/// including non-finite). Errors if every position is masked.
pub fn masked_softmax<S: Scalar>(scores: &[S], keep: &[bool]) -> Result<Vec<S>> {
    assert_eq!(scores.len(), keep.len(), "masked_softmax: {} scores vs {} mask", scores.len(), keep.len());
    let mut max: Option<S> = None;
    for (&v, &k) in scores.iter().zip(keep) {
        if !k {
            continue;
        }
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "masked_softmax",
                detail: format!("unmasked score {v:?}"),
            });
        }
        max = Some(match max {
            Some(m) if m >= v => m,
            _ => v,
        });
    }
    let max = max.ok_or(Error::FullyMasked)?;
    let mut out = vec![S::zero(); scores.len()];
    let mut total = S::zero();
    for (i, (&v, &k)) in scores.iter().zip(keep).enumerate() {
        if k {
            let e = (v - max).exp();
            out[i] = e;
            total += e;
        }
    }
    for (o, &k) in out.iter_mut().zip(keep) {
        if k {
            *o /= total;
        }
    }
    Ok(out)
}

/// `log softmax(x)`, stable form `x - max - ln(sum exp(x - max))`.
pub fn log_softmax<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(Error::Empty("log_softmax"));
    }
    let mut max = x[0];
    for &v in x {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "log_softmax",
                detail: format!("input {v:?}"),
            });
        }
        if v > max {
            max = v;
        }
    }
    let log_total = x
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<S>()
        .ln();
    Ok(x.iter().map(|&v| v - max - log_total).collect())
}

/// Fresh tensor with entries drawn uniformly from `[-half_width, half_width)`.
pub fn uniform_init<S: Scalar>(rng: &mut Rng, shape: &[usize], half_width: f64) -> Tensor<S> {
    assert!(
        half_width > 0.0 && half_width.is_finite(),
        "uniform_init: half_width must be positive and finite, got {half_width}"
    );
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = S::from_f64(rng.next_uniform(half_width));
    }
    t
}

/// Inverted dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 - rate)`, so the mask has unit mean and inference needs no rescale.
pub fn dropout_mask<S: Scalar>(rng: &mut Rng, len: usize, rate: f64) -> Vec<S> {
    assert!(
        (0.0..1.0).contains(&rate),
        "dropout rate must lie in [0, 1), got {rate}"
    );
    let scale = S::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.next_f64() < rate {
                S::zero()
            } else {
                scale
            }
        })
        .collect()
}

/// Scale every gradient tensor by `max_norm / norm` when the global L2 norm
/// across all entries exceeds `max_norm`. Returns the pre-clip norm.
///
/// A non-finite gradient is reported with the offending tensor's name.
pub fn clip_global_norm<S: Scalar, P: NamedParams<S>>(grads: &mut P, max_norm: S) -> Result<S> {
    assert!(
        max_norm > S::zero(),
        "clip_global_norm: max_norm must be positive"
    );
    let mut sum_sq = S::zero();
    for (name, t) in grads.entries() {
        if !t.all_finite() {
            return Err(Error::NonFinite {
                op: "clip_global_norm",
                detail: format!("gradient tensor {name:?} has a non-finite entry"),
            });
        }
        sum_sq += t.sum_sq();
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.entries_mut() {
            t.scale(scale);
        }
    }
    Ok(norm)
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare `analytic` against central differences of `f` at `params`.
///
/// Per element: `|a - n| / max(|a|, |n|, 1e-8)`, maximized over every entry
/// of every tensor. `params` is restored before returning. Run this in f64;
/// the step `epsilon` drowns in f32 rounding.
pub fn grad_check<S, P, F>(
    params: &mut P,
    analytic: &P,
    epsilon: S,
    mut f: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    P: NamedParams<S>,
    F: FnMut(&P) -> Result<S>,
{
    assert!(epsilon > S::zero(), "grad_check: epsilon must be positive");
    let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
    let analytic_entries = analytic.entries();
    assert_eq!(
        names,
        analytic_entries.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        "grad_check: parameter and gradient entries disagree"
    );
    let analytic_copies: Vec<Tensor<S>> = analytic_entries.into_iter().map(|(_, t)| t.clone()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let floor = S::from_f64(1e-8);
    let two = S::from_f64(2.0);

    for (ei, name) in names.iter().enumerate() {
        let len = analytic_copies[ei].len();
        for k in 0..len {
            let orig = params.entries()[ei].1.data()[k];

            params.entries_mut()[ei].1.data_mut()[k] = orig + epsilon;
            let up = f(params)?;
            params.entries_mut()[ei].1.data_mut()[k] = orig - epsilon;
            let down = f(params)?;
            params.entries_mut()[ei].1.data_mut()[k] = orig;

            let numeric = (up - down) / (two * epsilon);
            let a = analytic_copies[ei].data()[k];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = ((a - numeric).abs() / denom).to_f64();
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = a.to_f64();
                report.numeric = numeric.to_f64();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, Rng};
    use proptest::prelude::*;

    #[test]
    fn softmax_log_ratio() {
        // softmax([ln 2, 0]) puts exactly twice the mass on the first slot.
        let p = softmax(&[std::f64::consts::LN_2, 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_and_nonfinite() {
        assert!(matches!(softmax::<f64>(&[]), Err(Error::Empty("softmax"))));
        assert!(matches!(
            softmax(&[1.0, f64::NAN]),
            Err(Error::NonFinite { op: "softmax", .. })
        ));
        assert!(softmax(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let p = masked_softmax(&[1.0, f64::NEG_INFINITY, 1.0], &[true, false, true]).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        assert!(matches!(
            masked_softmax(&[1.0, 2.0], &[false, false]),
            Err(Error::FullyMasked)
        ));
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let x = [0.3f64, -1.2, 2.5, 0.0];
        let ls = log_softmax(&x).unwrap();
        let p = softmax(&x).unwrap();
        for (l, q) in ls.iter().zip(&p) {
            assert!((l.exp() - q).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let s = sigmoid(&[0.0, 50.0, -50.0]).unwrap();
        assert_eq!(s[0], 0.5);
        assert_eq!(s[1], 1.0); // exp(-50) underflows the f64 mantissa next to 1
        assert!(s[2] < 1e-21);
        assert!(sigmoid(&[f64::NAN]).is_err());
    }

    #[test]
    fn uniform_init_range_and_determinism() {
        let mut r1 = Rng::stream(7, streams::INIT, 0);
        let mut r2 = Rng::stream(7, streams::INIT, 0);
        let a: crate::tensor::Tensor<f64> = uniform_init(&mut r1, &[40, 25], 0.04);
        let b: crate::tensor::Tensor<f64> = uniform_init(&mut r2, &[40, 25], 0.04);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (-0.04..0.04).contains(&v)));
        // 1000 draws from a width-0.08 interval should not all hug zero.
        assert!(a.data().iter().any(|&v| v.abs() > 0.02));
    }

    #[test]
    fn dropout_mask_values_and_mean() {
        let mut rng = Rng::stream(3, streams::DROPOUT, 11);
        let m: Vec<f64> = dropout_mask(&mut rng, 10_000, 0.5);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");

        let keep_all: Vec<f64> = dropout_mask(&mut rng, 16, 0.0);
        assert!(keep_all.iter().all(|&v| v == 1.0));
    }

    #[test]
    #[should_panic(expected = "dropout rate")]
    fn dropout_rate_one_panics() {
        let mut rng = Rng::new(0);
        let _: Vec<f64> = dropout_mask(&mut rng, 4, 1.0);
    }

    #[test]
    fn clip_rescales_above_threshold() {
        let mut grads = vec![
            ("a".to_string(), Tensor::from_vec(&[1], vec![3.0f64])),
            ("b".to_string(), Tensor::from_vec(&[1], vec![4.0])),
        ];
        let norm = clip_global_norm(&mut grads, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!((grads[0].1.data()[0] - 0.6).abs() < 1e-15);
        assert!((grads[1].1.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_gradients_bitwise_untouched() {
        let mut grads = vec![("a".to_string(), Tensor::from_vec(&[2], vec![0.3, 0.1]))];
        let before = grads[0].1.clone();
        let norm = clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((norm - (0.1f64).mul_add(0.1, 0.09).sqrt()).abs() < 1e-15);
        assert_eq!(grads[0].1, before);
    }

    #[test]
    fn clip_reports_offending_tensor() {
        let mut grads = vec![
            ("fine".to_string(), Tensor::from_vec(&[1], vec![1.0])),
            ("broken".to_string(), Tensor::from_vec(&[1], vec![f64::NAN])),
        ];
        let err = clip_global_norm(&mut grads, 1.0).unwrap_err();
        assert!(err.to_string().contains("broken"), "{err}");
    }

    #[test]
    fn grad_check_accepts_true_gradient() {
        // f(x) = sum x_i^2, df/dx_i = 2 x_i.
        let mut params = vec![("x".to_string(), Tensor::from_vec(&[3], vec![0.5, -1.2, 2.0]))];
        let analytic = vec![("x".to_string(), Tensor::from_vec(&[3], vec![1.0, -2.4, 4.0]))];
        let f = |p: &Vec<(String, Tensor<f64>)>| Ok(p[0].1.data().iter().map(|&v| v * v).sum());
        let report = grad_check(&mut params, &analytic, 1e-5, f).unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(params[0].1.data(), &[0.5, -1.2, 2.0]);
    }

    #[test]
    fn grad_check_flags_doubled_gradient() {
        // Analytic gradient twice the truth: |2g - g| / max(|2g|, |g|) = 0.5.
        let mut params = vec![("x".to_string(), Tensor::from_vec(&[2], vec![0.7, -0.3]))];
        let analytic = vec![("x".to_string(), Tensor::from_vec(&[2], vec![2.8, -1.2]))];
        let f = |p: &Vec<(String, Tensor<f64>)>| Ok(p[0].1.data().iter().map(|&v| v * v).sum());
        let report = grad_check(&mut params, &analytic, 1e-5, f).unwrap();
        assert!((report.max_rel_err - 0.5).abs() < 1e-6, "{report:?}");
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(x in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let p = softmax(&x).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn masked_softmax_respects_mask(
            x in proptest::collection::vec(-1e3f64..1e3, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let keep: Vec<bool> = (0..x.len()).map(|_| rng.next_f64() < 0.7).collect();
            prop_assume!(keep.iter().any(|&k| k));
            let p = masked_softmax(&x, &keep).unwrap();
            for (v, k) in p.iter().zip(&keep) {
                if !k { prop_assert_eq!(*v, 0.0); }
            }
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn clip_never_increases_norm(
            vals in proptest::collection::vec(-10f64..10.0, 1..20),
        ) {
            let mut grads = vec![("g".to_string(), Tensor::from_vec(&[vals.len()], vals.clone()))];
            let pre = clip_global_norm(&mut grads, 1.0).unwrap();
            let post = grads[0].1.sum_sq().sqrt();
            prop_assert!(post <= 1.0 + 1e-12);
            if pre <= 1.0 {
                prop_assert_eq!(grads[0].1.data(), &vals[..]);
            }
        }
    }
}
