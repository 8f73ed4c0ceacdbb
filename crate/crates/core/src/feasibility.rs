//! Equation counting: can a batch be reconstructed from a shared gradient
//! at all?
//!
//! Each checker compares the number of observable gradient entries against
//! the number of unknowns they must pin down and reports the minimal layer
//! sizes that balance the count. The conditions are necessary, not
//! sufficient — the counting assumes the resulting equations are
//! independent, which is not verified here (and generically holds for
//! random weights).

use crate::convolve::conv_output_width;
use crate::error::{Error, Result};
use crate::models::CnnConfig;

/// Outcome of a feasibility check.
///
/// `equations`/`unknowns` are the counts of the stage the check hinges on
/// (see each checker's doc). `min_n1_exact` is the smallest first-dense-
/// layer width that balances the count (`None` when the count can never
/// balance or no dense layer is involved); `min_n1_approx` is the paper's
/// large-input rule of thumb, the batch size itself. `min_kernels` is set
/// by the CNN checkers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub equations: u64,
    pub unknowns: u64,
    pub feasible: bool,
    pub min_n1_exact: Option<u64>,
    pub min_n1_approx: u64,
    pub min_kernels: Option<u64>,
    pub notes: Vec<String>,
}

fn ceil_div(num: u64, den: u64) -> u64 {
    num.div_ceil(den)
}

/// MLP with one hidden layer of width `n1` and `n2` outputs, batch size
/// `b`, input dimension `d`.
///
/// The gradient exposes `n2 + n1*n2 + n1 + n1*d` entries; the unknowns are
/// the batch's softmax outputs, hidden activations and pixels:
/// `b*n2 + n1*b + b*d`. Balancing the two yields
/// `n1 >= (b*n2 + b*d - n2) / (n2 + 1 + d - b)`, which tends to `b` for
/// large `d` — the rule of thumb reported as `min_n1_approx`.
pub fn check_mlp_batch(d: u64, n1: u64, n2: u64, b: u64) -> Result<FeasibilityReport> {
    if d == 0 || n1 == 0 || n2 == 0 || b == 0 {
        return Err(Error::invalid(
            "check_mlp_batch",
            "d, n1, n2 and B must all be positive",
        ));
    }
    let equations = n2 + n1 * n2 + n1 + n1 * d;
    let unknowns = b * n2 + n1 * b + b * d;
    let mut notes = Vec::new();

    let denom = n2 as i128 + 1 + d as i128 - b as i128;
    if denom <= 0 {
        notes.push(format!(
            "batch size {b} is at least n2 + d + 1 = {}; no hidden-layer width can balance the count",
            n2 + d + 1
        ));
        return Ok(FeasibilityReport {
            equations,
            unknowns,
            feasible: false,
            min_n1_exact: None,
            min_n1_approx: b,
            min_kernels: None,
            notes,
        });
    }

    let numerator = b * n2 + b * d - n2; // b >= 1 keeps this non-negative
    let min_n1_exact = ceil_div(numerator, denom as u64);
    let feasible = n1 >= min_n1_exact;
    if !feasible {
        notes.push(format!(
            "hidden layer has {n1} units but the count balances only at {min_n1_exact}"
        ));
    }
    Ok(FeasibilityReport {
        equations,
        unknowns,
        feasible,
        min_n1_exact: Some(min_n1_exact),
        min_n1_approx: b,
        min_kernels: None,
        notes,
    })
}

/// CNN with a dense head: two conditions must hold.
///
/// The deconvolution stage needs the conv output to carry at least as many
/// values as the image, `h * d'^2 >= C * d^2` — reported as `equations` vs
/// `unknowns` (per batch) and as `min_kernels`. The demixing stage needs
/// the dense head to pass [`check_mlp_batch`] with input width
/// `n0 = h * d'^2`; its notes are folded in with a `dense head:` prefix.
pub fn check_cnn(cfg: &CnnConfig, b: u64) -> Result<FeasibilityReport> {
    cfg.validate()?;
    if cfg.dense_units == 0 {
        return Err(Error::invalid(
            "check_cnn",
            "no dense layer; use check_cnn_no_dense",
        ));
    }
    if b == 0 {
        return Err(Error::invalid("check_cnn", "B must be positive"));
    }
    let d = cfg.input_width as u64;
    let c = cfg.channels as u64;
    let dw = cfg.output_width()? as u64;
    let h = cfg.kernel_count as u64;

    let equations = b * h * dw * dw;
    let unknowns = b * c * d * d;
    let min_kernels = ceil_div(c * d * d, dw * dw);
    let mut notes = Vec::new();
    if h < min_kernels {
        notes.push(format!(
            "conv output carries {h}x{dw}x{dw} values per instance, fewer than the {c}x{d}x{d} pixels; need {min_kernels} kernels"
        ));
    }

    let n0 = h * dw * dw;
    let head = check_mlp_batch(n0, cfg.dense_units as u64, cfg.classes as u64, b)?;
    for note in &head.notes {
        notes.push(format!("dense head: {note}"));
    }

    Ok(FeasibilityReport {
        equations,
        unknowns,
        feasible: h >= min_kernels && head.feasible,
        min_n1_exact: head.min_n1_exact,
        min_n1_approx: head.min_n1_approx,
        min_kernels: Some(min_kernels),
        notes,
    })
}

/// CNN whose conv output feeds the affine output layer directly (no dense
/// hidden layer). `n1_out` is the output-layer width.
///
/// Demixing must come out of the output layer alone, which needs
/// `1 < B < n1_out` and `n0 >= n1_out*(B-1) / (n1_out-B)` — those counts
/// are reported as `equations` (`n1_out*(n0+1)` observable entries) vs
/// `unknowns` (`B*(n1_out+n0)`). The deconvolution stage now has to split
/// `B` mixed images, raising the kernel requirement to
/// `h >= ceil(B * C * d^2 / d'^2)`.
pub fn check_cnn_no_dense(cfg: &CnnConfig, b: u64, n1_out: u64) -> Result<FeasibilityReport> {
    cfg.validate()?;
    if cfg.dense_units != 0 {
        return Err(Error::invalid(
            "check_cnn_no_dense",
            "config has a dense layer; use check_cnn",
        ));
    }
    if b == 0 || n1_out == 0 {
        return Err(Error::invalid(
            "check_cnn_no_dense",
            "B and n1_out must be positive",
        ));
    }
    let d = cfg.input_width as u64;
    let c = cfg.channels as u64;
    let dw = cfg.output_width()? as u64;
    let h = cfg.kernel_count as u64;
    let n0 = h * dw * dw;

    let equations = n1_out + n1_out * n0;
    let unknowns = b * n1_out + b * n0;
    let min_kernels = ceil_div(b * c * d * d, dw * dw);
    let mut notes = Vec::new();
    let mut feasible = true;

    if b == 1 {
        feasible = false;
        notes.push("B = 1 has nothing to demix; use the single-instance pipeline".into());
    }
    if b >= n1_out {
        feasible = false;
        notes.push(format!("B must be below output width ({b} >= {n1_out})"));
    } else if b > 1 {
        let n0_bound = ceil_div(n1_out * (b - 1), n1_out - b);
        if n0 < n0_bound {
            feasible = false;
            notes.push(format!(
                "flattened conv output has {n0} values, below the demixing bound {n0_bound}"
            ));
        }
    }
    if h < min_kernels {
        feasible = false;
        notes.push(format!(
            "need {min_kernels} kernels to carry {b} mixed {c}x{d}x{d} images, have {h}"
        ));
    }

    Ok(FeasibilityReport {
        equations,
        unknowns,
        feasible,
        min_n1_exact: None,
        min_n1_approx: b,
        min_kernels: Some(min_kernels),
        notes,
    })
}

/// One conv layer of a stack, as seen by [`check_multilayer_cnn`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
    pub kernel_count: usize,
}

/// Conv stack recoverability, walked from the last layer back to the
/// first: each layer's output must carry at least as many values as its
/// input (`h_i * w_i^2 >= c_{i-1} * w_{i-1}^2`), otherwise that layer's
/// input cannot be recovered from its output and the chain breaks there.
///
/// Only the conv stack is checked; the dense head that demixes the last
/// output composes with [`check_mlp_batch`] separately (a note reminds of
/// that when `b > 1`). Counts are summed over layers for the report, but
/// the verdict is per layer — a surplus in one layer cannot repair a
/// deficit in another.
pub fn check_multilayer_cnn(
    layers: &[ConvLayerSpec],
    channels: usize,
    input_width: usize,
    b: u64,
) -> Result<FeasibilityReport> {
    if layers.is_empty() {
        return Err(Error::invalid("check_multilayer_cnn", "no layers given"));
    }
    if channels == 0 || b == 0 {
        return Err(Error::invalid(
            "check_multilayer_cnn",
            "channels and B must be positive",
        ));
    }

    // Forward pass over shapes.
    let mut widths = vec![input_width];
    let mut chans = vec![channels];
    for (i, l) in layers.iter().enumerate() {
        if l.kernel_count == 0 {
            return Err(Error::invalid(
                "check_multilayer_cnn",
                format!("layer {} has zero kernels", i + 1),
            ));
        }
        let w = conv_output_width(widths[i], l.kernel_size, l.padding, l.stride)?;
        widths.push(w);
        chans.push(l.kernel_count);
    }

    let mut equations = 0u64;
    let mut unknowns = 0u64;
    let mut feasible = true;
    let mut notes = Vec::new();
    for i in (0..layers.len()).rev() {
        let out_count = (chans[i + 1] * widths[i + 1] * widths[i + 1]) as u64;
        let in_count = (chans[i] * widths[i] * widths[i]) as u64;
        equations += out_count;
        unknowns += in_count;
        if out_count < in_count {
            feasible = false;
            notes.push(format!(
                "layer {}: output carries {out_count} values, input has {in_count}; not recoverable",
                i + 1
            ));
        }
    }
    if b > 1 {
        notes.push(format!(
            "demixing the {b} last-layer outputs is the dense head's job; check it with check_mlp_batch"
        ));
    }

    Ok(FeasibilityReport {
        equations,
        unknowns,
        feasible,
        min_n1_exact: None,
        min_n1_approx: b,
        min_kernels: None,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_instance_needs_one_hidden_unit() {
        for (d, n2) in [(10, 2), (784, 10), (3072, 100)] {
            let r = check_mlp_batch(d, 1, n2, 1).unwrap();
            assert_eq!(r.min_n1_exact, Some(1));
            assert_eq!(r.min_n1_approx, 1);
            assert!(r.feasible);
        }
    }

    #[test]
    fn mnist_scale_batch_of_four_needs_five_units() {
        let r = check_mlp_batch(784, 5, 10, 4).unwrap();
        assert_eq!(r.min_n1_exact, Some(5)); // ceil(3166 / 791)
        assert_eq!(r.min_n1_approx, 4);
        assert!(r.feasible);
        let tight = check_mlp_batch(784, 4, 10, 4).unwrap();
        assert!(!tight.feasible);
    }

    #[test]
    fn batch_100_demo_satisfies_the_large_input_rule_of_thumb() {
        // At d = 3072, n2 = 100, B = 100 the asymptotic bound is B itself;
        // the exact count balances slightly above it.
        let r = check_mlp_batch(3072, 100, 100, 100).unwrap();
        assert_eq!(r.min_n1_approx, 100);
        assert_eq!(r.min_n1_exact, Some(104));
        assert!(!r.feasible);
        assert!(check_mlp_batch(3072, 104, 100, 100).unwrap().feasible);
    }

    #[test]
    fn feasible_iff_equations_cover_unknowns() {
        for d in [1u64, 2, 5, 17, 50, 784] {
            for n1 in 1..=8 {
                for n2 in 1..=6 {
                    for b in 1..=6 {
                        let r = check_mlp_batch(d, n1, n2, b).unwrap();
                        assert_eq!(
                            r.feasible,
                            r.equations >= r.unknowns,
                            "mismatch at d={d} n1={n1} n2={n2} b={b}: {r:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn widening_the_hidden_layer_never_hurts() {
        for n1 in 1..40u64 {
            let a = check_mlp_batch(100, n1, 5, 3).unwrap();
            let b = check_mlp_batch(100, n1 + 1, 5, 3).unwrap();
            assert!(!(a.feasible && !b.feasible));
        }
    }

    #[test]
    fn exact_bound_is_never_below_approx_minus_one() {
        for d in [2u64, 9, 50, 301] {
            for n2 in 1..=7 {
                for b in 1..=6 {
                    if (n2 as i128 + 1 + d as i128 - b as i128) <= 0 {
                        continue;
                    }
                    let r = check_mlp_batch(d, 1, n2, b).unwrap();
                    let exact = r.min_n1_exact.unwrap();
                    assert!(exact + 1 >= r.min_n1_approx, "exact {exact} vs approx {}", r.min_n1_approx);
                }
            }
        }
    }

    #[test]
    fn exact_bound_settles_at_the_batch_size_for_huge_inputs() {
        // Needs n2 >= B(B-1): with fewer outputs the count balances one
        // unit above B no matter how wide the input grows.
        for (n2, b) in [(10u64, 3u64), (100, 10), (2, 2)] {
            for d in [1_000u64, 10_000, 100_000] {
                let r = check_mlp_batch(d, 1, n2, b).unwrap();
                assert_eq!(r.min_n1_exact, Some(b), "n2={n2} b={b} d={d}");
            }
        }
        // The plateau case, pinned so the behavior is intentional: B = 4,
        // n2 = 3 < 12 leaves the bound at B + 1 = 5 for any d.
        for d in [1_000u64, 100_000] {
            let r = check_mlp_batch(d, 1, 3, 4).unwrap();
            assert_eq!(r.min_n1_exact, Some(5));
        }
    }

    #[test]
    fn oversized_batch_reports_unbalanceable_count() {
        // B >= n2 + d + 1 makes the denominator non-positive.
        let r = check_mlp_batch(3, 5, 2, 6).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.min_n1_exact, None);
        assert!(!r.notes.is_empty());
    }

    fn cnn(d: usize, k: usize, p: usize, s: usize, h: usize, dense: usize) -> CnnConfig {
        CnnConfig {
            channels: 3,
            input_width: d,
            kernel_size: k,
            padding: p,
            stride: s,
            kernel_count: h,
            dense_units: dense,
            classes: 10,
        }
    }

    #[test]
    fn cifar_scale_conv_needs_twelve_kernels() {
        let r = check_cnn(&cnn(32, 5, 2, 2, 12, 100), 1).unwrap();
        assert_eq!(r.min_kernels, Some(12));
        assert!(r.feasible);
        let short = check_cnn(&cnn(32, 5, 2, 2, 11, 100), 1).unwrap();
        assert!(!short.feasible);
    }

    #[test]
    fn identity_conv_needs_one_kernel_per_channel() {
        let mut cfg = cnn(16, 1, 0, 1, 3, 8);
        cfg.channels = 3;
        let r = check_cnn(&cfg, 1).unwrap();
        assert_eq!(r.min_kernels, Some(3));
    }

    #[test]
    fn mnist_scale_conv_needs_four_kernels() {
        let mut cfg = cnn(28, 3, 1, 2, 4, 10);
        cfg.channels = 1;
        assert_eq!(cfg.output_width().unwrap(), 14);
        let r = check_cnn(&cfg, 1).unwrap();
        assert_eq!(r.min_kernels, Some(4));
    }

    #[test]
    fn cnn_verdict_also_hinges_on_the_dense_head() {
        // Plenty of kernels, but a dense head too narrow for the batch.
        let cfg = cnn(8, 3, 1, 1, 20, 1);
        let r = check_cnn(&cfg, 4).unwrap();
        assert!(r.min_kernels.unwrap() <= 20);
        assert!(!r.feasible);
        assert!(r.notes.iter().any(|n| n.starts_with("dense head:")));
    }

    #[test]
    fn no_dense_variant_bounds() {
        // d' = d = 1 keeps the numbers tiny: n0 = h.
        let cfg = CnnConfig {
            channels: 1,
            input_width: 1,
            kernel_size: 1,
            padding: 0,
            stride: 1,
            kernel_count: 2,
            dense_units: 0,
            classes: 10,
        };
        let r = check_cnn_no_dense(&cfg, 2, 10).unwrap();
        // n0 bound = ceil(10 * 1 / 8) = 2, met; kernels: ceil(2*1/1) = 2, met.
        assert!(r.feasible, "{r:?}");

        let single = check_cnn_no_dense(&cfg, 1, 10).unwrap();
        assert!(!single.feasible);

        let oversized = check_cnn_no_dense(&cfg, 10, 10).unwrap();
        assert!(!oversized.feasible);
        assert!(oversized.notes.iter().any(|n| n.contains("below output width")));
    }

    #[test]
    fn no_dense_kernel_requirement_scales_with_batch() {
        let cfg = CnnConfig {
            dense_units: 0,
            ..cnn(32, 5, 2, 2, 48, 0)
        };
        let r = check_cnn_no_dense(&cfg, 4, 100).unwrap();
        assert_eq!(r.min_kernels, Some(48)); // 12 per image, 4 mixed images
    }

    #[test]
    fn single_conv_layer_chain_matches_the_direct_check() {
        let layer = ConvLayerSpec {
            kernel_size: 5,
            padding: 2,
            stride: 2,
            kernel_count: 12,
        };
        let chain = check_multilayer_cnn(&[layer], 3, 32, 1).unwrap();
        let direct = check_cnn(&cnn(32, 5, 2, 2, 12, 100), 1).unwrap();
        assert_eq!(chain.feasible, direct.feasible);

        let short = ConvLayerSpec {
            kernel_count: 11,
            ..layer
        };
        let chain = check_multilayer_cnn(&[short], 3, 32, 1).unwrap();
        let direct = check_cnn(&cnn(32, 5, 2, 2, 11, 100), 1).unwrap();
        assert_eq!(chain.feasible, direct.feasible);
    }

    #[test]
    fn identity_layers_stack_feasibly() {
        let id = ConvLayerSpec {
            kernel_size: 1,
            padding: 0,
            stride: 1,
            kernel_count: 3,
        };
        let r = check_multilayer_cnn(&[id, id], 3, 16, 1).unwrap();
        assert!(r.feasible);
    }

    #[test]
    fn chain_reports_the_layer_that_breaks() {
        let first = ConvLayerSpec {
            kernel_size: 1,
            padding: 0,
            stride: 1,
            kernel_count: 1,
        };
        // Halves the width but only doubles the kernels: 2 * 4^2 < 1 * 8^2.
        let second = ConvLayerSpec {
            kernel_size: 2,
            padding: 0,
            stride: 2,
            kernel_count: 2,
        };
        let r = check_multilayer_cnn(&[first, second], 1, 8, 1).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.notes.len(), 1);
        assert!(r.notes[0].starts_with("layer 2:"));
    }

    #[test]
    fn more_kernels_never_break_a_feasible_chain() {
        for h in 12..20 {
            let layer = ConvLayerSpec {
                kernel_size: 5,
                padding: 2,
                stride: 2,
                kernel_count: h,
            };
            let r = check_multilayer_cnn(&[layer], 3, 32, 1).unwrap();
            assert!(r.feasible);
        }
    }

    #[test]
    fn zero_arguments_are_rejected() {
        assert!(check_mlp_batch(0, 1, 1, 1).is_err());
        assert!(check_mlp_batch(1, 0, 1, 1).is_err());
        assert!(check_mlp_batch(1, 1, 1, 0).is_err());
        assert!(check_multilayer_cnn(&[], 1, 8, 1).is_err());
    }
}
