//! Non-iterative recovery from a single-instance gradient.
//!
//! For a dense first layer with a bias, the weight gradient of row `j`
//! factors as `dW[j, i] = db[j] * input[i]`, so whenever some `|db[j]|`
//! clears a divide threshold the layer input is recovered exactly by one
//! elementwise division — no optimization, no dependence on anything past
//! that layer. Applied to an MLP's first layer this yields the input
//! itself; applied to the dense head of a CNN it yields the flattened conv
//! output ("demixing"), which a separate deconvolution step turns back into
//! pixels.

use crate::error::{Error, Result};
use crate::models::{CnnConfig, GradientBundle};
use crate::tensor::Tensor;

/// Bias-gradient magnitudes below this cannot safely be divided by.
pub const EPS_DIV: f64 = 1e-12;

/// Per-element confidence of a demixed value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Confidence {
    Exact,
    Degenerate,
}

/// Recovered dense-layer input plus a per-element confidence flag.
///
/// The ratio uses one shared denominator for every element, so the flags
/// are uniform in practice; they are kept per element so the report stays
/// aligned with `h`.
#[derive(Clone, Debug)]
pub struct DemixResult {
    pub h: Tensor,
    pub flags: Vec<Confidence>,
}

/// Picks a usable hidden unit and divides its weight-gradient row by its
/// bias gradient. Unit 0 is preferred (it is the one the derivation names);
/// if its bias gradient is too small, the unit with the largest magnitude
/// is used instead.
fn ratio_recover(dw: &Tensor, db: &Tensor) -> Result<(Tensor, usize)> {
    if dw.shape().len() != 2 {
        return Err(Error::invalid(
            "ratio_recover",
            format!(
                "first gradient tensor is not a dense weight matrix (shape {:?})",
                dw.shape()
            ),
        ));
    }
    let (units, width) = (dw.shape()[0], dw.shape()[1]);
    if db.numel() != units {
        return Err(Error::shape("ratio_recover", dw.shape(), db.shape()));
    }

    let unit = if db.data()[0].abs() >= EPS_DIV {
        0
    } else {
        let (best, magnitude) = db
            .data()
            .iter()
            .enumerate()
            .map(|(j, v)| (j, v.abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("db is non-empty");
        if magnitude < EPS_DIV {
            return Err(Error::DegenerateGradient { threshold: EPS_DIV });
        }
        best
    };

    let denom = db.data()[unit];
    let row = &dw.data()[unit * width..(unit + 1) * width];
    let values = Tensor::new(vec![width], row.iter().map(|w| w / denom).collect())?;
    Ok((values, unit))
}

/// Reconstructs the single input behind an MLP gradient: for any usable
/// first-layer unit, `x_i = dW1[unit, i] / db1[unit]`, exactly, regardless
/// of network depth.
pub fn recon_single_mlp(v: &GradientBundle) -> Result<Tensor> {
    if v.batch_size != 1 {
        return Err(Error::invalid(
            "recon_single_mlp",
            format!("closed form needs a single-instance gradient, got batch size {}", v.batch_size),
        ));
    }
    if v.grads.len() < 2 {
        return Err(Error::invalid(
            "recon_single_mlp",
            "gradient bundle has no first layer",
        ));
    }
    let (x, _) = ratio_recover(&v.grads[0], &v.grads[1])?;
    Ok(x)
}

/// Recovers the flattened conv output (`H`, length `h * d'^2`) behind a
/// single-instance CNN gradient by applying the same ratio to the dense
/// head's first layer.
pub fn demix_cnn_single(v: &GradientBundle, cfg: &CnnConfig) -> Result<DemixResult> {
    cfg.validate()?;
    if cfg.dense_units == 0 {
        return Err(Error::invalid(
            "demix_cnn_single",
            "demixing needs a dense layer between conv output and logits",
        ));
    }
    if v.batch_size != 1 {
        return Err(Error::invalid(
            "demix_cnn_single",
            format!("demixing needs a single-instance gradient, got batch size {}", v.batch_size),
        ));
    }
    // Bundle layout: [conv kernels, conv bias, dense W1, dense b1, ...].
    if v.grads.len() < 4 {
        return Err(Error::invalid(
            "demix_cnn_single",
            "gradient bundle is missing the dense head",
        ));
    }
    let n0 = cfg.flattened_size()?;
    let (h, _) = ratio_recover(&v.grads[2], &v.grads[3])?;
    if h.numel() != n0 {
        return Err(Error::shape("demix_cnn_single", h.shape(), &[n0]));
    }
    let flags = vec![Confidence::Exact; n0];
    Ok(DemixResult { h, flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        analytic_grads_mlp, batch_gradient, cnn_conv_output, Arch, CnnConfig, MlpConfig,
        ModelParams,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_l1(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.numel() as f64
    }

    #[test]
    fn recovers_a_random_image_through_a_one_unit_mlp() {
        let cfg = MlpConfig::new(vec![3 * 32 * 32, 1, 10]).unwrap();
        let arch = Arch::Mlp(cfg);
        let params = ModelParams::init(&arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::uniform(&[3 * 32 * 32], 0.0, 1.0, &mut rng);
        let v = batch_gradient(&arch, &params, &[x.clone()], &[7]).unwrap();
        let recon = recon_single_mlp(&v).unwrap();
        assert!(mean_l1(&recon, &x) < 1e-8);
    }

    #[test]
    fn depth_does_not_matter_when_layer_one_gradients_are_present() {
        let cfg = MlpConfig::new(vec![50, 3, 6, 4, 8]).unwrap();
        let arch = Arch::Mlp(cfg);
        let params = ModelParams::init(&arch, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::uniform(&[50], 0.0, 1.0, &mut rng);
        let v = batch_gradient(&arch, &params, &[x.clone()], &[2]).unwrap();
        let recon = recon_single_mlp(&v).unwrap();
        for (a, b) in recon.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_input_reconstructs_to_zero() {
        let cfg = MlpConfig::new(vec![12, 2, 3]).unwrap();
        let arch = Arch::Mlp(cfg);
        let params = ModelParams::init(&arch, 5).unwrap();
        let v = batch_gradient(&arch, &params, &[Tensor::zeros(&[12])], &[0]).unwrap();
        let recon = recon_single_mlp(&v).unwrap();
        assert_eq!(recon.max_abs(), 0.0);
    }

    #[test]
    fn scaling_the_output_layer_does_not_move_the_reconstruction() {
        let cfg = MlpConfig::new(vec![20, 3, 4]).unwrap();
        let arch = Arch::Mlp(cfg.clone());
        let params = ModelParams::init(&arch, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Tensor::uniform(&[20], 0.0, 1.0, &mut rng);

        let v = batch_gradient(&arch, &params, &[x.clone()], &[1]).unwrap();
        let a = recon_single_mlp(&v).unwrap();

        let mut scaled = params.clone();
        scaled.layers[1].weight = scaled.layers[1].weight.scale(3.7);
        scaled.layers[1].bias = scaled.layers[1].bias.scale(3.7);
        let v2 = batch_gradient(&arch, &scaled, &[x.clone()], &[1]).unwrap();
        let b = recon_single_mlp(&v2).unwrap();

        // Both the numerator and the denominator of the ratio change, but
        // their quotient is the input either way.
        for ((ai, bi), xi) in a.data().iter().zip(b.data()).zip(x.data()) {
            assert!((ai - xi).abs() < 1e-9 && (bi - xi).abs() < 1e-9);
        }
    }

    #[test]
    fn falls_back_to_a_usable_unit_when_unit_zero_is_degenerate() {
        // Hand-built bundle: unit 0 carries nothing, unit 1 encodes x = (1, 2, 3).
        let dw = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 2.0, 4.0, 6.0]).unwrap();
        let db = Tensor::new(vec![2], vec![0.0, 2.0]).unwrap();
        let v = GradientBundle {
            grads: vec![dw, db],
            batch_size: 1,
        };
        let recon = recon_single_mlp(&v).unwrap();
        assert_eq!(recon.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zeroed_output_layer_makes_the_observation_degenerate() {
        // With W2 = 0 every hidden-unit bias gradient collapses to zero and
        // the input is genuinely unrecoverable from this gradient.
        let cfg = MlpConfig::new(vec![8, 2, 3]).unwrap();
        let arch = Arch::Mlp(cfg.clone());
        let mut params = ModelParams::init(&arch, 7).unwrap();
        params.layers[1].weight = Tensor::zeros(&[3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Tensor::uniform(&[8], 0.0, 1.0, &mut rng);
        let v = batch_gradient(&arch, &params, &[x], &[0]).unwrap();
        match recon_single_mlp(&v) {
            Err(Error::DegenerateGradient { threshold }) => assert_eq!(threshold, EPS_DIV),
            other => panic!("expected DegenerateGradient, got {other:?}"),
        }
    }

    #[test]
    fn batched_bundles_are_rejected() {
        let cfg = MlpConfig::new(vec![6, 2, 3]).unwrap();
        let arch = Arch::Mlp(cfg);
        let params = ModelParams::init(&arch, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs = [
            Tensor::uniform(&[6], 0.0, 1.0, &mut rng),
            Tensor::uniform(&[6], 0.0, 1.0, &mut rng),
        ];
        let v = batch_gradient(&arch, &params, &xs, &[0, 1]).unwrap();
        assert!(matches!(
            recon_single_mlp(&v),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn cnn_bundles_are_rejected_by_the_mlp_recovery() {
        let cfg = CnnConfig {
            channels: 1,
            input_width: 6,
            kernel_size: 3,
            padding: 1,
            stride: 2,
            kernel_count: 2,
            dense_units: 3,
            classes: 4,
        };
        let arch = Arch::Cnn(cfg);
        let params = ModelParams::init(&arch, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::uniform(&[1, 6, 6], 0.0, 1.0, &mut rng);
        let v = batch_gradient(&arch, &params, &[x], &[1]).unwrap();
        assert!(matches!(
            recon_single_mlp(&v),
            Err(Error::InvalidArgument { .. })
        ));
    }

    fn demo_cnn() -> (CnnConfig, Arch, ModelParams) {
        let cfg = CnnConfig {
            channels: 3,
            input_width: 8,
            kernel_size: 3,
            padding: 1,
            stride: 2,
            kernel_count: 4,
            dense_units: 5,
            classes: 6,
        };
        let arch = Arch::Cnn(cfg.clone());
        let params = ModelParams::init(&arch, 10).unwrap();
        (cfg, arch, params)
    }

    #[test]
    fn demixing_recovers_the_conv_output() {
        let (cfg, arch, params) = demo_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let v = batch_gradient(&arch, &params, &[x.clone()], &[3]).unwrap();
        let demixed = demix_cnn_single(&v, &cfg).unwrap();
        let z = cnn_conv_output(&cfg, &params, &x).unwrap();
        assert_eq!(demixed.h.numel(), z.numel());
        for (a, b) in demixed.h.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(demixed.flags.iter().all(|f| *f == Confidence::Exact));
    }

    #[test]
    fn zeroed_conv_layer_demixes_to_zero() {
        let (cfg, _, mut params) = demo_cnn();
        params.layers[0].weight = Tensor::zeros(&[4, 3, 3, 3]);
        params.layers[0].bias = Tensor::zeros(&[4]);
        let arch = Arch::Cnn(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let v = batch_gradient(&arch, &params, &[x], &[0]).unwrap();
        let demixed = demix_cnn_single(&v, &cfg).unwrap();
        assert!(demixed.h.max_abs() < 1e-12);
    }

    #[test]
    fn demixing_requires_a_dense_layer() {
        let (mut cfg, _, _) = demo_cnn();
        cfg.dense_units = 0;
        let arch = Arch::Cnn(cfg.clone());
        let params = ModelParams::init(&arch, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let v = batch_gradient(&arch, &params, &[x], &[0]).unwrap();
        assert!(matches!(
            demix_cnn_single(&v, &cfg),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn analytic_route_round_trips_too() {
        // Same exactness through the hand-derived gradients, so the
        // property does not hinge on the autodiff engine.
        let cfg = MlpConfig::new(vec![30, 2, 5]).unwrap();
        let params = ModelParams::init(&Arch::Mlp(cfg.clone()), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = Tensor::uniform(&[30], 0.0, 1.0, &mut rng);
        let v = analytic_grads_mlp(&cfg, &params, &x, 4).unwrap();
        let recon = recon_single_mlp(&v).unwrap();
        for (a, b) in recon.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
