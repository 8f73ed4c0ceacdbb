//! Plain 2-D convolution kernels on square inputs.
//!
//! The forward map treats a `[C, d, d]` input and `[h, C, k, k]` kernel
//! stack as the trilinear sum
//!
//! ```text
//! z[m, i, j] = sum_{c, g, n} K[m, c, g, n] * xpad[c, s*i + g, s*j + n]
//! ```
//!
//! where `xpad` is the input zero-padded by `p` on every side. The two
//! gradient routines are literal transposes of the same sum, so the adjoint
//! identities `<u, conv(x, K)> = <input_grad(u, K), x> = <kernel_grad(u, x), K>`
//! hold exactly, not just to rounding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output width of a strided, padded convolution: `floor((d + 2p - k)/s) + 1`.
pub fn conv_output_width(
    input_width: usize,
    kernel_size: usize,
    padding: usize,
    stride: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv_output_width", "stride must be >= 1"));
    }
    if kernel_size == 0 {
        return Err(Error::invalid("conv_output_width", "kernel size must be >= 1"));
    }
    let padded = input_width + 2 * padding;
    if kernel_size > padded {
        return Err(Error::invalid(
            "conv_output_width",
            format!("kernel size {kernel_size} exceeds padded width {padded}"),
        ));
    }
    Ok((padded - kernel_size) / stride + 1)
}

fn check_input(input: &Tensor, op: &str) -> Result<(usize, usize)> {
    match *input.shape() {
        [c, d1, d2] if d1 == d2 => Ok((c, d1)),
        _ => Err(Error::invalid(
            op,
            format!("expected square [C, d, d] input, got {:?}", input.shape()),
        )),
    }
}

fn check_kernels(kernels: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *kernels.shape() {
        [h, c, k1, k2] if k1 == k2 => Ok((h, c, k1)),
        _ => Err(Error::invalid(
            op,
            format!("expected [h, C, k, k] kernels, got {:?}", kernels.shape()),
        )),
    }
}

/// Forward convolution: `[C, d, d] -> [h, d', d']`, no bias.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c, d) = check_input(input, "conv2d")?;
    let (h, kc, k) = check_kernels(kernels, "conv2d")?;
    if kc != c {
        return Err(Error::shape("conv2d", input.shape(), kernels.shape()));
    }
    let dw = conv_output_width(d, k, padding, stride)?;
    let x = input.data();
    let ker = kernels.data();
    let mut out = vec![0.0; h * dw * dw];
    for m in 0..h {
        for i in 0..dw {
            for j in 0..dw {
                let mut acc = 0.0;
                for cc in 0..c {
                    for g in 0..k {
                        let a = (stride * i + g) as isize - padding as isize;
                        if a < 0 || a as usize >= d {
                            continue;
                        }
                        for n in 0..k {
                            let b = (stride * j + n) as isize - padding as isize;
                            if b < 0 || b as usize >= d {
                                continue;
                            }
                            acc += ker[((m * c + cc) * k + g) * k + n]
                                * x[(cc * d + a as usize) * d + b as usize];
                        }
                    }
                }
                out[(m * dw + i) * dw + j] = acc;
            }
        }
    }
    Tensor::new(vec![h, dw, dw], out)
}

/// Adjoint of the forward map with respect to the input:
/// `[h, d', d'] x [h, C, k, k] -> [C, d, d]`.
pub fn conv2d_input_grad(
    out_grad: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    input_width: usize,
) -> Result<Tensor> {
    let (h, c, k) = check_kernels(kernels, "conv2d_input_grad")?;
    let dw = conv_output_width(input_width, k, padding, stride)?;
    if out_grad.shape() != [h, dw, dw] {
        return Err(Error::shape(
            "conv2d_input_grad",
            out_grad.shape(),
            &[h, dw, dw],
        ));
    }
    let d = input_width;
    let dz = out_grad.data();
    let ker = kernels.data();
    let mut dx = vec![0.0; c * d * d];
    for m in 0..h {
        for i in 0..dw {
            for j in 0..dw {
                let v = dz[(m * dw + i) * dw + j];
                for cc in 0..c {
                    for g in 0..k {
                        let a = (stride * i + g) as isize - padding as isize;
                        if a < 0 || a as usize >= d {
                            continue;
                        }
                        for n in 0..k {
                            let b = (stride * j + n) as isize - padding as isize;
                            if b < 0 || b as usize >= d {
                                continue;
                            }
                            dx[(cc * d + a as usize) * d + b as usize] +=
                                v * ker[((m * c + cc) * k + g) * k + n];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, d, d], dx)
}

/// Adjoint of the forward map with respect to the kernels:
/// `[h, d', d'] x [C, d, d] -> [h, C, k, k]`.
pub fn conv2d_kernel_grad(
    out_grad: &Tensor,
    input: &Tensor,
    stride: usize,
    padding: usize,
    kernel_size: usize,
) -> Result<Tensor> {
    let (c, d) = check_input(input, "conv2d_kernel_grad")?;
    let k = kernel_size;
    let dw = conv_output_width(d, k, padding, stride)?;
    let h = match *out_grad.shape() {
        [h, a, b] if a == dw && b == dw => h,
        _ => {
            return Err(Error::shape(
                "conv2d_kernel_grad",
                out_grad.shape(),
                &[0, dw, dw],
            ))
        }
    };
    let dz = out_grad.data();
    let x = input.data();
    let mut dk = vec![0.0; h * c * k * k];
    for m in 0..h {
        for i in 0..dw {
            for j in 0..dw {
                let v = dz[(m * dw + i) * dw + j];
                for cc in 0..c {
                    for g in 0..k {
                        let a = (stride * i + g) as isize - padding as isize;
                        if a < 0 || a as usize >= d {
                            continue;
                        }
                        for n in 0..k {
                            let b = (stride * j + n) as isize - padding as isize;
                            if b < 0 || b as usize >= d {
                                continue;
                            }
                            dk[((m * c + cc) * k + g) * k + n] +=
                                v * x[(cc * d + a as usize) * d + b as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, c, k, k], dk)
}
