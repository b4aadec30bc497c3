//! Taped wrappers around the structured kernels: convolution, Haar
//! squeeze, patch extraction, and the patch-gram matrix.

use crate::error::Result;
use crate::kernels;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Size-preserving convolution; gradients flow to input, weight, and bias.
pub fn conv2d<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, pad: usize) -> Result<Var<'t>> {
    let value = x.with_value(|xv| {
        w.with_value(|wv| b.with_value(|bv| kernels::conv2d_fwd(xv, wv, bv, pad)))
    })?;
    x.tape.push_op(
        "conv2d",
        value,
        vec![x.id, w.id, b.id],
        Box::new(move |args| {
            let (gx, gw, gb) =
                kernels::conv2d_bwd(args.parents[0], args.parents[1], args.grad, pad);
            vec![gx, gw, gb]
        }),
    )
}

/// Haar analysis on the tape. The transform is orthonormal, so the
/// backward pass is the synthesis transform applied to the gradient.
pub fn haar_forward(x: Var<'_>) -> Result<Var<'_>> {
    let value = x.with_value(kernels::haar_fwd)?;
    x.tape.push_op(
        "haar_forward",
        value,
        vec![x.id],
        Box::new(|args| vec![kernels::haar_inv(args.grad).expect("grad shape matches output")]),
    )
}

pub fn haar_inverse(u: Var<'_>) -> Result<Var<'_>> {
    let value = u.with_value(kernels::haar_inv)?;
    u.tape.push_op(
        "haar_inverse",
        value,
        vec![u.id],
        Box::new(|args| vec![kernels::haar_fwd(args.grad).expect("grad shape matches output")]),
    )
}

/// Overlapping patch extraction to an m×M matrix; gradients scatter-add
/// back to overlapping source pixels.
pub fn extract_patches(x: Var<'_>, patch_edge: usize, stride: usize) -> Result<Var<'_>> {
    let value = x.with_value(|v| kernels::extract_patches_fwd(v, patch_edge, stride))?;
    x.tape.push_op(
        "extract_patches",
        value,
        vec![x.id],
        Box::new(move |args| {
            vec![kernels::extract_patches_bwd(
                args.parents[0].shape(),
                args.grad,
                patch_edge,
                stride,
            )]
        }),
    )
}

/// Σ = (1/M) V Vᵀ for a patch matrix V.
pub fn gram_mean(v: Var<'_>) -> Result<Var<'_>> {
    let value = v.with_value(kernels::gram_mean_fwd)?;
    v.tape.push_op(
        "gram_mean",
        value,
        vec![v.id],
        Box::new(|args| vec![kernels::gram_mean_bwd(args.parents[0], args.grad)]),
    )
}

/// Central finite difference of a scalar-valued function of one tensor.
/// Test oracle; lives here so integration tests and the `gradcheck`
/// subcommand share one definition. Independent of the tape.
pub fn finite_difference(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    at: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(at.shape());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst-case relative error between two gradients. The denominator
/// floor makes the comparison absolute for tiny entries: central
/// differences of an O(1) loss carry ~1e-10 of cancellation noise, so
/// a relative reading on sub-1e-3 entries would only measure that noise.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
