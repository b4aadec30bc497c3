//! Inference-time denoising: encode the noisy image, keep its clean
//! code, replace the noise code, decode.

use crate::data::Image;
use crate::error::{FinoError, Result};
use crate::flow::{self, FlowModel};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum DenoiseMode {
    /// z_r = 0; deterministic, the default for reports.
    Zero,
    /// One draw z_r ~ N(0, I).
    Sample { seed: u64 },
    /// Mean of k sampled decodes.
    Average { k: usize, seed: u64 },
}

/// Reflect-pad bottom/right to the next multiple of `factor`.
fn reflect_pad(img: &Image, factor: usize) -> Result<(Tensor, usize, usize)> {
    let (c, h, w) = img.pixels.dims3()?;
    let ph = (factor - h % factor) % factor;
    let pw = (factor - w % factor) % factor;
    if ph >= h || pw >= w {
        return Err(FinoError::Invalid(format!(
            "image {h}x{w} too small to reflect-pad to a multiple of {factor}"
        )));
    }
    if ph == 0 && pw == 0 {
        return Ok((img.as_batch(), h, w));
    }
    let (nh, nw) = (h + ph, w + pw);
    let mut out = Tensor::zeros(&[1, c, nh, nw]);
    let src = img.pixels.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..nh {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for x in 0..nw {
                let sx = if x < w { x } else { 2 * w - 2 - x };
                dst[(ci * nh + y) * nw + x] = src[(ci * h + sy) * w + sx];
            }
        }
    }
    Ok((out, h, w))
}

fn crop_batch(t: &Tensor, h: usize, w: usize) -> Result<Image> {
    let (_, c, th, tw) = t.dims4()?;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            let src = (ci * th + y) * tw;
            let dst = (ci * h + y) * w;
            out.data_mut()[dst..dst + w].copy_from_slice(&t.data()[src..src + w]);
        }
    }
    Image::new(out)
}

/// ỹ = Flow⁻¹(z_c^y, z_r). Output is unclamped; clamping happens only
/// at 8-bit save time.
pub fn denoise(model: &FlowModel, y: &Image, mode: &DenoiseMode) -> Result<Image> {
    if y.channels() != model.input_channels {
        return Err(FinoError::shape(
            "denoise",
            format!(
                "image has {} channels, model expects {}",
                y.channels(),
                model.input_channels
            ),
        ));
    }
    let (padded, h, w) = reflect_pad(y, model.spatial_factor())?;
    let tape = Tape::new();
    let tm = model.bind(&tape, false);
    let z = flow::flow_forward(tape.constant(padded), &tm)?;
    let z_shape = z.z.shape();
    let noise_shape = vec![
        z_shape[0],
        z_shape[1] - model.clean_channels,
        z_shape[2],
        z_shape[3],
    ];
    let n_el: usize = noise_shape.iter().product();

    let decode_with = |zr: Tensor| -> Result<Tensor> {
        let zr = tape.constant(zr);
        let out = flow::flow_inverse(flow::with_noise_code(z, zr)?, &tm)?;
        Ok(out.value())
    };

    let out = match mode {
        DenoiseMode::Zero => decode_with(Tensor::zeros(&noise_shape))?,
        DenoiseMode::Sample { seed } => {
            let mut rng = SeededRng::new(*seed);
            decode_with(Tensor::new(noise_shape.clone(), rng.normal_vec(n_el))?)?
        }
        DenoiseMode::Average { k, seed } => {
            if *k == 0 {
                return Err(FinoError::Invalid("average mode needs k >= 1".into()));
            }
            let mut rng = SeededRng::new(*seed);
            let mut acc: Option<Tensor> = None;
            for _ in 0..*k {
                let one = decode_with(Tensor::new(noise_shape.clone(), rng.normal_vec(n_el))?)?;
                match &mut acc {
                    Some(a) => a.add_assign(&one),
                    slot @ None => *slot = Some(one),
                }
            }
            let mut avg = acc.unwrap();
            let inv_k = 1.0 / *k as f64;
            for v in avg.data_mut() {
                *v *= inv_k;
            }
            avg
        }
    };
    crop_batch(&out, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_dataset;

    #[test]
    fn zero_mode_is_deterministic() {
        let model = FlowModel::new_random(1, 1, 2, 8, 5);
        let y = make_toy_dataset(1, 8, 1).pop().unwrap();
        let a = denoise(&model, &y, &DenoiseMode::Zero).unwrap();
        let b = denoise(&model, &y, &DenoiseMode::Zero).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mode_seeds_give_diverse_outputs() {
        let model = FlowModel::new_random(1, 1, 2, 8, 5);
        let y = make_toy_dataset(1, 8, 2).pop().unwrap();
        let a = denoise(&model, &y, &DenoiseMode::Sample { seed: 1 }).unwrap();
        let b = denoise(&model, &y, &DenoiseMode::Sample { seed: 2 }).unwrap();
        assert!(a.pixels.max_abs_diff(&b.pixels) > 0.0);
    }

    #[test]
    fn non_divisible_input_is_padded_and_cropped_back() {
        let model = FlowModel::new_random(1, 1, 1, 8, 9);
        let y = make_toy_dataset(1, 11, 3).pop().unwrap();
        let out = denoise(&model, &y, &DenoiseMode::Zero).unwrap();
        assert_eq!(out.pixels.shape(), y.pixels.shape());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let model = FlowModel::new_random(3, 1, 1, 8, 9);
        let y = make_toy_dataset(1, 8, 3).pop().unwrap();
        assert!(denoise(&model, &y, &DenoiseMode::Zero).is_err());
    }
}
