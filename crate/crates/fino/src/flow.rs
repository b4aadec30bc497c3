//! The invertible network: Haar squeeze, affine coupling layers, their
//! composition into the forward/inverse flow, and the clean/noise
//! latent split.
//!
//! Each coupling layer updates the channel halves (l, h) as
//!   l' = l + φ1(h),  h' = s(l') ⊙ h + φ3(l'),  s = exp(c·tanh(φ2(l')/c))
//! which is invertible in closed form:
//!   h = (h' − φ3(l')) / s(l'),  l = l' − φ1(h).
//! The soft-clamped exponential keeps every scale element in
//! [e^−c, e^c], so the inverse never divides by anything near zero.

use std::path::Path;

use crate::ckpt;
use crate::error::{FinoError, Result};
use crate::ops;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Dtype, Tensor};

/// Soft-clamp constant c for the coupling scale.
pub const SCALE_CLAMP: f64 = 2.0;

pub const KERNEL: usize = 3;
const PAD: usize = (KERNEL - 1) / 2;

/// One convolution layer's parameters.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor, // C_out × C_in × k × k
    pub bias: Tensor,   // C_out
}

impl ConvParams {
    fn he(cin: usize, cout: usize, rng: &mut SeededRng) -> Self {
        Self::he_scaled(cin, cout, rng, 1.0)
    }

    fn he_scaled(cin: usize, cout: usize, rng: &mut SeededRng, scale: f64) -> Self {
        let std = scale * (2.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
        let n = cout * cin * KERNEL * KERNEL;
        let weight = Tensor::new(
            vec![cout, cin, KERNEL, KERNEL],
            rng.normal_vec(n).iter().map(|z| z * std).collect(),
        )
        .unwrap();
        // Small nonzero biases: natural images have flat regions whose
        // wavelet detail channels are exactly zero, and with zero biases
        // those positions sit exactly on the ReLU kink, where gradients
        // are ill-defined. A bias offset moves pre-activations off it.
        let bias = Tensor::new(
            vec![cout],
            rng.normal_vec(cout).iter().map(|z| z * 0.05).collect(),
        )
        .unwrap();
        ConvParams { weight, bias }
    }

    fn zeroed(cin: usize, cout: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[cout, cin, KERNEL, KERNEL]),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

/// A coupling subnetwork: conv → relu → conv → relu → conv.
#[derive(Clone, Debug)]
pub struct Subnet {
    pub convs: Vec<ConvParams>,
}

impl Subnet {
    fn new(cin: usize, cout: usize, width: usize, rng: &mut SeededRng, identity: bool) -> Self {
        // The damped final conv keeps coupling outputs O(0.1) at init, so
        // even ~24-layer stacks invert to near machine precision instead
        // of amplifying the s⊙h cancellation error layer by layer.
        let last = if identity {
            ConvParams::zeroed(width, cout)
        } else {
            ConvParams::he_scaled(width, cout, rng, 0.1)
        };
        Subnet {
            convs: vec![
                ConvParams::he(cin, width, rng),
                ConvParams::he(width, width, rng),
                last,
            ],
        }
    }
}

/// Parameters of one affine coupling layer (φ1, φ2, φ3 + split point).
#[derive(Clone, Debug)]
pub struct CouplingParams {
    pub phi1: Subnet,
    pub phi2: Subnet,
    pub phi3: Subnet,
    pub split_point: usize,
}

impl CouplingParams {
    fn new(channels: usize, width: usize, rng: &mut SeededRng, identity: bool) -> Self {
        let split = channels.div_ceil(2);
        let tail = channels - split;
        CouplingParams {
            phi1: Subnet::new(tail, split, width, rng, identity),
            phi2: Subnet::new(split, tail, width, rng, identity),
            phi3: Subnet::new(split, tail, width, rng, identity),
            split_point: split,
        }
    }
}

/// Full flow model: `num_blocks` blocks of one Haar squeeze followed by
/// `layers_per_block` coupling layers.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub input_channels: usize,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub hidden_width: usize,
    /// Head channels of the latent carrying clean content (3:1 split).
    pub clean_channels: usize,
    pub blocks: Vec<Vec<CouplingParams>>,
}

impl FlowModel {
    /// Identity initialization: final subnetwork convs zeroed, so the
    /// whole stack starts as pure wavelet analysis.
    pub fn new(input_channels: usize, num_blocks: usize, layers_per_block: usize, hidden_width: usize, seed: u64) -> Self {
        Self::build(input_channels, num_blocks, layers_per_block, hidden_width, seed, true)
    }

    /// Fully random initialization (all conv layers nonzero); used by
    /// invertibility and gradient audits.
    pub fn new_random(input_channels: usize, num_blocks: usize, layers_per_block: usize, hidden_width: usize, seed: u64) -> Self {
        Self::build(input_channels, num_blocks, layers_per_block, hidden_width, seed, false)
    }

    fn build(
        input_channels: usize,
        num_blocks: usize,
        layers_per_block: usize,
        hidden_width: usize,
        seed: u64,
        identity: bool,
    ) -> Self {
        assert!(num_blocks >= 1 && input_channels >= 1);
        let mut rng = SeededRng::new(seed);
        let mut blocks = Vec::with_capacity(num_blocks);
        let mut ch = input_channels;
        for _ in 0..num_blocks {
            ch *= 4; // after the Haar squeeze
            blocks.push(
                (0..layers_per_block)
                    .map(|_| CouplingParams::new(ch, hidden_width, &mut rng, identity))
                    .collect(),
            );
        }
        let latent_channels = ch;
        let clean_channels = (3 * latent_channels + 2) / 4; // round(3/4 · C)
        FlowModel {
            input_channels,
            num_blocks,
            layers_per_block,
            hidden_width,
            clean_channels,
            blocks,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.input_channels * 4usize.pow(self.num_blocks as u32)
    }

    /// Required divisor of spatial extents.
    pub fn spatial_factor(&self) -> usize {
        1 << self.num_blocks
    }

    /// Parameters in a fixed, name-stable order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (k, _) in block.iter().enumerate() {
                for phi in 1..=3 {
                    for c in 0..3 {
                        names.push(format!("block{b}.layer{k}.phi{phi}.conv{c}.weight"));
                        names.push(format!("block{b}.layer{k}.phi{phi}.conv{c}.bias"));
                    }
                }
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for layer in block {
                for phi in [&layer.phi1, &layer.phi2, &layer.phi3] {
                    for conv in &phi.convs {
                        out.push(&conv.weight);
                        out.push(&conv.bias);
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for layer in block {
                for phi in [&mut layer.phi1, &mut layer.phi2, &mut layer.phi3] {
                    for conv in &mut phi.convs {
                        out.push(&mut conv.weight);
                        out.push(&mut conv.bias);
                    }
                }
            }
        }
        out
    }

    /// Bind all parameters onto a tape. `trainable` leaves accumulate
    /// gradients; constants record no backward closures.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> TapeModel<'t> {
        let mut params = Vec::new();
        let mut bind_subnet = |phi: &Subnet| -> Vec<(Var<'t>, Var<'t>)> {
            phi.convs
                .iter()
                .map(|c| {
                    let w = if trainable {
                        tape.leaf(c.weight.clone())
                    } else {
                        tape.constant(c.weight.clone())
                    };
                    let b = if trainable {
                        tape.leaf(c.bias.clone())
                    } else {
                        tape.constant(c.bias.clone())
                    };
                    params.push(w);
                    params.push(b);
                    (w, b)
                })
                .collect()
        };
        let blocks = self
            .blocks
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|layer| TapeCoupling {
                        phi1: bind_subnet(&layer.phi1),
                        phi2: bind_subnet(&layer.phi2),
                        phi3: bind_subnet(&layer.phi3),
                        split_point: layer.split_point,
                    })
                    .collect()
            })
            .collect();
        TapeModel {
            blocks,
            params,
            clean_channels: self.clean_channels,
            spatial_factor: self.spatial_factor(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names = self.param_names();
        let params = self.params();
        let tensors: Vec<(String, &Tensor)> =
            names.into_iter().zip(params.into_iter().map(|p| p as &Tensor)).collect();
        ckpt::write_checkpoint(path, &self.manifest(), &tensors, Dtype::F64)
    }

    pub fn manifest(&self) -> Vec<(String, String)> {
        vec![
            ("format".into(), "1".into()),
            ("input_channels".into(), self.input_channels.to_string()),
            ("blocks".into(), self.num_blocks.to_string()),
            ("layers_per_block".into(), self.layers_per_block.to_string()),
            ("hidden_width".into(), self.hidden_width.to_string()),
            ("clean_channels".into(), self.clean_channels.to_string()),
            ("dtype".into(), "f64".into()),
        ]
    }

    pub fn load(path: &Path) -> Result<FlowModel> {
        let (manifest, tensors) = ckpt::read_checkpoint(path)?;
        Self::from_parts(path, &manifest, &tensors)
    }

    /// Rebuild a model from checkpoint parts (shared with the trainer's
    /// resume path, whose checkpoints carry extra tensors).
    pub fn from_parts(
        path: &Path,
        manifest: &[(String, String)],
        tensors: &[(String, Tensor)],
    ) -> Result<FlowModel> {
        let input_channels = ckpt::manifest_parse(manifest, "input_channels", path)?;
        let num_blocks = ckpt::manifest_parse(manifest, "blocks", path)?;
        let layers_per_block = ckpt::manifest_parse(manifest, "layers_per_block", path)?;
        let hidden_width = ckpt::manifest_parse(manifest, "hidden_width", path)?;
        let clean_channels: usize = ckpt::manifest_parse(manifest, "clean_channels", path)?;
        let mut model = FlowModel::new(input_channels, num_blocks, layers_per_block, hidden_width, 0);
        if model.clean_channels != clean_channels {
            return Err(FinoError::format(
                path,
                format!(
                    "clean_channels {} inconsistent with {} blocks and {} input channels",
                    clean_channels, num_blocks, input_channels
                ),
            ));
        }
        let names = model.param_names();
        {
            let mut params = model.params_mut();
            if tensors.len() < names.len() {
                return Err(FinoError::format(
                    path,
                    format!("expected {} parameter tensors, found {}", names.len(), tensors.len()),
                ));
            }
            for (i, name) in names.iter().enumerate() {
                let (tname, t) = &tensors[i];
                if tname != name {
                    return Err(FinoError::format(
                        path,
                        format!("tensor {i}: expected '{name}', found '{tname}' (B/K mismatch?)"),
                    ));
                }
                if t.shape() != params[i].shape() {
                    return Err(FinoError::format(
                        path,
                        format!("tensor '{name}': shape {:?} vs expected {:?}", t.shape(), params[i].shape()),
                    ));
                }
                *params[i] = t.clone();
            }
        }
        Ok(model)
    }
}

pub struct TapeCoupling<'t> {
    phi1: Vec<(Var<'t>, Var<'t>)>,
    phi2: Vec<(Var<'t>, Var<'t>)>,
    phi3: Vec<(Var<'t>, Var<'t>)>,
    split_point: usize,
}

/// A [`FlowModel`] bound to one tape for a forward/inverse pass.
pub struct TapeModel<'t> {
    blocks: Vec<Vec<TapeCoupling<'t>>>,
    pub params: Vec<Var<'t>>,
    pub clean_channels: usize,
    pub spatial_factor: usize,
}

/// Channel-partitioned latent z = [z_c | z_n].
#[derive(Clone, Copy, Debug)]
pub struct LatentCode<'t> {
    pub z: Var<'t>,
    pub clean_channels: usize,
}

impl<'t> LatentCode<'t> {
    pub fn split(&self) -> Result<(Var<'t>, Var<'t>)> {
        self.z.channel_split(self.clean_channels)
    }
}

fn subnet_apply<'t>(convs: &[(Var<'t>, Var<'t>)], x: Var<'t>) -> Result<Var<'t>> {
    let mut cur = x;
    for (i, &(w, b)) in convs.iter().enumerate() {
        cur = ops::conv2d(cur, w, b, PAD)?;
        if i + 1 < convs.len() {
            cur = cur.relu()?;
        }
    }
    Ok(cur)
}

/// Positive scale from the raw φ2 output: exp(c · tanh(x / c)).
fn positive_scale(pre: Var<'_>) -> Result<Var<'_>> {
    pre.affine(1.0 / SCALE_CLAMP, 0.0)?
        .tanh()?
        .affine(SCALE_CLAMP, 0.0)?
        .exp()
}

pub fn coupling_forward<'t>(u: Var<'t>, p: &TapeCoupling<'t>) -> Result<Var<'t>> {
    let (l, h) = u.channel_split(p.split_point)?;
    let l_next = l.add(subnet_apply(&p.phi1, h)?)?;
    let scale = positive_scale(subnet_apply(&p.phi2, l_next)?)?;
    let h_next = scale.mul(h)?.add(subnet_apply(&p.phi3, l_next)?)?;
    l_next.channel_concat(h_next)
}

pub fn coupling_inverse<'t>(u_next: Var<'t>, p: &TapeCoupling<'t>) -> Result<Var<'t>> {
    let (l_next, h_next) = u_next.channel_split(p.split_point)?;
    let scale = positive_scale(subnet_apply(&p.phi2, l_next)?)?;
    let h = h_next.sub(subnet_apply(&p.phi3, l_next)?)?.div(scale)?;
    let l = l_next.sub(subnet_apply(&p.phi1, h)?)?;
    l.channel_concat(h)
}

/// z = Flow(x): per block, one Haar squeeze then the coupling stack.
pub fn flow_forward<'t>(x: Var<'t>, m: &TapeModel<'t>) -> Result<LatentCode<'t>> {
    let (_, _, h, w) = x.with_value(|v| v.dims4())?;
    let f = m.spatial_factor;
    if h % f != 0 || w % f != 0 {
        let pad_h = (f - h % f) % f;
        let pad_w = (f - w % f) % f;
        return Err(FinoError::shape(
            "flow_forward",
            format!("spatial {h}x{w} not divisible by {f}; pad by {pad_h}x{pad_w} first"),
        ));
    }
    let mut cur = x;
    for block in &m.blocks {
        cur = ops::haar_forward(cur)?;
        for layer in block {
            cur = coupling_forward(cur, layer)?;
        }
    }
    Ok(LatentCode {
        z: cur,
        clean_channels: m.clean_channels,
    })
}

/// x = Flow⁻¹(z): exact inverse of [`flow_forward`].
pub fn flow_inverse<'t>(z: LatentCode<'t>, m: &TapeModel<'t>) -> Result<Var<'t>> {
    let mut cur = z.z;
    for block in m.blocks.iter().rev() {
        for layer in block.iter().rev() {
            cur = coupling_inverse(cur, layer)?;
        }
        cur = ops::haar_inverse(cur)?;
    }
    Ok(cur)
}

/// Noise variable swapping: (z_c^a ⊕ z_n^b, z_c^b ⊕ z_n^a).
pub fn latent_swap<'t>(a: LatentCode<'t>, b: LatentCode<'t>) -> Result<(LatentCode<'t>, LatentCode<'t>)> {
    if a.clean_channels != b.clean_channels {
        return Err(FinoError::shape(
            "latent_swap",
            format!("clean_channels {} vs {}", a.clean_channels, b.clean_channels),
        ));
    }
    let (ac, an) = a.split()?;
    let (bc, bn) = b.split()?;
    Ok((
        LatentCode {
            z: ac.channel_concat(bn)?,
            clean_channels: a.clean_channels,
        },
        LatentCode {
            z: bc.channel_concat(an)?,
            clean_channels: a.clean_channels,
        },
    ))
}

/// Replace the noise part of a latent with a given tensor (z_r or zeros).
pub fn with_noise_code<'t>(a: LatentCode<'t>, noise: Var<'t>) -> Result<LatentCode<'t>> {
    let (ac, _) = a.split()?;
    Ok(LatentCode {
        z: ac.channel_concat(noise)?,
        clean_channels: a.clean_channels,
    })
}

/// Full round-trip error of a model on one input; the operational
/// measure of invertibility.
pub fn roundtrip_error(model: &FlowModel, x: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let tm = model.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let z = flow_forward(xv, &tm)?;
    let back = flow_inverse(z, &tm)?;
    Ok(back.with_value(|v| v.max_abs_diff(x)))
}
