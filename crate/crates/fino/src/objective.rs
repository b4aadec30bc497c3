//! The four training loss terms and their weighted combination:
//! reconstruction, content alignment, clean-image regression, and the
//! patch-wise noise correlation constraint.
//!
//! All ‖·‖₁ terms are per-element means, so the default weights stay
//! meaningful across patch resolutions.

use crate::error::{FinoError, Result};
use crate::ops;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Loss weighting of the hybrid objective L = L_reg + αL_rec + βL_cnt + γL_noise,
/// with per-term enable flags for ablations. Disabled terms contribute
/// exactly zero and record no gradients.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub enable_rec: bool,
    pub enable_cnt: bool,
    pub enable_noise: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            enable_rec: true,
            enable_cnt: true,
            enable_noise: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(FinoError::Invalid(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Overlapping patch extractor configuration for the correlation loss.
#[derive(Clone, Copy, Debug)]
pub struct PatchConfig {
    pub edge: usize,
    pub stride: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { edge: 4, stride: 2 }
    }
}

/// L_rec = mean|n̂ − n| + mean|x̂ − x|.
pub fn loss_rec<'t>(n_hat: Var<'t>, n: Var<'t>, x_hat: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let noise_term = n_hat.sub(n)?.l1_mean()?;
    let image_term = x_hat.sub(x)?.l1_mean()?;
    noise_term.add(image_term)
}

/// L_cnt = mean|z_c^x − z_c^y|.
pub fn loss_cnt<'t>(zc_x: Var<'t>, zc_y: Var<'t>) -> Result<Var<'t>> {
    zc_x.sub(zc_y)?.l1_mean()
}

/// L_reg = mean|ỹ − x|.
pub fn loss_reg<'t>(y_tilde: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    y_tilde.sub(x)?.l1_mean()
}

/// L_noise = ‖Σ − σ²I‖²_F for a square correlation matrix.
pub fn loss_noise(sigma_matrix: Var<'_>, sigma: f64) -> Result<Var<'_>> {
    let shape = sigma_matrix.shape();
    let [m, m2] = shape[..] else {
        return Err(FinoError::shape(
            "loss_noise",
            format!("expected rank-2 square matrix, got {shape:?}"),
        ));
    };
    if m != m2 {
        return Err(FinoError::shape(
            "loss_noise",
            format!("matrix is {m}x{m2}, not square"),
        ));
    }
    if sigma < 0.0 {
        return Err(FinoError::Invalid(format!("loss_noise: sigma {sigma} < 0")));
    }
    let mut target = Tensor::zeros(&[m, m]);
    for i in 0..m {
        target.data_mut()[i * m + i] = sigma * sigma;
    }
    let target = sigma_matrix.tape.constant(target);
    sigma_matrix.sub(target)?.frobenius_sq()
}

/// Σ of a reconstructed noise batch, then the correlation loss against
/// each sample's own σ. Equal σ across the batch shares one patch
/// matrix; per-sample σ (blind mode) evaluates per sample and averages.
pub fn noise_loss_batch<'t>(n_hat: Var<'t>, sigmas: &[f64], pc: PatchConfig) -> Result<Var<'t>> {
    let (n, _, _, _) = n_hat.with_value(|v| v.dims4())?;
    if sigmas.len() != n {
        return Err(FinoError::Invalid(format!(
            "noise_loss_batch: {} sigmas for batch of {n}",
            sigmas.len()
        )));
    }
    let uniform = sigmas.windows(2).all(|w| w[0] == w[1]);
    if uniform {
        let v = ops::extract_patches(n_hat, pc.edge, pc.stride)?;
        return loss_noise(ops::gram_mean(v)?, sigmas[0]);
    }
    let mut total = None;
    for (i, &sigma) in sigmas.iter().enumerate() {
        let item = n_hat.batch_item(i)?;
        let v = ops::extract_patches(item, pc.edge, pc.stride)?;
        let term = loss_noise(ops::gram_mean(v)?, sigma)?;
        total = Some(match total {
            None => term,
            Some(acc) => {
                let acc: Var<'t> = acc;
                acc.add(term)?
            }
        });
    }
    total.unwrap().affine(1.0 / n as f64, 0.0)
}

/// Scalar loss parts of one training step; disabled terms are `None`.
pub struct LossParts<'t> {
    pub reg: Var<'t>,
    pub rec: Option<Var<'t>>,
    pub cnt: Option<Var<'t>>,
    pub noise: Option<Var<'t>>,
}

/// L = L_reg + αL_rec + βL_cnt + γL_noise over the enabled parts.
pub fn total_loss<'t>(parts: &LossParts<'t>, w: &LossWeights) -> Result<Var<'t>> {
    w.validate()?;
    let mut total = parts.reg;
    for (part, weight, enabled) in [
        (parts.rec, w.alpha, w.enable_rec),
        (parts.cnt, w.beta, w.enable_cnt),
        (parts.noise, w.gamma, w.enable_noise),
    ] {
        if let (Some(p), true) = (part, enabled) {
            total = total.add(p.affine(weight, 0.0)?)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tape::Tape;

    fn rt(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::new(shape.to_vec(), rng.normal_vec(shape.iter().product())).unwrap()
    }

    #[test]
    fn loss_rec_zero_and_offset() {
        let tape = Tape::new();
        let n = tape.constant(rt(&[1, 1, 4, 4], 1));
        let x = tape.constant(rt(&[1, 1, 4, 4], 2));
        assert_eq!(loss_rec(n, n, x, x).unwrap().value().item(), 0.0);
        let n_off = tape.constant(n.value().map(|v| v + 0.5));
        let l = loss_rec(n_off, n, x, x).unwrap().value().item();
        assert!((l - 0.5).abs() < 1e-12);
    }

    /// Naive scalar-loop oracle for the mean-L1 losses.
    fn l1_mean_oracle(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn loss_rec_matches_naive_loop() {
        let tape = Tape::new();
        let (n_hat, n) = (rt(&[2, 1, 3, 3], 3), rt(&[2, 1, 3, 3], 4));
        let (x_hat, x) = (rt(&[2, 1, 3, 3], 5), rt(&[2, 1, 3, 3], 6));
        let expected = l1_mean_oracle(&n_hat, &n) + l1_mean_oracle(&x_hat, &x);
        let got = loss_rec(
            tape.constant(n_hat),
            tape.constant(n),
            tape.constant(x_hat),
            tape.constant(x),
        )
        .unwrap()
        .value()
        .item();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_cnt_examples_and_gradient() {
        let tape = Tape::new();
        let a = tape.constant(rt(&[1, 2, 2, 2], 7));
        assert_eq!(loss_cnt(a, a).unwrap().value().item(), 0.0);
        let b = tape.leaf(a.value().map(|v| v + 1.0));
        let l = loss_cnt(a, b).unwrap();
        assert!((l.value().item() - 1.0).abs() < 1e-12);
        tape.backward(l).unwrap();
        // d mean|a − b| / db = −sign(a − b)/len = +1/len here (a − b = −1)
        let g = b.grad().unwrap();
        for &v in g.data() {
            assert!((v - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_reg_constant_offset() {
        let tape = Tape::new();
        let x = tape.constant(rt(&[1, 1, 4, 4], 8));
        let y = tape.constant(x.value().map(|v| v + 0.25));
        let l = loss_reg(y, x).unwrap().value().item();
        assert!((l - 0.25).abs() < 1e-12);
        assert_eq!(loss_reg(x, x).unwrap().value().item(), 0.0);
    }

    #[test]
    fn loss_noise_examples() {
        let tape = Tape::new();
        // Σ = σ²I -> 0
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 0.04;
        }
        let l = loss_noise(tape.constant(eye), 0.2).unwrap().value().item();
        assert!(l < 1e-28);
        // Σ = 0, m=4, σ=0.1 -> m·σ⁴ = 4e-4
        let l = loss_noise(tape.constant(Tensor::zeros(&[4, 4])), 0.1)
            .unwrap()
            .value()
            .item();
        assert!((l - 4e-4).abs() < 1e-15);
        // Σ=[[1,2],[2,4]], σ=1 -> 0 + 4 + 4 + 9 = 17
        let s = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap());
        assert_eq!(loss_noise(s, 1.0).unwrap().value().item(), 17.0);
    }

    #[test]
    fn loss_noise_rejects_non_square() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(loss_noise(s, 1.0).is_err());
    }

    #[test]
    fn correlation_of_iid_noise_approaches_sigma_sq_identity() {
        // Monte-Carlo oracle: 10^4 iid N(0, 0.04) columns
        let sigma: f64 = 0.2;
        let (m, cols) = (4, 10_000);
        let mut rng = SeededRng::new(123);
        let v = Tensor::new(
            vec![m, cols],
            rng.normal_vec(m * cols).iter().map(|z| z * sigma).collect(),
        )
        .unwrap();
        let s = crate::kernels::gram_mean_fwd(&v).unwrap();
        let var = sigma * sigma;
        for a in 0..m {
            for b in 0..m {
                let e = s.data()[a * m + b];
                if a == b {
                    assert!((e - var).abs() / var < 0.05, "diag {e}");
                } else {
                    assert!(e.abs() < 3.0 * var / (cols as f64).sqrt(), "offdiag {e}");
                }
            }
        }
        // symmetry and PSD (eigenvalue lower bound via Gershgorin is
        // loose; check x'Σx >= 0 on random probes instead)
        for a in 0..m {
            for b in 0..m {
                assert!((s.data()[a * m + b] - s.data()[b * m + a]).abs() < 1e-12);
            }
        }
        for probe in 0..20 {
            let x = SeededRng::new(probe).normal_vec(m);
            let mut q = 0.0;
            for a in 0..m {
                for b in 0..m {
                    q += x[a] * s.data()[a * m + b] * x[b];
                }
            }
            assert!(q >= -1e-10);
        }
    }

    #[test]
    fn total_loss_weighted_sum_and_ablation() {
        let tape = Tape::new();
        let one = || tape.constant(Tensor::scalar(1.0));
        let parts = LossParts {
            reg: one(),
            rec: Some(one()),
            cnt: Some(one()),
            noise: Some(one()),
        };
        let w = LossWeights::default();
        let l = total_loss(&parts, &w).unwrap().value().item();
        assert!((l - 3.1).abs() < 1e-12);

        // real-noise mode drops the correlation term
        let w_real = LossWeights {
            enable_noise: false,
            ..w
        };
        let l = total_loss(&parts, &w_real).unwrap().value().item();
        assert!((l - 3.0).abs() < 1e-12);

        let zero = || tape.constant(Tensor::scalar(0.0));
        let zeros = LossParts {
            reg: zero(),
            rec: Some(zero()),
            cnt: Some(zero()),
            noise: Some(zero()),
        };
        assert_eq!(total_loss(&zeros, &w).unwrap().value().item(), 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences_off_kink() {
        // inputs constructed away from L1 kink points
        let a0 = rt(&[1, 1, 4, 4], 31).map(|v| v + 3.0);
        let b0 = rt(&[1, 1, 4, 4], 32).map(|v| v - 3.0);
        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.constant(b0.clone());
        let l = loss_reg(a, b).unwrap();
        tape.backward(l).unwrap();
        let mut f = |t: &Tensor| -> crate::error::Result<f64> {
            let tp = Tape::new();
            Ok(loss_reg(tp.constant(t.clone()), tp.constant(b0.clone()))?
                .value()
                .item())
        };
        let fd = ops::finite_difference(&mut f, &a0, 1e-6).unwrap();
        assert!(ops::max_rel_err(&a.grad().unwrap(), &fd) < 1e-5);
    }
}
