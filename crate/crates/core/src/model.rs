// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder parameters and forward pass.
//!
//! ```text
//! encoder: z = prox(Wᵀx + b_e)
//! decoder: x̂ = Dz + b
//! ```
//!
//! `W` and `D` are both `d × P`. With `W = D` and `b_e = −Dᵀb` the encoder is
//! exactly one proximal-gradient step of sparse coding from zero.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, column_normalize, Matrix, Rng, Vector};
use crate::prox::{top_k_indices, ProxSpec};

/// Expansion factor `P / d` used when none is given.
pub const DEFAULT_EXPANSION: usize = 16;

/// Learnable SAE parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// Encoder weights, `d × P`.
    pub w: Matrix,
    /// Decoder dictionary, `d × P`; columns are kept at unit norm by training.
    pub dict: Matrix,
    /// Encoder bias, length `P`.
    pub b_enc: Vector,
    /// Decoder bias, length `d`.
    pub b_dec: Vector,
    /// Per-latent `ln θ` for JumpReLU; `None` means the variant threshold.
    pub log_thresholds: Option<Vector>,
}

impl SaeParams {
    /// Assembles parameters, checking that all shapes agree.
    pub fn new(w: Matrix, dict: Matrix, b_enc: Vector, b_dec: Vector) -> Result<Self> {
        check_dim("SaeParams (W rows vs D rows)", dict.rows(), w.rows())?;
        check_dim("SaeParams (W cols vs D cols)", dict.cols(), w.cols())?;
        check_dim("SaeParams (b_e)", dict.cols(), b_enc.len())?;
        check_dim("SaeParams (b)", dict.rows(), b_dec.len())?;
        Ok(Self {
            w,
            dict,
            b_enc,
            b_dec,
            log_thresholds: None,
        })
    }

    /// Input dimension `d`.
    pub fn d(&self) -> usize {
        self.dict.rows()
    }

    /// Number of latents `P`.
    pub fn p(&self) -> usize {
        self.dict.cols()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w, &self.dict]
            .iter()
            .all(|m| m.as_slice().iter().all(|v| v.is_finite()))
            && self.b_enc.is_finite()
            && self.b_dec.is_finite()
            && self.log_thresholds.as_ref().is_none_or(Vector::is_finite)
    }

    /// Rescales decoder columns to unit norm.
    pub fn normalize_decoder(&mut self) -> Result<()> {
        self.dict = column_normalize(&self.dict)?;
        Ok(())
    }

    /// Per-latent JumpReLU thresholds if learnable thresholds are present.
    pub fn thresholds(&self) -> Option<Vec<f64>> {
        self.log_thresholds
            .as_ref()
            .map(|l| l.as_slice().iter().map(|v| v.exp()).collect())
    }
}

/// Encoder nonlinearity of an SAE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SaeVariant {
    pub spec: ProxSpec,
}

impl SaeVariant {
    pub fn new(spec: ProxSpec) -> Self {
        Self { spec }
    }

    pub fn relu(lambda: f64) -> Self {
        Self::new(ProxSpec::ReluSoft { lambda })
    }

    pub fn jump_relu(theta: f64) -> Self {
        Self::new(ProxSpec::JumpRelu { theta })
    }

    pub fn topk(k: usize) -> Self {
        Self::new(ProxSpec::TopK { k })
    }

    pub fn abs_topk(k: usize) -> Self {
        Self::new(ProxSpec::AbsTopK { k })
    }

    pub fn name(&self) -> &'static str {
        self.spec.name()
    }

    /// Applies the nonlinearity in place to a pre-activation row.
    ///
    /// `thresholds` overrides the variant threshold per latent for JumpReLU.
    pub(crate) fn activate(&self, pre: &[f64], thresholds: Option<&[f64]>, out: &mut [f64]) {
        match self.spec {
            ProxSpec::ReluSoft { lambda } => {
                for (o, &u) in out.iter_mut().zip(pre) {
                    *o = (u - lambda).max(0.0);
                }
            }
            ProxSpec::JumpRelu { theta } => {
                for (i, (o, &u)) in out.iter_mut().zip(pre).enumerate() {
                    let t = thresholds.map_or(theta, |t| t[i]);
                    *o = if u >= t { u } else { 0.0 };
                }
            }
            ProxSpec::TopK { k } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in top_k_indices(pre, k, |x| x) {
                    out[i] = pre[i].max(0.0);
                }
            }
            ProxSpec::AbsTopK { k } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in top_k_indices(pre, k, f64::abs) {
                    out[i] = pre[i];
                }
            }
        }
    }
}

/// Pre-activation `Wᵀx + b_e`.
pub fn pre_activation(x: &Vector, params: &SaeParams) -> Result<Vector> {
    check_dim("encode", params.d(), x.len())?;
    let mut pre = params.w.mul_t_slice(x.as_slice());
    axpy(1.0, params.b_enc.as_slice(), &mut pre);
    Ok(Vector::from_vec_unchecked(pre))
}

/// Sparse code `z = prox(Wᵀx + b_e)`.
pub fn encode(x: &Vector, params: &SaeParams, variant: &SaeVariant) -> Result<Vector> {
    variant.spec.validate(params.p())?;
    let pre = pre_activation(x, params)?;
    let thresholds = params.thresholds();
    let mut z = vec![0.0; params.p()];
    variant.activate(pre.as_slice(), thresholds.as_deref(), &mut z);
    Ok(Vector::from_vec_unchecked(z))
}

/// Reconstruction `x̂ = Dz + b`.
pub fn decode(z: &Vector, params: &SaeParams) -> Result<Vector> {
    check_dim("decode", params.p(), z.len())?;
    let mut out = params.dict.mul_slice(z.as_slice());
    for (o, b) in out.iter_mut().zip(params.b_dec.as_slice()) {
        *o += b;
    }
    Ok(Vector::from_vec_unchecked(out))
}

/// `decode(encode(x))`.
pub fn reconstruct(x: &Vector, params: &SaeParams, variant: &SaeVariant) -> Result<Vector> {
    decode(&encode(x, params, variant)?, params)
}

/// Random initialization with unit-norm decoder atoms and tied encoder.
///
/// `D` has isotropic Gaussian columns rescaled to unit norm, `W = D`,
/// `b_e = 0`, and `b` is `mean` when given, else zero.
pub fn init_params(d: usize, p: usize, rng: &mut Rng, mean: Option<&Vector>) -> Result<SaeParams> {
    if d == 0 || p == 0 {
        return Err(Error::contract("d and P must be positive"));
    }
    if p < d {
        log::warn!("undercomplete SAE: P = {p} < d = {d}");
    }
    let dict = column_normalize(&Matrix::from_vec_unchecked(d, p, rng.gaussian_vec(d * p)))?;
    let b_dec = match mean {
        Some(m) => {
            check_dim("init_params (mean)", d, m.len())?;
            m.clone()
        }
        None => Vector::zeros(d),
    };
    SaeParams::new(dict.clone(), dict, Vector::zeros(p), b_dec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::{prox_grad_step, CoderConfig};
    use crate::linalg::matvec_t;

    fn identity_params(n: usize) -> SaeParams {
        SaeParams::new(
            Matrix::identity(n),
            Matrix::identity(n),
            Vector::zeros(n),
            Vector::zeros(n),
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn encode_examples() {
        let p = identity_params(2);
        let x = v(&[0.2, -0.9]);
        assert_eq!(
            encode(&x, &p, &SaeVariant::abs_topk(1)).unwrap(),
            v(&[0.0, -0.9])
        );
        assert_eq!(
            encode(&x, &p, &SaeVariant::topk(1)).unwrap(),
            v(&[0.2, 0.0])
        );
        assert!(matches!(
            encode(&v(&[1.0]), &p, &SaeVariant::topk(1)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn encode_is_prox_of_pre_activation() {
        let mut rng = Rng::from_seed(21);
        let mut params = init_params(6, 12, &mut rng, None).unwrap();
        params.w = Matrix::new(6, 12, rng.gaussian_vec(72)).unwrap();
        params.b_enc = Vector::new(rng.gaussian_vec(12)).unwrap();
        let x = Vector::new(rng.gaussian_vec(6)).unwrap();
        for spec in [
            ProxSpec::ReluSoft { lambda: 0.1 },
            ProxSpec::JumpRelu { theta: 0.5 },
            ProxSpec::TopK { k: 3 },
            ProxSpec::AbsTopK { k: 3 },
        ] {
            let pre = matvec_t(&params.w, &x)
                .unwrap()
                .add_scaled(1.0, &params.b_enc)
                .unwrap();
            let expect = spec.apply(&pre).unwrap();
            let got = encode(&x, &params, &SaeVariant::new(spec)).unwrap();
            for i in 0..12 {
                assert!((got[i] - expect[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_examples() {
        let mut rng = Rng::from_seed(4);
        let mut params = init_params(3, 5, &mut rng, None).unwrap();
        params.b_dec = v(&[1.0, -2.0, 0.5]);
        assert_eq!(decode(&Vector::zeros(5), &params).unwrap(), params.b_dec);

        let id = identity_params(3);
        assert_eq!(decode(&v(&[1., 2., 3.]), &id).unwrap(), v(&[1., 2., 3.]));

        let mut z = vec![0.0; 5];
        z[2] = 1.7;
        let xhat = decode(&Vector::new(z).unwrap(), &params).unwrap();
        let expect = params
            .dict
            .column(2)
            .scaled(1.7)
            .add_scaled(1.0, &params.b_dec)
            .unwrap();
        for i in 0..3 {
            assert!((xhat[i] - expect[i]).abs() < 1e-12);
        }
        assert!(decode(&Vector::zeros(4), &params).is_err());
    }

    #[test]
    fn init_is_normalized_tied_and_deterministic() {
        let a = init_params(8, 32, &mut Rng::from_seed(1), None).unwrap();
        let b = init_params(8, 32, &mut Rng::from_seed(1), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.w, a.dict);
        for n in a.dict.column_norms() {
            assert!((n - 1.0).abs() < 1e-6);
        }
        let x = Vector::new(Rng::from_seed(2).gaussian_vec(8)).unwrap();
        let z = encode(&x, &a, &SaeVariant::relu(0.0)).unwrap();
        let relu: Vec<f64> = matvec_t(&a.dict, &x)
            .unwrap()
            .as_slice()
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        assert_eq!(z.as_slice(), relu.as_slice());

        let mean = v(&[1.0; 8]);
        let c = init_params(8, 32, &mut Rng::from_seed(1), Some(&mean)).unwrap();
        assert_eq!(c.b_dec, mean);
    }

    fn dyadic(rng: &mut Rng, n: usize) -> Vec<f64> {
        // multiples of 1/16 keep every product and sum exact in f64
        (0..n)
            .map(|_| (rng.below(65) as f64 - 32.0) / 16.0)
            .collect()
    }

    #[test]
    fn unrolled_step_identity() {
        let mut rng = Rng::from_seed(31);
        for spec in [
            ProxSpec::ReluSoft { lambda: 0.0625 },
            ProxSpec::JumpRelu { theta: 0.25 },
            ProxSpec::TopK { k: 4 },
            ProxSpec::AbsTopK { k: 4 },
        ] {
            let dict = Matrix::new(7, 20, dyadic(&mut rng, 140)).unwrap();
            let b = Vector::new(dyadic(&mut rng, 7)).unwrap();
            let b_enc = matvec_t(&dict, &b).unwrap().scaled(-1.0);
            let params = SaeParams::new(dict.clone(), dict, b_enc, b).unwrap();
            let x = Vector::new(dyadic(&mut rng, 7)).unwrap();
            let z_enc = encode(&x, &params, &SaeVariant::new(spec)).unwrap();
            let z_step = prox_grad_step(
                &Vector::zeros(20),
                &x,
                &params.dict,
                &params.b_dec,
                &CoderConfig::one_step(spec),
            )
            .unwrap();
            assert_eq!(z_enc, z_step, "{spec:?}");
        }
    }

    #[test]
    fn abs_topk_sign_flip() {
        let mut rng = Rng::from_seed(8);
        let params = init_params(6, 18, &mut rng, None).unwrap();
        let x = Vector::new(rng.gaussian_vec(6)).unwrap();
        let var = SaeVariant::abs_topk(5);
        let z = encode(&x, &params, &var).unwrap();
        let zn = encode(&x.scaled(-1.0), &params, &var).unwrap();
        assert_eq!(zn, z.scaled(-1.0));
        assert_eq!(z.l0(), 5);
    }
}
