// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation interventions: difference-in-means concept extraction,
//! activation addition, directional ablation and SAE latent clamping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot, Vector};
use crate::model::{decode, encode, SaeParams, SaeVariant};

/// Largest deviation of `‖d‖` from 1 accepted for a concept direction.
pub const UNIT_TOL: f64 = 1e-6;

/// Where a concept direction came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConceptSource {
    /// Normalized difference of class means.
    Dim,
    /// Decoder column `index`, multiplied by `sign`.
    SaeAtom { index: usize, sign: i8 },
}

/// Unit-norm direction in activation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    direction: Vector,
    pub source: ConceptSource,
    /// Opaque layer tag.
    #[serde(default)]
    pub layer: String,
}

impl ConceptVector {
    /// Wraps a direction, rejecting norms further than [`UNIT_TOL`] from 1.
    pub fn new(direction: Vector, source: ConceptSource, layer: impl Into<String>) -> Result<Self> {
        check_unit(&direction)?;
        Ok(Self {
            direction,
            source,
            layer: layer.into(),
        })
    }

    /// Decoder atom `index` of an SAE, with `sign` ±1.
    pub fn from_atom(
        params: &SaeParams,
        index: usize,
        sign: i8,
        layer: impl Into<String>,
    ) -> Result<Self> {
        if index >= params.p() {
            return Err(Error::contract(format!(
                "latent {index} out of range (P = {})",
                params.p()
            )));
        }
        if sign != 1 && sign != -1 {
            return Err(Error::contract("atom sign must be +1 or -1"));
        }
        let col = params.dict.column(index);
        let n = col.norm();
        if n == 0.0 {
            return Err(Error::DegenerateAtom { column: index });
        }
        Self::new(
            col.scaled(f64::from(sign) / n),
            ConceptSource::SaeAtom { index, sign },
            layer,
        )
    }

    pub fn direction(&self) -> &Vector {
        &self.direction
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("concept serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cv: Self =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("concept vector: {e}")))?;
        check_unit(&cv.direction)?;
        Ok(cv)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::storage::write_exclusive(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn check_unit(d: &Vector) -> Result<()> {
    let n = d.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::contract(format!(
            "concept direction must be unit norm, got {n}"
        )));
    }
    Ok(())
}

/// Intervention selector for batch steering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SteerRequest {
    Add {
        alpha: f64,
    },
    Ablate {
        alpha: f64,
    },
    /// Pin latent `latent` to `value`; `additive` patches `x` instead of
    /// returning the reconstruction.
    Clamp {
        latent: usize,
        value: f64,
        additive: bool,
    },
}

/// DiM axis with its unnormalized difference.
#[derive(Debug, Clone, PartialEq)]
pub struct DimResult {
    pub concept: ConceptVector,
    pub raw: Vector,
}

/// `normalize(mean(pos) − mean(neg))`.
pub fn dim_extract(pos: &[Vector], neg: &[Vector]) -> Result<DimResult> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract(
            "DiM needs nonempty positive and negative sets",
        ));
    }
    let d = pos[0].len();
    let mut diff = vec![0.0; d];
    for (set, sign) in [(pos, 1.0), (neg, -1.0)] {
        let w = sign / set.len() as f64;
        for x in set {
            check_dim("dim_extract", d, x.len())?;
            axpy(w, x.as_slice(), &mut diff);
        }
    }
    let raw =
        Vector::new(diff).map_err(|_| Error::DegenerateConcept("non-finite class means".into()))?;
    let n = raw.norm();
    if n == 0.0 {
        return Err(Error::DegenerateConcept("class means coincide".into()));
    }
    Ok(DimResult {
        concept: ConceptVector {
            direction: raw.scaled(1.0 / n),
            source: ConceptSource::Dim,
            layer: String::new(),
        },
        raw,
    })
}

/// `x + α·d`.
pub fn activation_add(x: &Vector, cv: &ConceptVector, alpha: f64) -> Result<Vector> {
    x.add_scaled(alpha, &cv.direction)
}

/// `x − α·d·(dᵀx)`.
pub fn directional_ablate(x: &Vector, cv: &ConceptVector, alpha: f64) -> Result<Vector> {
    check_unit(&cv.direction)?;
    check_dim("directional_ablate", cv.direction.len(), x.len())?;
    let proj = dot(cv.direction.as_slice(), x.as_slice());
    x.add_scaled(-alpha * proj, &cv.direction)
}

/// Reconstruction with latent `i` pinned to `c`.
///
/// With `additive`, returns `x + D(z_c − z)` instead of `D z_c + b`.
pub fn latent_clamp(
    x: &Vector,
    params: &SaeParams,
    variant: &SaeVariant,
    i: usize,
    c: f64,
    additive: bool,
) -> Result<Vector> {
    if i >= params.p() {
        return Err(Error::contract(format!(
            "latent {i} out of range (P = {})",
            params.p()
        )));
    }
    let mut z = encode(x, params, variant)?.into_vec();
    let old = z[i];
    if additive {
        let mut out = x.as_slice().to_vec();
        let col = params.dict.column(i);
        axpy(c - old, col.as_slice(), &mut out);
        return Vector::new(out);
    }
    z[i] = c;
    decode(&Vector::from_vec_unchecked(z), params)
}

/// Applies `req` to one sample. `concept` is required for add and ablate;
/// `model` for clamp.
pub fn steer(
    x: &Vector,
    req: &SteerRequest,
    concept: Option<&ConceptVector>,
    model: Option<(&SaeParams, &SaeVariant)>,
) -> Result<Vector> {
    let need_cv =
        || concept.ok_or_else(|| Error::Config("this steering mode needs a concept vector".into()));
    match *req {
        SteerRequest::Add { alpha } => activation_add(x, need_cv()?, alpha),
        SteerRequest::Ablate { alpha } => directional_ablate(x, need_cv()?, alpha),
        SteerRequest::Clamp {
            latent,
            value,
            additive,
        } => {
            let (p, v) = model.ok_or_else(|| Error::Config("clamp needs a checkpoint".into()))?;
            latent_clamp(x, p, v, latent, value, additive)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Matrix, Rng};
    use crate::model::init_params;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn unit(x: &[f64]) -> ConceptVector {
        let raw = v(x);
        ConceptVector::new(raw.scaled(1.0 / raw.norm()), ConceptSource::Dim, "").unwrap()
    }

    #[test]
    fn dim_constant_sets() {
        let r = dim_extract(&vec![v(&[3.0, 1.0]); 3], &vec![v(&[0.0, -3.0]); 2]).unwrap();
        assert_eq!(r.raw, v(&[3.0, 4.0]));
        let dir = r.concept.direction();
        assert!((dir[0] - 0.6).abs() < 1e-15 && (dir[1] - 0.8).abs() < 1e-15);
        assert!(matches!(
            dim_extract(&[v(&[1.0, 2.0])], &[v(&[1.0, 2.0])]),
            Err(Error::DegenerateConcept(_))
        ));
        assert!(dim_extract(&[], &[v(&[1.0])]).is_err());
    }

    #[test]
    fn add_examples() {
        let cv = unit(&[0.0, 1.0]);
        let x = v(&[1.0, 2.0]);
        assert_eq!(activation_add(&x, &cv, 0.0).unwrap(), x);
        assert_eq!(
            activation_add(&Vector::zeros(2), &cv, 2.0).unwrap(),
            v(&[0.0, 2.0])
        );
        let shifted = activation_add(&x, &cv, 0.75).unwrap();
        assert_eq!(
            shifted.dot(cv.direction()).unwrap() - x.dot(cv.direction()).unwrap(),
            0.75
        );
    }

    #[test]
    fn ablate_examples() {
        let cv = unit(&[1.0, 2.0, -2.0]);
        let x = v(&[0.3, -1.1, 4.0]);
        let a = directional_ablate(&x, &cv, 1.0).unwrap();
        assert!(a.dot(cv.direction()).unwrap().abs() < 1e-12);
        let perp = v(&[2.0, -1.0, 0.0]);
        assert_eq!(directional_ablate(&perp, &cv, 0.3).unwrap(), perp);
        let added = activation_add(&x, &cv, 5.0).unwrap();
        let b = directional_ablate(&added, &cv, 1.0).unwrap();
        for j in 0..3 {
            assert!((a[j] - b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_unit_direction_rejected() {
        assert!(ConceptVector::new(v(&[1.0, 1.0]), ConceptSource::Dim, "").is_err());
        let bad = r#"{"direction":[2.0,0.0],"source":{"kind":"dim"},"layer":"3"}"#;
        assert!(ConceptVector::from_json(bad).is_err());
    }

    #[test]
    fn concept_json_round_trip() {
        let cv = ConceptVector::new(
            v(&[0.6, -0.8]),
            ConceptSource::SaeAtom { index: 4, sign: -1 },
            "L7",
        )
        .unwrap();
        assert_eq!(ConceptVector::from_json(&cv.to_json()).unwrap(), cv);
    }

    #[test]
    fn clamp_identities() {
        let mut rng = Rng::from_seed(9);
        let params = init_params(6, 12, &mut rng, None).unwrap();
        let variant = SaeVariant::abs_topk(3);
        let x = Vector::new(rng.gaussian_vec(6)).unwrap();
        let z = encode(&x, &params, &variant).unwrap();
        let plain = decode(&z, &params).unwrap();
        let active = (0..12).find(|&i| z[i] != 0.0).unwrap();
        let inactive = (0..12).find(|&i| z[i] == 0.0).unwrap();
        assert_eq!(
            latent_clamp(&x, &params, &variant, active, z[active], false).unwrap(),
            plain
        );
        assert_eq!(
            latent_clamp(&x, &params, &variant, inactive, 0.0, false).unwrap(),
            plain
        );

        let c = 1.3;
        let up = latent_clamp(&x, &params, &variant, active, c, false).unwrap();
        let down = latent_clamp(&x, &params, &variant, active, -c, false).unwrap();
        let col = params.dict.column(active);
        for j in 0..6 {
            assert!((up[j] - down[j] - 2.0 * c * col[j]).abs() < 1e-12);
            assert!((up[j] - plain[j] - (c - z[active]) * col[j]).abs() < 1e-12);
        }
        let patched = latent_clamp(&x, &params, &variant, active, c, true).unwrap();
        for j in 0..6 {
            assert!((patched[j] - x[j] - (c - z[active]) * col[j]).abs() < 1e-12);
        }
        assert!(latent_clamp(&x, &params, &variant, 12, 0.0, false).is_err());
    }

    #[test]
    fn steer_dispatch_checks_inputs() {
        let x = v(&[1.0, 0.0]);
        assert!(steer(&x, &SteerRequest::Add { alpha: 1.0 }, None, None).is_err());
        let cv = unit(&[1.0, 0.0]);
        let out = steer(&x, &SteerRequest::Ablate { alpha: 1.0 }, Some(&cv), None).unwrap();
        assert_eq!(out, Vector::zeros(2));
        let req = SteerRequest::Clamp {
            latent: 0,
            value: 1.0,
            additive: false,
        };
        assert!(steer(&x, &req, None, None).is_err());
        let params = SaeParams::new(
            Matrix::identity(2),
            Matrix::identity(2),
            Vector::zeros(2),
            Vector::zeros(2),
        )
        .unwrap();
        let out = steer(&x, &req, None, Some((&params, &SaeVariant::topk(1)))).unwrap();
        assert_eq!(out, v(&[1.0, 0.0]));
    }
}
