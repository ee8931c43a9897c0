// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic activations with planted, signed concept directions.
//!
//! Each sample is `x = mean + Σ_{p∈S} α_p h_p + ε` with `|S| = k_true`,
//! unit-norm atoms `h_p` of pairwise `|cos| ≤ coherence_bound`, and
//! isotropic Gaussian `ε`. In bipolar mode the sign of every `α_p` is a fair
//! coin; in nonneg mode the same magnitudes are used with positive sign.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix, Rng, Vector};
use crate::storage::{ActivationStore, Container, Section, StoreMeta};

/// Samples generated per independently seeded block.
const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignMode {
    Bipolar,
    Nonneg,
}

/// Distribution of coefficient magnitudes `|α_p|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoeffDist {
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
}

impl CoeffDist {
    fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            Self::Uniform { low, high } => rng.uniform(low, high),
            Self::Constant { value } => {
                // keep the stream aligned with the uniform case
                rng.uniform(0.0, 1.0);
                value
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub d: usize,
    pub p_true: usize,
    pub k_true: usize,
    pub sign_mode: SignMode,
    pub coeff_dist: CoeffDist,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Norm of the shared mean vector.
    pub mean_norm: f64,
    /// Largest allowed `|cos|` between planted atoms.
    pub coherence_bound: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d: 64,
            p_true: 32,
            k_true: 4,
            sign_mode: SignMode::Bipolar,
            coeff_dist: CoeffDist::Uniform {
                low: 0.5,
                high: 1.5,
            },
            noise_sigma: 0.01,
            n_samples: 65_536,
            seed: 0,
            mean_norm: 1.0,
            coherence_bound: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.p_true == 0 || self.k_true == 0 || self.n_samples == 0 {
            return bad("d, p_true, k_true and n_samples must be positive".into());
        }
        if self.k_true > self.p_true {
            return bad(format!(
                "k_true = {} exceeds p_true = {}",
                self.k_true, self.p_true
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.mean_norm >= 0.0) {
            return bad("noise_sigma and mean_norm must be >= 0".into());
        }
        if !(self.coherence_bound > 0.0 && self.coherence_bound <= 1.0) {
            return bad("coherence_bound must lie in (0, 1]".into());
        }
        match self.coeff_dist {
            CoeffDist::Uniform { low, high } if !(0.0 < low && low <= high) => {
                bad("uniform coefficients need 0 < low <= high".into())
            }
            CoeffDist::Constant { value } if !(value > 0.0) => {
                bad("constant coefficient must be > 0".into())
            }
            _ => Ok(()),
        }
    }
}

/// Planted structure behind a synthetic store.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `d × P_true`, unit-norm columns.
    pub atoms: Matrix,
    /// `n × P_true` signed coefficients.
    pub codes: Matrix,
    pub global_mean: Vector,
    pub spec: SynthSpec,
}

#[derive(Serialize, Deserialize)]
struct TruthMeta {
    kind: String,
    spec: SynthSpec,
    sections: Vec<Section>,
}

impl GroundTruth {
    /// Atom `p` as a vector.
    pub fn atom(&self, p: usize) -> Vector {
        self.atoms.column(p)
    }

    /// Sidecar container with sections `H` (`d × P_true`), `codes`
    /// (`n × P_true`) and `mean` (`1 × d`).
    pub fn to_container(&self) -> Container {
        let (d, pt, n) = (self.atoms.rows(), self.atoms.cols(), self.codes.rows());
        let sections = [
            ("H", d, pt, self.atoms.as_slice()),
            ("codes", n, pt, self.codes.as_slice()),
            ("mean", 1, d, self.global_mean.as_slice()),
        ];
        let mut index = Vec::new();
        let mut body = Vec::new();
        for (name, rows, cols, data) in sections {
            index.push(Section {
                name: name.into(),
                rows,
                cols,
            });
            body.extend(data.iter().map(|&v| v as f32));
        }
        let meta = TruthMeta {
            kind: "ground_truth".into(),
            spec: self.spec.clone(),
            sections: index,
        };
        Container {
            n_rows: body.len() as u64,
            dim: 1,
            metadata: serde_json::to_string(&meta).expect("metadata serializes"),
            body,
        }
    }

    pub fn from_container(c: Container, path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let meta: TruthMeta = serde_json::from_str(&c.metadata)
            .map_err(|e| fmt(format!("ground-truth metadata: {e}")))?;
        if meta.kind != "ground_truth" {
            return Err(fmt(format!(
                "expected ground truth, found kind {:?}",
                meta.kind
            )));
        }
        let mut offset = 0usize;
        let mut parts = Vec::new();
        for s in &meta.sections {
            let end = offset + s.rows * s.cols;
            if end > c.body.len() {
                return Err(fmt(format!("section {} runs past the body", s.name)));
            }
            let data: Vec<f64> = c.body[offset..end].iter().map(|&v| v as f64).collect();
            parts.push((s.name.as_str(), s.rows, s.cols, data));
            offset = end;
        }
        if offset != c.body.len() || parts.len() != 3 {
            return Err(fmt("unexpected ground-truth section layout".into()));
        }
        let wrap = |e: Error| fmt(e.to_string());
        let mut it = parts.into_iter();
        let mut next = |want: &str| {
            let (name, r, cols, data) = it.next().unwrap();
            if name != want {
                return Err(fmt(format!("expected section {want}, found {name}")));
            }
            Ok((r, cols, data))
        };
        let (hr, hc, h) = next("H")?;
        let (cr, cc, codes) = next("codes")?;
        let (_, _, mean) = next("mean")?;
        Ok(Self {
            atoms: Matrix::new(hr, hc, h).map_err(wrap)?,
            codes: Matrix::new(cr, cc, codes).map_err(wrap)?,
            global_mean: Vector::new(mean).map_err(wrap)?,
            spec: meta.spec,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?, path)
    }

    /// Class label per sample: the active concept of largest `|α|`, split by
    /// sign in bipolar mode (class `2p` for positive, `2p + 1` for negative).
    ///
    /// Returns the labels and the number of classes.
    pub fn dominant_concept_labels(&self) -> (Vec<usize>, usize) {
        let bipolar = self.spec.sign_mode == SignMode::Bipolar;
        let labels = (0..self.codes.rows())
            .map(|r| {
                let row = self.codes.row(r);
                let p = (0..row.len())
                    .max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()).then(b.cmp(&a)))
                    .unwrap_or(0);
                if bipolar {
                    2 * p + usize::from(row[p] < 0.0)
                } else {
                    p
                }
            })
            .collect();
        let classes = if bipolar {
            2 * self.spec.p_true
        } else {
            self.spec.p_true
        };
        (labels, classes)
    }

    /// Rows in which concept `p` is active, with label 1 for positive `α_p`.
    pub fn concept_sign_labels(&self, p: usize) -> (Vec<usize>, Vec<bool>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for r in 0..self.codes.rows() {
            let a = self.codes.get(r, p);
            if a != 0.0 {
                rows.push(r);
                labels.push(a > 0.0);
            }
        }
        (rows, labels)
    }
}

fn planted_atoms(spec: &SynthSpec, rng: &mut Rng) -> Result<Matrix> {
    let max_draws = 10 * spec.p_true;
    let mut atoms: Vec<Vector> = Vec::with_capacity(spec.p_true);
    let mut draws = 0;
    while atoms.len() < spec.p_true {
        if draws == max_draws {
            return Err(Error::Coherence {
                atoms: spec.p_true,
                dim: spec.d,
                bound: spec.coherence_bound,
                draws,
            });
        }
        draws += 1;
        let cand = rng.unit_vector(spec.d);
        if atoms
            .iter()
            .all(|a| dot(a.as_slice(), cand.as_slice()).abs() <= spec.coherence_bound)
        {
            atoms.push(cand);
        }
    }
    Matrix::from_columns(&atoms)
}

/// Draws the planted dictionary, mean, codes and samples in `f64`.
///
/// Returns the `n × d` sample matrix and the ground truth.
pub fn generate_samples(spec: &SynthSpec) -> Result<(Matrix, GroundTruth)> {
    spec.validate()?;
    let mut rng = Rng::from_seed(spec.seed);
    let atoms = planted_atoms(spec, &mut rng)?;
    let atoms_t = atoms.transpose();
    let mean = rng.unit_vector(spec.d).scaled(spec.mean_norm);

    let (n, d, pt) = (spec.n_samples, spec.d, spec.p_true);
    let mut samples = vec![0.0; n * d];
    let mut codes = vec![0.0; n * pt];
    for (block, (xs, zs)) in samples
        .chunks_mut(BLOCK * d)
        .zip(codes.chunks_mut(BLOCK * pt))
        .enumerate()
    {
        let mut brng = Rng::derive(spec.seed, block as u64);
        for (x, z) in xs.chunks_mut(d).zip(zs.chunks_mut(pt)) {
            x.copy_from_slice(mean.as_slice());
            for p in brng.sample_distinct(pt, spec.k_true) {
                let mag = spec.coeff_dist.sample(&mut brng);
                let negative = brng.coin();
                let a = if spec.sign_mode == SignMode::Bipolar && negative {
                    -mag
                } else {
                    mag
                };
                z[p] = a;
                axpy(a, atoms_t.row(p), x);
            }
            for xi in x.iter_mut() {
                *xi += spec.noise_sigma * brng.normal();
            }
        }
    }
    let truth = GroundTruth {
        atoms,
        codes: Matrix::new(n, pt, codes)?,
        global_mean: mean,
        spec: spec.clone(),
    };
    Ok((Matrix::new(n, d, samples)?, truth))
}

/// Generates a synthetic activation store and its ground truth.
pub fn generate(spec: &SynthSpec) -> Result<(ActivationStore, GroundTruth)> {
    let (samples, truth) = generate_samples(spec)?;
    let mut meta = StoreMeta::synthetic("planted-concepts");
    meta.extra.insert(
        "synth".into(),
        serde_json::to_value(spec).expect("spec serializes"),
    );
    Ok((ActivationStore::from_matrix(&samples, meta)?, truth))
}

/// Samples that differ only in the sign of one planted coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastPairs {
    pub concept: usize,
    /// Coefficient magnitude `c`.
    pub magnitude: f64,
    /// Shared component: mean, the other active concepts, and noise.
    pub context: Vec<Vector>,
    /// `context + c·h_p`.
    pub positive: Vec<Vector>,
    /// `context − c·h_p`.
    pub negative: Vec<Vector>,
}

/// Builds `n_pairs` contrast pairs for concept `p` with `α_p = ±c`.
///
/// Each context holds the mean, `k_true − 1` other active concepts drawn as
/// in [`generate`], and noise at the configured `noise_sigma`.
pub fn make_contrast_pairs(
    truth: &GroundTruth,
    p: usize,
    n_pairs: usize,
    c: f64,
    seed: u64,
) -> Result<ContrastPairs> {
    let spec = &truth.spec;
    if p >= spec.p_true {
        return Err(Error::contract(format!(
            "concept {p} out of range (P_true = {})",
            spec.p_true
        )));
    }
    let mut rng = Rng::from_seed(seed);
    let atoms_t = truth.atoms.transpose();
    let h = atoms_t.row(p);
    let mut context = Vec::with_capacity(n_pairs);
    let mut positive = Vec::with_capacity(n_pairs);
    let mut negative = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let mut x = truth.global_mean.as_slice().to_vec();
        let others: Vec<usize> = rng
            .sample_distinct(spec.p_true - 1, spec.k_true - 1)
            .into_iter()
            .map(|q| if q >= p { q + 1 } else { q })
            .collect();
        for q in others {
            let mag = spec.coeff_dist.sample(&mut rng);
            let neg = rng.coin();
            let a = if spec.sign_mode == SignMode::Bipolar && neg {
                -mag
            } else {
                mag
            };
            axpy(a, atoms_t.row(q), &mut x);
        }
        for xi in x.iter_mut() {
            *xi += spec.noise_sigma * rng.normal();
        }
        let mut xp = x.clone();
        let mut xn = x.clone();
        axpy(c, h, &mut xp);
        axpy(-c, h, &mut xn);
        context.push(Vector::from_vec_unchecked(x));
        positive.push(Vector::from_vec_unchecked(xp));
        negative.push(Vector::from_vec_unchecked(xn));
    }
    Ok(ContrastPairs {
        concept: p,
        magnitude: c,
        context,
        positive,
        negative,
    })
}
