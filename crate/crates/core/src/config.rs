// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration read from TOML. Unknown keys are rejected.
//!
//! ```toml
//! [synth]
//! d = 64
//! p_true = 32
//!
//! [model]
//! expansion = 16
//! spec = { variant = "abstopk", k = 4 }
//!
//! [train]
//! steps = 5000
//!
//! [metrics]
//! tau_rec = 0.9
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::HeadConfig;
use crate::model::{SaeVariant, DEFAULT_EXPANSION};
use crate::prox::ProxSpec;
use crate::synth::SynthSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub spec: ProxSpec,
    /// Latents per input dimension.
    pub expansion: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spec: ProxSpec::AbsTopK { k: 4 },
            expansion: DEFAULT_EXPANSION,
        }
    }
}

impl ModelConfig {
    pub fn variant(&self) -> SaeVariant {
        SaeVariant::new(self.spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// `|cos|` at which a planted atom counts as recovered.
    pub tau_rec: f64,
    /// Leading rows of the store used for evaluation.
    pub eval_rows: usize,
    pub head: HeadConfig,
    /// Latents kept by the sparse probe.
    pub probe_top_k: usize,
    /// Contrast pairs per concept for the coverage scan.
    pub contrast_pairs: usize,
    /// Coefficient magnitude `c` of contrast pairs.
    pub contrast_magnitude: f64,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau_rec: 0.9,
            eval_rows: 4096,
            head: HeadConfig::default(),
            probe_top_k: 4,
            contrast_pairs: 256,
            contrast_magnitude: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.model.expansion == 0 {
            return Err(Error::Config("model.expansion must be positive".into()));
        }
        self.model
            .spec
            .validate(self.latents())
            .map_err(|e| Error::Config(format!("model.spec: {e}")))?;
        let m = &self.metrics;
        if !(m.tau_rec > 0.0 && m.tau_rec <= 1.0) {
            return Err(Error::Config("metrics.tau_rec must lie in (0, 1]".into()));
        }
        if m.eval_rows == 0 || m.probe_top_k == 0 || m.contrast_pairs == 0 {
            return Err(Error::Config(
                "metrics.eval_rows, probe_top_k and contrast_pairs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Latent count `P = expansion · d`.
    pub fn latents(&self) -> usize {
        self.model.expansion * self.synth.d
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.model.expansion, 16);
        assert_eq!(c.train.lr, 3e-4);
        assert_eq!(c.train.batch_size, 4096);
        assert_eq!(c.train.steps, 30_000);
        assert_eq!(c.train.bandwidth, 0.001);
        assert_eq!((c.train.beta1, c.train.beta2), (0.9, 0.99));
        assert_eq!(c.metrics.tau_rec, 0.9);
        assert_eq!(
            (c.synth.d, c.synth.p_true, c.synth.k_true, c.synth.n_samples),
            (64, 32, 4, 65_536)
        );
    }

    #[test]
    fn parses_partial_documents() {
        let c = RunConfig::from_toml(
            r#"
            [synth]
            d = 16
            p_true = 8
            sign_mode = "nonneg"
            coeff_dist = { kind = "constant", value = 1.0 }
            [model]
            expansion = 2
            spec = { variant = "topk", k = 3 }
            [train]
            steps = 10
            loss_lambda = 0.5
            "#,
        )
        .unwrap();
        assert_eq!(c.synth.d, 16);
        assert_eq!(c.model.spec, ProxSpec::TopK { k: 3 });
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.loss_lambda, Some(0.5));
        assert_eq!(c.latents(), 32);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for doc in [
            "[train]\nstepz = 3\n",
            "bogus = 1\n",
            "[model]\nspec = { variant = \"topk\", k = 3, lambda = 1.0 }\n",
            "[model]\nspec = { variant = \"gated\" }\n",
            "[train]\nbeta1 = 1.0\n",
            "[synth]\nk_true = 40\n",
            "[model]\nexpansion = 1\nspec = { variant = \"abstopk\", k = 65 }\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml(doc), Err(Error::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.model.spec = ProxSpec::JumpRelu { theta: 0.25 };
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.train.seed = 1;
        assert_ne!(d.hash(), c.hash());
        d = c.clone();
        d.train.threads = 8;
        assert_eq!(d.hash(), c.hash());
    }
}
