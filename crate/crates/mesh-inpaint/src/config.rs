//! Run configuration: a TOML file with sections mirroring the pipeline
//! stages. Command-line flags override file values; unknown keys are
//! rejected. The effective (merged) config is written next to the outputs so
//! a run can be reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gcn::{AdamConfig, Architecture, ModelConfig};
use crate::losses::{LossWeights, MeshType};
use crate::pipeline::AugmentationConfig;
use crate::preprocess::PreprocessConfig;

/// A value that is either derived automatically or pinned to a number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOrF64 {
    Auto,
    Fixed(f64),
}

impl AutoOrF64 {
    pub fn fixed(&self) -> Option<f64> {
        match self {
            AutoOrF64::Auto => None,
            AutoOrF64::Fixed(v) => Some(*v),
        }
    }
}

impl Serialize for AutoOrF64 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AutoOrF64::Auto => s.serialize_str("auto"),
            AutoOrF64::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AutoOrF64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = AutoOrF64;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a number or the string \"auto\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<AutoOrF64, E> {
                Ok(AutoOrF64::Fixed(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<AutoOrF64, E> {
                Ok(AutoOrF64::Fixed(v as f64))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<AutoOrF64, E> {
                Ok(AutoOrF64::Fixed(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<AutoOrF64, E> {
                if v.eq_ignore_ascii_case("auto") {
                    Ok(AutoOrF64::Auto)
                } else {
                    Err(E::custom(format!("expected \"auto\" or a number, got {v:?}")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemeshSection {
    pub iterations: usize,
    pub target_edge_length: AutoOrF64,
}

impl Default for RemeshSection {
    fn default() -> Self {
        Self {
            iterations: 5,
            target_edge_length: AutoOrF64::Auto,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothSection {
    pub steps: usize,
}

impl Default for SmoothSection {
    fn default() -> Self {
        Self { steps: 30 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub halve_every: usize,
    pub hidden: usize,
    pub order: usize,
    pub leaky_slope: f64,
    /// Hierarchy depth R for MGCN (ignored by SGCN).
    pub levels: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            halve_every: 50,
            hidden: 32,
            order: 3,
            leaky_slope: 0.01,
            levels: 3,
        }
    }
}

/// Loss overrides; unset fields fall back to the preset weight table and the
/// per-mesh BNF defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_pos: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_nrm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bnf_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bnf_sigma_center: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bnf_sigma_signal: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub mu: AutoOrF64,
    pub tolerance: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            mu: AutoOrF64::Auto,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Also report the nearest-vertex distance variant.
    pub nearest_vertex: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    pub outdir: PathBuf,
    pub arch: String,
    pub mesh_type: String,
    /// When set and recognized, selects the per-mesh refinement weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh_name: Option<String>,
    pub seed: u64,
    pub remesh: RemeshSection,
    pub smooth: SmoothSection,
    pub augment: AugmentationConfig,
    pub train: TrainSection,
    pub loss: LossSection,
    pub refine: RefineSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            ground_truth: None,
            outdir: PathBuf::from("out"),
            arch: "sgcn".into(),
            mesh_type: "noncad".into(),
            mesh_name: None,
            seed: 42,
            remesh: RemeshSection::default(),
            smooth: SmoothSection::default(),
            augment: AugmentationConfig::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            refine: RefineSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::parse(&self.arch)
    }

    pub fn mesh_type(&self) -> Result<MeshType> {
        MeshType::parse(&self.mesh_type)
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            remesh_iterations: self.remesh.iterations,
            target_edge_length: self.remesh.target_edge_length.fixed(),
            smooth_steps: self.smooth.steps,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let architecture = self.architecture()?;
        let levels = match architecture {
            Architecture::Sgcn => 0,
            Architecture::Mgcn => self.train.levels,
        };
        Ok(ModelConfig {
            architecture,
            hidden: self.train.hidden,
            order: self.train.order,
            leaky_slope: self.train.leaky_slope,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            levels,
            in_channels: 4,
            out_channels: 3,
        })
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: 1e-8,
            halve_every: self.train.halve_every,
        }
    }

    /// Preset weight row for (arch, type), with any explicit overrides.
    pub fn loss_weights(&self) -> Result<LossWeights> {
        let mut weights = LossWeights::preset(self.architecture()?, self.mesh_type()?);
        if let Some(pos) = &self.loss.lambda_pos {
            weights.lambda_pos = pos.clone();
        }
        if let Some(nrm) = self.loss.lambda_nrm {
            weights.lambda_nrm = nrm;
        }
        if let Some(reg) = self.loss.lambda_reg {
            weights.lambda_reg = reg;
        }
        // MGCN predicts levels+1 resolutions; the weight list must match
        let expected = match self.architecture()? {
            Architecture::Sgcn => 1,
            Architecture::Mgcn => self.train.levels + 1,
        };
        if weights.lambda_pos.len() != expected {
            return Err(Error::Config(format!(
                "lambda_pos has {} entries, the run needs {expected}",
                weights.lambda_pos.len()
            )));
        }
        Ok(weights)
    }

    /// Refinement weight: explicit > per-mesh table > mesh-type default.
    pub fn refine_mu(&self) -> Result<f64> {
        if let Some(mu) = self.refine.mu.fixed() {
            return Ok(mu);
        }
        if let Some(name) = &self.mesh_name {
            if let Some(mu) = crate::refine::mu_for_known_mesh(name) {
                return Ok(mu);
            }
        }
        Ok(crate::refine::default_mu(self.mesh_type()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_shipped_settings() {
        let c = RunConfig::default();
        assert_eq!(c.smooth.steps, 30);
        assert_eq!(c.remesh.iterations, 5);
        assert_eq!(c.augment.probability, 0.014);
        assert_eq!(c.augment.ring, 4);
        assert_eq!(c.augment.sets, 40);
        assert_eq!(c.train.steps, 100);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.halve_every, 50);
    }

    #[test]
    fn toml_roundtrip_and_auto_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut c = RunConfig::default();
        c.remesh.target_edge_length = AutoOrF64::Fixed(0.25);
        c.refine.mu = AutoOrF64::Auto;
        c.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.remesh.target_edge_length, AutoOrF64::Fixed(0.25));
        assert_eq!(back.refine.mu, AutoOrF64::Auto);
        assert_eq!(back.seed, c.seed);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "arch = \"sgcn\"\nnot_a_key = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));

        std::fs::write(&path, "[train]\nsteps = 5\nbogus = true\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn weight_row_selection() {
        let mut c = RunConfig::default();
        c.arch = "sgcn".into();
        c.mesh_type = "cad".into();
        let w = c.loss_weights().unwrap();
        assert_eq!(w.lambda_pos, vec![1.0]);
        assert_eq!((w.lambda_nrm, w.lambda_reg), (4.0, 4.0));

        c.loss.lambda_reg = Some(0.0);
        assert_eq!(c.loss_weights().unwrap().lambda_reg, 0.0);
    }

    #[test]
    fn mu_resolution_order() {
        let mut c = RunConfig::default();
        c.mesh_type = "cad".into();
        assert_eq!(c.refine_mu().unwrap(), 0.1);
        c.mesh_name = Some("Fandisk".into());
        assert_eq!(c.refine_mu().unwrap(), 0.01);
        c.refine.mu = AutoOrF64::Fixed(2.5);
        assert_eq!(c.refine_mu().unwrap(), 2.5);
    }
}
