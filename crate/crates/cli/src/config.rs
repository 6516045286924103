//! Pipeline configuration: one TOML file, every field optional.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vesselseg::motion::DemonsConfig;
use vesselseg::net::{ArchOptions, TrainConfig, REFERENCE_DESCRIPTOR, REFERENCE_FOV, REFERENCE_ROI};
use vesselseg::phantom::PhantomSpec;
use vesselseg::segment::DEFAULT_MIN_COMPONENT;

/// A user-facing input or configuration problem (exit code 1).
#[derive(Debug)]
pub struct ValidationError(pub Vec<String>);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join("; "))
    }
}

impl std::error::Error for ValidationError {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ValidationError(vec![msg.into()]).into()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub demons: DemonsConfig,
    pub normalize: NormalizeConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub postprocess: PostprocessConfig,
    pub analysis: AnalysisConfig,
    pub phantom: PhantomSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeConfig {
    pub lo_pct: f64,
    pub hi_pct: f64,
    /// Isotropic target spacing in µm; no resampling when absent.
    pub target_spacing_um: Option<f64>,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            lo_pct: 1.0,
            hi_pct: 99.0,
            target_spacing_um: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub descriptor: String,
    pub fov: [usize; 3],
    pub roi: [usize; 3],
    pub channels_early: usize,
    pub channels_late: usize,
    pub hidden_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        let a = ArchOptions::default();
        Self {
            descriptor: REFERENCE_DESCRIPTOR.into(),
            fov: REFERENCE_FOV,
            roi: REFERENCE_ROI,
            channels_early: a.channels_early,
            channels_late: a.channels_late,
            hidden_width: a.hidden_width,
        }
    }
}

impl NetConfig {
    pub fn arch_options(&self, dropout: f64) -> ArchOptions {
        ArchOptions {
            fov: self.fov,
            roi: self.roi,
            channels_early: self.channels_early,
            channels_late: self.channels_late,
            hidden_width: self.hidden_width,
            dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Training patches drawn from each training volume.
    pub train_patches: usize,
    /// Validation patches drawn from each validation volume.
    pub val_patches: usize,
    /// Fraction of patches whose ROI contains foreground.
    pub balance: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            train_patches: 2000,
            val_patches: 500,
            balance: 0.5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub min_component: usize,
    /// Stochastic passes for the uncertainty map; 0 disables it.
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            min_component: DEFAULT_MIN_COMPONENT,
            mc_samples: 0,
            mc_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Segments with mean diameter strictly below this count as capillaries.
    pub capillary_max_diameter_um: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            capillary_max_diameter_um: vesselseg::morphometry::CAPILLARY_MAX_DIAMETER_UM,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Checks every numeric field; messages name the offending field.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        let d = &self.demons;
        check(d.sigma > 0.0, "demons.sigma: must be > 0");
        check(d.max_iters >= 1, "demons.max_iters: must be >= 1");
        check(d.mse_rel_tol >= 0.0, "demons.mse_rel_tol: must be >= 0");
        check(d.step_cap > 0.0, "demons.step_cap: must be > 0");

        let n = &self.normalize;
        check(
            (0.0..100.0).contains(&n.lo_pct) && n.hi_pct > n.lo_pct && n.hi_pct <= 100.0,
            "normalize.lo_pct/hi_pct: need 0 <= lo_pct < hi_pct <= 100",
        );
        check(
            n.target_spacing_um.is_none_or(|s| s > 0.0 && s.is_finite()),
            "normalize.target_spacing_um: must be > 0",
        );

        let net = &self.net;
        check(net.fov.iter().all(|&v| v > 0), "net.fov: entries must be positive");
        check(net.roi.iter().all(|&v| v > 0), "net.roi: entries must be positive");
        check(
            (0..3).all(|a| net.roi[a] <= net.fov[a] && (net.fov[a] - net.roi[a]) % 2 == 0),
            "net.roi: must fit centred inside net.fov",
        );
        check(net.channels_early > 0 && net.channels_late > 0, "net.channels_*: must be positive");
        check(net.hidden_width > 0, "net.hidden_width: must be positive");

        let t = &self.train;
        check(t.batch_size >= 1, "train.batch_size: must be >= 1");
        check(t.epochs + t.finetune_epochs >= 1, "train.epochs: at least one epoch is required");
        check(t.lr >= 0.0 && t.lr.is_finite(), "train.lr: must be finite and >= 0");
        check(t.finetune_lr >= 0.0 && t.finetune_lr.is_finite(), "train.finetune_lr: must be finite and >= 0");
        check((0.0..1.0).contains(&t.dropout), "train.dropout: must lie in [0, 1)");

        let s = &self.sampling;
        check(s.train_patches >= 1, "sampling.train_patches: must be >= 1");
        check(s.val_patches >= 1, "sampling.val_patches: must be >= 1");
        check((0.0..=1.0).contains(&s.balance), "sampling.balance: must lie in [0, 1]");

        check(self.postprocess.min_component >= 1, "postprocess.min_component: must be >= 1");
        check(
            self.analysis.capillary_max_diameter_um > 0.0,
            "analysis.capillary_max_diameter_um: must be > 0",
        );
        if let Err(e) = self.phantom.validate() {
            errs.push(format!("phantom: {e}"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ValidationError(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = PipelineConfig::default();
        let text = c.to_toml();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn edited_round_trips() {
        let mut c = PipelineConfig::default();
        c.paths.input = Some("a/b.tif".into());
        c.normalize.target_spacing_um = Some(1.0);
        c.train.lr = 3.3e-5;
        c.phantom.noise_sigma = 0.1 + 0.2;
        c.net.descriptor = "C 3x3x3 - P - NN".into();
        let back = PipelineConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(PipelineConfig::parse(&back.to_toml()).unwrap(), back);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = PipelineConfig::parse("[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 1000);
        assert_eq!(c.demons.sigma, 1.3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::parse("[train]\nepoch = 3\n").is_err());
        assert!(PipelineConfig::parse("[bogus]\n").is_err());
    }

    #[test]
    fn messages_name_fields() {
        let mut c = PipelineConfig::default();
        c.train.batch_size = 0;
        c.normalize.lo_pct = 99.5;
        c.net.roi = [4, 5, 1];
        let e = c.validate().unwrap_err();
        let all = e.to_string();
        assert!(all.contains("train.batch_size"));
        assert!(all.contains("normalize.lo_pct"));
        assert!(all.contains("net.roi"));
        assert_eq!(e.0.len(), 3);
    }
}
