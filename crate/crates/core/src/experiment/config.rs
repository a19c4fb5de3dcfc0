//! TOML experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classic::ClassicConfig;
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::metrics::Roi;
use crate::sampler::SamplerConfig;
use crate::simulation::{MaskSpec, PhantomSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroFilled,
    CgSpirit,
    GdSpirit,
    SpiritDiffusion,
    VeSde,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ZeroFilled,
        Method::CgSpirit,
        Method::GdSpirit,
        Method::SpiritDiffusion,
        Method::VeSde,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero-filled",
            Method::CgSpirit => "cg-spirit",
            Method::GdSpirit => "gd-spirit",
            Method::SpiritDiffusion => "spirit-diffusion",
            Method::VeSde => "ve-sde",
        }
    }

    pub fn needs_kernel(self) -> bool {
        matches!(self, Method::CgSpirit | Method::GdSpirit | Method::SpiritDiffusion)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoilSection {
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiritSection {
    pub kernel_size: (usize, usize),
    pub tikhonov: f64,
}

impl Default for SpiritSection {
    fn default() -> Self {
        SpiritSection { kernel_size: (5, 5), tikhonov: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicSection {
    pub lambda_dc: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub step_eta: f64,
    pub step_lambda: f64,
    /// Replace the gradient-descent steps by a safe fraction of the
    /// power-iteration stability limit.
    #[serde(default = "yes")]
    pub auto_step: bool,
}

fn yes() -> bool {
    true
}

impl ClassicSection {
    pub fn solver(&self) -> ClassicConfig {
        ClassicConfig {
            lambda_dc: self.lambda_dc,
            max_iters: self.max_iters,
            tol: self.tol,
            step_eta: self.step_eta,
            step_lambda: self.step_lambda,
        }
    }
}

impl Default for ClassicSection {
    fn default() -> Self {
        let c = ClassicConfig::default();
        ClassicSection {
            lambda_dc: c.lambda_dc,
            max_iters: c.max_iters,
            tol: c.tol,
            step_eta: c.step_eta,
            step_lambda: c.step_lambda,
            auto_step: true,
        }
    }
}

/// Training set for the linear score: phantoms of the experiment's kind and
/// size with seeds `first_seed .. first_seed + n_train`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub n_train: usize,
    pub first_seed: u64,
    pub ridge: f64,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection { n_train: 40, first_seed: 1000, ridge: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsmSource {
    /// The simulation's ground-truth maps.
    Reference,
    /// Ground-truth maps degraded by a box filter.
    BoxSmoothed,
    /// Maps estimated from the ACS block.
    Lowres,
}

/// Sensitivities handed to the reconstructions. The score is always fitted
/// on the reference maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsmSection {
    pub source: CsmSource,
    #[serde(default = "default_box")]
    pub box_size: usize,
}

fn default_box() -> usize {
    9
}

impl Default for CsmSection {
    fn default() -> Self {
        CsmSection { source: CsmSource::Reference, box_size: 9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    /// Error maps are windowed to `[0, error_window]`.
    pub error_window: f64,
    /// Nearest-neighbour magnification of the ROI zoom.
    pub zoom_factor: usize,
    /// Zoom rectangle; defaults to the centre of the evaluation ROI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoom: Option<Roi>,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection { error_window: 0.2, zoom_factor: 4, zoom: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub noise_std: f64,
    pub phantom: PhantomSpec,
    pub coils: CoilSection,
    pub mask: MaskSpec,
    #[serde(default)]
    pub spirit: SpiritSection,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub classic: ClassicSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub csm: CsmSection,
    /// Evaluation rectangle; defaults to the bounding box of the phantom.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<Roi>,
    #[serde(default)]
    pub export: ExportSection,
    /// Results recorded by a previous run; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<toml::Table>,
}

/// Line (1-based) of the first `key =` or `[key]` occurrence.
fn line_of(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| {
        let t = l.trim_start();
        t.starts_with(&format!("[{key}]"))
            || t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn at(src: &str, key: &str, msg: String) -> Error {
    match line_of(src, key) {
        Some(l) => Error::Config(format!("line {l}: {msg}")),
        None => Error::Config(msg),
    }
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate(src)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_toml(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Serialized form without provenance.
    pub fn to_toml(&self) -> Result<String> {
        let mut c = self.clone();
        c.provenance = None;
        toml::to_string(&c).map_err(|e| Error::Config(e.to_string()))
    }

    fn validate(&self, src: &str) -> Result<()> {
        if self.methods.is_empty() {
            return Err(at(src, "methods", "methods must not be empty".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(at(src, "methods", "methods must not repeat".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(at(src, "noise_std", format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.coils.count == 0 {
            return Err(at(src, "coils", "coil count must be positive".into()));
        }
        let (kr, kc) = self.spirit.kernel_size;
        if kr % 2 == 0 || kc % 2 == 0 || !(self.spirit.tikhonov >= 0.0) {
            return Err(at(src, "spirit", format!("invalid spirit section {:?}", self.spirit)));
        }
        self.sampler.validate().map_err(|e| at(src, "sampler", e.to_string()))?;
        self.classic.solver().validate().map_err(|e| at(src, "classic", e.to_string()))?;
        if self.score.n_train < 2 || !(self.score.ridge > 0.0) {
            return Err(at(src, "score", "score needs n_train >= 2 and ridge > 0".into()));
        }
        let b = self.csm.box_size;
        if b == 0 || b % 2 == 0 {
            return Err(at(src, "csm", format!("box_size must be odd and positive, got {b}")));
        }
        if !(self.export.error_window > 0.0) || self.export.zoom_factor == 0 {
            return Err(at(src, "export", "error_window and zoom_factor must be positive".into()));
        }
        let diffusion = self.methods.iter().any(|m| matches!(m, Method::SpiritDiffusion | Method::VeSde));
        if diffusion {
            let s = self.schedule;
            if !(s.beta_min > 0.0 && s.beta_max >= s.beta_min && s.eta0 >= 0.0 && s.n_steps >= 1) {
                return Err(at(src, "schedule", format!("invalid schedule {s:?}")));
            }
            if self.sampler.n_steps != s.n_steps {
                return Err(at(
                    src,
                    "sampler",
                    format!("sampler.n_steps = {} differs from schedule.n_steps = {}", self.sampler.n_steps, s.n_steps),
                ));
            }
        }
        if self.methods.contains(&Method::VeSde) && self.schedule.eta0 != 0.0 {
            return Err(at(src, "schedule", "ve-sde needs eta0 = 0; run it from a separate config".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
output_dir = "out"
methods = ["zero-filled"]

[phantom]
size = [32, 32]
kind = "shepp-logan"
seed = 1

[coils]
count = 4
seed = 2

[mask]
pattern = "variable-density-random"
acceleration = 4.0
acs = [8, 8]
seed = 3
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.methods, vec![Method::ZeroFilled]);
        assert_eq!(cfg.spirit, SpiritSection::default());
        assert_eq!(cfg.schedule, ScheduleParams::default());
        assert_eq!(cfg.csm.source, CsmSource::Reference);
        assert!(cfg.roi.is_none());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.roi = Some(Roi { row0: 1, col0: 2, rows: 20, cols: 21 });
        cfg.methods = Method::ALL.to_vec();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let bad = MINIMAL.replace("methods = [\"zero-filled\"]", "methods = []");
        let msg = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");

        let typo = MINIMAL.replace("seed = 2", "sed = 2");
        let msg = ExperimentConfig::from_toml(&typo).unwrap_err().to_string();
        assert!(msg.contains("line"), "{msg}");

        let bad = MINIMAL.replace("zero-filled", "magic");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_and_sampler_steps_must_agree() {
        let src = format!("{MINIMAL}\n[schedule]\nbeta_min = 0.01\nbeta_max = 20.0\nn_steps = 10\n")
            .replace("[\"zero-filled\"]", "[\"spirit-diffusion\"]");
        assert!(ExperimentConfig::from_toml(&src).is_err());
    }
}
