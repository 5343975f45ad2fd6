//! JSON run configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use masterface::data::SynthSpec;
use masterface::{FeatureMap, LveConfig, Split};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GallerySource {
    /// Generate with the synthetic face model (`synth` writes it to disk).
    Synth(SynthSpec),
    /// An existing `identity,split,path` manifest, relative to the config file.
    Manifest(PathBuf),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryRole {
    #[default]
    Target,
    Auxiliary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Latent dimension.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherConfig {
    pub tag: String,
    /// Embedding dimension.
    pub e: usize,
    #[serde(default)]
    pub feature_map: FeatureMap,
    /// Which gallery the matcher is trained on.
    #[serde(default)]
    pub gallery: GalleryRole,
    #[serde(default = "world")]
    pub split: Split,
}

fn world() -> Split {
    Split::World
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LveSection {
    #[serde(default = "population")]
    pub population: usize,
    pub iterations: usize,
    #[serde(default = "sigma0")]
    pub sigma0: f64,
    pub seed: u64,
    #[serde(default)]
    pub record_wall_time: bool,
    /// Write a resumable snapshot every this many iterations (0 = only at the end).
    #[serde(default = "snapshot_every")]
    pub snapshot_every: usize,
}

fn population() -> usize {
    22
}

fn sigma0() -> f64 {
    0.3
}

fn snapshot_every() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "dev")]
    pub calibration_split: Split,
    #[serde(default = "eval")]
    pub split: Split,
    #[serde(default = "bins")]
    pub bins: usize,
    #[serde(default = "stride")]
    pub trajectory_stride: usize,
    /// Size of the random-latent baseline; omitted or 0 skips it.
    #[serde(default)]
    pub baseline_samples: usize,
}

fn dev() -> Split {
    Split::Dev
}

fn eval() -> Split {
    Split::Eval
}

fn bins() -> usize {
    50
}

fn stride() -> usize {
    20
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            calibration_split: dev(),
            split: eval(),
            bins: bins(),
            trajectory_stride: stride(),
            baseline_samples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub gallery: GallerySource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary_gallery: Option<GallerySource>,
    pub generator: GeneratorConfig,
    pub matchers: Vec<MatcherConfig>,
    /// Tag of the matcher scored inside the search loop.
    pub attack_matcher: String,
    pub lve: LveSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative manifest paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for src in std::iter::once(&mut cfg.gallery).chain(cfg.auxiliary_gallery.as_mut()) {
            if let GallerySource::Manifest(p) = src {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        for (name, src) in std::iter::once(("gallery", &self.gallery)).chain(
            self.auxiliary_gallery
                .as_ref()
                .map(|g| ("auxiliary_gallery", g)),
        ) {
            if let GallerySource::Synth(spec) = src {
                spec.validate()
                    .map_err(|e| CliError::Config(format!("{name}.synth: {e}")))?;
            }
        }
        if self.generator.k == 0 {
            return bad("generator.k must be at least 1".into());
        }
        if self.matchers.is_empty() {
            return bad("matchers must list at least one matcher".into());
        }
        let mut tags = BTreeSet::new();
        for (i, m) in self.matchers.iter().enumerate() {
            if m.tag.is_empty()
                || !m
                    .tag
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return bad(format!(
                    "matchers[{i}].tag `{}` must be non-empty [A-Za-z0-9_-]",
                    m.tag
                ));
            }
            if !tags.insert(m.tag.as_str()) {
                return bad(format!("matchers[{i}].tag `{}` is not unique", m.tag));
            }
            if m.e == 0 {
                return bad(format!("matchers[{i}].e must be at least 1"));
            }
            if m.gallery == GalleryRole::Auxiliary && self.auxiliary_gallery.is_none() {
                return bad(format!(
                    "matchers[{i}] trains on the auxiliary gallery but auxiliary_gallery is not set"
                ));
            }
        }
        if !tags.contains(self.attack_matcher.as_str()) {
            return bad(format!(
                "attack_matcher `{}` is not a listed matcher",
                self.attack_matcher
            ));
        }
        self.lve_config()
            .validate()
            .map_err(|e| CliError::Config(format!("lve: {e}")))?;
        if self.eval.bins == 0 {
            return bad("eval.bins must be at least 1".into());
        }
        if self.eval.trajectory_stride == 0 {
            return bad("eval.trajectory_stride must be at least 1".into());
        }
        if self.eval.calibration_split == self.eval.split {
            return bad("eval.calibration_split and eval.split must differ".into());
        }
        Ok(())
    }

    pub fn lve_config(&self) -> LveConfig {
        LveConfig {
            population: self.lve.population,
            iterations: self.lve.iterations,
            latent_dim: self.generator.k,
            sigma0: self.lve.sigma0,
            seed: self.lve.seed,
            record_wall_time: self.lve.record_wall_time,
        }
    }

    pub fn matcher(&self, tag: &str) -> Option<&MatcherConfig> {
        self.matchers.iter().find(|m| m.tag == tag)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "gallery": {"manifest": "m.csv"},
        "generator": {"k": 4},
        "matchers": [{"tag": "a", "e": 3}],
        "attack_matcher": "a",
        "lve": {"iterations": 5, "seed": 1}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.lve.population, 22);
        assert_eq!(c.eval.bins, 50);
        assert_eq!(c.matchers[0].split, Split::World);
        assert_eq!(c.digest().len(), 64);
    }

    #[test]
    fn errors_are_config_errors() {
        let e = RunConfig::parse(&MINIMAL.replace("\"a\",\n", "\"b\",\n")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e =
            RunConfig::parse(&MINIMAL.replace("\"k\": 4", "\"k\": 4, \"oops\": 1")).unwrap_err();
        assert!(e.to_string().contains("oops"), "{e}");
        assert!(e.to_string().contains("line"), "{e}");
    }
}
