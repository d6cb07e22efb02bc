use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use posegan::data::SyntheticFaceConfig;
use posegan::evaluation::{AblationVariant, OracleConfig, DEFAULT_FEATURE_DIM};
use posegan::networks::ArchConfig;
use posegan::training::TrainConfig;

use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory (split manifests, images, optional shape model).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub seed: u64,
    pub synthetic: SyntheticFaceConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: DataSource::Synthetic, dir: None, seed: 1, synthetic: SyntheticFaceConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub verification_folds: usize,
    /// Matched pairs per fold; as many non-matched pairs are drawn.
    pub verification_pairs: usize,
    pub fid_feature_dim: usize,
    pub sweep_codes: usize,
    pub variants: Vec<AblationVariant>,
    pub oracle: OracleConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 11,
            verification_folds: 10,
            verification_pairs: 30,
            fid_feature_dim: DEFAULT_FEATURE_DIM,
            sweep_codes: 9,
            variants: AblationVariant::ALL.to_vec(),
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub data: DataConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut data = DataConfig::default();
        let model = match profile {
            Profile::Desk => ArchConfig::desk(),
            Profile::Paper => {
                data.synthetic.image_size = 96;
                data.synthetic.source_size = 100;
                ArchConfig::paper()
            }
        };
        RunConfig { profile, data, model, train: TrainConfig::default(), eval: EvalConfig::default() }
    }

    /// Profile defaults overlaid with the file's keys. The profile comes from
    /// `--profile`, then the file's `profile` key, then `desk`.
    pub fn load(path: Option<&Path>, profile: Option<Profile>) -> Result<Self, Failure> {
        let user: toml::Table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse().map_err(|e| Failure::usage(format!("config {}: {e}", p.display())))?
            }
        };
        let from_file = match user.get("profile") {
            Some(v) => Some(
                Profile::deserialize(v.clone()).map_err(|e| Failure::usage(format!("config key 'profile': {e}")))?,
            ),
            None => None,
        };
        let profile = profile.or(from_file).unwrap_or(Profile::Desk);
        let mut base = toml::Table::try_from(RunConfig::for_profile(profile))
            .map_err(|e| Failure::runtime(format!("serialising defaults: {e}")))?;
        merge(&mut base, user);
        base.insert("profile".into(), toml::Value::try_from(profile).expect("enum serialises"));
        let mut cfg: RunConfig = base
            .try_into()
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.map_or("<defaults>".into(), |p| p.display().to_string()))))?;
        if let (Some(dir), Some(p)) = (&cfg.data.dir, path) {
            if dir.is_relative() {
                cfg.data.dir = Some(p.parent().unwrap_or(Path::new(".")).join(dir));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if self.data.source == DataSource::Directory && self.data.dir.is_none() {
            return Err(Failure::usage("data.source = \"directory\" needs data.dir"));
        }
        if self.data.synthetic.image_size != self.model.image_size {
            return Err(Failure::usage(format!(
                "data.synthetic.image_size {} differs from model.image_size {}",
                self.data.synthetic.image_size, self.model.image_size
            )));
        }
        if self.eval.verification_folds < 2 || self.eval.verification_pairs == 0 || self.eval.sweep_codes == 0 {
            return Err(Failure::usage("eval needs at least 2 folds, 1 pair per fold and 1 sweep code"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = RunConfig::for_profile(p);
            let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn file_keys_override_profile_defaults() {
        let (_d, p) = write("[train]\nsteps = 5\n[train.weights.generator]\npixel = 3.0\n");
        let c = RunConfig::load(Some(&p), None).unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.weights.generator.pixel, 3.0);
        assert_eq!(c.train.weights.generator.pose, 0.1);
        assert_eq!(c.model, ArchConfig::desk());
        let paper = RunConfig::load(Some(&p), Some(Profile::Paper)).unwrap();
        assert_eq!(paper.model.feature_dim, 320);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[train]\nstepz = 5\n", "bogus = 1\n", "[model]\nwidth = 3\n"] {
            let (_d, p) = write(text);
            let err = RunConfig::load(Some(&p), None).unwrap_err();
            assert_eq!(err.code, 2, "{text}: {}", err.message);
        }
    }
}
