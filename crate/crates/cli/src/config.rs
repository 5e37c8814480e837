//! Pipeline configuration: one TOML file with every key defaulted, plus the
//! small set of command-line overrides (weighting, resolution, sector).
//!
//! The resolved configuration — after overrides and the resolution preset
//! have been applied — is what gets hashed into `run_manifest.json`, so two
//! runs with the same effective settings produce the same hash.

use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use povmap_core::convnet::{NetworkSpec, TrainConfig};
use povmap_core::survey::PovertyLines;
use povmap_core::synthworld::WorldConfig;
use povmap_core::tiler::WeightScheme;

/// Imagery resolution preset. The preset fixes the tile edge length,
/// overriding whatever `world.pixels_per_cell` says in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// 64-pixel tiles: the sub-meter imagery analog.
    High,
    /// 32-pixel tiles: the 3-5 m imagery analog.
    #[default]
    Medium,
}

impl Resolution {
    pub fn pixels_per_cell(self) -> u32 {
        match self {
            Resolution::High => 64,
            Resolution::Medium => 32,
        }
    }
}

/// Which statistic colors the choropleth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MapMetric {
    /// Predicted share below the well-being line — the headline rate.
    #[default]
    WellbeingRate,
    /// Predicted share below the minimum well-being line.
    MinRate,
    /// The benchmark well-being rate, for visual comparison.
    Benchmark,
}

impl MapMetric {
    pub fn name(self) -> &'static str {
        match self {
            MapMetric::WellbeingRate => "wellbeing_rate",
            MapMetric::MinRate => "min_rate",
            MapMetric::Benchmark => "benchmark",
        }
    }
}

/// Sector restriction applied to the map outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SectorChoice {
    #[default]
    All,
    Urban,
    Rural,
}

/// Network architecture for the tile classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    MiniGooglenet,
    MiniVgg,
}

impl Architecture {
    /// The three-bucket classifier spec for the given input shape.
    pub fn spec(self, input: Vec<usize>) -> NetworkSpec {
        match self {
            Architecture::MiniGooglenet => NetworkSpec::mini_googlenet(input, 3),
            Architecture::MiniVgg => NetworkSpec::mini_vgg(input, 3),
        }
    }
}

/// `[train]` section: the core training knobs plus the architecture choice.
/// When `mode = "fine_tune"` the trunk is first pretrained on the landcover
/// proxy task, then fine-tuned with the leading layers frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    pub architecture: Architecture,
}

/// `[map]` section: what the choropleth shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MapSection {
    pub metric: MapMetric,
    pub sector: SectorChoice,
}

/// The whole pipeline configuration as written in TOML. Every key has a
/// default, so an empty file is a valid configuration (apart from the
/// output-directory distinctness rule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Where artifacts land, resolved relative to the config file.
    pub output_dir: PathBuf,
    /// Tile aggregation weighting scheme.
    pub weighting: WeightScheme,
    /// Imagery resolution preset; fixes `world.pixels_per_cell`.
    pub resolution: Resolution,
    /// Share of in-survey municipalities held out for validation.
    pub validation_fraction: f64,
    /// Seed for the validation draw.
    pub split_seed: u64,
    pub world: WorldConfig,
    pub lines: PovertyLines,
    pub train: TrainSection,
    pub map: MapSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("out"),
            weighting: WeightScheme::default(),
            resolution: Resolution::default(),
            validation_fraction: 0.10,
            split_seed: 42,
            world: WorldConfig::default(),
            lines: PovertyLines::default(),
            train: TrainSection::default(),
            map: MapSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            bail!("config field `output_dir` must not be empty");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bail!(
                "config field `validation_fraction` is {}, must lie in (0, 1)",
                self.validation_fraction
            );
        }
        self.world.validate().context("config section [world]")?;
        self.lines.validate().context("config section [lines]")?;
        self.train
            .config
            .validate()
            .context("config section [train]")?;
        Ok(())
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub weighting: Option<WeightScheme>,
    pub resolution: Option<Resolution>,
    pub sector: Option<SectorChoice>,
}

/// A validated configuration with its filesystem context and content hash.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: PipelineConfig,
    /// Absolute-or-relative directory all artifacts are written under.
    pub output_dir: PathBuf,
    /// Hex SHA-256 of the canonical JSON form of `config`.
    pub config_hash: String,
}

fn lexically_normalized(path: &Path) -> PathBuf {
    path.components()
        .filter(|c| !matches!(c, Component::CurDir))
        .collect()
}

/// Parse, override, and validate a configuration file. The resolution preset
/// is folded into `world.pixels_per_cell` here, so downstream code never
/// consults the preset again.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut config: PipelineConfig = toml::from_str(&text)
        .with_context(|| format!("parsing config file {}", path.display()))?;

    if let Some(w) = overrides.weighting {
        config.weighting = w;
    }
    if let Some(r) = overrides.resolution {
        config.resolution = r;
    }
    if let Some(s) = overrides.sector {
        config.map.sector = s;
    }
    config.world.pixels_per_cell = config.resolution.pixels_per_cell();
    config.validate()?;

    let config_dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let output_dir = config_dir.join(&config.output_dir);
    if lexically_normalized(&output_dir) == lexically_normalized(&config_dir) {
        bail!(
            "output_dir `{}` resolves to the directory holding the config file; \
             artifacts must go to a distinct directory",
            config.output_dir.display()
        );
    }

    let config_hash = hash_config(&config);
    Ok(ResolvedConfig {
        config,
        output_dir,
        config_hash,
    })
}

/// SHA-256 over the canonical JSON serialization (struct field order, so the
/// same settings always hash the same way).
pub fn hash_config(config: &PipelineConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use povmap_core::convnet::TrainMode;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("pipeline.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn empty_file_yields_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "");
        let resolved = load_config(&path, &Overrides::default()).unwrap();
        assert_eq!(resolved.config.validation_fraction, 0.10);
        assert_eq!(resolved.config.weighting, WeightScheme::Area);
        assert_eq!(resolved.config.world.pixels_per_cell, 32);
        assert_eq!(resolved.output_dir, dir.path().join("out"));
    }

    #[test]
    fn sections_and_flattened_train_keys_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
            output_dir = "artifacts"
            weighting = "population"
            resolution = "high"

            [world]
            seed = 7
            grid_width = 30
            grid_height = 30
            n_municipalities = 40

            [train]
            epochs = 3
            mode = "fine_tune"
            architecture = "mini_vgg"

            [map]
            metric = "min_rate"
            sector = "urban"
            "#,
        );
        let resolved = load_config(&path, &Overrides::default()).unwrap();
        let c = &resolved.config;
        assert_eq!(c.weighting, WeightScheme::Population);
        assert_eq!(c.world.seed, 7);
        // The high preset pins the tile size regardless of the world table.
        assert_eq!(c.world.pixels_per_cell, 64);
        assert_eq!(c.train.config.epochs, 3);
        assert_eq!(c.train.config.mode, TrainMode::FineTune);
        assert_eq!(c.train.architecture, Architecture::MiniVgg);
        assert_eq!(c.map.metric, MapMetric::MinRate);
        assert_eq!(c.map.sector, SectorChoice::Urban);
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "weighting = \"area\"\nresolution = \"medium\"\n");
        let overrides = Overrides {
            weighting: Some(WeightScheme::Population),
            resolution: Some(Resolution::High),
            sector: Some(SectorChoice::Rural),
        };
        let resolved = load_config(&path, &overrides).unwrap();
        assert_eq!(resolved.config.weighting, WeightScheme::Population);
        assert_eq!(resolved.config.resolution, Resolution::High);
        assert_eq!(resolved.config.world.pixels_per_cell, 64);
        assert_eq!(resolved.config.map.sector, SectorChoice::Rural);
    }

    #[test]
    fn output_dir_must_differ_from_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "output_dir = \".\"\n");
        let err = load_config(&path, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("distinct"), "{err}");
    }

    #[test]
    fn parse_errors_name_the_file_and_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "validation_fraction = \"lots\"\n");
        let err = load_config(&path, &Overrides::default()).unwrap_err();
        let chain = format!("{err:#}");
        assert!(chain.contains("pipeline.toml"), "{chain}");
        assert!(chain.contains("line 1"), "{chain}");
    }

    #[test]
    fn invalid_section_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[world]\nsignal_strength = 2.5\n");
        let err = load_config(&path, &Overrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("signal_strength"), "{err:#}");
    }

    #[test]
    fn hash_tracks_effective_settings() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "");
        let a = load_config(&path, &Overrides::default()).unwrap();
        let b = load_config(&path, &Overrides::default()).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        let high = Overrides {
            resolution: Some(Resolution::High),
            ..Overrides::default()
        };
        let c = load_config(&path, &high).unwrap();
        assert_ne!(a.config_hash, c.config_hash);
    }
}
