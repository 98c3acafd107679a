//! Run configuration: TOML with a versioned schema, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nas_core::data::DatasetConfig;
use nas_core::decode::{CellDecode, DecodeOptions, PathDecode};
use nas_core::evo::EvoConfig;
use nas_core::space::{SearchSpace, Topology, DEFAULT_PATH_CAP};
use nas_core::supernet::NetConfig;
use nas_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Synthetic data: split sizes plus the generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub object_rate: f64,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub ellipses: bool,
    pub polygons: bool,
    pub edge_clipping: f64,
    pub noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = DatasetConfig::default();
        Self {
            train: 512,
            valid: 128,
            test: 128,
            height: g.height,
            width: g.width,
            object_rate: g.object_rate,
            max_objects: g.max_objects,
            min_radius: g.min_radius,
            max_radius: g.max_radius,
            ellipses: g.ellipses,
            polygons: g.polygons,
            edge_clipping: g.edge_clipping,
            noise: g.noise,
        }
    }
}

impl DataSection {
    pub fn generator(&self) -> DatasetConfig {
        DatasetConfig {
            height: self.height,
            width: self.width,
            n_patches: self.train,
            object_rate: self.object_rate,
            max_objects: self.max_objects,
            min_radius: self.min_radius,
            max_radius: self.max_radius,
            ellipses: self.ellipses,
            polygons: self.polygons,
            edge_clipping: self.edge_clipping,
            noise: self.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub cell: CellDecode,
    pub k: usize,
    pub paths: PathDecode,
    pub path_cap: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeOptions::default();
        Self {
            cell: d.cell,
            k: d.k,
            paths: d.paths,
            path_cap: d.path_cap,
        }
    }
}

impl DecodeSection {
    pub fn options(&self) -> DecodeOptions {
        DecodeOptions {
            cell: self.cell,
            k: self.k,
            paths: self.paths,
            path_cap: self.path_cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveSection {
    pub pop_size: usize,
    pub generations: usize,
    pub workers: usize,
    pub mutation_rate: f64,
    pub topology_move_prob: f64,
    pub aging_fraction: f64,
    pub elitism: bool,
    pub tournament: usize,
    /// Training epochs per evaluated genotype.
    pub budget_epochs: usize,
    /// Genotypes whose estimated training footprint exceeds this are rejected unevaluated.
    pub memory_budget_mb: Option<f64>,
}

impl Default for EvolveSection {
    fn default() -> Self {
        let e = EvoConfig::default();
        Self {
            pop_size: e.pop_size,
            generations: e.generations,
            workers: e.workers,
            mutation_rate: e.mutation_rate,
            topology_move_prob: e.topology_move_prob,
            aging_fraction: e.aging_fraction,
            elitism: e.elitism,
            tournament: e.tournament,
            budget_epochs: e.budget_epochs,
            memory_budget_mb: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub topology: String,
    /// `base`, `large` or a comma-separated op list.
    pub space: String,
    /// Encoder depth (UNet levels, UNet++ levels or chain length); preset default if unset.
    pub depth: Option<usize>,
    pub base_channels: usize,
    pub epochs_search: usize,
    pub epochs_retrain: usize,
    pub batch: usize,
    pub pc_k: usize,
    pub edge_norm: bool,
    pub alpha_start_epoch: usize,
    pub lr0: f64,
    pub gaea_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub class_weights: [f64; 2],
    /// Retrain checkpoint selection ignores epochs before this one.
    pub select_from_epoch: usize,
    pub precision: Precision,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub decode: DecodeSection,
    pub evolve: EvolveSection,
    pub random_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            topology: "darts-unet".into(),
            space: "base".into(),
            depth: None,
            base_channels: 16,
            epochs_search: 20,
            epochs_retrain: 30,
            batch: 2,
            pc_k: 8,
            edge_norm: true,
            alpha_start_epoch: 15,
            lr0: 0.01,
            gaea_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            class_weights: [1.0, 5.0],
            select_from_epoch: 10,
            precision: Precision::F32,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            decode: DecodeSection::default(),
            evolve: EvolveSection::default(),
            random_samples: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text)?;
        match raw.get("schema_version").and_then(|v| v.as_integer()) {
            Some(v) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => bail!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"),
            None => bail!("missing schema_version (expected {SCHEMA_VERSION})"),
        }
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Checks everything that can be checked without computing, including the topology.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.schema_version == SCHEMA_VERSION, "unsupported schema_version {}", self.schema_version);
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("epochs_search", self.epochs_search),
            ("epochs_retrain", self.epochs_retrain),
            ("batch", self.batch),
            ("pc_k", self.pc_k),
            ("data.train", self.data.train),
            ("data.valid", self.data.valid),
            ("data.test", self.data.test),
            ("decode.k", self.decode.k),
            ("random_samples", self.random_samples),
        ] {
            ensure!(v > 0, "{name} must be positive");
        }
        ensure!(self.gaea_lr > 0.0 && self.lr0 >= 0.0, "learning rates must be positive");
        self.data.generator().validate()?;
        let topo = self.topology()?;
        if topo.cell.style == nas_core::space::CellStyle::Resnext {
            ensure!(
                !self.edge_norm,
                "edge normalization does not apply to {} (each block has a single input); set edge_norm = false",
                self.topology
            );
        }
        let div = topo.resolution_divisor();
        let (h, w) = (self.data.height, self.data.width);
        ensure!(
            h % div == 0 && w % div == 0,
            "patch size {h}x{w} must be divisible by {div} for topology {}",
            self.topology
        );
        ensure!(
            self.base_channels.div_ceil(self.pc_k) >= 1 && self.pc_k <= self.base_channels,
            "pc_k {} exceeds base_channels {}",
            self.pc_k,
            self.base_channels
        );
        self.evo_config()?.validate()?;
        Ok(())
    }

    /// Topology with the configured space; a resnext cell needs the large space.
    pub fn topology(&self) -> Result<Topology> {
        let topo = Topology::preset(&self.topology, self.depth, self.base_channels)?;
        let space = SearchSpace::from_name(&self.space)?;
        let topo = topo.with_space(space);
        if topo.cell.style == nas_core::space::CellStyle::Resnext && self.space != "large" {
            bail!("topology {} pairs with the large space, got `{}`", self.topology, self.space);
        }
        topo.validate()?;
        Ok(topo)
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            pc_k: self.pc_k,
            edge_norm: self.edge_norm,
            ..NetConfig::default()
        }
    }

    /// Retraining of discrete networks: full channels, no arch parameters.
    pub fn discrete_net_config(&self) -> NetConfig {
        NetConfig {
            pc_k: 1,
            ..self.net_config()
        }
    }

    pub fn search_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs_search,
            batch: self.batch,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            class_weights: self.class_weights,
            alpha_start_epoch: self.alpha_start_epoch,
            arch_lr: self.gaea_lr,
            select_from_epoch: 0,
            seed: self.seed,
        }
    }

    pub fn retrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs_retrain,
            select_from_epoch: self.select_from_epoch,
            ..self.search_train_config()
        }
    }

    pub fn evo_config(&self) -> Result<EvoConfig> {
        let e = &self.evolve;
        let cfg = EvoConfig {
            pop_size: e.pop_size,
            generations: e.generations,
            workers: e.workers,
            mutation_rate: e.mutation_rate,
            topology_move_prob: e.topology_move_prob,
            aging_fraction: e.aging_fraction,
            elitism: e.elitism,
            tournament: e.tournament,
            max_inputs: Some(self.decode.k),
            budget_epochs: e.budget_epochs,
            seed: self.seed,
        };
        Ok(cfg)
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        [self.data.train, self.data.valid, self.data.test]
    }
}

/// Default budgets next to the reference protocol they are scaled from, for documentation.
pub fn desk_scale_table() -> Vec<(&'static str, String, &'static str)> {
    let d = RunConfig::default();
    vec![
        ("patch size", format!("{}x{}", d.data.height, d.data.width), "512x512"),
        ("training patches", d.data.train.to_string(), "~23,000 (proprietary)"),
        ("search epochs", d.epochs_search.to_string(), "50"),
        ("retrain epochs", d.epochs_retrain.to_string(), "80 (200 for DARTS-UNet)"),
        ("checkpoint selection from epoch", d.select_from_epoch.to_string(), "30"),
        ("arch updates from epoch", d.alpha_start_epoch.to_string(), "15"),
        ("initial channels", d.base_channels.to_string(), "16"),
        ("batch", d.batch.to_string(), "2 (4 for DARTS-UNet)"),
        ("partial channels", format!("1/{}", d.pc_k), "1/8"),
        ("path cap", DEFAULT_PATH_CAP.to_string(), "n/a"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readme_table_matches_defaults() {
        let readme = include_str!("../../../README.md");
        for (name, default, reference) in desk_scale_table() {
            let row = format!("| {name} | {default} | {reference} |");
            assert!(readme.contains(&row), "README is missing `{row}`");
        }
    }

    #[test]
    fn default_roundtrips() {
        let d = RunConfig::default();
        let text = d.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), d);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        let base = RunConfig::default().to_toml().unwrap();
        assert!(RunConfig::parse(&format!("bogus = 1\n{base}")).is_err());
        assert!(RunConfig::parse(&base.replace("schema_version = 1", "schema_version = 7")).is_err());
        assert!(RunConfig::parse("topology = \"chain\"").is_err());
    }

    #[test]
    fn resnext_pairing() {
        let mut c = RunConfig {
            topology: "resnext-unet".into(),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        c.space = "large".into();
        assert!(c.validate().is_err());
        c.edge_norm = false;
        c.validate().unwrap();
    }
}
