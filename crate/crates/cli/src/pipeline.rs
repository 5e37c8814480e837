//! The staged pipeline behind every `povmap` command.
//!
//! Each stage reads only files written by earlier stages, so any stage can
//! be rerun in isolation and reproduces its outputs exactly. Every
//! invocation also records `run_manifest.json` (config hash plus all seeds),
//! from which the entire artifact set is reproducible.
//!
//! Stage order and artifacts:
//!   synth     world.json, tiles/*.bin
//!   tile      benchmarks.csv, tiles/manifest.csv, norm_stats.json
//!   train     weights.bin, loss_trace.csv (and a pretraining trace when
//!             fine-tuning)
//!   predict   estimates.csv
//!   evaluate  eval_report.csv, eval_report.txt
//!   map       map.geojson, map.png

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use povmap_core::aggregate_eval::{
    aggregate_tiles, evaluate, make_split, mean_landcover, read_estimates_csv,
    render_eval_report_text, write_estimates_csv, write_eval_report_csv, MunicipalityEstimate,
    SplitAssignment, Stratum,
};
use povmap_core::archive::{
    read_tile_bin, read_world_json, tile_file_name, write_tile_bin, write_world_json,
};
use povmap_core::convnet::{
    load_weights, pretrain_proxy, save_weights, train, write_loss_trace_csv, LabeledTile, Network,
    TrainConfig, TrainMode,
};
use povmap_core::survey::{
    benchmark_mixed, read_benchmarks_csv, write_benchmarks_csv, BucketDistribution,
};
use povmap_core::synthworld::{generate_world, Cell, MunicipalityId, Sector};
use povmap_core::tiler::{
    apply_norm_stats, build_tile_records, compute_norm_stats, drop_nir, municipality_weights,
    read_manifest_csv, write_manifest_csv, NormStats, TileImage, TileRecord,
};

use crate::config::{MapMetric, PipelineConfig, ResolvedConfig};
use crate::mapgen::{self, MapInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Tile,
    Train,
    Predict,
    Evaluate,
    Map,
    All,
}

/// Run one command against a resolved configuration.
pub fn run(command: Command, cfg: &ResolvedConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
    let pipeline = Pipeline { cfg };
    pipeline.write_run_manifest()?;
    match command {
        Command::Synth => pipeline.synth(),
        Command::Tile => pipeline.tile(),
        Command::Train => pipeline.train(),
        Command::Predict => pipeline.predict(),
        Command::Evaluate => pipeline.evaluate(),
        Command::Map => pipeline.map(),
        Command::All => {
            pipeline.synth()?;
            pipeline.tile()?;
            pipeline.train()?;
            pipeline.predict()?;
            pipeline.evaluate()?;
            pipeline.map()
        }
    }
}

struct Pipeline<'a> {
    cfg: &'a ResolvedConfig,
}

impl Pipeline<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn world_json(&self) -> PathBuf {
        self.out("world.json")
    }

    fn tiles_dir(&self) -> PathBuf {
        self.out("tiles")
    }

    fn tile_bin(&self, cell: Cell) -> PathBuf {
        self.tiles_dir().join(tile_file_name(cell))
    }

    fn benchmarks_csv(&self) -> PathBuf {
        self.out("benchmarks.csv")
    }

    fn manifest_csv(&self) -> PathBuf {
        self.tiles_dir().join("manifest.csv")
    }

    fn norm_stats_json(&self) -> PathBuf {
        self.out("norm_stats.json")
    }

    fn weights_bin(&self) -> PathBuf {
        self.out("weights.bin")
    }

    fn loss_trace_csv(&self) -> PathBuf {
        self.out("loss_trace.csv")
    }

    fn pretrain_trace_csv(&self) -> PathBuf {
        self.out("loss_trace_pretrain.csv")
    }

    fn estimates_csv(&self) -> PathBuf {
        self.out("estimates.csv")
    }

    // ---- run manifest -------------------------------------------------

    fn write_run_manifest(&self) -> Result<()> {
        #[derive(Serialize)]
        struct Seeds {
            world: u64,
            split: u64,
            train: u64,
        }
        #[derive(Serialize)]
        struct RunManifest<'a> {
            config_hash: &'a str,
            seeds: Seeds,
            config: &'a PipelineConfig,
        }
        let manifest = RunManifest {
            config_hash: &self.cfg.config_hash,
            seeds: Seeds {
                world: self.cfg.config.world.seed,
                split: self.cfg.config.split_seed,
                train: self.cfg.config.train.config.seed,
            },
            config: &self.cfg.config,
        };
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        let path = self.out("run_manifest.json");
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    // ---- stages ---------------------------------------------------------

    fn synth(&self) -> Result<()> {
        let started = Instant::now();
        let world = generate_world(&self.cfg.config.world)?;
        write_world_json(&self.world_json(), &world)?;
        std::fs::create_dir_all(self.tiles_dir())
            .with_context(|| format!("creating {}", self.tiles_dir().display()))?;
        let mut tiles = 0usize;
        for mun in &world.municipalities {
            for &cell in &mun.cells {
                let tile = world.render_cell_tile(mun, cell);
                write_tile_bin(&self.tile_bin(cell), &tile)?;
                tiles += 1;
            }
        }
        let urban = world
            .municipalities
            .iter()
            .filter(|m| m.sector == Sector::Urban)
            .count();
        println!(
            "[synth] {} municipalities ({} urban), {} tiles of {} px, {:.1}s",
            world.municipalities.len(),
            urban,
            tiles,
            world.config.pixels_per_cell,
            started.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn tile(&self) -> Result<()> {
        self.require(&self.world_json(), "tile", "synth")?;
        self.require(&self.tiles_dir(), "tile", "synth")?;
        let world = read_world_json(&self.world_json())?;

        let benchmarks = benchmark_mixed(&world, &self.cfg.config.lines)?;
        write_benchmarks_csv(&self.benchmarks_csv(), &world, &benchmarks)?;

        let split = make_split(
            &world,
            self.cfg.config.validation_fraction,
            self.cfg.config.split_seed,
        )?;

        let mut tiles: BTreeMap<Cell, TileImage> = BTreeMap::new();
        for mun in &world.municipalities {
            for &cell in &mun.cells {
                tiles.insert(cell, read_tile_bin(&self.tile_bin(cell))?);
            }
        }
        let records = build_tile_records(&world, &tiles, &benchmarks)?;
        drop(tiles);
        let split_names: BTreeMap<MunicipalityId, String> = split
            .strata
            .iter()
            .map(|(id, s)| (*id, s.to_string()))
            .collect();
        write_manifest_csv(&self.manifest_csv(), &records, &split_names)?;

        // Normalization statistics come from the training stratum only, so
        // nothing about the held-out or out-of-survey tiles leaks into them.
        let train_tiles: Vec<TileImage> = records
            .into_iter()
            .filter(|r| split.stratum(r.municipality_id) == Some(Stratum::SurveyTrain))
            .map(|r| r.tile)
            .collect();
        let stats = compute_norm_stats(&train_tiles)?;
        let mut stats_json = serde_json::to_string_pretty(&stats)?;
        stats_json.push('\n');
        std::fs::write(self.norm_stats_json(), stats_json)
            .with_context(|| format!("writing {}", self.norm_stats_json().display()))?;

        let count = |s: Stratum| split.strata.values().filter(|&&v| v == s).count();
        println!(
            "[tile] {} benchmarks; split: {} validation10, {} survey_train, {} non_survey; stats from {} tiles",
            benchmarks.len(),
            count(Stratum::Validation10),
            count(Stratum::SurveyTrain),
            count(Stratum::NonSurvey),
            train_tiles.len()
        );
        Ok(())
    }

    fn train(&self) -> Result<()> {
        self.require(&self.world_json(), "train", "synth")?;
        self.require(&self.benchmarks_csv(), "train", "tile")?;
        self.require(&self.manifest_csv(), "train", "tile")?;
        self.require(&self.norm_stats_json(), "train", "tile")?;
        let started = Instant::now();
        let world = read_world_json(&self.world_json())?;
        let benchmarks = self.read_benchmark_map()?;
        let manifest = read_manifest_csv(&self.manifest_csv())?;
        let stats = self.read_norm_stats()?;
        let section = &self.cfg.config.train;
        let bands = section.config.input_bands;

        let fine_tune = section.config.mode == TrainMode::FineTune;
        let mut examples = Vec::new();
        let mut proxy_examples = Vec::new();
        for row in manifest.iter().filter(|r| r.split == "survey_train") {
            let mun = world
                .municipality(row.municipality_id)
                .with_context(|| format!("manifest names unknown municipality {}", row.municipality_id))?;
            let tile = self.load_normalized_tile(row.cell, &stats, bands)?;
            let label = benchmarks
                .get(&row.municipality_id)
                .with_context(|| format!("no benchmark for municipality {}", row.municipality_id))?;
            if fine_tune {
                proxy_examples.push(LabeledTile {
                    tile: tile.clone(),
                    target: world.landcover_of(mun, row.cell).as_array().to_vec(),
                });
            }
            examples.push(LabeledTile {
                tile,
                target: label.as_array().to_vec(),
            });
        }
        if examples.is_empty() {
            bail!("tile manifest has no survey_train rows; nothing to train on");
        }

        let px = world.config.pixels_per_cell as usize;
        let spec = section.architecture.spec(vec![bands, px, px]);
        let base = Network::new(spec, section.config.seed)?;
        let outcome = if fine_tune {
            // Pretrain the whole trunk on the landcover proxy task, then
            // fine-tune the re-headed network with the leading layers frozen.
            let pretrain_config = TrainConfig {
                mode: TrainMode::FromScratch,
                ..section.config.clone()
            };
            let pretrained = pretrain_proxy(&base, &proxy_examples, &pretrain_config)?;
            write_loss_trace_csv(&self.pretrain_trace_csv(), &pretrained.trace)?;
            if let Some(accuracy) = pretrained.dev_accuracy {
                println!("[train] landcover pretraining dev accuracy: {accuracy:.3}");
            }
            train(&pretrained.network, &examples, &section.config)?
        } else {
            train(&base, &examples, &section.config)?
        };
        save_weights(&outcome.network, &self.weights_bin())?;
        write_loss_trace_csv(&self.loss_trace_csv(), &outcome.trace)?;

        let last = outcome.trace.last().expect("at least one epoch");
        println!(
            "[train] {} tiles, {} epochs: train loss {:.4}, dev loss {:.4}, {:.1}s",
            examples.len(),
            outcome.trace.len(),
            last.train_loss,
            last.dev_loss,
            started.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn predict(&self) -> Result<()> {
        self.require(&self.world_json(), "predict", "synth")?;
        self.require(&self.benchmarks_csv(), "predict", "tile")?;
        self.require(&self.norm_stats_json(), "predict", "tile")?;
        self.require(&self.weights_bin(), "predict", "train")?;
        let started = Instant::now();
        let world = read_world_json(&self.world_json())?;
        let benchmarks = self.read_benchmark_map()?;
        let stats = self.read_norm_stats()?;
        let section = &self.cfg.config.train;
        let bands = section.config.input_bands;
        let px = world.config.pixels_per_cell as usize;
        let spec = section.architecture.spec(vec![bands, px, px]);
        let net = load_weights(&self.weights_bin(), &spec)?;
        let scheme = self.cfg.config.weighting;

        let mut estimates = Vec::with_capacity(world.municipalities.len());
        for mun in &world.municipalities {
            let label = benchmarks
                .get(&mun.id)
                .with_context(|| format!("no benchmark for municipality {}", mun.id))?;
            let n_cells = mun.cells.len() as f64;
            let mut records = Vec::with_capacity(mun.cells.len());
            let mut landcovers = Vec::with_capacity(mun.cells.len());
            for &cell in &mun.cells {
                records.push(TileRecord {
                    tile: self.load_normalized_tile(cell, &stats, bands)?,
                    municipality_id: mun.id,
                    cell,
                    area_weight: 1.0,
                    population_weight: mun.population as f64 / n_cells,
                    soft_label: *label,
                });
                landcovers.push(world.landcover_of(mun, cell));
            }
            let weights = municipality_weights(&records, scheme)?;
            let tiles: Vec<&TileImage> = records.iter().map(|r| &r.tile).collect();
            let predictions = net.predict_distributions(&tiles)?;
            let distribution = aggregate_tiles(&predictions, &weights)?;
            estimates.push(MunicipalityEstimate {
                municipality_id: mun.id,
                sector: mun.sector,
                cnn_distribution: distribution,
                cnn_rate: distribution.wellbeing_rate(),
                landcover_mean: mean_landcover(&landcovers, &weights)?,
            });
        }
        write_estimates_csv(&self.estimates_csv(), &estimates)?;
        println!(
            "[predict] {} municipalities aggregated under {} weighting, {:.1}s",
            estimates.len(),
            scheme,
            started.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        self.require(&self.estimates_csv(), "evaluate", "predict")?;
        self.require(&self.benchmarks_csv(), "evaluate", "tile")?;
        self.require(&self.manifest_csv(), "evaluate", "tile")?;
        let estimates = read_estimates_csv(&self.estimates_csv())?;
        let benchmarks = self.read_benchmark_map()?;
        let manifest = read_manifest_csv(&self.manifest_csv())?;
        let mut strata = BTreeMap::new();
        for row in &manifest {
            strata.insert(row.municipality_id, parse_stratum(&row.split)?);
        }
        let split = SplitAssignment {
            strata,
            seed: self.cfg.config.split_seed,
        };
        let report = evaluate(&estimates, &benchmarks, &split)?;
        write_eval_report_csv(&self.out("eval_report.csv"), &report)?;
        let text = render_eval_report_text(&report);
        std::fs::write(self.out("eval_report.txt"), &text)
            .with_context(|| format!("writing {}", self.out("eval_report.txt").display()))?;
        print!("{text}");
        Ok(())
    }

    fn map(&self) -> Result<()> {
        self.require(&self.world_json(), "map", "synth")?;
        self.require(&self.estimates_csv(), "map", "predict")?;
        let world = read_world_json(&self.world_json())?;
        let estimates = read_estimates_csv(&self.estimates_csv())?;
        let metric = self.cfg.config.map.metric;
        let benchmark_rates: Option<BTreeMap<MunicipalityId, f64>> =
            if metric == MapMetric::Benchmark {
                self.require(&self.benchmarks_csv(), "map", "tile")?;
                Some(
                    self.read_benchmark_map()?
                        .iter()
                        .map(|(id, d)| (*id, d.wellbeing_rate()))
                        .collect(),
                )
            } else {
                None
            };
        let geojson = self.out("map.geojson");
        let png = self.out("map.png");
        let features = mapgen::emit_map(
            &MapInputs {
                world: &world,
                estimates: &estimates,
                benchmark_rates: benchmark_rates.as_ref(),
                metric,
                sector: self.cfg.config.map.sector,
            },
            &geojson,
            &png,
        )?;
        println!(
            "[map] {} municipalities ({} metric) -> {}, {}",
            features,
            metric.name(),
            geojson.display(),
            png.display()
        );
        Ok(())
    }

    // ---- shared helpers -------------------------------------------------

    fn require(&self, path: &Path, stage: &str, producer: &str) -> Result<()> {
        if path.exists() {
            return Ok(());
        }
        bail!(
            "stage `{stage}` needs {} which does not exist; run `povmap {producer}` first",
            path.display()
        );
    }

    fn read_benchmark_map(&self) -> Result<BTreeMap<MunicipalityId, BucketDistribution>> {
        let rows = read_benchmarks_csv(&self.benchmarks_csv())?;
        Ok(rows
            .into_iter()
            .map(|r| (r.municipality_id, r.distribution))
            .collect())
    }

    fn read_norm_stats(&self) -> Result<NormStats> {
        let path = self.norm_stats_json();
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// One tile, standardized with the saved statistics and reduced to RGB
    /// when the configuration trains on three bands.
    fn load_normalized_tile(&self, cell: Cell, stats: &NormStats, bands: usize) -> Result<TileImage> {
        let mut tile = read_tile_bin(&self.tile_bin(cell))?;
        apply_norm_stats(std::slice::from_mut(&mut tile), stats)?;
        if bands == 3 {
            Ok(drop_nir(&tile)?)
        } else {
            Ok(tile)
        }
    }
}

fn parse_stratum(name: &str) -> Result<Stratum> {
    Ok(match name {
        "validation10" => Stratum::Validation10,
        "survey_train" => Stratum::SurveyTrain,
        "non_survey" => Stratum::NonSurvey,
        other => bail!("tile manifest names unknown split `{other}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{load_config, Overrides};

    #[test]
    fn stratum_names_round_trip() {
        for s in [Stratum::Validation10, Stratum::SurveyTrain, Stratum::NonSurvey] {
            assert_eq!(parse_stratum(&s.to_string()).unwrap(), s);
        }
        assert!(parse_stratum("holdout").is_err());
    }

    #[test]
    fn missing_upstream_artifact_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("pipeline.toml");
        std::fs::write(&config_path, "output_dir = \"out\"\n").unwrap();
        let cfg = load_config(&config_path, &Overrides::default()).unwrap();
        let err = run(Command::Evaluate, &cfg).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("estimates.csv"), "{message}");
        assert!(message.contains("povmap predict"), "{message}");
    }
}
