//! Tile containers and the dataset-preparation step: pairing imagery tiles
//! with municipality benchmarks, band selection, per-band normalization, and
//! the aggregation weights used to roll tile predictions up to
//! municipalities.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::survey::BucketDistribution;
use crate::synthworld::{Cell, MunicipalityId, World};

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("tile must have 3 or 4 bands, got {0}")]
    BadBandCount(usize),
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    BadPixelCount { expected: usize, actual: usize },
    #[error("dropping the near-infrared band requires a 4-band tile, got {0} bands")]
    NotFourBand(usize),
    #[error("cannot normalize an empty tile set")]
    EmptyTileSet,
    #[error("tile shape {actual:?} does not match the set's shape {expected:?}")]
    MixedShapes {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("band {band} is constant across the training tiles; cannot standardize it")]
    DegenerateBand { band: usize },
    #[error("normalization stats cover {stats} bands but tiles have {bands}")]
    StatsBandMismatch { stats: usize, bands: usize },
    #[error("no benchmark distribution for municipality {0}")]
    MissingBenchmark(MunicipalityId),
    #[error("no rendered tile for cell ({x}, {y})", x = .0.x, y = .0.y)]
    MissingTile(Cell),
    #[error("cannot derive weights from an empty record set")]
    EmptyRecords,
    #[error("all {scheme} weights are zero; cannot normalize")]
    DegenerateWeights { scheme: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

/// A multi-band image in plane-major order: `pixels[band][y][x]` flattened,
/// so each band is a contiguous `width * height` slice. Rendered tiles hold
/// values in [0, 1]; normalized tiles are unbounded, so the range is a
/// convention of the producing stage rather than of the container.
#[derive(Debug, Clone, PartialEq)]
pub struct TileImage {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub pixels: Vec<f64>,
}

impl TileImage {
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, TilerError> {
        if bands != 3 && bands != 4 {
            return Err(TilerError::BadBandCount(bands));
        }
        let expected = width * height * bands;
        if pixels.len() != expected {
            return Err(TilerError::BadPixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(TileImage {
            width,
            height,
            bands,
            pixels,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.bands, self.height, self.width)
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.pixels[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.pixels[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> f64 {
        self.pixels[(b * self.height + y) * self.width + x]
    }
}

/// Remove the near-infrared plane from a 4-band tile, leaving the RGB planes
/// untouched bit for bit.
pub fn drop_nir(tile: &TileImage) -> Result<TileImage, TilerError> {
    if tile.bands != 4 {
        return Err(TilerError::NotFourBand(tile.bands));
    }
    let n = tile.width * tile.height;
    TileImage::new(tile.width, tile.height, 3, tile.pixels[..3 * n].to_vec())
}

/// Per-band standardization parameters fitted on the training tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

/// Fit per-band mean and standard deviation over a tile set using a two-pass
/// sum, so the result is independent of tile chunking.
pub fn compute_norm_stats(tiles: &[TileImage]) -> Result<NormStats, TilerError> {
    let first = tiles.first().ok_or(TilerError::EmptyTileSet)?;
    let shape = first.shape();
    for t in tiles {
        if t.shape() != shape {
            return Err(TilerError::MixedShapes {
                expected: shape,
                actual: t.shape(),
            });
        }
    }
    let bands = first.bands;
    let per_band = (first.width * first.height * tiles.len()) as f64;
    let mut means = vec![0.0f64; bands];
    let mut sds = vec![0.0f64; bands];
    for b in 0..bands {
        let mut sum = 0.0;
        for t in tiles {
            sum += t.band(b).iter().sum::<f64>();
        }
        means[b] = sum / per_band;
        let mut sq = 0.0;
        for t in tiles {
            sq += t.band(b).iter().map(|v| (v - means[b]).powi(2)).sum::<f64>();
        }
        let var = sq / per_band;
        if var <= 0.0 {
            return Err(TilerError::DegenerateBand { band: b });
        }
        sds[b] = var.sqrt();
    }
    Ok(NormStats { means, sds })
}

/// Standardize each band of each tile with previously fitted stats.
pub fn apply_norm_stats(tiles: &mut [TileImage], stats: &NormStats) -> Result<(), TilerError> {
    for t in tiles.iter_mut() {
        if t.bands != stats.means.len() {
            return Err(TilerError::StatsBandMismatch {
                stats: stats.means.len(),
                bands: t.bands,
            });
        }
        for b in 0..t.bands {
            let (mean, sd) = (stats.means[b], stats.sds[b]);
            for v in t.band_mut(b) {
                *v = (*v - mean) / sd;
            }
        }
    }
    Ok(())
}

/// One training/prediction example: a tile, its provenance, and the
/// municipality-level soft label every tile of that municipality inherits.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub tile: TileImage,
    pub municipality_id: MunicipalityId,
    pub cell: Cell,
    /// Equal-area weight (one cell, one unit).
    pub area_weight: f64,
    /// Municipality population spread evenly over its cells.
    pub population_weight: f64,
    pub soft_label: BucketDistribution,
}

/// Pair every assigned cell's tile with its municipality's benchmark
/// distribution. `tiles` maps cells to rendered imagery (typically read back
/// from the tile archive); `benchmarks` supplies per-municipality labels.
pub fn build_tile_records(
    world: &World,
    tiles: &BTreeMap<Cell, TileImage>,
    benchmarks: &BTreeMap<MunicipalityId, BucketDistribution>,
) -> Result<Vec<TileRecord>, TilerError> {
    let mut records = Vec::new();
    for mun in &world.municipalities {
        let label = benchmarks
            .get(&mun.id)
            .ok_or(TilerError::MissingBenchmark(mun.id))?;
        let n_cells = mun.cells.len() as f64;
        for &cell in &mun.cells {
            let tile = tiles.get(&cell).ok_or(TilerError::MissingTile(cell))?;
            records.push(TileRecord {
                tile: tile.clone(),
                municipality_id: mun.id,
                cell,
                area_weight: 1.0,
                population_weight: mun.population as f64 / n_cells,
                soft_label: *label,
            });
        }
    }
    Ok(records)
}

/// How tile-level predictions are weighted when aggregating to a
/// municipality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Area,
    Population,
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightScheme::Area => write!(f, "area"),
            WeightScheme::Population => write!(f, "population"),
        }
    }
}

/// Normalized per-record weights under the chosen scheme. The returned
/// vector is parallel to `records` and sums to 1 (within 1e-12, asserted by
/// the callers' tests rather than here).
pub fn municipality_weights(
    records: &[TileRecord],
    scheme: WeightScheme,
) -> Result<Vec<f64>, TilerError> {
    if records.is_empty() {
        return Err(TilerError::EmptyRecords);
    }
    let raw: Vec<f64> = records
        .iter()
        .map(|r| match scheme {
            WeightScheme::Area => r.area_weight,
            WeightScheme::Population => r.population_weight,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(TilerError::DegenerateWeights {
            scheme: match scheme {
                WeightScheme::Area => "area",
                WeightScheme::Population => "population",
            },
        });
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// One manifest row: where each tile came from and which split its
/// municipality landed in.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub cell: Cell,
    pub municipality_id: MunicipalityId,
    pub area_weight: f64,
    pub population_weight: f64,
    pub split: String,
}

/// Write the tile manifest. Rows follow the record order; `split_of` names
/// the stratum of each municipality.
pub fn write_manifest_csv(
    path: &Path,
    records: &[TileRecord],
    split_of: &BTreeMap<MunicipalityId, String>,
) -> Result<(), TilerError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "cell_x,cell_y,municipality_id,area_weight,population_weight,split"
    )?;
    for r in records {
        let split = split_of
            .get(&r.municipality_id)
            .map(String::as_str)
            .unwrap_or("unsplit");
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.cell.x, r.cell.y, r.municipality_id, r.area_weight, r.population_weight, split
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Read a tile manifest back.
pub fn read_manifest_csv(path: &Path) -> Result<Vec<ManifestRow>, TilerError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (ix, line) in file.lines().enumerate() {
        let line = line?;
        if ix == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(TilerError::Manifest {
                line: ix + 1,
                message: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64, TilerError> {
            s.parse().map_err(|e| TilerError::Manifest {
                line: ix + 1,
                message: format!("bad {what}: {e}"),
            })
        };
        rows.push(ManifestRow {
            cell: Cell::new(
                parse(fields[0], "cell_x")? as u32,
                parse(fields[1], "cell_y")? as u32,
            ),
            municipality_id: MunicipalityId(parse(fields[2], "municipality_id")? as u32),
            area_weight: parse(fields[3], "area_weight")?,
            population_weight: parse(fields[4], "population_weight")?,
            split: fields[5].to_string(),
        });
    }
    Ok(rows)
}
