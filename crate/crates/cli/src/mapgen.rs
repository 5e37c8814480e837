//! Choropleth outputs: one GeoJSON polygon per municipality, traced from its
//! grid cells, and a PNG raster. Both use the same fixed five-class quantile
//! color ramp.
//!
//! Boundary tracing walks directed cell edges with the interior kept on the
//! left, so exterior rings come out counterclockwise and holes clockwise —
//! the GeoJSON winding convention — and the signed area tells the two apart.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use povmap_core::aggregate_eval::MunicipalityEstimate;
use povmap_core::synthworld::{MunicipalityId, Sector, World};

use crate::config::{MapMetric, SectorChoice};

pub const N_CLASSES: usize = 5;

/// Sequential light-to-dark ramp, low to high poverty.
pub const RAMP: [[u8; 3]; N_CLASSES] = [
    [255, 255, 204],
    [254, 217, 118],
    [253, 141, 60],
    [227, 26, 28],
    [128, 0, 38],
];

const UNMAPPED: [u8; 3] = [225, 225, 225];
const BOUNDARY: [u8; 3] = [70, 70, 70];
/// PNG pixels per grid cell.
const CELL_PX: u32 = 8;

/// Nearest-rank quantile thresholds at p = 1/5 .. 4/5: the value at rank
/// ceil(p\u{b7}n) (1-based) of the sorted sample.
pub fn quantile_thresholds(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..N_CLASSES)
        .map(|k| {
            let p = k as f64 / N_CLASSES as f64;
            let rank = ((p * sorted.len() as f64).ceil() as usize).max(1);
            sorted[rank - 1]
        })
        .collect()
}

/// Class index of a value: the number of thresholds strictly below it.
pub fn class_of(value: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|&&t| value > t).count()
}

/// Everything `emit_map` needs. `benchmark_rates` backs the Benchmark metric
/// and may be absent otherwise.
pub struct MapInputs<'a> {
    pub world: &'a World,
    pub estimates: &'a [MunicipalityEstimate],
    pub benchmark_rates: Option<&'a BTreeMap<MunicipalityId, f64>>,
    pub metric: MapMetric,
    pub sector: SectorChoice,
}

struct Feature {
    id: MunicipalityId,
    sector: Sector,
    value: f64,
    class: usize,
    /// Exterior ring first, then holes; rings are closed.
    rings: Vec<Vec<(i64, i64)>>,
}

/// Write `map.geojson` and `map.png`; returns the number of mapped
/// municipalities.
pub fn emit_map(inputs: &MapInputs, geojson_path: &Path, png_path: &Path) -> Result<usize> {
    let selected: Vec<&MunicipalityEstimate> = inputs
        .estimates
        .iter()
        .filter(|e| sector_admits(inputs.sector, e.sector))
        .collect();
    if selected.is_empty() {
        bail!(
            "nothing to map: no municipalities in the estimate set match sector `{}`",
            sector_name(inputs.sector)
        );
    }

    let mut values = Vec::with_capacity(selected.len());
    for est in &selected {
        let value = match inputs.metric {
            MapMetric::WellbeingRate => est.cnn_rate,
            MapMetric::MinRate => est.cnn_distribution.min_rate(),
            MapMetric::Benchmark => *inputs
                .benchmark_rates
                .and_then(|rates| rates.get(&est.municipality_id))
                .with_context(|| {
                    format!("no benchmark rate for municipality {}", est.municipality_id)
                })?,
        };
        values.push(value);
    }
    let thresholds = quantile_thresholds(&values);

    let mut features = Vec::with_capacity(selected.len());
    for (est, &value) in selected.iter().zip(&values) {
        let mun = inputs
            .world
            .municipality(est.municipality_id)
            .with_context(|| format!("municipality {} not in the world", est.municipality_id))?;
        let cells: BTreeSet<(i64, i64)> = mun
            .cells
            .iter()
            .map(|c| (c.x as i64, c.y as i64))
            .collect();
        features.push(Feature {
            id: est.municipality_id,
            sector: est.sector,
            value,
            class: class_of(value, &thresholds),
            rings: polygon_rings(&cells)
                .with_context(|| format!("tracing municipality {}", est.municipality_id))?,
        });
    }
    features.sort_by_key(|f| f.id.0);

    write_geojson(geojson_path, inputs.metric, &features)?;
    write_png(png_path, inputs.world, &features)?;
    Ok(features.len())
}

fn sector_admits(choice: SectorChoice, sector: Sector) -> bool {
    match choice {
        SectorChoice::All => true,
        SectorChoice::Urban => sector == Sector::Urban,
        SectorChoice::Rural => sector == Sector::Rural,
    }
}

fn sector_name(choice: SectorChoice) -> &'static str {
    match choice {
        SectorChoice::All => "all",
        SectorChoice::Urban => "urban",
        SectorChoice::Rural => "rural",
    }
}

/// Closed boundary rings of a 4-connected cell set, exterior first.
fn polygon_rings(cells: &BTreeSet<(i64, i64)>) -> Result<Vec<Vec<(i64, i64)>>> {
    let rings = boundary_rings(cells);
    let mut exterior = Vec::new();
    let mut holes = Vec::new();
    for ring in rings {
        if signed_area_doubled(&ring) > 0 {
            exterior.push(ring);
        } else {
            holes.push(ring);
        }
    }
    if exterior.len() != 1 {
        bail!(
            "cell set traced to {} exterior rings; municipalities are contiguous so exactly one was expected",
            exterior.len()
        );
    }
    let mut rings = exterior;
    rings.extend(holes);
    Ok(rings)
}

/// Trace all boundary loops of the cell set. Each cell occupies the unit
/// square [x, x+1] x [y, y+1]; edges bordering a missing neighbor are
/// directed with the interior on the left. At pinch vertices the walk takes
/// the most-left turn, which keeps every loop hugging its own side.
fn boundary_rings(cells: &BTreeSet<(i64, i64)>) -> Vec<Vec<(i64, i64)>> {
    let mut outgoing: BTreeMap<(i64, i64), Vec<(i64, i64)>> = BTreeMap::new();
    {
        let mut push = |a: (i64, i64), b: (i64, i64)| outgoing.entry(a).or_default().push(b);
        for &(x, y) in cells {
            if !cells.contains(&(x, y - 1)) {
                push((x, y), (x + 1, y)); // bottom edge, heading +x
            }
            if !cells.contains(&(x + 1, y)) {
                push((x + 1, y), (x + 1, y + 1)); // right edge, heading +y
            }
            if !cells.contains(&(x, y + 1)) {
                push((x + 1, y + 1), (x, y + 1)); // top edge, heading -x
            }
            if !cells.contains(&(x - 1, y)) {
                push((x, y + 1), (x, y)); // left edge, heading -y
            }
        }
    }
    for targets in outgoing.values_mut() {
        targets.sort_unstable();
    }

    let mut rings = Vec::new();
    loop {
        let Some((&start, _)) = outgoing.iter().find(|(_, v)| !v.is_empty()) else {
            break;
        };
        let mut ring = vec![start];
        let mut at = start;
        let mut dir = (0i64, 0i64);
        loop {
            let outs = outgoing.get_mut(&at).expect("open ring: no outgoing edge");
            let pick = most_left_turn(at, dir, outs);
            let next = outs.remove(pick);
            dir = (next.0 - at.0, next.1 - at.1);
            at = next;
            if at == start {
                break;
            }
            ring.push(at);
        }
        ring.push(start);
        rings.push(drop_collinear(ring));
    }
    rings
}

/// Index of the outgoing edge turning furthest left relative to `dir` when
/// leaving `at`. Cross product > 0 is a left turn, 0 straight on, < 0 a
/// right turn; axis alignment means no ties between distinct candidates.
fn most_left_turn(at: (i64, i64), dir: (i64, i64), outs: &[(i64, i64)]) -> usize {
    if dir == (0, 0) || outs.len() == 1 {
        return 0;
    }
    let mut best = 0;
    let mut best_cross = i64::MIN;
    for (ix, out) in outs.iter().enumerate() {
        let candidate = (out.0 - at.0, out.1 - at.1);
        let cross = dir.0 * candidate.1 - dir.1 * candidate.0;
        if cross > best_cross {
            best_cross = cross;
            best = ix;
        }
    }
    best
}

/// Remove interior vertices that continue in the same direction; the closing
/// vertex is kept.
fn drop_collinear(ring: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    let n = ring.len() - 1; // last repeats first
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = ring[(i + n - 1) % n];
        let here = ring[i];
        let next = ring[(i + 1) % n];
        let a = (here.0 - prev.0, here.1 - prev.1);
        let b = (next.0 - here.0, next.1 - here.1);
        if a != b {
            out.push(here);
        }
    }
    let first = out[0];
    out.push(first);
    out
}

/// Twice the signed shoelace area; positive for counterclockwise rings.
fn signed_area_doubled(ring: &[(i64, i64)]) -> i64 {
    ring.windows(2)
        .map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1)
        .sum()
}

fn write_geojson(path: &Path, metric: MapMetric, features: &[Feature]) -> Result<()> {
    let features_json: Vec<serde_json::Value> = features
        .iter()
        .map(|f| {
            let coordinates: Vec<Vec<[f64; 2]>> = f
                .rings
                .iter()
                .map(|ring| ring.iter().map(|&(x, y)| [x as f64, y as f64]).collect())
                .collect();
            json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": coordinates },
                "properties": {
                    "id": f.id.0,
                    "sector": f.sector.to_string(),
                    "metric": metric.name(),
                    "value": f.value,
                    "class": f.class,
                },
            })
        })
        .collect();
    let collection = json!({ "type": "FeatureCollection", "features": features_json });
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    serde_json::to_writer_pretty(&mut out, &collection)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Rasterize the selected municipalities over a neutral background, with a
/// dark line wherever a selected cell borders anything else. Grid y grows
/// upward, image rows grow downward, so rows are flipped.
fn write_png(path: &Path, world: &World, features: &[Feature]) -> Result<()> {
    let gw = world.config.grid_width;
    let gh = world.config.grid_height;
    let mut img =
        image::RgbImage::from_pixel(gw * CELL_PX, gh * CELL_PX, image::Rgb(UNMAPPED));

    let mut owner: BTreeMap<(i64, i64), (usize, MunicipalityId)> = BTreeMap::new();
    for f in features {
        let mun = world.municipality(f.id).expect("feature ids come from the world");
        for c in &mun.cells {
            owner.insert((c.x as i64, c.y as i64), (f.class, f.id));
        }
    }

    for (&(x, y), &(class, id)) in &owner {
        let fill = image::Rgb(RAMP[class]);
        let edge = image::Rgb(BOUNDARY);
        let foreign = |nx: i64, ny: i64| owner.get(&(nx, ny)).map(|&(_, o)| o) != Some(id);
        let x0 = x as u32 * CELL_PX;
        let y0 = (gh - 1 - y as u32) * CELL_PX;
        for dy in 0..CELL_PX {
            for dx in 0..CELL_PX {
                // Grid +y is the cell's top, which is this block's dy = 0 row.
                let on_edge = (dx == 0 && foreign(x - 1, y))
                    || (dx == CELL_PX - 1 && foreign(x + 1, y))
                    || (dy == 0 && foreign(x, y + 1))
                    || (dy == CELL_PX - 1 && foreign(x, y - 1));
                img.put_pixel(x0 + dx, y0 + dy, if on_edge { edge } else { fill });
            }
        }
    }

    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells(list: &[(i64, i64)]) -> BTreeSet<(i64, i64)> {
        list.iter().copied().collect()
    }

    #[test]
    fn single_cell_traces_a_unit_square() {
        let rings = polygon_rings(&cells(&[(2, 3)])).unwrap();
        assert_eq!(rings.len(), 1);
        let ring = &rings[0];
        assert_eq!(ring.len(), 5);
        assert_eq!(ring.first(), ring.last());
        assert_eq!(signed_area_doubled(ring), 2); // area 1, counterclockwise
        for &(x, y) in ring {
            assert!((2..=3).contains(&x) && (3..=4).contains(&y));
        }
    }

    #[test]
    fn rectangle_simplifies_to_four_corners() {
        let set = cells(&[(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (2, 1)]);
        let rings = polygon_rings(&set).unwrap();
        assert_eq!(rings.len(), 1);
        // 4 corners plus the closing vertex.
        assert_eq!(rings[0].len(), 5);
        assert_eq!(signed_area_doubled(&rings[0]), 12); // 3 x 2 rectangle
    }

    #[test]
    fn ring_donut_yields_one_hole_wound_clockwise() {
        // 3x3 block minus its center.
        let mut list = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                if (x, y) != (1, 1) {
                    list.push((x, y));
                }
            }
        }
        let rings = polygon_rings(&cells(&list)).unwrap();
        assert_eq!(rings.len(), 2);
        assert!(signed_area_doubled(&rings[0]) > 0, "exterior counterclockwise");
        assert!(signed_area_doubled(&rings[1]) < 0, "hole clockwise");
        assert_eq!(signed_area_doubled(&rings[0]), 18);
        assert_eq!(signed_area_doubled(&rings[1]), -2);
    }

    #[test]
    fn l_shape_ring_walks_the_reflex_corner() {
        let set = cells(&[(0, 0), (1, 0), (0, 1)]);
        let rings = polygon_rings(&set).unwrap();
        assert_eq!(rings.len(), 1);
        assert_eq!(signed_area_doubled(&rings[0]), 6);
        // 6 corners plus closure: the reflex corner at (1,1) must survive
        // collinear dropping.
        assert_eq!(rings[0].len(), 7);
        assert!(rings[0].contains(&(1, 1)));
    }

    #[test]
    fn quantile_thresholds_match_a_sorted_oracle() {
        // 10 distinct values: nearest-rank quantiles at ranks 2, 4, 6, 8.
        let values: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let t = quantile_thresholds(&values);
        assert_eq!(t, vec![0.2, 0.4, 0.6, 0.8]);
        // Classes: count of thresholds strictly below.
        assert_eq!(class_of(0.05, &t), 0);
        assert_eq!(class_of(0.2, &t), 0); // exactly at a threshold stays below
        assert_eq!(class_of(0.45, &t), 2);
        assert_eq!(class_of(1.0, &t), 4);
    }

    #[test]
    fn quantile_classes_are_balanced_on_distinct_values() {
        let values: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let t = quantile_thresholds(&values);
        let mut counts = [0usize; N_CLASSES];
        for &v in &values {
            counts[class_of(v, &t)] += 1;
        }
        assert_eq!(counts, [20; N_CLASSES]);
    }
}
