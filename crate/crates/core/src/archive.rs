//! On-disk formats for the pipeline's intermediate products: the world
//! snapshot (JSON) and the imagery tiles (a small binary raster format).
//!
//! Tile layout: three little-endian u32 header words (width, height, bands)
//! followed by `width * height * bands` little-endian f32 samples in
//! plane-major order — band 0's rows, then band 1's, and so on.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::synthworld::{Cell, World};
use crate::tiler::TileImage;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("world snapshot {path} is not valid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("tile file {path}: {message}")]
    TileFormat { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize the world snapshot. JSON floats are written shortest-roundtrip,
/// so reading the snapshot back reproduces every f64 bit for bit.
pub fn write_world_json(path: &Path, world: &World) -> Result<(), ArchiveError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut out, world).map_err(|source| ArchiveError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    out.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_world_json(path: &Path) -> Result<World, ArchiveError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| ArchiveError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Canonical file name for a cell's tile inside the tiles directory.
pub fn tile_file_name(cell: Cell) -> String {
    format!("{}_{}.bin", cell.x, cell.y)
}

pub fn write_tile_bin(path: &Path, tile: &TileImage) -> Result<(), ArchiveError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    let write_u32 = |v: u32, out: &mut dyn Write| -> Result<(), ArchiveError> {
        out.write_all(&v.to_le_bytes()).map_err(io_err(path))
    };
    write_u32(tile.width as u32, &mut out)?;
    write_u32(tile.height as u32, &mut out)?;
    write_u32(tile.bands as u32, &mut out)?;
    let mut buf = Vec::with_capacity(tile.pixels.len() * 4);
    for &v in &tile.pixels {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_tile_bin(path: &Path) -> Result<TileImage, ArchiveError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut input = std::io::BufReader::new(file);
    let mut header = [0u8; 12];
    input.read_exact(&mut header).map_err(|_| ArchiveError::TileFormat {
        path: path.to_path_buf(),
        message: "truncated header (need 12 bytes)".into(),
    })?;
    let width = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if bands != 3 && bands != 4 {
        return Err(ArchiveError::TileFormat {
            path: path.to_path_buf(),
            message: format!("band count {bands} not in {{3, 4}}"),
        });
    }
    let count = width * height * bands;
    let mut body = vec![0u8; count * 4];
    input.read_exact(&mut body).map_err(|_| ArchiveError::TileFormat {
        path: path.to_path_buf(),
        message: format!("truncated body (need {} sample bytes)", count * 4),
    })?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing).map_err(io_err(path))? != 0 {
        return Err(ArchiveError::TileFormat {
            path: path.to_path_buf(),
            message: "trailing bytes after pixel data".into(),
        });
    }
    let pixels: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    TileImage::new(width, height, bands, pixels).map_err(|e| ArchiveError::TileFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, WorldConfig};

    #[test]
    fn world_json_round_trips_bit_exactly() {
        let cfg = WorldConfig {
            seed: 3,
            grid_width: 12,
            grid_height: 12,
            n_municipalities: 5,
            households_per_municipality: 20,
            ..Default::default()
        };
        let world = generate_world(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        write_world_json(&path, &world).unwrap();
        let back = read_world_json(&path).unwrap();
        assert_eq!(world, back);
    }

    #[test]
    fn tile_bin_round_trips_f32_values() {
        let pixels: Vec<f64> = (0..3 * 8 * 8).map(|i| (i as f64 / 100.0) % 1.0).collect();
        let tile = TileImage::new(8, 8, 3, pixels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(tile_file_name(Cell::new(4, 7)));
        assert_eq!(path.file_name().unwrap(), "4_7.bin");
        write_tile_bin(&path, &tile).unwrap();
        let back = read_tile_bin(&path).unwrap();
        assert_eq!(back.shape(), tile.shape());
        for (a, b) in tile.pixels.iter().zip(&back.pixels) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn truncated_tile_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let tile = TileImage::new(4, 4, 3, vec![0.5; 48]).unwrap();
        write_tile_bin(&path, &tile).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_tile_bin(&path) {
            Err(ArchiveError::TileFormat { message, .. }) => {
                assert!(message.contains("truncated"), "message: {message}");
            }
            other => panic!("expected TileFormat error, got {other:?}"),
        }
    }

    #[test]
    fn bad_band_count_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bands.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 2 * 2 * 7 * 4]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_tile_bin(&path),
            Err(ArchiveError::TileFormat { .. })
        ));
    }
}
