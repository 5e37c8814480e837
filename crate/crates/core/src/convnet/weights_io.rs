//! Weight persistence. The file pins the network spec by hash, so weights
//! can only be loaded back into the architecture that produced them.
//!
//! Layout (all integers little-endian): 4 magic bytes, format version u32,
//! 32-byte spec hash, then for every parameter tensor in network order its
//! rank (u32), dimensions (u32 each), and values (f64 each).

use std::io::{Read, Write};
use std::path::Path;

use super::{ConvNetError, Network, NetworkSpec};

const MAGIC: &[u8; 4] = b"PVMW";
const VERSION: u32 = 1;

pub fn save_weights(net: &Network, path: &Path) -> Result<(), ConvNetError> {
    let io_err = |source| ConvNetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    out.write_all(&net.spec.hash()).map_err(io_err)?;
    for layer in &net.weights {
        for tensor in layer {
            out.write_all(&(tensor.shape.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            for &d in &tensor.shape {
                out.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
            }
            for &v in &tensor.values {
                out.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

/// Load weights saved with `save_weights` into a network with the given
/// spec. The stored spec hash must match, and every tensor must carry the
/// shape the spec implies.
pub fn load_weights(path: &Path, spec: &NetworkSpec) -> Result<Network, ConvNetError> {
    let io_err = |source| ConvNetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let format_err = |message: String| ConvNetError::WeightFormat {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut input = std::io::BufReader::new(file);

    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| format_err("missing magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic bytes {magic:?}")));
    }
    let mut version = [0u8; 4];
    input
        .read_exact(&mut version)
        .map_err(|_| format_err("truncated before version".into()))?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(format_err(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let mut stored_hash = [0u8; 32];
    input
        .read_exact(&mut stored_hash)
        .map_err(|_| format_err("truncated before spec hash".into()))?;
    if stored_hash != spec.hash() {
        return Err(ConvNetError::IncompatibleWeights {
            path: path.to_path_buf(),
        });
    }

    // Shapes are implied by the spec; seed is irrelevant since every value
    // is overwritten.
    let mut net = Network::new(spec.clone(), 0)?;
    for (layer_ix, layer) in net.weights.iter_mut().enumerate() {
        for tensor in layer.iter_mut() {
            let mut rank = [0u8; 4];
            input
                .read_exact(&mut rank)
                .map_err(|_| format_err(format!("truncated at layer {layer_ix} tensor header")))?;
            let rank = u32::from_le_bytes(rank) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d = [0u8; 4];
                input
                    .read_exact(&mut d)
                    .map_err(|_| format_err(format!("truncated at layer {layer_ix} dims")))?;
                dims.push(u32::from_le_bytes(d) as usize);
            }
            if dims != tensor.shape {
                return Err(ConvNetError::IncompatibleWeights {
                    path: path.to_path_buf(),
                });
            }
            let mut bytes = vec![0u8; tensor.values.len() * 8];
            input.read_exact(&mut bytes).map_err(|_| {
                format_err(format!("truncated inside layer {layer_ix} values"))
            })?;
            for (v, chunk) in tensor.values.iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(format_err("trailing bytes after the last tensor".into()));
    }
    Ok(net)
}
