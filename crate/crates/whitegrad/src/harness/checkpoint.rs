//! Checkpoints: a JSON manifest describing named arrays plus a raw blob of
//! little-endian f64 values. The split keeps the numbers bit-exact across a
//! save/load round trip while the manifest stays human-readable.

use crate::error::{Error, Result};
use crate::nn::Network;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

const FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const ARRAYS: &str = "arrays.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    offset: usize,
    len: usize,
}

/// Writes `manifest.json` and `arrays.bin` into `dir`, creating it.
pub fn save_checkpoint(dir: &Path, net: &Network) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let named = net.named_arrays();
    let mut entries = Vec::with_capacity(named.len());
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, shape, values) in &named {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: values.len(),
        });
        offset += values.len();
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        arrays: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join(MANIFEST), json)?;
    let mut f = std::fs::File::create(dir.join(ARRAYS))?;
    f.write_all(&blob)?;
    Ok(())
}

/// Loads a checkpoint into a network of matching structure: every named
/// array must exist with the saved shape.
pub fn load_checkpoint(dir: &Path, net: &mut Network) -> Result<()> {
    let json = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "checkpoint format {} unsupported, want {FORMAT}",
            manifest.format
        )));
    }
    let blob = std::fs::read(dir.join(ARRAYS))?;
    if blob.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "array blob length {} not a multiple of 8",
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let end = entry
            .offset
            .checked_add(entry.len)
            .filter(|&e| e <= values.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "array {} spans {}..{} outside a blob of {}",
                entry.name,
                entry.offset,
                entry.offset + entry.len,
                values.len()
            )));
        };
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Format(format!(
                "array {} shape {:?} disagrees with length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        arrays.push((
            entry.name.clone(),
            entry.shape.clone(),
            values[entry.offset..end].to_vec(),
        ));
    }
    net.load_named_arrays(&arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::arch::{build_network, parse_architecture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits(net: &Network) -> Vec<(String, Vec<u64>)> {
        net.named_arrays()
            .into_iter()
            .map(|(name, _, values)| (name, values.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let specs = parse_architecture("C3(3x3)-BN-P(2x2)-F8-F4").unwrap();
        let mut net = build_network(&specs, &[2, 6, 6]).unwrap();
        net.init_params(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net).unwrap();

        let mut other = build_network(&specs, &[2, 6, 6]).unwrap();
        other.init_params(&mut rng);
        assert_ne!(bits(&net), bits(&other));
        load_checkpoint(dir.path(), &mut other).unwrap();
        assert_eq!(bits(&net), bits(&other));
    }

    #[test]
    fn structural_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let specs = parse_architecture("F8-F4").unwrap();
        let mut net = build_network(&specs, &[5]).unwrap();
        net.init_params(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net).unwrap();

        let other_specs = parse_architecture("F9-F4").unwrap();
        let mut other = build_network(&other_specs, &[5]).unwrap();
        assert!(load_checkpoint(dir.path(), &mut other).is_err());
    }

    #[test]
    fn corrupt_manifest_entries_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let specs = parse_architecture("F4-F2").unwrap();
        let mut net = build_network(&specs, &[3]).unwrap();
        net.init_params(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net).unwrap();

        let path = dir.path().join("manifest.json");
        let json = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, json.replace("\"offset\": 0", "\"offset\": 9999")).unwrap();
        match load_checkpoint(dir.path(), &mut net) {
            Err(Error::Format(msg)) => assert!(msg.contains("outside")),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
