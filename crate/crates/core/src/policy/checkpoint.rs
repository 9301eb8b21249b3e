//! Checkpoints: a flat little-endian `f64` array plus a plain-text manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::net::{NetShape, PolicyNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RINSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub episode_count: u64,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("manifest.txt"))
}

/// Write `<stem>.bin` and `<stem>.manifest.txt`.
pub fn save_checkpoint(stem: &Path, net: &PolicyNet, meta: CheckpointMeta) -> Result<()> {
    let (bin, manifest) = paths(stem);
    let mut bytes = Vec::with_capacity(20 + 8 * net.params.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    for p in &net.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;

    let mut text = Vec::new();
    let s = net.shape;
    writeln!(text, "format {VERSION}").ok();
    writeln!(text, "shape {} {} {}", s.input, s.hidden, s.action).ok();
    writeln!(text, "seed {}", meta.seed).ok();
    writeln!(text, "episodes {}", meta.episode_count).ok();
    for (name, offset, rows, cols) in net.layout.blocks() {
        writeln!(text, "block {name} {offset} {rows} {cols}").ok();
    }
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
}

pub fn load_checkpoint(stem: &Path) -> Result<(PolicyNet, CheckpointMeta)> {
    let (bin, manifest) = paths(stem);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", manifest.display()));
    let mut shape = None;
    let mut seed = None;
    let mut episodes = None;
    for line in text.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| f.get(i).and_then(|x| x.parse::<u64>().ok()).ok_or_else(|| bad("malformed line"));
        match f.first() {
            Some(&"format") if num(1)? != VERSION as u64 => return Err(bad("unsupported format")),
            Some(&"shape") => {
                shape = Some(NetShape {
                    input: num(1)? as usize,
                    hidden: num(2)? as usize,
                    action: num(3)? as usize,
                })
            }
            Some(&"seed") => seed = Some(num(1)?),
            Some(&"episodes") => episodes = Some(num(1)?),
            _ => {}
        }
    }
    let shape = shape.ok_or_else(|| bad("missing shape"))?;

    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if version != VERSION || bytes.len() != 20 + 8 * count {
        return Err(bad("truncated or mismatched checkpoint"));
    }
    let params = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let net = PolicyNet::from_params(shape, params)?;
    Ok((
        net,
        CheckpointMeta {
            seed: seed.ok_or_else(|| bad("missing seed"))?,
            episode_count: episodes.ok_or_else(|| bad("missing episodes"))?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(1, 0, Purpose::Policy);
        let net = PolicyNet::new(NetShape { input: 24, hidden: 64, action: 6 }, -0.5, &mut rng);
        let meta = CheckpointMeta { seed: 7, episode_count: 120 };
        let stem = dir.path().join("policy");
        save_checkpoint(&stem, &net, meta).unwrap();
        let (back, m) = load_checkpoint(&stem).unwrap();
        assert_eq!(back, net);
        assert_eq!(m, meta);
        let manifest = std::fs::read_to_string(stem.with_extension("manifest.txt")).unwrap();
        assert!(manifest.contains("block actor.weight"));
    }
}
