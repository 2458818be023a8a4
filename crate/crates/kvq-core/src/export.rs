//! Map and diagnostics export: per-frame PGM images with normalization
//! sidecars, raw KVQT dumps, and the routing table CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{KvqError, Result};
use crate::fwa::CorrelationBundle;
use crate::tensor::{write_tensor, Tape, Tensor};

/// Writes a `[T,H,W]` map as one binary PGM (P5, maxval 255) per frame,
/// min-max normalized over the whole map, plus a sidecar recording the
/// normalization constants and the raw KVQT tensor. Returns the written PGM
/// paths.
pub fn export_map(dir: &Path, stem: &str, map: &Tensor) -> Result<Vec<std::path::PathBuf>> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(KvqError::shape(format!("export_map: need [T,H,W], got {shape:?}")));
    }
    fs::create_dir_all(dir)?;
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;

    write_tensor(&dir.join(format!("{stem}.kvqt")), map)?;
    fs::write(
        dir.join(format!("{stem}.norm.txt")),
        format!("min={min:.17e}\nmax={max:.17e}\n"),
    )?;

    let mut paths = Vec::with_capacity(t);
    for frame in 0..t {
        let path = dir.join(format!("{stem}_t{frame:03}.pgm"));
        let mut out = Vec::with_capacity(h * w + 32);
        out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        for &v in &map.data()[frame * h * w..(frame + 1) * h * w] {
            let px = if range > 0.0 {
                ((v - min) / range * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.push(px);
        }
        fs::write(&path, out)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads back one exported frame and undoes the sidecar normalization.
pub fn read_pgm_denormalized(pgm: &Path, sidecar: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(pgm)?;
    let header_end = {
        let mut fields = 0;
        let mut i = 0;
        while i < bytes.len() && fields < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            fields += 1;
        }
        i + 1
    };
    let header = std::str::from_utf8(&bytes[..header_end.min(bytes.len())])
        .map_err(|_| KvqError::Format("bad PGM header".to_string()))?;
    let mut it = header.split_ascii_whitespace();
    if it.next() != Some("P5") {
        return Err(KvqError::Format("not a P5 PGM".to_string()));
    }

    let side = fs::read_to_string(sidecar)?;
    let mut min = None;
    let mut max = None;
    for line in side.lines() {
        if let Some(v) = line.strip_prefix("min=") {
            min = v.parse::<f64>().ok();
        } else if let Some(v) = line.strip_prefix("max=") {
            max = v.parse::<f64>().ok();
        }
    }
    let (min, max) = match (min, max) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(KvqError::Format("sidecar missing min/max".to_string())),
    };
    let range = max - min;
    Ok(bytes[header_end..]
        .iter()
        .map(|&px| {
            if range > 0.0 {
                min + px as f64 / 255.0 * range
            } else {
                min
            }
        })
        .collect())
}

/// Dumps per-block routing tables: one row per (source window, rank) with the
/// selected peer and its window-correlation score.
pub fn write_routing_csv(path: &Path, tape: &Tape, bundles: &[CorrelationBundle]) -> Result<()> {
    let mut out = String::from("block_id,src_window,rank,dst_window,score\n");
    for (block_id, bundle) in bundles.iter().enumerate() {
        let n_w = bundle.layout.n_windows;
        let iw = tape.data(bundle.i_w);
        for (src, peers) in bundle.idx.iter().enumerate() {
            for (rank, &dst) in peers.iter().enumerate() {
                let score = iw[src * n_w + dst];
                out.push_str(&format!("{block_id},{src},{rank},{dst},{score:.17e}\n"));
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
