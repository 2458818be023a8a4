//! Region-annotation records: 7x7 grids per image, scores on the half-point
//! lattice from 1 to 5, several annotators per cell.
//!
//! CSV layout: header `image_id,row,col,annotator_id,score`, one record per
//! line. Scores are written as decimal strings so the lattice survives
//! round-trips exactly.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{KvqError, Result};
use crate::tensor::Tensor;

/// Grid side length of the annotation protocol.
pub const GRID: usize = 7;

/// One annotator's score for one grid cell of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub annotator_id: String,
    pub score: f64,
}

fn score_on_lattice(score: f64) -> bool {
    if !(1.0..=5.0).contains(&score) {
        return false;
    }
    let doubled = score * 2.0;
    doubled == doubled.round()
}

/// Loads and validates an annotation CSV. Rejected with the offending line
/// number: malformed fields, scores off the half-point lattice, duplicate
/// (image, cell, annotator) triples, and incomplete grids (every annotator
/// of an image must cover all 49 cells).
pub fn load_lpvq_csv(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| KvqError::Format(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| KvqError::Format(format!("bad header: {e}")))?
        .clone();
    let expect = ["image_id", "row", "col", "annotator_id", "score"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(KvqError::Validation {
            line: 1,
            msg: format!("header must be {expect:?}, got {headers:?}"),
        });
    }

    let mut records = Vec::new();
    let mut seen: HashSet<(String, usize, usize, String)> = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let row = row.map_err(|e| KvqError::Validation { line, msg: format!("{e}") })?;
        if row.len() != 5 {
            return Err(KvqError::Validation { line, msg: format!("expected 5 fields, got {}", row.len()) });
        }
        let image_id = row[0].to_string();
        let parse_cell = |v: &str, what: &str| -> Result<usize> {
            let n: usize = v
                .parse()
                .map_err(|_| KvqError::Validation { line, msg: format!("bad {what}: {v}") })?;
            if n >= GRID {
                return Err(KvqError::Validation {
                    line,
                    msg: format!("{what} {n} outside 0..{GRID}"),
                });
            }
            Ok(n)
        };
        let r = parse_cell(&row[1], "row")?;
        let c = parse_cell(&row[2], "col")?;
        let annotator_id = row[3].to_string();
        let score: f64 = row[4]
            .parse()
            .map_err(|_| KvqError::Validation { line, msg: format!("bad score: {}", &row[4]) })?;
        if !score_on_lattice(score) {
            return Err(KvqError::Validation {
                line,
                msg: format!("score {score} not on the 1.0..5.0 half-point lattice"),
            });
        }
        if !seen.insert((image_id.clone(), r, c, annotator_id.clone())) {
            return Err(KvqError::Validation {
                line,
                msg: format!("duplicate annotation for {image_id} cell ({r},{c}) by {annotator_id}"),
            });
        }
        records.push(AnnotationRecord { image_id, row: r, col: c, annotator_id, score });
    }

    // completeness: every (image, annotator) pair covers the full grid
    let mut coverage: std::collections::HashMap<(String, String), usize> = Default::default();
    for rec in &records {
        *coverage
            .entry((rec.image_id.clone(), rec.annotator_id.clone()))
            .or_default() += 1;
    }
    for ((img, ann), count) in &coverage {
        if *count != GRID * GRID {
            return Err(KvqError::Validation {
                line: 0,
                msg: format!(
                    "annotator {ann} covers {count}/{} cells of image {img}",
                    GRID * GRID
                ),
            });
        }
    }
    Ok(records)
}

/// Writes records in loader format; scores keep one decimal place so the
/// half-point lattice round-trips exactly.
pub fn write_lpvq_csv(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| KvqError::Format(format!("cannot create {}: {e}", path.display())))?;
    wtr.write_record(["image_id", "row", "col", "annotator_id", "score"])
        .map_err(|e| KvqError::Format(format!("{e}")))?;
    for r in records {
        wtr.write_record([
            r.image_id.as_str(),
            &r.row.to_string(),
            &r.col.to_string(),
            r.annotator_id.as_str(),
            &format!("{:.1}", r.score),
        ])
        .map_err(|e| KvqError::Format(format!("{e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-cell mean opinion score over annotators for one image, as a 7x7 map.
pub fn cell_mos(records: &[AnnotationRecord], image_id: &str) -> Result<Tensor> {
    let mut sums = vec![0.0; GRID * GRID];
    let mut counts = vec![0usize; GRID * GRID];
    for r in records.iter().filter(|r| r.image_id == image_id) {
        sums[r.row * GRID + r.col] += r.score;
        counts[r.row * GRID + r.col] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(KvqError::Coverage(format!(
            "image {image_id} has unannotated cells (or is unknown)"
        )));
    }
    let data: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    Tensor::new(vec![GRID, GRID], data)
}

/// Generates a complete synthetic annotation set: `images x 49 cells x
/// annotators`, scores snapped to the lattice from a smooth per-image field
/// plus per-annotator jitter.
pub fn synth_annotations(images: usize, annotators: usize, seed: u64) -> Vec<AnnotationRecord> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(images * annotators * GRID * GRID);
    for img in 0..images {
        // smooth quality field over the grid
        let cx: f64 = rng.random_range(0.0..GRID as f64);
        let cy: f64 = rng.random_range(0.0..GRID as f64);
        let base: f64 = rng.random_range(2.0..4.0);
        let slope: f64 = rng.random_range(-2.0..2.0);
        for ann in 0..annotators {
            for row in 0..GRID {
                for col in 0..GRID {
                    let d = ((row as f64 - cx).powi(2) + (col as f64 - cy).powi(2)).sqrt() / GRID as f64;
                    let jitter: f64 = rng.random_range(-0.3..0.3);
                    let raw = base + slope * d + jitter;
                    let snapped = (raw.clamp(1.0, 5.0) * 2.0).round() / 2.0;
                    records.push(AnnotationRecord {
                        image_id: format!("img{img:03}"),
                        row,
                        col,
                        annotator_id: format!("ann{ann:02}"),
                        score: snapped,
                    });
                }
            }
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_synthetic_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        let records = synth_annotations(2, 14, 5);
        assert_eq!(records.len(), 2 * 14 * 49);
        write_lpvq_csv(&path, &records).unwrap();
        let back = load_lpvq_csv(&path).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn off_lattice_score_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut csv = String::from("image_id,row,col,annotator_id,score\n");
        for row in 0..GRID {
            for col in 0..GRID {
                let score = if row == 0 && col == 1 { "5.5" } else { "3.0" };
                csv.push_str(&format!("im,{row},{col},a,{score}\n"));
            }
        }
        std::fs::write(&path, csv).unwrap();
        match load_lpvq_csv(&path) {
            Err(KvqError::Validation { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("5.5"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn quarter_point_score_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "image_id,row,col,annotator_id,score\nim,0,0,a,2.25\n",
        )
        .unwrap();
        assert!(matches!(
            load_lpvq_csv(&path),
            Err(KvqError::Validation { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_annotation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.csv");
        std::fs::write(
            &path,
            "image_id,row,col,annotator_id,score\nim,0,0,a,3.0\nim,0,0,a,3.5\n",
        )
        .unwrap();
        assert!(matches!(
            load_lpvq_csv(&path),
            Err(KvqError::Validation { line: 3, .. })
        ));
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.csv");
        let mut csv = String::from("image_id,row,col,annotator_id,score\n");
        // 48 of 49 cells
        for i in 0..48 {
            csv.push_str(&format!("im,{},{},a,3.0\n", i / GRID, i % GRID));
        }
        std::fs::write(&path, csv).unwrap();
        assert!(matches!(load_lpvq_csv(&path), Err(KvqError::Validation { .. })));
    }

    #[test]
    fn cell_mos_matches_hand_average() {
        let mut records = Vec::new();
        for ann in 0..2 {
            for row in 0..GRID {
                for col in 0..GRID {
                    records.push(AnnotationRecord {
                        image_id: "x".to_string(),
                        row,
                        col,
                        annotator_id: format!("a{ann}"),
                        score: if ann == 0 { 2.0 } else { 3.0 },
                    });
                }
            }
        }
        let mos = cell_mos(&records, "x").unwrap();
        assert_eq!(mos.shape(), &[GRID, GRID]);
        assert!(mos.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(cell_mos(&records, "missing").is_err());
    }
}
