//! On-disk layout: `<stem>.frames` (frame sequence file) next to `<stem>.gt`
//! (records with score 1) for every generated sequence.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use super::scene::Scene;
use crate::error::{Error, Result};
use crate::head::{parse_records, write_records, Detection, GroundTruthBox, Record};
use crate::pointcloud::{read_frames, write_frames};

pub fn stem(i: usize) -> String {
    format!("seq_{i:04}")
}

pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        write_frames(&s.frames, &dir.join(format!("{}.frames", stem(i))))?;
        let recs: Vec<Record> = s
            .gts
            .iter()
            .enumerate()
            .flat_map(|(f, g)| g.iter().map(move |b| Record::from_ground_truth(f, b)))
            .collect();
        write_record_file(&dir.join(format!("{}.gt", stem(i))), &recs)?;
    }
    Ok(())
}

pub fn write_record_file(path: &Path, records: &[Record]) -> Result<()> {
    write_records(BufWriter::new(File::create(path)?), records)
}

pub fn read_record_file(path: &Path) -> Result<Vec<Record>> {
    parse_records(BufReader::new(File::open(path)?))
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    Ok(v)
}

/// Reads every sequence of `dir`. Visibility is not stored and reads back as
/// all true.
pub fn read_dataset(dir: &Path) -> Result<Vec<(String, Scene)>> {
    let files = files_with_ext(dir, "frames")?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .frames files in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|path| {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let frames = read_frames(&path)?;
            let mut gts: Vec<Vec<GroundTruthBox>> = vec![Vec::new(); frames.len()];
            for r in read_record_file(&path.with_extension("gt"))? {
                let slot = gts
                    .get_mut(r.frame)
                    .ok_or_else(|| Error::Format(format!("{name}: ground truth for missing frame {}", r.frame)))?;
                slot.push(GroundTruthBox {
                    bbox: r.bbox,
                    velocity: r.velocity,
                    class: r.class,
                });
            }
            let visible = gts.iter().map(|g| vec![true; g.len()]).collect();
            let object_points = gts.iter().map(|g| vec![0; g.len()]).collect();
            Ok((
                name,
                Scene {
                    frames,
                    gts,
                    visible,
                    object_points,
                },
            ))
        })
        .collect()
}

/// Records grouped by frame, as detections.
pub fn group_by_frame(records: &[Record]) -> BTreeMap<usize, Vec<Detection>> {
    let mut m: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for r in records {
        m.entry(r.frame).or_default().push(Detection {
            bbox: r.bbox,
            velocity: r.velocity,
            class: r.class,
            score: r.score,
        });
    }
    m
}
