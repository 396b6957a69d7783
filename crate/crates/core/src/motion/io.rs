//! Corpus manifest and motion file formats.
//!
//! The manifest is line-delimited JSON, one record per entry. A motion file
//! is a little-endian header `T, F, J` (u32 each), `T` mask bytes (0/1), then
//! `T * F` row-major f32 values.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Family, MotionSequence, PoseLayout};
use crate::corpus::{CorpusEntry, SplitTag, ToxicityLevel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub caption: String,
    pub level: ToxicityLevel,
    pub split: String,
    pub motion_file: String,
}

pub fn save_motion<S: Scalar>(path: &Path, motion: &MotionSequence<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (t, f) = motion.frames().dim();
    for v in [t, f, motion.layout().joints()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for m in motion.mask() {
        w.write_all(&[u8::from(m)])?;
    }
    for v in motion.frames().iter() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_motion<S: Scalar>(path: &Path) -> Result<MotionSequence<S>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (t, f, j) = (word(0), word(1), word(2));
    let layout = PoseLayout::new(j)?;
    if layout.channels() != f {
        return Err(Error::format(path, format!("{f} channels but {j} joints")));
    }
    let expected = 12 + t + 4 * t * f;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("{} bytes, expected {expected}", bytes.len())));
    }
    let mask: Vec<bool> = bytes[12..12 + t]
        .iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::format(path, "mask byte not 0/1")),
        })
        .collect::<Result<_>>()?;
    let data: Vec<S> = bytes[12 + t..]
        .chunks_exact(4)
        .map(|c| S::lit(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
        .collect();
    let frames = Array2::from_shape_vec((t, f), data).map_err(|e| Error::format(path, e.to_string()))?;
    MotionSequence::with_mask(frames, &mask, layout)
}

/// Writes `manifest.jsonl` plus one motion file per entry under `dir/motions`.
pub fn save_corpus<S: Scalar>(dir: &Path, corpus: &[CorpusEntry<S>]) -> Result<()> {
    let motions = dir.join("motions");
    fs::create_dir_all(&motions)?;
    let mut w = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
    for e in corpus {
        let rel = format!("motions/{}.bin", e.id);
        save_motion(&dir.join(&rel), &e.motion)?;
        let rec = ManifestRecord {
            id: e.id.clone(),
            caption: e.caption.clone(),
            level: e.level,
            split: e.split.to_string(),
            motion_file: rel,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus<S: Scalar>(dir: &Path) -> Result<Vec<CorpusEntry<S>>> {
    let path = dir.join("manifest.jsonl");
    let reader = BufReader::new(File::open(&path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        let motion = load_motion(&dir.join(&rec.motion_file))?;
        out.push(CorpusEntry {
            family: Family::from_id(&rec.id),
            split: SplitTag::parse(&rec.split)?,
            id: rec.id,
            caption: rec.caption,
            level: rec.level,
            motion,
        });
    }
    Ok(out)
}
