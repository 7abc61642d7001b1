//! On-disk track format: the annotations' RLE convention plus confidence,
//! at prediction mask resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ifc_core::error::Result;
use ifc_core::eval::EvalInstance;
use ifc_core::synth::{read_json, rle_decode, rle_encode, write_json};
use ifc_core::tracker::VideoInstance;

#[derive(Debug, Serialize, Deserialize)]
pub struct TrackFile {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub tracks: Vec<TrackEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrackEntry {
    pub id: usize,
    pub category: usize,
    pub confidence: f64,
    /// Alternating zero/one run lengths over the binarized
    /// `num_frames * height * width` volume, zeros first.
    pub rle: Vec<u64>,
}

pub fn tracks_to_file(tracks: &[VideoInstance], num_frames: usize, h: usize, w: usize) -> TrackFile {
    let frame_sz = h * w;
    TrackFile {
        height: h,
        width: w,
        num_frames,
        tracks: tracks
            .iter()
            .map(|t| {
                let mut volume = Vec::with_capacity(num_frames * frame_sz);
                for f in 0..num_frames {
                    volume.extend(t.binary_mask(f, frame_sz));
                }
                TrackEntry {
                    id: t.id,
                    category: t.category,
                    confidence: t.confidence,
                    rle: rle_encode(&volume),
                }
            })
            .collect(),
    }
}

pub fn file_to_eval(file: &TrackFile) -> Result<Vec<EvalInstance>> {
    let frame_sz = file.height * file.width;
    file.tracks
        .iter()
        .map(|t| {
            let volume = rle_decode(&t.rle, file.num_frames * frame_sz)?;
            Ok(EvalInstance {
                id: t.id,
                category: t.category,
                confidence: t.confidence,
                masks: (0..file.num_frames)
                    .map(|f| volume[f * frame_sz..(f + 1) * frame_sz].to_vec())
                    .collect(),
            })
        })
        .collect()
}

pub fn write_tracks(path: &Path, file: &TrackFile) -> Result<()> {
    write_json(path, file)
}

pub fn read_tracks(path: &Path) -> Result<TrackFile> {
    read_json(path)
}
