//! Cross-frame berry identity by greedy IoU association.
//!
//! Masks must already be in reference-frame coordinates. Frame 0 seeds the
//! track identities; each later instance is assigned to the track whose most
//! recent mask overlaps it best, greedily in descending IoU order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BerryTrack, InstanceMask, InstanceMaskSet, TrackEntry};
use crate::raster::{write_png, RgbRaster};

#[derive(Debug, Clone)]
pub struct TrackFrame {
    pub session_id: String,
    pub capture_date: String,
    pub mask_ref: String,
    pub masks: InstanceMaskSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationParams {
    pub iou_threshold: f64,
    /// Tracks unseen for more than this many consecutive frames are retired.
    pub max_gap: usize,
    /// Start a new track for every unmatched instance after frame 0.
    pub spawn_tracks: bool,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            max_gap: 3,
            spawn_tracks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmatchedInstances {
    pub session_id: String,
    pub frame_index: usize,
    pub instance_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub tracks: Vec<BerryTrack>,
    /// One entry per frame, possibly with an empty id list.
    pub unmatched: Vec<UnmatchedInstances>,
}

struct LiveTrack {
    last_mask: InstanceMask,
    last_frame: usize,
}

pub fn associate(frames: &[TrackFrame]) -> Result<TrackSet> {
    associate_with(frames, &AssociationParams::default())
}

pub fn associate_with(frames: &[TrackFrame], params: &AssociationParams) -> Result<TrackSet> {
    if frames.is_empty() {
        return Err(Error::Validation("track association needs at least one frame".into()));
    }
    for w in frames.windows(2) {
        if w[1].capture_date <= w[0].capture_date {
            return Err(Error::Validation(format!(
                "frames out of date order: {} ({}) after {} ({})",
                w[1].session_id, w[1].capture_date, w[0].session_id, w[0].capture_date
            )));
        }
    }

    let entry = |frame: &TrackFrame, index: usize, inst: &InstanceMask, iou: Option<f64>| TrackEntry {
        session_id: frame.session_id.clone(),
        capture_date: frame.capture_date.clone(),
        frame_index: index,
        instance_id: inst.id,
        mask_ref: frame.mask_ref.clone(),
        iou,
        mean_rgb: None,
        feature: None,
        class_label: None,
        ripeness: None,
    };

    let mut tracks: Vec<BerryTrack> = Vec::new();
    let mut live: Vec<LiveTrack> = Vec::new();
    let mut unmatched = Vec::with_capacity(frames.len());

    for inst in &frames[0].masks.instances {
        tracks.push(BerryTrack {
            berry_id: tracks.len() as u32 + 1,
            entries: vec![entry(&frames[0], 0, inst, None)],
        });
        live.push(LiveTrack {
            last_mask: inst.clone(),
            last_frame: 0,
        });
    }
    unmatched.push(UnmatchedInstances {
        session_id: frames[0].session_id.clone(),
        frame_index: 0,
        instance_ids: Vec::new(),
    });

    for (fi, frame) in frames.iter().enumerate().skip(1) {
        let instances = &frame.masks.instances;
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in live.iter().enumerate() {
            if fi - t.last_frame - 1 > params.max_gap {
                continue;
            }
            for (ii, inst) in instances.iter().enumerate() {
                let iou = t.last_mask.iou(inst);
                if iou >= params.iou_threshold && iou > 0.0 {
                    pairs.push((iou, ti, ii));
                }
            }
        }
        // Highest IoU first; ties go to the lower track id, then lower instance id.
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; live.len()];
        let mut inst_used = vec![false; instances.len()];
        for (iou, ti, ii) in pairs {
            if track_used[ti] || inst_used[ii] {
                continue;
            }
            track_used[ti] = true;
            inst_used[ii] = true;
            tracks[ti].entries.push(entry(frame, fi, &instances[ii], Some(iou)));
            live[ti] = LiveTrack {
                last_mask: instances[ii].clone(),
                last_frame: fi,
            };
        }
        let mut leftover = Vec::new();
        for (ii, inst) in instances.iter().enumerate() {
            if inst_used[ii] {
                continue;
            }
            if params.spawn_tracks {
                tracks.push(BerryTrack {
                    berry_id: tracks.len() as u32 + 1,
                    entries: vec![entry(frame, fi, inst, None)],
                });
                live.push(LiveTrack {
                    last_mask: inst.clone(),
                    last_frame: fi,
                });
            } else {
                leftover.push(inst.id);
            }
        }
        unmatched.push(UnmatchedInstances {
            session_id: frame.session_id.clone(),
            frame_index: fi,
            instance_ids: leftover,
        });
    }
    Ok(TrackSet { tracks, unmatched })
}

/// Tight crop of one berry. Pixels outside the mask have zero alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct BerryChip {
    pub row0: u32,
    pub col0: u32,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f32; 3]>,
    pub alpha: Vec<bool>,
    pub mean_rgb: [f64; 3],
}

impl BerryChip {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .rgb
            .iter()
            .zip(&self.alpha)
            .flat_map(|(p, &a)| {
                let q = p.map(crate::raster::quantize_u8);
                [q[0], q[1], q[2], if a { 255 } else { 0 }]
            })
            .collect();
        write_png(
            path.as_ref(),
            self.width,
            self.height,
            png::ColorType::Rgba,
            png::BitDepth::Eight,
            &bytes,
            &[],
        )
    }
}

/// Mean color over the mask pixels.
pub fn mean_rgb(image: &RgbRaster, mask: &InstanceMask) -> Result<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0u64;
    for (r, c) in mask.pixels() {
        let (x, y) = (c as usize, r as usize);
        if x >= image.width() || y >= image.height() {
            return Err(Error::Validation(format!(
                "instance {} pixel ({r}, {c}) outside {}x{} image",
                mask.id,
                image.width(),
                image.height()
            )));
        }
        let p = image.get(x, y);
        for k in 0..3 {
            sum[k] += p[k] as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Validation(format!("instance {} has an empty mask", mask.id)));
    }
    Ok(sum.map(|s| s / n as f64))
}

pub fn extract_berry_chip(image: &RgbRaster, mask: &InstanceMask) -> Result<BerryChip> {
    let mean = mean_rgb(image, mask)?;
    let (r0, c0, r1, c1) = mask
        .bbox()
        .ok_or_else(|| Error::Validation(format!("instance {} has an empty mask", mask.id)))?;
    let width = (c1 - c0 + 1) as usize;
    let height = (r1 - r0 + 1) as usize;
    let mut rgb = vec![[0.0f32; 3]; width * height];
    let mut alpha = vec![false; width * height];
    for (r, c) in mask.pixels() {
        let i = (r - r0) as usize * width + (c - c0) as usize;
        rgb[i] = image.get(c as usize, r as usize);
        alpha[i] = true;
    }
    Ok(BerryChip {
        row0: r0,
        col0: c0,
        width,
        height,
        rgb,
        alpha,
        mean_rgb: mean,
    })
}
