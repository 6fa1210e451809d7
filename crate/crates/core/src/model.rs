//! Domain types and interchange file formats.
//!
//! * Manifests and series: JSON, image paths resolved relative to the file.
//! * Features: CSV with header `berry_id,timepoint,dim_0,...,dim_{D-1}`.
//! * Masks: 16-bit grayscale label PNG (0 = background) or RLE JSON
//!   `{frame_id, instances:[{id, rle:[[row,col_start,len],...]}]}`.
//!
//! Every loader validates before returning, so loaded values always satisfy
//! their type invariants.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::write_png;

pub const CARD_PATCHES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Aerial,
    Ground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayPatchSample {
    pub measured_rgb: [f64; 3],
    pub reference_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub bog_id: String,
    pub variety: String,
    pub capture_date: String,
    pub image_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub card_patches: Option<Vec<GrayPatchSample>>,
    pub role: Role,
}

/// A named, date-ordered sequence of sessions (one ground series or one bog's flights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub series_id: String,
    pub sessions: Vec<SessionManifest>,
}

/// Checks `YYYY-MM-DD`. Dates compare lexicographically once validated.
pub fn validate_date(date: &str) -> Result<()> {
    if date.len() != 10 || chrono::NaiveDate::parse_from_str(date, "%Y-%m-%d").is_err() {
        return Err(Error::Validation(format!(
            "capture_date {date:?} is not an ISO-8601 date (YYYY-MM-DD)"
        )));
    }
    Ok(())
}

impl SessionManifest {
    pub fn validate(&self) -> Result<()> {
        if self.session_id.trim().is_empty() {
            return Err(Error::Validation("session_id must not be empty".into()));
        }
        validate_date(&self.capture_date)?;
        if let Some(patches) = &self.card_patches {
            validate_card(patches)?;
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        for p in &mut self.image_paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
                ));
            }
        }
        Ok(())
    }
}

fn validate_card(patches: &[GrayPatchSample]) -> Result<()> {
    if patches.len() != CARD_PATCHES {
        return Err(Error::Validation(format!(
            "card_patches must have {CARD_PATCHES} entries, got {}",
            patches.len()
        )));
    }
    for (i, p) in patches.iter().enumerate() {
        let in_range = |v: f64| v.is_finite() && (0.0..=255.0).contains(&v);
        if !p.measured_rgb.iter().all(|&v| in_range(v)) || !in_range(p.reference_value) {
            return Err(Error::Validation(format!(
                "card_patches[{i}]: values must lie in [0, 255]"
            )));
        }
    }
    if patches
        .windows(2)
        .any(|w| w[1].reference_value >= w[0].reference_value)
    {
        return Err(Error::Validation(
            "card_patches: reference_value must be strictly decreasing (brightest first)".into(),
        ));
    }
    Ok(())
}

impl Series {
    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::Validation(format!(
                "series {:?} has no sessions",
                self.series_id
            )));
        }
        for s in &self.sessions {
            s.validate()?;
        }
        for w in self.sessions.windows(2) {
            if w[1].capture_date <= w[0].capture_date {
                return Err(Error::Validation(format!(
                    "series {:?}: capture dates must strictly increase ({} then {})",
                    self.series_id, w[0].capture_date, w[1].capture_date
                )));
            }
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Validation(format!("{what}: {e}")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads and validates a session manifest; image paths are resolved against
/// the manifest's directory and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<SessionManifest> {
    let path = path.as_ref();
    let mut m: SessionManifest = parse_json(&read_to_string(path)?, "manifest")?;
    m.validate()?;
    m.resolve_paths(&base_dir(path))?;
    Ok(m)
}

pub fn save_manifest(manifest: &SessionManifest, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), manifest)
}

pub fn load_series(path: impl AsRef<Path>) -> Result<Series> {
    let path = path.as_ref();
    let mut s: Series = parse_json(&read_to_string(path)?, "series")?;
    s.validate()?;
    let base = base_dir(path);
    for m in &mut s.sessions {
        m.resolve_paths(&base)?;
    }
    Ok(s)
}

pub fn save_series(series: &Series, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), series)
}

// ---------------------------------------------------------------------------
// Features

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub berry_id: u32,
    pub timepoint_index: u32,
    pub vector: Vec<f64>,
}

/// Parses a feature CSV. Records come back in file order; `#` lines are comments.
pub fn parse_features(reader: impl Read) -> Result<Vec<FeatureRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let dim = validate_feature_header(&header)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse { line, message };
        let berry_id: u32 = row[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("berry_id {:?}: {e}", &row[0])))?;
        let timepoint_index: u32 = row[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("timepoint {:?}: {e}", &row[1])))?;
        let mut vector = Vec::with_capacity(dim);
        for field in row.iter().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("value {field:?}: {e}")))?;
            vector.push(v);
        }
        if !seen.insert((berry_id, timepoint_index)) {
            return Err(Error::Validation(format!(
                "duplicate feature row for berry_id {berry_id}, timepoint {timepoint_index} (line {line})"
            )));
        }
        out.push(FeatureRecord {
            berry_id,
            timepoint_index,
            vector,
        });
    }
    Ok(out)
}

fn validate_feature_header(header: &csv::StringRecord) -> Result<usize> {
    let bad = |message: String| Error::Parse { line: 1, message };
    if header.len() < 3 || &header[0] != "berry_id" || &header[1] != "timepoint" {
        return Err(bad(
            "header must be berry_id,timepoint,dim_0,...,dim_{D-1}".into(),
        ));
    }
    for (i, name) in header.iter().skip(2).enumerate() {
        if name != format!("dim_{i}") {
            return Err(bad(format!("expected column dim_{i}, found {name:?}")));
        }
    }
    Ok(header.len() - 2)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("ragged row: expected {expected_len} fields, found {len}"),
        _ => e.to_string(),
    };
    Error::Parse { line, message }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_features(std::io::BufReader::new(file))
}

/// Serializes records as feature CSV (LF endings). Values use the shortest
/// representation that parses back to the same `f64`.
pub fn features_to_csv(records: &[FeatureRecord], comment: Option<&str>) -> Result<String> {
    let dim = records.first().map(|r| r.vector.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::Validation("feature records must have dimension >= 1".into()));
    }
    let mut out = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str("berry_id,timepoint");
    for i in 0..dim {
        out.push_str(&format!(",dim_{i}"));
    }
    out.push('\n');
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::Validation(format!(
                "berry {} timepoint {}: dimension {} differs from {dim}",
                r.berry_id,
                r.timepoint_index,
                r.vector.len()
            )));
        }
        out.push_str(&format!("{},{}", r.berry_id, r.timepoint_index));
        for v in &r.vector {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_features(records: &[FeatureRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, features_to_csv(records, None)?).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Masks

/// One horizontal run of mask pixels: `len` pixels starting at (`row`, `col_start`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 3]", into = "[u32; 3]")]
pub struct Run {
    pub row: u32,
    pub col_start: u32,
    pub len: u32,
}

impl From<[u32; 3]> for Run {
    fn from(v: [u32; 3]) -> Self {
        Run {
            row: v[0],
            col_start: v[1],
            len: v[2],
        }
    }
}

impl From<Run> for [u32; 3] {
    fn from(r: Run) -> Self {
        [r.row, r.col_start, r.len]
    }
}

impl Run {
    fn col_end(&self) -> u32 {
        self.col_start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub id: u32,
    #[serde(rename = "rle")]
    pub runs: Vec<Run>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMaskSet {
    pub frame_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub instances: Vec<InstanceMask>,
}

impl InstanceMask {
    /// Builds a canonical mask from arbitrary (row, col) pixels; duplicates collapse.
    pub fn from_pixels(id: u32, pixels: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut px: Vec<(u32, u32)> = pixels.into_iter().collect();
        px.sort_unstable();
        px.dedup();
        let mut runs: Vec<Run> = Vec::new();
        for (row, col) in px {
            match runs.last_mut() {
                Some(r) if r.row == row && r.col_end() == col => r.len += 1,
                _ => runs.push(Run {
                    row,
                    col_start: col,
                    len: 1,
                }),
            }
        }
        InstanceMask { id, runs }
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().map(|r| r.len as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.runs
            .iter()
            .flat_map(|r| (r.col_start..r.col_end()).map(move |c| (r.row, c)))
    }

    /// `(row_min, col_min, row_max, col_max)`, inclusive.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let first = self.runs.first()?;
        let mut b = (first.row, first.col_start, first.row, first.col_end() - 1);
        for r in &self.runs {
            b.0 = b.0.min(r.row);
            b.1 = b.1.min(r.col_start);
            b.2 = b.2.max(r.row);
            b.3 = b.3.max(r.col_end() - 1);
        }
        Some(b)
    }

    /// Pixel count of the intersection. Both masks must be canonical (sorted runs).
    pub fn intersection_area(&self, other: &InstanceMask) -> u64 {
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let (ra, rb) = (a[i], b[j]);
            if ra.row != rb.row {
                if ra.row < rb.row {
                    i += 1;
                } else {
                    j += 1;
                }
                continue;
            }
            let lo = ra.col_start.max(rb.col_start);
            let hi = ra.col_end().min(rb.col_end());
            if hi > lo {
                total += (hi - lo) as u64;
            }
            if ra.col_end() <= rb.col_end() {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    pub fn iou(&self, other: &InstanceMask) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Shifts every pixel; pixels leaving the non-negative quadrant are dropped.
    pub fn translated(&self, d_row: i64, d_col: i64) -> InstanceMask {
        let px = self.pixels().filter_map(|(r, c)| {
            let r = r as i64 + d_row;
            let c = c as i64 + d_col;
            (r >= 0 && c >= 0 && r <= u32::MAX as i64 && c <= u32::MAX as i64)
                .then_some((r as u32, c as u32))
        });
        InstanceMask::from_pixels(self.id, px)
    }

    /// 1-pixel erosion with a 4-neighbourhood structuring element.
    pub fn eroded(&self) -> InstanceMask {
        let set: HashSet<(u32, u32)> = self.pixels().collect();
        let keep = self.pixels().filter(|&(r, c)| {
            r > 0
                && c > 0
                && set.contains(&(r - 1, c))
                && set.contains(&(r + 1, c))
                && set.contains(&(r, c - 1))
                && set.contains(&(r, c + 1))
        });
        InstanceMask::from_pixels(self.id, keep.collect::<Vec<_>>())
    }

    fn canonicalize(&mut self) -> Result<()> {
        if self.runs.iter().any(|r| r.len == 0) {
            return Err(Error::Validation(format!(
                "instance {}: zero-length RLE run",
                self.id
            )));
        }
        self.runs.sort_unstable();
        let mut merged: Vec<Run> = Vec::with_capacity(self.runs.len());
        for r in self.runs.drain(..) {
            match merged.last_mut() {
                Some(m) if m.row == r.row && m.col_end() > r.col_start => {
                    return Err(Error::Validation(format!(
                        "instance {}: overlapping RLE runs in row {}",
                        self.id, r.row
                    )));
                }
                Some(m) if m.row == r.row && m.col_end() == r.col_start => m.len += r.len,
                _ => merged.push(r),
            }
        }
        self.runs = merged;
        Ok(())
    }
}

impl InstanceMaskSet {
    pub fn new(frame_id: impl Into<String>, width: u32, height: u32, instances: Vec<InstanceMask>) -> Result<Self> {
        let mut set = InstanceMaskSet {
            frame_id: frame_id.into(),
            width: Some(width),
            height: Some(height),
            instances,
        };
        set.validate()?;
        Ok(set)
    }

    /// Canonicalizes (sorted instances, sorted merged runs) and checks ids,
    /// bounds and pairwise disjointness.
    pub fn validate(&mut self) -> Result<()> {
        for inst in &mut self.instances {
            if inst.id == 0 || inst.id > u16::MAX as u32 {
                return Err(Error::Validation(format!(
                    "instance id {} outside 1..=65535",
                    inst.id
                )));
            }
            if inst.runs.is_empty() {
                return Err(Error::Validation(format!("instance {} has no pixels", inst.id)));
            }
            inst.canonicalize()?;
        }
        self.instances.sort_by_key(|i| i.id);
        if let Some(w) = self.instances.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Validation(format!("duplicate instance id {}", w[0].id)));
        }
        if let (Some(w), Some(h)) = (self.width, self.height) {
            for inst in &self.instances {
                if let Some(r) = inst.runs.iter().find(|r| r.row >= h || r.col_end() > w) {
                    return Err(Error::Validation(format!(
                        "instance {}: run {:?} outside {w}x{h} frame",
                        inst.id, r
                    )));
                }
            }
        }
        let mut all: Vec<(Run, u32)> = self
            .instances
            .iter()
            .flat_map(|i| i.runs.iter().map(move |&r| (r, i.id)))
            .collect();
        all.sort_unstable();
        for w in all.windows(2) {
            let ((a, ia), (b, ib)) = (w[0], w[1]);
            if a.row == b.row && a.col_end() > b.col_start {
                return Err(Error::Validation(format!(
                    "overlapping RLE runs: instances {ia} and {ib} share pixels in row {}",
                    a.row
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&InstanceMask> {
        self.instances
            .binary_search_by_key(&id, |i| i.id)
            .ok()
            .map(|k| &self.instances[k])
    }

    /// Decodes a label image (row-major, 0 = background).
    pub fn from_label_image(frame_id: impl Into<String>, width: u32, height: u32, labels: &[u16]) -> Result<Self> {
        if labels.len() != (width as usize) * (height as usize) {
            return Err(Error::Validation(format!(
                "label image has {} pixels, expected {width}x{height}",
                labels.len()
            )));
        }
        let mut by_id: BTreeMap<u32, Vec<Run>> = BTreeMap::new();
        for row in 0..height {
            let line = &labels[(row * width) as usize..((row + 1) * width) as usize];
            let mut col = 0u32;
            while col < width {
                let id = line[col as usize];
                let start = col;
                while col < width && line[col as usize] == id {
                    col += 1;
                }
                if id != 0 {
                    by_id.entry(id as u32).or_default().push(Run {
                        row,
                        col_start: start,
                        len: col - start,
                    });
                }
            }
        }
        let instances = by_id
            .into_iter()
            .map(|(id, runs)| InstanceMask { id, runs })
            .collect();
        InstanceMaskSet::new(frame_id, width, height, instances)
    }

    pub fn to_label_image(&self) -> Result<(u32, u32, Vec<u16>)> {
        let (w, h) = self.dims()?;
        let mut labels = vec![0u16; (w as usize) * (h as usize)];
        for inst in &self.instances {
            for (r, c) in inst.pixels() {
                labels[(r * w + c) as usize] = inst.id as u16;
            }
        }
        Ok((w, h, labels))
    }

    fn dims(&self) -> Result<(u32, u32)> {
        match (self.width, self.height) {
            (Some(w), Some(h)) => Ok((w, h)),
            _ => Err(Error::Validation(format!(
                "mask set {:?} has no frame dimensions",
                self.frame_id
            ))),
        }
    }

    pub fn total_area(&self) -> u64 {
        self.instances.iter().map(InstanceMask::area).sum()
    }
}

/// Loads a mask file. `.png` is read as a 16-bit label image whose file stem
/// becomes the frame id; anything else is parsed as RLE JSON.
pub fn load_masks(path: impl AsRef<Path>) -> Result<InstanceMaskSet> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .into_luma16();
        let (w, h) = img.dimensions();
        let frame_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        InstanceMaskSet::from_label_image(frame_id, w, h, img.as_raw())
    } else {
        parse_masks_json(&read_to_string(path)?)
    }
}

pub fn parse_masks_json(text: &str) -> Result<InstanceMaskSet> {
    let mut set: InstanceMaskSet = parse_json(text, "mask set")?;
    set.validate()?;
    Ok(set)
}

pub fn save_masks_json(set: &InstanceMaskSet, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), set)
}

pub fn save_masks_png(set: &InstanceMaskSet, path: impl AsRef<Path>) -> Result<()> {
    let (w, h, labels) = set.to_label_image()?;
    let bytes: Vec<u8> = labels.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(
        path.as_ref(),
        w as usize,
        h as usize,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
        &[],
    )
}

// ---------------------------------------------------------------------------
// Tracks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub session_id: String,
    pub capture_date: String,
    pub frame_index: usize,
    pub instance_id: u32,
    /// Mask file (or frame id) the instance was read from.
    pub mask_ref: String,
    /// IoU against the previous observation; absent for the seeding entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_rgb: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ripeness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerryTrack {
    pub berry_id: u32,
    pub entries: Vec<TrackEntry>,
}

impl BerryTrack {
    pub fn validate(&self) -> Result<()> {
        let mut sessions = HashSet::new();
        for e in &self.entries {
            if !sessions.insert(e.session_id.as_str()) {
                return Err(Error::Validation(format!(
                    "berry {}: more than one entry for session {:?}",
                    self.berry_id, e.session_id
                )));
            }
            if let Some(r) = e.ripeness {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::Validation(format!(
                        "berry {}: ripeness {r} outside [0, 1]",
                        self.berry_id
                    )));
                }
            }
            if let Some(c) = e.class_label {
                if !(1..=5).contains(&c) {
                    return Err(Error::Validation(format!(
                        "berry {}: class label {c} outside 1..=5",
                        self.berry_id
                    )));
                }
            }
        }
        if self
            .entries
            .windows(2)
            .any(|w| w[1].capture_date <= w[0].capture_date)
        {
            return Err(Error::Validation(format!(
                "berry {}: entries must be in strictly increasing date order",
                self.berry_id
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> SessionManifest {
        SessionManifest {
            session_id: "s1".into(),
            bog_id: "A5".into(),
            variety: "Mullica Queen".into(),
            capture_date: "2024-08-02".into(),
            image_paths: vec![PathBuf::from("img.png")],
            card_patches: None,
            role: Role::Aerial,
        }
    }

    fn patches(n: usize) -> Vec<GrayPatchSample> {
        (0..n)
            .map(|i| GrayPatchSample {
                measured_rgb: [200.0 - 30.0 * i as f64; 3],
                reference_value: 240.0 - 35.0 * i as f64,
            })
            .collect()
    }

    #[test]
    fn minimal_manifest_loads_without_card() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("img.png"), b"x").unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"{"session_id":"s1","bog_id":"A5","variety":"Mullica Queen",
                "capture_date":"2024-08-02","image_paths":["img.png"],"role":"aerial"}"#,
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert!(m.card_patches.is_none());
        assert_eq!(m.image_paths[0], dir.path().join("img.png"));
    }

    #[test]
    fn five_card_patches_rejected() {
        let mut m = manifest();
        m.card_patches = Some(patches(5));
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("card_patches must have 6 entries"), "{err}");
        m.card_patches = Some(patches(6));
        m.validate().unwrap();
    }

    #[test]
    fn card_reference_must_decrease() {
        let mut p = patches(6);
        p.swap(1, 2);
        let mut m = manifest();
        m.card_patches = Some(p);
        assert!(m.validate().is_err());
    }

    #[test]
    fn missing_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&manifest(), &path).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Io { path, .. } => assert!(path.ends_with("img.png")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn schema_violation_names_field() {
        let err = parse_json::<SessionManifest>(r#"{"session_id":"x"}"#, "manifest")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bog_id"), "{err}");
    }

    #[test]
    fn bad_date_rejected() {
        let mut m = manifest();
        m.capture_date = "8/2/2024".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn series_dates_must_increase() {
        let mut b = manifest();
        b.session_id = "s2".into();
        let s = Series {
            series_id: "g".into(),
            sessions: vec![manifest(), b],
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn features_small_file() {
        let text = "berry_id,timepoint,dim_0,dim_1,dim_2,dim_3\n1,0,0.5,1,2,3\n1,1,4,5,6,7e-3\n";
        let recs = parse_features(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].vector.len(), 4);
        assert_eq!(recs[1].vector[3], 7e-3);
    }

    #[test]
    fn features_duplicate_key_named() {
        let text = "berry_id,timepoint,dim_0\n3,5,1\n3,5,2\n";
        let err = parse_features(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("berry_id 3") && err.contains("timepoint 5"), "{err}");
    }

    #[test]
    fn features_ragged_row_reports_line() {
        let text = "berry_id,timepoint,dim_0,dim_1\n1,0,1,2\n1,1,3\n";
        match parse_features(text.as_bytes()).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("ragged"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn features_bad_header() {
        let text = "berry,timepoint,dim_0\n1,0,1\n";
        assert!(parse_features(text.as_bytes()).is_err());
        let text = "berry_id,timepoint,dim_1\n1,0,1\n";
        assert!(parse_features(text.as_bytes()).is_err());
    }

    #[test]
    fn all_zero_label_image_is_empty() {
        let set = InstanceMaskSet::from_label_image("f", 4, 3, &[0; 12]).unwrap();
        assert!(set.instances.is_empty());
    }

    #[test]
    fn label_image_two_ids() {
        #[rustfmt::skip]
        let labels = [
            1, 1, 0, 2,
            1, 0, 2, 2,
        ];
        let set = InstanceMaskSet::from_label_image("f", 4, 2, &labels).unwrap();
        assert_eq!(set.instances.len(), 2);
        assert_eq!(set.get(1).unwrap().area(), 3);
        assert_eq!(set.get(2).unwrap().area(), 3);
        assert_eq!(set.get(1).unwrap().intersection_area(set.get(2).unwrap()), 0);
        let (_, _, back) = set.to_label_image().unwrap();
        assert_eq!(back, labels);
    }

    #[test]
    fn overlapping_runs_rejected() {
        let json = r#"{"frame_id":"f","instances":[
            {"id":1,"rle":[[0,0,4]]},{"id":2,"rle":[[0,3,2]]}]}"#;
        let err = parse_masks_json(json).unwrap_err().to_string();
        assert!(err.contains("overlapping"), "{err}");
        let json = r#"{"frame_id":"f","instances":[{"id":1,"rle":[[0,0,4],[0,2,1]]}]}"#;
        assert!(parse_masks_json(json).is_err());
    }

    #[test]
    fn out_of_bounds_run_rejected() {
        let json = r#"{"frame_id":"f","width":4,"height":2,"instances":[{"id":1,"rle":[[1,2,3]]}]}"#;
        assert!(parse_masks_json(json).is_err());
    }

    #[test]
    fn adjacent_runs_merge() {
        let json = r#"{"frame_id":"f","instances":[{"id":1,"rle":[[0,2,2],[0,0,2]]}]}"#;
        let set = parse_masks_json(json).unwrap();
        assert_eq!(set.instances[0].runs, vec![Run { row: 0, col_start: 0, len: 4 }]);
    }

    #[test]
    fn iou_and_erosion() {
        let a = InstanceMask::from_pixels(1, (0..4).flat_map(|r| (0..4).map(move |c| (r, c))));
        let b = a.translated(0, 2);
        assert_eq!(a.intersection_area(&b), 8);
        assert!((a.iou(&b) - 8.0 / 24.0).abs() < 1e-12);
        let e = InstanceMask::from_pixels(1, (0..5).flat_map(|r| (0..5).map(move |c| (r, c)))).eroded();
        assert_eq!(e.area(), 9);
        assert_eq!(e.bbox(), Some((1, 1, 3, 3)));
    }

    #[test]
    fn track_validation() {
        let entry = |s: &str, d: &str| TrackEntry {
            session_id: s.into(),
            capture_date: d.into(),
            frame_index: 0,
            instance_id: 1,
            mask_ref: "m".into(),
            iou: None,
            mean_rgb: None,
            feature: None,
            class_label: None,
            ripeness: Some(0.5),
        };
        let t = BerryTrack {
            berry_id: 1,
            entries: vec![entry("a", "2024-08-01"), entry("b", "2024-08-02")],
        };
        t.validate().unwrap();
        let dup = BerryTrack {
            berry_id: 1,
            entries: vec![entry("a", "2024-08-01"), entry("a", "2024-08-02")],
        };
        assert!(dup.validate().is_err());
        let mut bad = t.clone();
        bad.entries[0].ripeness = Some(1.5);
        assert!(bad.validate().is_err());
    }
}
