//! Patch selection inside annotated regions.
//!
//! Grids are laid over each region's bounding box with an overlap that grows for
//! small regions, candidates mostly outside the polygon are dropped, and each
//! surviving patch is scored by cellularity: the fraction of pixels whose
//! hematoxylin concentration (Ruifrok-Johnston optical-density unmixing) exceeds
//! a fixed threshold.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{inside_pixel_count, AnnotatedRegion};
use crate::error::{Error, Result};

/// Step of the overlap schedule searched by [`plan_grid`].
pub const OVERLAP_STEP: f64 = 0.05;

/// Fraction of failed patches above which [`extract_patches`] aborts.
pub const MAX_FAILED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: u32,
    pub overlap_min: f64,
    pub overlap_max: f64,
    pub min_patches_target: usize,
    pub cellularity_threshold: f64,
    pub hematoxylin_od_threshold: f64,
    pub inside_fraction: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: 512,
            overlap_min: 0.20,
            overlap_max: 0.80,
            min_patches_target: 32,
            cellularity_threshold: 0.08,
            hematoxylin_od_threshold: 0.15,
            inside_fraction: 0.75,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size < 32 {
            return bad(format!("patch_size {} < 32", self.patch_size));
        }
        if !(0.0 <= self.overlap_min && self.overlap_min < self.overlap_max && self.overlap_max < 1.0) {
            return bad(format!(
                "need 0 <= overlap_min < overlap_max < 1, got {} and {}",
                self.overlap_min, self.overlap_max
            ));
        }
        if !(self.cellularity_threshold > 0.0 && self.cellularity_threshold < 1.0) {
            return bad(format!(
                "cellularity_threshold {} not in (0, 1)",
                self.cellularity_threshold
            ));
        }
        if !self.hematoxylin_od_threshold.is_finite() {
            return bad("hematoxylin_od_threshold must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.inside_fraction) {
            return bad(format!("inside_fraction {} not in [0, 1]", self.inside_fraction));
        }
        Ok(())
    }

    /// Overlap fractions tried in order, ending exactly at `overlap_max`.
    pub fn overlap_schedule(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0.. {
            let o = ((self.overlap_min + OVERLAP_STEP * i as f64) * 1e9).round() / 1e9;
            if o >= self.overlap_max - 1e-9 {
                break;
            }
            out.push(o);
        }
        out.push(self.overlap_max);
        out
    }

    pub fn stride(&self, overlap: f64) -> u32 {
        ((self.patch_size as f64 * (1.0 - overlap)).round() as u32).max(1)
    }
}

/// One candidate or retained patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub label_id: u32,
    pub origin: (u32, u32),
    pub size: u32,
    pub cellularity: f64,
    pub retained: bool,
}

impl PatchRecord {
    /// Record for an embedding that did not come out of patch extraction
    /// (CSV import, synthetic data): no geometry, counted as retained.
    pub fn from_ids(patch_id: impl Into<String>, slide_id: impl Into<String>, label_id: u32) -> Self {
        Self {
            patch_id: patch_id.into(),
            slide_id: slide_id.into(),
            label_id,
            origin: (0, 0),
            size: 0,
            cellularity: 1.0,
            retained: true,
        }
    }
}

/// Rows are unit optical-density vectors for hematoxylin, eosin and residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct StainMatrix {
    rows: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl StainMatrix {
    /// Normalizes each row to unit length and precomputes the inverse.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut m = Matrix3::zeros();
        for (r, row) in rows.iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::InvalidConfig(format!("stain row {r} has zero or non-finite norm")));
            }
            for c in 0..3 {
                m[(r, c)] = row[c] / norm;
            }
        }
        let det = m.determinant();
        if det.abs() <= 1e-6 {
            return Err(Error::InvalidConfig(format!("stain matrix is singular (det {det:.3e})")));
        }
        let inverse = m
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("stain matrix is singular".into()))?;
        Ok(Self { rows: m, inverse })
    }

    /// Standard H&E basis of Ruifrok and Johnston.
    pub fn hematoxylin_eosin() -> Self {
        Self::new([
            [0.650, 0.704, 0.286],
            [0.072, 0.990, 0.105],
            [0.268, 0.570, 0.776],
        ])
        .expect("reference stain matrix is invertible")
    }

    pub fn row(&self, r: usize) -> [f64; 3] {
        [self.rows[(r, 0)], self.rows[(r, 1)], self.rows[(r, 2)]]
    }

    /// Optical density → concentrations (`od · M⁻¹`).
    pub fn unmix(&self, od: [f64; 3]) -> [f64; 3] {
        let inv = &self.inverse;
        std::array::from_fn(|s| od[0] * inv[(0, s)] + od[1] * inv[(1, s)] + od[2] * inv[(2, s)])
    }

    /// Concentrations → optical density (`c · M`).
    pub fn mix(&self, conc: [f64; 3]) -> [f64; 3] {
        let m = &self.rows;
        std::array::from_fn(|ch| conc[0] * m[(0, ch)] + conc[1] * m[(1, ch)] + conc[2] * m[(2, ch)])
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::hematoxylin_eosin()
    }
}

impl TryFrom<[[f64; 3]; 3]> for StainMatrix {
    type Error = Error;
    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<StainMatrix> for [[f64; 3]; 3] {
    fn from(s: StainMatrix) -> Self {
        [s.row(0), s.row(1), s.row(2)]
    }
}

/// Optical density of one 8-bit channel value; 0 is clamped to 1.
pub fn optical_density(intensity: u8) -> f64 {
    -((intensity.max(1) as f64) / 255.0).log10()
}

fn od_table() -> [f64; 256] {
    std::array::from_fn(|i| optical_density(i as u8))
}

/// Per-pixel stain concentrations, row-major; channel 0 is hematoxylin.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl ConcentrationMap {
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }
}

pub fn deconvolve(rgb_patch: &RgbImage, stains: &StainMatrix) -> ConcentrationMap {
    let lut = od_table();
    let data = rgb_patch
        .pixels()
        .map(|p| stains.unmix([lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]]))
        .collect();
    ConcentrationMap {
        width: rgb_patch.width(),
        height: rgb_patch.height(),
        data,
    }
}

/// Forward model: `I = 255 · 10^(−c·M)`, rounded and clamped to 8 bits.
pub fn synthesize(map: &ConcentrationMap, stains: &StainMatrix) -> RgbImage {
    let mut img = RgbImage::new(map.width, map.height);
    for (px, c) in img.pixels_mut().zip(&map.data) {
        let od = stains.mix(*c);
        for ch in 0..3 {
            px[ch] = (255.0 * 10f64.powf(-od[ch])).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Fraction of pixels whose hematoxylin concentration exceeds
/// `spec.hematoxylin_od_threshold`.
pub fn cellularity(rgb_patch: &RgbImage, spec: &PatchSpec, stains: &StainMatrix) -> Result<f64> {
    if rgb_patch.width() != spec.patch_size || rgb_patch.height() != spec.patch_size {
        return Err(Error::InvalidInput(format!(
            "patch is {}x{}, spec expects {}x{}",
            rgb_patch.width(),
            rgb_patch.height(),
            spec.patch_size,
            spec.patch_size
        )));
    }
    Ok(hematoxylin_fraction(rgb_patch, spec.hematoxylin_od_threshold, stains))
}

fn hematoxylin_fraction(img: &RgbImage, threshold: f64, stains: &StainMatrix) -> f64 {
    let total = img.width() as u64 * img.height() as u64;
    if total == 0 {
        return 0.0;
    }
    let lut = od_table();
    let hit = img
        .pixels()
        .filter(|p| stains.unmix([lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]])[0] > threshold)
        .count();
    hit as f64 / total as f64
}

/// Result of grid planning for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPlan {
    /// Overlap actually used (`overlap_max` for the single-patch small-region case).
    pub overlap: f64,
    pub stride: u32,
    /// Grid positions before the inside-polygon filter.
    pub grid_count: usize,
    /// Top-left corners of the kept candidates, sorted by (x, y).
    pub origins: Vec<(u32, u32)>,
}

/// Lays out candidate patches for `region` inside an image of `image_size`.
///
/// Picks the smallest overlap on the [`PatchSpec::overlap_schedule`] whose
/// filtered grid reaches `min_patches_target`, falling back to `overlap_max`.
/// Boxes narrower than a patch get a single centered patch.
pub fn plan_grid(region: &AnnotatedRegion, spec: &PatchSpec, image_size: (u32, u32)) -> Result<GridPlan> {
    spec.validate()?;
    let (img_w, img_h) = image_size;
    let size = spec.patch_size;
    let bb = region.bounding_box();
    if bb.min_x >= img_w as f64 || bb.min_y >= img_h as f64 {
        return Err(Error::Geometry(format!(
            "region {:?} lies outside the {img_w}x{img_h} image",
            region.region_id
        )));
    }
    if img_w < size || img_h < size {
        return Err(Error::Geometry(format!(
            "image {img_w}x{img_h} is smaller than one {size}px patch"
        )));
    }
    let x_lo = bb.min_x.floor() as u32;
    let y_lo = bb.min_y.floor() as u32;
    let x_hi = (bb.max_x.ceil() as u32).min(img_w);
    let y_hi = (bb.max_y.ceil() as u32).min(img_h);
    let (box_w, box_h) = (x_hi - x_lo, y_hi - y_lo);

    if box_w < size || box_h < size {
        let center = |lo: f64, hi: f64, limit: u32| {
            let c = ((lo + hi) / 2.0 - size as f64 / 2.0).round();
            c.clamp(0.0, (limit - size) as f64) as u32
        };
        return Ok(GridPlan {
            overlap: spec.overlap_max,
            stride: spec.stride(spec.overlap_max),
            grid_count: 1,
            origins: vec![(
                center(bb.min_x, bb.max_x, img_w),
                center(bb.min_y, bb.max_y, img_h),
            )],
        });
    }

    let mut plan = None;
    for overlap in spec.overlap_schedule() {
        let p = grid_in_box(region, spec, (x_lo, y_lo, box_w, box_h), overlap);
        let done = p.origins.len() >= spec.min_patches_target;
        plan = Some(p);
        if done {
            break;
        }
    }
    Ok(plan.expect("overlap schedule is never empty"))
}

/// Candidate grid at one fixed overlap, without the overlap search or the
/// small-region fallback.
pub fn grid_at(region: &AnnotatedRegion, spec: &PatchSpec, image_size: (u32, u32), overlap: f64) -> Result<GridPlan> {
    spec.validate()?;
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidConfig(format!("overlap {overlap} not in [0, 1)")));
    }
    let size = spec.patch_size;
    let bb = region.bounding_box();
    let x_lo = bb.min_x.max(0.0).floor() as u32;
    let y_lo = bb.min_y.max(0.0).floor() as u32;
    let x_hi = (bb.max_x.ceil() as u32).min(image_size.0);
    let y_hi = (bb.max_y.ceil() as u32).min(image_size.1);
    if x_hi < x_lo + size || y_hi < y_lo + size {
        return Err(Error::Geometry(format!(
            "region {:?} box is smaller than one {size}px patch",
            region.region_id
        )));
    }
    Ok(grid_in_box(region, spec, (x_lo, y_lo, x_hi - x_lo, y_hi - y_lo), overlap))
}

fn grid_in_box(region: &AnnotatedRegion, spec: &PatchSpec, bx: (u32, u32, u32, u32), overlap: f64) -> GridPlan {
    let (x_lo, y_lo, box_w, box_h) = bx;
    let size = spec.patch_size;
    let need = (spec.inside_fraction * (size as f64 * size as f64)).ceil() as u64;
    let stride = spec.stride(overlap);
    let xs = axis_positions(x_lo, box_w, size, stride);
    let ys = axis_positions(y_lo, box_h, size, stride);
    let grid: Vec<(u32, u32)> = xs
        .iter()
        .flat_map(|&x| ys.iter().map(move |&y| (x, y)))
        .collect();
    let origins: Vec<(u32, u32)> = grid
        .par_iter()
        .copied()
        .filter(|&(x, y)| inside_pixel_count(region, x as i64, y as i64, size, size) >= need)
        .collect();
    GridPlan {
        overlap,
        stride,
        grid_count: grid.len(),
        origins,
    }
}

/// Grid positions along one axis: `floor((extent − size)/stride) + 1` patches,
/// with the leftover margin split evenly on both sides.
fn axis_positions(lo: u32, extent: u32, size: u32, stride: u32) -> Vec<u32> {
    let count = (extent - size) / stride + 1;
    let margin = (extent - size - (count - 1) * stride) / 2;
    (0..count).map(|i| lo + margin + i * stride).collect()
}

/// Pixel access for extraction: one big raster or a directory of tiles.
pub trait PatchSource: Sync {
    fn dimensions(&self) -> (u32, u32);
    fn read_region(&self, x: u32, y: u32, width: u32, height: u32) -> Result<RgbImage>;
}

impl PatchSource for RgbImage {
    fn dimensions(&self) -> (u32, u32) {
        RgbImage::dimensions(self)
    }

    fn read_region(&self, x: u32, y: u32, width: u32, height: u32) -> Result<RgbImage> {
        if x + width > self.width() || y + height > self.height() {
            return Err(Error::Image(format!(
                "region {width}x{height}+{x}+{y} exceeds raster {}x{}",
                self.width(),
                self.height()
            )));
        }
        Ok(image::imageops::crop_imm(self, x, y, width, height).to_image())
    }
}

/// Slide stored as uniform tiles named `tile_r{row}_c{col}.png` (or `.tif`).
#[derive(Debug, Clone)]
pub struct TileDirectory {
    pub dir: PathBuf,
    pub tile_size: u32,
    pub width: u32,
    pub height: u32,
}

impl TileDirectory {
    fn load_tile(&self, row: u32, col: u32) -> Result<RgbImage> {
        for ext in ["png", "tif", "tiff"] {
            let path = self.dir.join(format!("tile_r{row}_c{col}.{ext}"));
            if path.exists() {
                return image::open(&path)
                    .map(|i| i.to_rgb8())
                    .map_err(|e| Error::Image(format!("{}: {e}", path.display())));
            }
        }
        Err(Error::Image(format!(
            "tile r{row} c{col} not found in {}",
            self.dir.display()
        )))
    }
}

impl PatchSource for TileDirectory {
    fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn read_region(&self, x: u32, y: u32, width: u32, height: u32) -> Result<RgbImage> {
        let t = self.tile_size;
        let mut out = RgbImage::new(width, height);
        for row in y / t..=(y + height - 1) / t {
            for col in x / t..=(x + width - 1) / t {
                let tile = self.load_tile(row, col)?;
                let (tx, ty) = (col * t, row * t);
                for py in ty.max(y)..(ty + tile.height()).min(y + height) {
                    for px in tx.max(x)..(tx + tile.width()).min(x + width) {
                        out.put_pixel(px - x, py - y, *tile.get_pixel(px - tx, py - ty));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFailure {
    pub patch_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionSummary {
    pub records: Vec<PatchRecord>,
    pub failures: Vec<PatchFailure>,
}

impl ExtractionSummary {
    pub fn candidates(&self) -> usize {
        self.records.len() + self.failures.len()
    }

    pub fn retained(&self) -> usize {
        self.records.iter().filter(|r| r.retained).count()
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '-' })
        .collect()
}

pub fn patch_id(slide_id: &str, region_id: &str, origin: (u32, u32)) -> String {
    format!("{}_{}_{}_{}", sanitize(slide_id), sanitize(region_id), origin.0, origin.1)
}

/// Plans, crops and scores patches for every region.
///
/// Output order is (region_id, origin). `sink` receives every successfully
/// read patch (retained or not) in that order. Unreadable patches become
/// [`PatchFailure`]s; more than [`MAX_FAILED_FRACTION`] of them aborts.
pub fn extract_patches<S, F>(
    source: &S,
    regions: &[AnnotatedRegion],
    spec: &PatchSpec,
    stains: &StainMatrix,
    mut sink: F,
) -> Result<ExtractionSummary>
where
    S: PatchSource + ?Sized,
    F: FnMut(&PatchRecord, &RgbImage) -> Result<()>,
{
    spec.validate()?;
    let mut ordered: Vec<&AnnotatedRegion> = regions.iter().collect();
    ordered.sort_by(|a, b| a.region_id.cmp(&b.region_id));

    let mut summary = ExtractionSummary::default();
    let size = spec.patch_size;
    for region in ordered {
        let plan = plan_grid(region, spec, source.dimensions())?;
        for chunk in plan.origins.chunks(64) {
            let scored: Vec<std::result::Result<(PatchRecord, RgbImage), PatchFailure>> = chunk
                .par_iter()
                .map(|&origin| {
                    let id = patch_id(&region.slide_id, &region.region_id, origin);
                    match source.read_region(origin.0, origin.1, size, size) {
                        Ok(img) => {
                            let c = hematoxylin_fraction(&img, spec.hematoxylin_od_threshold, stains);
                            let rec = PatchRecord {
                                patch_id: id,
                                slide_id: region.slide_id.clone(),
                                label_id: region.label_id,
                                origin,
                                size,
                                cellularity: c,
                                retained: c > spec.cellularity_threshold,
                            };
                            Ok((rec, img))
                        }
                        Err(e) => Err(PatchFailure {
                            patch_id: id,
                            error: e.to_string(),
                        }),
                    }
                })
                .collect();
            for item in scored {
                match item {
                    Ok((rec, img)) => {
                        sink(&rec, &img)?;
                        summary.records.push(rec);
                    }
                    Err(f) => summary.failures.push(f),
                }
            }
        }
    }
    let total = summary.candidates();
    if total > 0 && summary.failures.len() as f64 > MAX_FAILED_FRACTION * total as f64 {
        return Err(Error::Image(format!(
            "{} of {total} patches failed (first: {}: {})",
            summary.failures.len(),
            summary.failures[0].patch_id,
            summary.failures[0].error
        )));
    }
    Ok(summary)
}

/// Loads a PNG or TIFF slide raster; a missing or unreadable file is an I/O error.
pub fn open_raster(path: &Path) -> Result<RgbImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(format!("{}: {other}", path.display())),
    })
}

/// Writes one JSON record per line.
pub fn write_manifest(path: &Path, records: &[PatchRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<PatchRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Point;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> AnnotatedRegion {
        AnnotatedRegion::new(
            "r",
            3,
            vec![
                Point::new(x0, y0),
                Point::new(x1, y0),
                Point::new(x1, y1),
                Point::new(x0, y1),
            ],
            "slide",
        )
        .unwrap()
    }

    /// Independent count: floor((L − P)/s) + 1 per axis.
    fn grid_oracle(extent: u32, patch: u32, overlap: f64) -> usize {
        let stride = (patch as f64 * (1.0 - overlap)).round() as u32;
        let per_axis = ((extent - patch) / stride + 1) as usize;
        per_axis * per_axis
    }

    #[test]
    fn full_box_at_twenty_percent() {
        let plan = plan_grid(&rect(0.0, 0.0, 5120.0, 5120.0), &PatchSpec::default(), (5120, 5120)).unwrap();
        assert_eq!(plan.overlap, 0.20);
        assert_eq!(plan.stride, 410);
        assert_eq!(plan.origins.len(), grid_oracle(5120, 512, 0.20));
        assert_eq!(plan.origins.len(), 144);
    }

    #[test]
    fn small_box_gives_one_centered_patch() {
        let plan = plan_grid(&rect(1000.0, 1000.0, 1300.0, 1300.0), &PatchSpec::default(), (4000, 4000)).unwrap();
        assert_eq!(plan.origins, vec![(1150 - 256, 1150 - 256)]);
        // clamped against the image edge
        let edge = plan_grid(&rect(0.0, 0.0, 300.0, 300.0), &PatchSpec::default(), (4000, 4000)).unwrap();
        assert_eq!(edge.origins, vec![(0, 0)]);
    }

    #[test]
    fn target_count_raises_overlap() {
        let spec = PatchSpec {
            min_patches_target: 200,
            ..PatchSpec::default()
        };
        // monotone search over the 0.05 grid
        let expected = spec
            .overlap_schedule()
            .into_iter()
            .find(|&o| grid_oracle(5120, 512, o) >= 200)
            .unwrap();
        let plan = plan_grid(&rect(0.0, 0.0, 5120.0, 5120.0), &spec, (5120, 5120)).unwrap();
        assert!((plan.overlap - expected).abs() < 1e-12);
        assert!((plan.overlap - 0.40).abs() < 1e-12);
        assert_eq!(plan.origins.len(), 256);
    }

    #[test]
    fn unreachable_target_stops_at_max_overlap() {
        let spec = PatchSpec {
            min_patches_target: 1_000_000,
            ..PatchSpec::default()
        };
        let plan = plan_grid(&rect(0.0, 0.0, 2048.0, 2048.0), &spec, (2048, 2048)).unwrap();
        assert_eq!(plan.overlap, 0.80);
        assert_eq!(plan.stride, 102);
    }

    #[test]
    fn outside_image_is_an_error() {
        let err = plan_grid(&rect(6000.0, 0.0, 7000.0, 700.0), &PatchSpec::default(), (5120, 5120));
        assert!(matches!(err, Err(Error::Geometry(_))));
    }

    #[test]
    fn triangle_drops_outside_candidates() {
        let tri = AnnotatedRegion::new(
            "t",
            1,
            vec![Point::new(0.0, 0.0), Point::new(4096.0, 0.0), Point::new(0.0, 4096.0)],
            "s",
        )
        .unwrap();
        let plan = plan_grid(&tri, &PatchSpec::default(), (4096, 4096)).unwrap();
        assert!(plan.origins.len() < plan.grid_count);
        for &(x, y) in &plan.origins {
            // the patch center lies well inside the triangle
            assert!((x + 256 + y + 256) as f64 <= 4096.0);
        }
    }

    #[test]
    fn schedule_spans_min_to_max() {
        let s = PatchSpec::default().overlap_schedule();
        assert_eq!(s.len(), 13);
        assert_eq!(s[0], 0.20);
        assert_eq!(s[12], 0.80);
        assert!((s[5] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(PatchSpec::default().validate().is_ok());
        let bad = PatchSpec { overlap_min: 0.9, ..PatchSpec::default() };
        assert!(bad.validate().is_err());
        let bad = PatchSpec { patch_size: 16, ..PatchSpec::default() };
        assert!(bad.validate().is_err());
        let bad = PatchSpec { cellularity_threshold: 1.0, ..PatchSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn white_pixel_has_zero_concentration() {
        let img = RgbImage::from_pixel(1, 1, image::Rgb([255, 255, 255]));
        let c = deconvolve(&img, &StainMatrix::default()).get(0, 0);
        assert_eq!(c, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn black_pixel_stays_finite() {
        let img = RgbImage::from_pixel(1, 1, image::Rgb([0, 0, 0]));
        let c = deconvolve(&img, &StainMatrix::default()).get(0, 0);
        assert!(c.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stain_rows_are_unit_and_singular_rejected() {
        let s = StainMatrix::default();
        for r in 0..3 {
            let n: f64 = s.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(StainMatrix::new([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(StainMatrix::new([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn cellularity_of_white_patch_is_zero() {
        let spec = PatchSpec { patch_size: 32, ..PatchSpec::default() };
        let img = RgbImage::from_pixel(32, 32, image::Rgb([255, 255, 255]));
        assert_eq!(cellularity(&img, &spec, &StainMatrix::default()).unwrap(), 0.0);
        let wrong = RgbImage::new(16, 16);
        assert!(cellularity(&wrong, &spec, &StainMatrix::default()).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![
            PatchRecord {
                patch_id: "a".into(),
                slide_id: "s".into(),
                label_id: 4,
                origin: (10, 20),
                size: 512,
                cellularity: 0.25,
                retained: true,
            },
            PatchRecord::from_ids("b", "s", 2),
        ];
        write_manifest(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            r#"{"patch_id":"a","slide_id":"s","label_id":4,"origin":[10,20],"size":512,"cellularity":0.25,"retained":true}"#
        ));
        assert_eq!(read_manifest(&path).unwrap(), recs);
    }
}
