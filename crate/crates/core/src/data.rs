//! Videos, the bouncing-shapes generator, preprocessing and patch
//! extraction, plus the DPCV container.
//!
//! DPCV layout (all little-endian): magic `DPCV`, then u32 width, height,
//! frame_count and label_flag, then `frame_count·height·width` f32 pixels in
//! row-major frame order, then `frame_count` u32 labels when label_flag = 1.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::seed;

/// Side length of the shape glyphs.
pub const GLYPH_SIZE: usize = 9;

/// A greyscale frame sequence with optional per-frame class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    width: usize,
    height: usize,
    frames: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl Video {
    pub fn new(width: usize, height: usize, frames: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!("video dimensions must be positive, got {width}x{height}")));
        }
        let area = width * height;
        if frames.len() % area != 0 {
            return Err(Error::dim(format!(
                "raster of {} values is not a whole number of {width}x{height} frames",
                frames.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != frames.len() / area {
                return Err(Error::dim(format!(
                    "{} labels for {} frames",
                    l.len(),
                    frames.len() / area
                )));
            }
        }
        Ok(Self {
            width,
            height,
            frames,
            labels,
        })
    }

    /// An empty video of the given frame size.
    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, Vec::new(), None)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len() / (self.width * self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let area = self.width * self.height;
        &self.frames[t * area..(t + 1) * area]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let area = self.width * self.height;
        &mut self.frames[t * area..(t + 1) * area]
    }

    /// Frame `t` as a `height × width` array.
    pub fn frame_array(&self, t: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(r, c)| f64::from(self.frame(t)[r * self.width + c]))
    }

    pub fn pixel(&self, t: usize, row: usize, col: usize) -> f32 {
        self.frame(t)[row * self.width + col]
    }

    pub fn raster(&self) -> &[f32] {
        &self.frames
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Frames `start..end` as a new video, labels included.
    pub fn slice(&self, start: usize, end: usize) -> Result<Video> {
        if start > end || end > self.frame_count() {
            return Err(Error::Index(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frame_count()
            )));
        }
        let area = self.width * self.height;
        Video::new(
            self.width,
            self.height,
            self.frames[start * area..end * area].to_vec(),
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
        )
    }

    /// Concatenates videos of the same frame size.
    pub fn concat(parts: &[Video]) -> Result<Video> {
        let first = parts.first().ok_or_else(|| Error::param("nothing to concatenate"))?;
        let all_labelled = parts.iter().all(|v| v.labels.is_some());
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for v in parts {
            if (v.width, v.height) != (first.width, first.height) {
                return Err(Error::dim("cannot concatenate videos of different frame sizes"));
            }
            frames.extend_from_slice(&v.frames);
            if let Some(l) = &v.labels {
                labels.extend_from_slice(l);
            }
        }
        Video::new(first.width, first.height, frames, all_labelled.then_some(labels))
    }
}

/// The three glyph kinds of the shapes dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Square,
    Triangle,
    Disc,
}

impl Glyph {
    pub const ALL: [Glyph; 3] = [Glyph::Square, Glyph::Triangle, Glyph::Disc];

    pub fn from_index(i: u32) -> Result<Self> {
        Self::ALL
            .get(i as usize)
            .copied()
            .ok_or_else(|| Error::param(format!("unknown shape class {i}")))
    }

    /// Binary `GLYPH_SIZE × GLYPH_SIZE` mask.
    pub fn mask(self) -> [[bool; GLYPH_SIZE]; GLYPH_SIZE] {
        let mut m = [[false; GLYPH_SIZE]; GLYPH_SIZE];
        let c = (GLYPH_SIZE / 2) as i64;
        for (r, row) in m.iter_mut().enumerate() {
            for (col, px) in row.iter_mut().enumerate() {
                let (dr, dc) = (r as i64 - c, col as i64 - c);
                *px = match self {
                    Glyph::Square => true,
                    // Apex on the top row, widening by two pixels every other row.
                    Glyph::Triangle => dc.abs() <= (r as i64) / 2,
                    Glyph::Disc => 4 * (dr * dr + dc * dc) <= (2 * c + 1) * (2 * c + 1),
                };
            }
        }
        m
    }
}

fn paste(frame: &mut [f32], width: usize, glyph: Glyph, row: usize, col: usize) {
    for (r, mrow) in glyph.mask().iter().enumerate() {
        for (c, &on) in mrow.iter().enumerate() {
            if on {
                let px = &mut frame[(row + r) * width + col + c];
                *px = px.max(1.0);
            }
        }
    }
}

/// Bouncing-shapes generator settings. Each entry of `classes` is a segment
/// of `frames_per_class` frames in which two objects of that glyph move.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSpec {
    pub width: usize,
    pub height: usize,
    pub frames_per_class: usize,
    pub classes: Vec<u32>,
    pub max_speed: i64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            frames_per_class: 100,
            classes: vec![0, 1, 2],
            max_speed: 2,
            seed: 0,
        }
    }
}

/// Top-left corner and velocity of one moving object, as (row, col).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Body {
    pub pos: (i64, i64),
    pub vel: (i64, i64),
}

fn boxes_overlap(a: (i64, i64), b: (i64, i64)) -> bool {
    let s = GLYPH_SIZE as i64;
    (a.0 - b.0).abs() < s && (a.1 - b.1).abs() < s
}

fn reflect(p: i64, v: i64, max: i64) -> (i64, i64) {
    let q = p + v;
    if q < 0 {
        (-q, -v)
    } else if q > max {
        (2 * max - q, -v)
    } else {
        (q, v)
    }
}

/// Advances two objects one frame. Walls reflect each axis independently;
/// if the moved boxes would overlap, the objects stay put and exchange
/// velocities instead.
pub fn step_bodies(bodies: &mut [Body; 2], max: (i64, i64)) {
    let moved: Vec<Body> = bodies
        .iter()
        .map(|b| {
            let (r, vr) = reflect(b.pos.0, b.vel.0, max.0);
            let (c, vc) = reflect(b.pos.1, b.vel.1, max.1);
            Body {
                pos: (r, c),
                vel: (vr, vc),
            }
        })
        .collect();
    if boxes_overlap(moved[0].pos, moved[1].pos) {
        let v0 = bodies[0].vel;
        bodies[0].vel = bodies[1].vel;
        bodies[1].vel = v0;
    } else {
        bodies[0] = moved[0];
        bodies[1] = moved[1];
    }
}

fn random_velocity(rng: &mut impl Rng, max_speed: i64) -> i64 {
    let v = rng.random_range(1..=max_speed);
    if rng.random::<bool>() {
        v
    } else {
        -v
    }
}

/// Object trajectories of one segment: positions and velocities per frame,
/// with the first frame at the initial placement.
pub fn simulate_bodies(
    frames: usize,
    width: usize,
    height: usize,
    max_speed: i64,
    rng: &mut impl Rng,
) -> Result<Vec<[Body; 2]>> {
    let s = GLYPH_SIZE;
    if width < s || height < s {
        return Err(Error::param(format!(
            "frame {width}x{height} smaller than the {s}x{s} glyphs"
        )));
    }
    let max = ((height - s) as i64, (width - s) as i64);
    if max.0 < max_speed || max.1 < max_speed {
        return Err(Error::param("frame leaves no room for the objects to move"));
    }
    let place = |rng: &mut dyn rand::RngCore| (rng.random_range(0..=max.0), rng.random_range(0..=max.1));
    let a = place(rng);
    let mut b = place(rng);
    let mut tries = 0;
    while boxes_overlap(a, b) {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::param("frame too small to place two separate objects"));
        }
        b = place(rng);
    }
    let mut bodies = [a, b].map(|pos| Body { pos, vel: (0, 0) });
    for body in &mut bodies {
        body.vel = (random_velocity(rng, max_speed), random_velocity(rng, max_speed));
    }
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(bodies);
        step_bodies(&mut bodies, max);
    }
    Ok(out)
}

/// Two same-shape objects bouncing off the walls and each other, one
/// segment per class, labelled by class index.
pub fn generate_shapes_video(spec: &ShapesSpec) -> Result<Video> {
    if spec.frames_per_class == 0 || spec.classes.is_empty() {
        return Err(Error::param("shapes video needs at least one frame and one class"));
    }
    if spec.max_speed < 1 {
        return Err(Error::param("max_speed must be at least 1"));
    }
    let (w, h) = (spec.width, spec.height);
    let mut frames = vec![0.0f32; w * h * spec.frames_per_class * spec.classes.len()];
    let mut labels = Vec::with_capacity(spec.frames_per_class * spec.classes.len());
    for (segment, &class) in spec.classes.iter().enumerate() {
        let glyph = Glyph::from_index(class)?;
        let mut rng = seed::rng(seed::derive_indexed(spec.seed, "shapes-segment", segment as u64));
        let tracks = simulate_bodies(spec.frames_per_class, w, h, spec.max_speed, &mut rng)?;
        for (i, bodies) in tracks.iter().enumerate() {
            let t = segment * spec.frames_per_class + i;
            let frame = &mut frames[t * w * h..(t + 1) * w * h];
            for b in bodies {
                paste(frame, w, glyph, b.pos.0 as usize, b.pos.1 as usize);
            }
            labels.push(class);
        }
    }
    Video::new(w, h, frames, Some(labels))
}

/// Pastes a Poisson(`mean`) number of random glyphs per frame at uniformly
/// random positions fully inside the frame, independently across frames.
/// Returns the corrupted video and the per-frame object counts.
pub fn add_structured_noise_counted(video: &Video, mean: f64, seed: u64) -> Result<(Video, Vec<usize>)> {
    if !(mean >= 0.0 && mean.is_finite()) {
        return Err(Error::param(format!("noise mean must be finite and >= 0, got {mean}")));
    }
    let (w, h) = (video.width, video.height);
    if w < GLYPH_SIZE || h < GLYPH_SIZE {
        return Err(Error::param("frame smaller than the noise glyphs"));
    }
    let mut out = video.clone();
    let mut counts = vec![0usize; video.frame_count()];
    if mean == 0.0 {
        return Ok((out, counts));
    }
    let poisson = Poisson::new(mean).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = seed::rng(seed::derive(seed, "structured-noise"));
    for (t, count) in counts.iter_mut().enumerate() {
        let n = poisson.sample(&mut rng) as usize;
        *count = n;
        let frame = out.frame_mut(t);
        for _ in 0..n {
            let glyph = Glyph::ALL[rng.random_range(0..Glyph::ALL.len())];
            let r = rng.random_range(0..=h - GLYPH_SIZE);
            let c = rng.random_range(0..=w - GLYPH_SIZE);
            paste(frame, w, glyph, r, c);
        }
    }
    Ok((out, counts))
}

pub fn add_structured_noise(video: &Video, mean: f64, seed: u64) -> Result<Video> {
    Ok(add_structured_noise_counted(video, mean, seed)?.0)
}

fn gaussian_kernel(radius: usize) -> Vec<f64> {
    let sigma = radius as f64 / 2.0;
    let r = radius as i64;
    (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Gaussian-weighted local average with weights renormalized over the
/// in-frame part of the window.
fn local_mean(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (kernel.len() / 2) as i64;
    let blur = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &wt) in kernel.iter().enumerate() {
                let d = k as i64 - r;
                let (ii, jj) = if horizontal {
                    (i as i64, j as i64 + d)
                } else {
                    (i as i64 + d, j as i64)
                };
                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                    acc += wt * src[[ii as usize, jj as usize]];
                    norm += wt;
                }
            }
            acc / norm
        })
    };
    // The kernel is separable and the in-frame renormalization factors too.
    blur(&blur(img, true), false)
}

/// Subtractive normalization of one frame.
pub fn subtract_local_mean(img: &Array2<f64>, kernel_radius: usize) -> Array2<f64> {
    img - &local_mean(img, &gaussian_kernel(kernel_radius))
}

/// Local subtractive then divisive normalization of one frame. The divisor
/// is the local weighted standard deviation, floored at its frame mean and
/// at `1e-6` so flat frames map to (numerically) zero.
pub fn contrast_normalize_frame(img: &Array2<f64>, kernel_radius: usize) -> Array2<f64> {
    let kernel = gaussian_kernel(kernel_radius);
    let centered = img - &local_mean(img, &kernel);
    let sd = local_mean(&centered.mapv(|v| v * v), &kernel).mapv(f64::sqrt);
    let floor = sd.mean().unwrap_or(0.0);
    let mut out = centered;
    out.zip_mut_with(&sd, |v, &s| {
        *v /= s.max(floor).max(1e-6);
    });
    out
}

pub fn contrast_normalize(video: &Video, kernel_radius: usize) -> Result<Video> {
    if kernel_radius == 0 {
        return Err(Error::param("kernel_radius must be >= 1"));
    }
    let mut out = video.clone();
    for t in 0..video.frame_count() {
        let norm = contrast_normalize_frame(&video.frame_array(t), kernel_radius);
        for (dst, &v) in out.frame_mut(t).iter_mut().zip(norm.iter()) {
            *dst = v as f32;
        }
    }
    Ok(out)
}

/// Placement of a patch group inside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupGeometry {
    pub patch_size: usize,
    pub stride: usize,
    /// Patches per group as (rows, cols).
    pub group_shape: (usize, usize),
    /// Top-left pixel of the group as (row, col).
    pub origin: (usize, usize),
}

impl GroupGeometry {
    /// Side lengths of the pixel region the group covers, as (rows, cols).
    pub fn span(&self) -> (usize, usize) {
        (
            self.patch_size + self.stride * (self.group_shape.0 - 1),
            self.patch_size + self.stride * (self.group_shape.1 - 1),
        )
    }

    /// Top-left pixel of every patch, row-major over the group grid.
    pub fn patch_origins(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(self.group_shape.0 * self.group_shape.1);
        for i in 0..self.group_shape.0 {
            for j in 0..self.group_shape.1 {
                v.push((self.origin.0 + i * self.stride, self.origin.1 + j * self.stride));
            }
        }
        v
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.patch_size == 0 || self.group_shape.0 == 0 || self.group_shape.1 == 0 {
            return Err(Error::Geometry("patch size and group shape must be positive".into()));
        }
        if self.stride == 0 && self.group_shape != (1, 1) {
            return Err(Error::Geometry("stride must be positive for multi-patch groups".into()));
        }
        let (sr, sc) = self.span();
        if self.origin.0 + sr > height || self.origin.1 + sc > width {
            return Err(Error::Geometry(format!(
                "group of {sr}x{sc} pixels at ({}, {}) exceeds the {width}x{height} frame",
                self.origin.0, self.origin.1
            )));
        }
        Ok(())
    }
}

/// One group of input vectors per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroupSequence {
    geometry: Option<GroupGeometry>,
    group_size: usize,
    patch_len: usize,
    groups: Vec<Vec<Array1<f64>>>,
}

impl PatchGroupSequence {
    pub fn new(group_size: usize, patch_len: usize) -> Self {
        Self {
            geometry: None,
            group_size,
            patch_len,
            groups: Vec::new(),
        }
    }

    pub fn from_groups(group_size: usize, patch_len: usize, groups: Vec<Vec<Array1<f64>>>) -> Result<Self> {
        let mut s = Self::new(group_size, patch_len);
        for g in groups {
            s.push(g)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, group: Vec<Array1<f64>>) -> Result<()> {
        if group.len() != self.group_size {
            return Err(Error::dim(format!(
                "group of {} vectors, sequence holds groups of {}",
                group.len(),
                self.group_size
            )));
        }
        if let Some(v) = group.iter().find(|v| v.len() != self.patch_len) {
            return Err(Error::dim(format!(
                "vector of length {}, sequence holds length {}",
                v.len(),
                self.patch_len
            )));
        }
        self.groups.push(group);
        Ok(())
    }

    pub fn geometry(&self) -> Option<&GroupGeometry> {
        self.geometry.as_ref()
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, t: usize) -> &[Array1<f64>] {
        &self.groups[t]
    }

    pub fn groups(&self) -> &[Vec<Array1<f64>>] {
        &self.groups
    }
}

/// Row-major vectorization of one patch.
pub fn extract_patch(frame: &[f32], width: usize, origin: (usize, usize), patch_size: usize) -> Array1<f64> {
    let mut v = Array1::zeros(patch_size * patch_size);
    for r in 0..patch_size {
        let row = &frame[(origin.0 + r) * width + origin.1..][..patch_size];
        for (c, &px) in row.iter().enumerate() {
            v[r * patch_size + c] = f64::from(px);
        }
    }
    v
}

/// The patch group at `geometry` from every frame.
pub fn extract_patch_groups(video: &Video, geometry: GroupGeometry) -> Result<PatchGroupSequence> {
    geometry.validate(video.width, video.height)?;
    let origins = geometry.patch_origins();
    let p = geometry.patch_size;
    let mut seq = PatchGroupSequence::new(origins.len(), p * p);
    seq.geometry = Some(geometry);
    for t in 0..video.frame_count() {
        let frame = video.frame(t);
        seq.groups
            .push(origins.iter().map(|&o| extract_patch(frame, video.width, o, p)).collect());
    }
    Ok(seq)
}

const MAGIC: &[u8; 4] = b"DPCV";

pub fn encode_video(video: &Video) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + 4 * video.frames.len());
    buf.extend_from_slice(MAGIC);
    for v in [
        video.width,
        video.height,
        video.frame_count(),
        usize::from(video.labels.is_some()),
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for px in &video.frames {
        buf.extend_from_slice(&px.to_le_bytes());
    }
    if let Some(labels) = &video.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated DPCV data while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_video(bytes: &[u8]) -> Result<Video> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a DPCV file (bad magic)".into(),
        });
    }
    let width = rd.u32("width")? as usize;
    let height = rd.u32("height")? as usize;
    let count = rd.u32("frame count")? as usize;
    let flag_pos = rd.pos;
    let flag = rd.u32("label flag")?;
    if flag > 1 {
        return Err(Error::Parse {
            offset: flag_pos,
            message: format!("label flag must be 0 or 1, got {flag}"),
        });
    }
    let n = width
        .checked_mul(height)
        .and_then(|a| a.checked_mul(count))
        .ok_or_else(|| Error::Parse {
            offset: 4,
            message: "frame dimensions overflow".into(),
        })?;
    let raw = rd.take(n.checked_mul(4).unwrap_or(usize::MAX), "frames")?;
    let frames = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = if flag == 1 {
        Some((0..count).map(|_| rd.u32("labels")).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    if rd.pos != bytes.len() {
        return Err(Error::Parse {
            offset: rd.pos,
            message: "trailing bytes after DPCV payload".into(),
        });
    }
    Video::new(width, height, frames, labels).map_err(|e| Error::Parse {
        offset: 4,
        message: e.to_string(),
    })
}

pub fn save_video(video: &Video, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_video(video)).map_err(|e| Error::io(path, e))
}

pub fn load_video(path: impl AsRef<Path>) -> Result<Video> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_video(&bytes)
}

/// `frame,label` CSV of the per-frame labels.
pub fn write_labels_csv(video: &Video, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let labels = video
        .labels()
        .ok_or_else(|| Error::State("video carries no labels".into()))?;
    let mut out = String::from("frame,label\n");
    for (t, l) in labels.iter().enumerate() {
        out.push_str(&format!("{t},{l}\n"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(g: Glyph) -> usize {
        g.mask().iter().flatten().filter(|&&b| b).count()
    }

    #[test]
    fn glyph_masks() {
        assert_eq!(count(Glyph::Square), 81);
        assert_eq!(count(Glyph::Triangle), 41);
        let disc = count(Glyph::Disc);
        assert!((60..81).contains(&disc), "{disc}");
        // Discs are symmetric under transposition, triangles only left-right.
        let m = Glyph::Disc.mask();
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                assert_eq!(m[r][c], m[c][r]);
            }
        }
        let t = Glyph::Triangle.mask();
        assert!(t[8].iter().all(|&b| b));
        assert_eq!(t[0].iter().filter(|&&b| b).count(), 1);
        assert!(Glyph::from_index(3).is_err());
    }

    #[test]
    fn shapes_video_layout() {
        let v = generate_shapes_video(&ShapesSpec::default()).unwrap();
        assert_eq!(v.frame_count(), 300);
        assert_eq!((v.width(), v.height()), (32, 32));
        let labels = v.labels().unwrap();
        for (t, &l) in labels.iter().enumerate() {
            assert_eq!(l as usize, t / 100);
        }
        // Two disjoint glyphs: twice the glyph area in every frame.
        for t in 0..300 {
            let lit = v.frame(t).iter().filter(|&&p| p > 0.0).count();
            let want = 2 * count(Glyph::ALL[t / 100]);
            assert_eq!(lit, want, "frame {t}");
            assert!(v.frame(t).iter().all(|&p| p == 0.0 || p == 1.0));
        }
        assert!(generate_shapes_video(&ShapesSpec {
            width: 8,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn shapes_video_is_deterministic() {
        let spec = ShapesSpec {
            seed: 9,
            ..Default::default()
        };
        let a = generate_shapes_video(&spec).unwrap();
        assert_eq!(encode_video(&a), encode_video(&generate_shapes_video(&spec).unwrap()));
        let b = generate_shapes_video(&ShapesSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn trajectories_obey_walls_and_collisions() {
        let mut rng = seed::rng(3);
        for _ in 0..20 {
            let tracks = simulate_bodies(400, 32, 32, 2, &mut rng).unwrap();
            let max = 32 - GLYPH_SIZE as i64;
            for w in tracks.windows(2) {
                let (prev, next) = (&w[0], &w[1]);
                for b in next {
                    assert!((0..=max).contains(&b.pos.0) && (0..=max).contains(&b.pos.1));
                }
                assert!(!boxes_overlap(next[0].pos, next[1].pos));
                let stayed = prev[0].pos == next[0].pos && prev[1].pos == next[1].pos;
                if stayed {
                    assert_eq!(next[0].vel, prev[1].vel);
                    assert_eq!(next[1].vel, prev[0].vel);
                } else {
                    for (p, n) in prev.iter().zip(next) {
                        assert_eq!(n.vel.0.abs(), p.vel.0.abs());
                        assert_eq!(n.vel.1.abs(), p.vel.1.abs());
                    }
                }
            }
        }
    }

    #[test]
    fn noise_counts_and_identity() {
        let clean = generate_shapes_video(&ShapesSpec {
            frames_per_class: 10,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(add_structured_noise(&clean, 0.0, 5).unwrap(), clean);
        let a = add_structured_noise(&clean, 1.5, 5).unwrap();
        assert_eq!(a, add_structured_noise(&clean, 1.5, 5).unwrap());
        assert_eq!(a.labels(), clean.labels());
        // Max-composition never dims a pixel or exceeds 1.
        for (x, y) in a.raster().iter().zip(clean.raster()) {
            assert!(x >= y && *x <= 1.0);
        }
        assert!(add_structured_noise(&clean, -1.0, 0).is_err());

        let blank = Video::new(32, 32, vec![0.0; 32 * 32 * 10_000], None).unwrap();
        let (_, counts) = add_structured_noise_counted(&blank, 1.5, 11).unwrap();
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        assert!((mean - 1.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn contrast_normalization() {
        let flat = Array2::from_elem((16, 16), 0.7);
        assert!(subtract_local_mean(&flat, 3).iter().all(|v| v.abs() < 1e-12));
        assert!(contrast_normalize_frame(&flat, 3).iter().all(|v| v.abs() < 1e-9));
        // A symmetric kernel reproduces affine images away from the border,
        // so the normalized interior has zero local mean.
        let r = 3;
        let ramp = Array2::from_shape_fn((20, 20), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64 + 1.0);
        let centered = subtract_local_mean(&ramp, r);
        let out = contrast_normalize_frame(&ramp, r);
        for i in 2 * r..20 - 2 * r {
            for j in 2 * r..20 - 2 * r {
                assert!(centered[[i, j]].abs() < 1e-9);
                let win = out.slice(ndarray::s![i - r..=i + r, j - r..=j + r]);
                assert!(win.mean().unwrap().abs() < 1e-6);
            }
        }
        let v = Video::new(4, 4, vec![0.5; 16], None).unwrap();
        assert!(contrast_normalize(&v, 0).is_err());
    }

    #[test]
    fn group_span_and_tiling() {
        let g = GroupGeometry {
            patch_size: 15,
            stride: 2,
            group_shape: (2, 2),
            origin: (0, 0),
        };
        assert_eq!(g.span(), (17, 17));
        let frames: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let v = Video::new(4, 4, frames, None).unwrap();
        let tiles = extract_patch_groups(
            &v,
            GroupGeometry {
                patch_size: 2,
                stride: 2,
                group_shape: (2, 2),
                origin: (0, 0),
            },
        )
        .unwrap();
        let g = tiles.group(0);
        assert_eq!(g[0].to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(g[1].to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(g[3].to_vec(), vec![10.0, 11.0, 14.0, 15.0]);
        let bad = GroupGeometry {
            patch_size: 3,
            stride: 2,
            group_shape: (2, 1),
            origin: (0, 0),
        };
        assert!(matches!(extract_patch_groups(&v, bad), Err(Error::Geometry(_))));
    }

    #[test]
    fn patches_reproduce_source_pixels() {
        let v = generate_shapes_video(&ShapesSpec {
            frames_per_class: 5,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let geo = GroupGeometry {
            patch_size: 12,
            stride: 8,
            group_shape: (2, 3),
            origin: (3, 1),
        };
        let seq = extract_patch_groups(&v, geo).unwrap();
        assert_eq!(seq.len(), 15);
        for t in 0..seq.len() {
            for (patch, &(r0, c0)) in seq.group(t).iter().zip(&geo.patch_origins()) {
                for r in 0..12 {
                    for c in 0..12 {
                        assert_eq!(patch[r * 12 + c], f64::from(v.pixel(t, r0 + r, c0 + c)));
                    }
                }
            }
        }
    }

    #[test]
    fn dpcv_round_trip() {
        let v = generate_shapes_video(&ShapesSpec {
            frames_per_class: 4,
            ..Default::default()
        })
        .unwrap();
        let bytes = encode_video(&v);
        assert_eq!(&bytes[..4], b"DPCV");
        assert_eq!(bytes.len(), 20 + 4 * 32 * 32 * 12 + 4 * 12);
        let back = decode_video(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_video(&back), bytes);

        let odd = Video::new(3, 2, vec![f32::MIN_POSITIVE, -0.0, 1e-30, 7.5, -2.25, 0.1], None).unwrap();
        let back = decode_video(&encode_video(&odd)).unwrap();
        for (a, b) in back.raster().iter().zip(odd.raster()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.labels(), None);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_video(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_video(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        assert!(matches!(decode_video(&bytes[..10]), Err(Error::Parse { .. })));
    }

    #[test]
    fn video_validation() {
        assert!(Video::new(0, 3, vec![], None).is_err());
        assert!(Video::new(2, 2, vec![0.0; 5], None).is_err());
        assert!(Video::new(2, 2, vec![0.0; 8], Some(vec![1])).is_err());
        let v = Video::new(2, 2, vec![0.0; 8], Some(vec![1, 2])).unwrap();
        assert_eq!(v.slice(1, 2).unwrap().labels(), Some(&[2][..]));
        assert_eq!(Video::concat(&[v.clone(), v.clone()]).unwrap().frame_count(), 4);
        assert!(v.slice(1, 3).is_err());
        assert!(Video::empty(4, 4).unwrap().is_empty());
    }
}
