//! Frame window selection and visual token budgeting.
//!
//! Two samplers share the work of deciding how many visual tokens each past
//! frame deserves: a memory-decay rule halves the base budget per second of
//! age, and an adaptive rule scales it by how much of the frame actually
//! changed, measured on a Gaussian-smoothed, Sobel-filtered difference map.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Clip, FrameRef};

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("zero-sized image")]
    ZeroSized,
    #[error("bad buffer: {reason}")]
    BadBuffer { reason: String },
    #[error("bad change-map config: {reason}")]
    BadConfig { reason: String },
    #[error("bad window spec: {reason}")]
    BadWindow { reason: String },
    #[error("window selection needs fps 1, got {fps} (frame timestamps are whole seconds)")]
    UnsupportedFps { fps: u32 },
    #[error("window underflow: clip {clip_id} does not reach back to t={start} (anchor {anchor_t}, k={k})")]
    WindowUnderflow {
        clip_id: String,
        anchor_t: i64,
        start: i64,
        k: u32,
    },
    #[error("window not covered: clip {clip_id} has no frame at t={t}")]
    WindowNotCovered { clip_id: String, t: i64 },
    #[error("budget plan needs at least 2 frames, got {got}")]
    TooFewFrames { got: usize },
}

/// Grayscale image on the 0..=255 scale, stored row-major as f64.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PrepError> {
        if width == 0 || height == 0 {
            return Err(PrepError::ZeroSized);
        }
        if data.len() != width * height {
            return Err(PrepError::BadBuffer {
                reason: format!(
                    "expected {} samples for {width}x{height}, got {}",
                    width * height,
                    data.len()
                ),
            });
        }
        Ok(GrayBuffer {
            width,
            height,
            data,
        })
    }

    /// Rec. 601 luma: 0.299 R + 0.587 G + 0.114 B.
    pub fn from_rgb(img: &image::RgbImage) -> Result<Self, PrepError> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(PrepError::ZeroSized);
        }
        let data = img
            .pixels()
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect();
        Ok(GrayBuffer {
            width: w,
            height: h,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sample with clamp-to-edge coordinates.
    fn sample(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self, PrepError> {
        if width == 0 || height == 0 {
            return Err(PrepError::ZeroSized);
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (src_y.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = src_y - y0 as f64;
            for x in 0..width {
                let src_x = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (src_x.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = src_x - x0 as f64;
                let top = self.data[y0 * self.width + x0] * (1.0 - fx)
                    + self.data[y0 * self.width + x1] * fx;
                let bottom = self.data[y1 * self.width + x0] * (1.0 - fx)
                    + self.data[y1 * self.width + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        GrayBuffer::new(width, height, data)
    }
}

/// Decodes a PNG or JPEG frame and converts it to grayscale.
pub fn load_gray(path: &Path) -> Result<GrayBuffer, PrepError> {
    let img = image::open(path).map_err(|source| PrepError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    GrayBuffer::from_rgb(&img.to_rgb8())
}

/// Past-window shape: `k` seconds of history sampled at `fps`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WindowSpec {
    #[serde(default = "default_window_k")]
    pub k: u32,
    #[serde(default = "default_window_fps")]
    pub fps: u32,
}

fn default_window_k() -> u32 {
    5
}

fn default_window_fps() -> u32 {
    1
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { k: 5, fps: 1 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), PrepError> {
        if self.k < 1 {
            return Err(PrepError::BadWindow {
                reason: "k must be >= 1".to_string(),
            });
        }
        if self.fps < 1 {
            return Err(PrepError::BadWindow {
                reason: "fps must be >= 1".to_string(),
            });
        }
        Ok(())
    }
}

/// Picks the `k + 1` frames at `anchor_t - k ..= anchor_t` in chronological
/// order (the window ends at and includes the anchor frame).
///
/// Only `fps = 1` is supported: clip timestamps are whole seconds, so denser
/// sampling has nothing to select.
pub fn select_window<'a>(
    clip: &'a Clip,
    anchor_t: i64,
    spec: &WindowSpec,
) -> Result<Vec<&'a FrameRef>, PrepError> {
    spec.validate()?;
    if spec.fps != 1 {
        return Err(PrepError::UnsupportedFps { fps: spec.fps });
    }
    let start = anchor_t - i64::from(spec.k);
    let first = clip
        .frames
        .first()
        .map(|f| f.t)
        .ok_or(PrepError::WindowUnderflow {
            clip_id: clip.clip_id.clone(),
            anchor_t,
            start,
            k: spec.k,
        })?;
    if start < first {
        return Err(PrepError::WindowUnderflow {
            clip_id: clip.clip_id.clone(),
            anchor_t,
            start,
            k: spec.k,
        });
    }
    (start..=anchor_t)
        .map(|t| {
            clip.frame_at(t).ok_or(PrepError::WindowNotCovered {
                clip_id: clip.clip_id.clone(),
                t,
            })
        })
        .collect()
}

/// Change-map and budgeting knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangeMapConfig {
    /// Odd Gaussian kernel width in pixels.
    #[serde(default = "default_gaussian_kernel")]
    pub gaussian_kernel: usize,
    /// Sobel aperture; only 3 is implemented.
    #[serde(default = "default_sobel_kernel")]
    pub sobel_kernel: usize,
    /// Magnitude threshold on the 0..=255 scale for a pixel to count as
    /// changed.
    #[serde(default = "default_edge_threshold")]
    pub edge_threshold: u8,
    /// Multiplier applied to the changed-pixel fraction.
    #[serde(default = "default_scale_factor")]
    pub scale_factor: f64,
    /// Budget floor: no frame's fraction multiplier drops below this.
    #[serde(default = "default_min_fraction")]
    pub min_fraction: f64,
}

fn default_gaussian_kernel() -> usize {
    13
}

fn default_sobel_kernel() -> usize {
    3
}

fn default_edge_threshold() -> u8 {
    32
}

fn default_scale_factor() -> f64 {
    0.5
}

fn default_min_fraction() -> f64 {
    0.1
}

impl Default for ChangeMapConfig {
    fn default() -> Self {
        ChangeMapConfig {
            gaussian_kernel: 13,
            sobel_kernel: 3,
            edge_threshold: 32,
            scale_factor: 0.5,
            min_fraction: 0.1,
        }
    }
}

impl ChangeMapConfig {
    pub fn validate(&self) -> Result<(), PrepError> {
        let bad = |reason: &str| PrepError::BadConfig {
            reason: reason.to_string(),
        };
        if self.gaussian_kernel < 3 || self.gaussian_kernel.is_multiple_of(2) {
            return Err(bad("gaussian_kernel must be odd and >= 3"));
        }
        if self.sobel_kernel != 3 {
            return Err(bad("sobel_kernel must be 3"));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(bad("scale_factor must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.min_fraction) {
            return Err(bad("min_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    /// Kernel-derived Gaussian width: 0.3 ((k - 1) / 2 - 1) + 0.8.
    pub fn sigma(&self) -> f64 {
        0.3 * ((self.gaussian_kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
    }
}

fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn convolve_separable(src: &GrayBuffer, kernel: &[f64]) -> GrayBuffer {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (src.width, src.height);
    let mut horiz = GrayBuffer {
        width: w,
        height: h,
        data: vec![0.0; w * h],
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * src.sample(x + i as isize - r, y);
            }
            horiz.data[y as usize * w + x as usize] = acc;
        }
    }
    let mut out = GrayBuffer {
        width: w,
        height: h,
        data: vec![0.0; w * h],
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * horiz.sample(x, y + i as isize - r);
            }
            out.data[y as usize * w + x as usize] = acc;
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn sobel_magnitude(src: &GrayBuffer) -> GrayBuffer {
    let (w, h) = (src.width, src.height);
    let mut out = GrayBuffer {
        width: w,
        height: h,
        data: vec![0.0; w * h],
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let v = src.sample(x + dx, y + dy);
                    gx += SOBEL_X[(dy + 1) as usize][(dx + 1) as usize] * v;
                    gy += SOBEL_Y[(dy + 1) as usize][(dx + 1) as usize] * v;
                }
            }
            out.data[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Builds the per-pixel change-magnitude map between two frames: absolute
/// difference, Gaussian smoothing, then Sobel gradient magnitude, all with
/// clamp-to-edge borders. A size mismatch resizes `previous` to `current`'s
/// dimensions first.
pub fn frame_change_map(
    current: &GrayBuffer,
    previous: &GrayBuffer,
    cfg: &ChangeMapConfig,
) -> Result<GrayBuffer, PrepError> {
    cfg.validate()?;
    let resized;
    let prev = if previous.width == current.width && previous.height == current.height {
        previous
    } else {
        resized = previous.resize_bilinear(current.width, current.height)?;
        &resized
    };
    let diff_data = current
        .data
        .iter()
        .zip(&prev.data)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let diff = GrayBuffer::new(current.width, current.height, diff_data)?;
    let kernel = gaussian_kernel_1d(cfg.gaussian_kernel, cfg.sigma());
    let smoothed = convolve_separable(&diff, &kernel);
    Ok(sobel_magnitude(&smoothed))
}

/// Fraction of map pixels whose magnitude exceeds the edge threshold, scaled
/// by `scale_factor` and clamped to [0, 1].
pub fn change_fraction(map: &GrayBuffer, cfg: &ChangeMapConfig) -> f64 {
    let threshold = f64::from(cfg.edge_threshold);
    let above = map.data.iter().filter(|&&v| v > threshold).count();
    let raw = above as f64 / map.data.len() as f64;
    (raw * cfg.scale_factor).clamp(0.0, 1.0)
}

/// Halving-per-frame token budget: floor(n0 / 2^i), never below 1.
pub fn memory_decay_budget(n0: u32, frames_back: usize) -> u32 {
    let shifted = u32::try_from(frames_back)
        .ok()
        .and_then(|i| n0.checked_shr(i))
        .unwrap_or(0);
    shifted.max(1)
}

fn adaptive_budget(n0: u32, frames_back: usize, fraction: f64, cfg: &ChangeMapConfig) -> u32 {
    let decay = memory_decay_budget(n0, frames_back);
    let scaled = (f64::from(decay) * fraction.max(cfg.min_fraction)).floor() as u32;
    scaled.max(1)
}

/// One frame's allocation within a [`TokenBudgetPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBudget {
    /// Frame age: 0 is the newest frame in the window.
    pub frames_back: usize,
    pub budget: u32,
    /// Change fraction against the adjacent newer frame; the newest frame
    /// has none.
    pub change_fraction: Option<f64>,
}

/// Per-frame visual token allocations for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBudgetPlan {
    pub n0: u32,
    pub per_frame: Vec<FrameBudget>,
}

impl TokenBudgetPlan {
    pub fn total(&self) -> u64 {
        self.per_frame.iter().map(|f| u64::from(f.budget)).sum()
    }

    /// Budgets ordered oldest to newest, mirroring the input frame order.
    pub fn budgets_chronological(&self) -> Vec<u32> {
        let mut v: Vec<(usize, u32)> = self
            .per_frame
            .iter()
            .map(|f| (f.frames_back, f.budget))
            .collect();
        v.sort_by_key(|&(frames_back, _)| std::cmp::Reverse(frames_back));
        v.into_iter().map(|(_, b)| b).collect()
    }
}

/// Allocates tokens across a chronological window (oldest frame first): the
/// newest frame gets the full base budget `n0`, and each older frame gets
/// its decay budget scaled by how much changed between it and the adjacent
/// newer frame, floored at `min_fraction` and at one token.
pub fn plan_window_budgets(
    frames: &[GrayBuffer],
    n0: u32,
    cfg: &ChangeMapConfig,
) -> Result<TokenBudgetPlan, PrepError> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(PrepError::TooFewFrames { got: frames.len() });
    }
    if n0 < 1 {
        return Err(PrepError::BadConfig {
            reason: "n0 must be >= 1".to_string(),
        });
    }
    let newest = frames.len() - 1;
    let mut per_frame = vec![FrameBudget {
        frames_back: 0,
        budget: n0,
        change_fraction: None,
    }];
    for i in 1..frames.len() {
        let older = &frames[newest - i];
        let newer = &frames[newest - i + 1];
        let map = frame_change_map(newer, older, cfg)?;
        let fraction = change_fraction(&map, cfg);
        per_frame.push(FrameBudget {
            frames_back: i,
            budget: adaptive_budget(n0, i, fraction, cfg),
            change_fraction: Some(fraction),
        });
    }
    Ok(TokenBudgetPlan { n0, per_frame })
}

/// [`plan_window_budgets`] over image files, for the CLI.
pub fn plan_window_budgets_from_paths(
    paths: &[PathBuf],
    n0: u32,
    cfg: &ChangeMapConfig,
) -> Result<TokenBudgetPlan, PrepError> {
    let frames = paths
        .iter()
        .map(|p| load_gray(p))
        .collect::<Result<Vec<_>, _>>()?;
    plan_window_budgets(&frames, n0, cfg)
}
