//! Binary masks, run-length encoding, connected components and resampling.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Binary mask stored in a local window placed at `(x0, y0)` of a larger frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    x0: u32,
    y0: u32,
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(x0: u32, y0: u32, width: u32, height: u32) -> Self {
        Self {
            x0,
            y0,
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(x0: u32, y0: u32, width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::InvalidConfig(format!(
                "mask buffer has {} entries, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self {
            x0,
            y0,
            width,
            height,
            bits,
        })
    }

    /// Mask whose window is exactly `bbox`, filled by `f(global_x, global_y)`.
    pub fn from_fn(bbox: BBox, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::empty(bbox.x, bbox.y, bbox.width, bbox.height);
        for ly in 0..bbox.height {
            for lx in 0..bbox.width {
                m.bits[(ly * bbox.width + lx) as usize] = f(bbox.x + lx, bbox.y + ly);
            }
        }
        m
    }

    pub fn origin(&self) -> (u32, u32) {
        (self.x0, self.y0)
    }

    pub fn window(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get_local(&self, lx: u32, ly: u32) -> bool {
        lx < self.width && ly < self.height && self.bits[(ly * self.width + lx) as usize]
    }

    pub fn set_local(&mut self, lx: u32, ly: u32, v: bool) {
        self.bits[(ly * self.width + lx) as usize] = v;
    }

    /// Value at a frame coordinate; false outside the window.
    pub fn get(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && y >= self.y0 && self.get_local(x - self.x0, y - self.y0)
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// Frame coordinates of every foreground pixel in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (self.x0 + i as u32 % w, self.y0 + i as u32 / w))
    }

    /// Tightest box around the foreground, or `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for (x, y) in self.pixels() {
            any = true;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        any.then(|| BBox {
            x: x0,
            y: y0,
            width: x1 - x0 + 1,
            height: y1 - y0 + 1,
        })
    }

    /// Same foreground, window shrunk to the tight box.
    pub fn trimmed(&self) -> Option<Mask> {
        let b = self.tight_bbox()?;
        Some(Mask::from_fn(b, |x, y| self.get(x, y)))
    }

    pub fn intersection_area(&self, other: &Mask) -> u64 {
        let ax1 = self.x0 + self.width;
        let ay1 = self.y0 + self.height;
        let bx1 = other.x0 + other.width;
        let by1 = other.y0 + other.height;
        let (x0, y0) = (self.x0.max(other.x0), self.y0.max(other.y0));
        let (x1, y1) = (ax1.min(bx1), ay1.min(by1));
        let mut n = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                if self.get(x, y) && other.get(x, y) {
                    n += 1;
                }
            }
        }
        n
    }

    /// Place this mask's window onto a larger canvas at an offset.
    pub fn translated(&self, dx: u32, dy: u32) -> Mask {
        Mask {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            ..self.clone()
        }
    }

    /// Run-length encoding over a `frame_w x frame_h` frame. Pixels outside the
    /// frame are clipped.
    pub fn to_rle(&self, frame_w: u32, frame_h: u32) -> Rle {
        let mut counts = Vec::new();
        let mut cursor: u64 = 0;
        let mut fg = false;
        let mut run_start: u64 = 0;
        for (x, y) in self.pixels() {
            if x >= frame_w || y >= frame_h {
                continue;
            }
            let p = y as u64 * frame_w as u64 + x as u64;
            if fg && p == cursor {
                cursor += 1;
                continue;
            }
            if fg {
                counts.push((cursor - run_start) as u32);
            }
            counts.push((p - cursor) as u32);
            run_start = p;
            cursor = p + 1;
            fg = true;
        }
        if fg {
            counts.push((cursor - run_start) as u32);
        }
        let total = frame_w as u64 * frame_h as u64;
        if cursor < total || counts.is_empty() {
            counts.push((total - cursor) as u32);
        }
        Rle {
            size: [frame_w, frame_h],
            counts,
        }
    }
}

/// Row-major run-length mask encoding; counts alternate background and
/// foreground, starting with background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[width, height]` of the frame.
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    /// Decode into a mask whose window is the tight box of the foreground.
    /// Returns `None` when there is no foreground.
    pub fn to_mask(&self) -> Result<Option<Mask>> {
        let [w, h] = self.size;
        let total = w as u64 * h as u64;
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if sum != total {
            return Err(Error::InvalidConfig(format!(
                "rle counts sum to {sum}, frame has {total} pixels"
            )));
        }
        let mut runs = Vec::new();
        let mut pos = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            if i % 2 == 1 && c > 0 {
                runs.push((pos, c as u64));
            }
            pos += c as u64;
        }
        if runs.is_empty() {
            return Ok(None);
        }
        let (mut x0, mut y0, mut x1, mut y1) = (u64::MAX, u64::MAX, 0, 0);
        let w64 = w as u64;
        for &(start, len) in &runs {
            let (sy, ey) = (start / w64, (start + len - 1) / w64);
            y0 = y0.min(sy);
            y1 = y1.max(ey);
            if sy == ey {
                x0 = x0.min(start % w64);
                x1 = x1.max((start + len - 1) % w64);
            } else {
                x0 = 0;
                x1 = w64 - 1;
            }
        }
        let bbox = BBox::new(
            x0 as u32,
            y0 as u32,
            (x1 - x0 + 1) as u32,
            (y1 - y0 + 1) as u32,
        )?;
        let mut mask = Mask::empty(bbox.x, bbox.y, bbox.width, bbox.height);
        for (start, len) in runs {
            for p in start..start + len {
                let (x, y) = ((p % w64) as u32, (p / w64) as u32);
                mask.set_local(x - bbox.x, y - bbox.y, true);
            }
        }
        Ok(Some(mask))
    }
}

/// Connected-component statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    pub area: u64,
    pub bbox: BBox,
}

/// 8-connected component labelling of a `width x height` foreground buffer.
///
/// Labels are assigned in raster order of each component's first pixel,
/// starting at 1; background stays 0.
pub fn label_components(width: u32, height: u32, fg: &[bool]) -> (Vec<u32>, Vec<Component>) {
    let (w, h) = (width as usize, height as usize);
    assert_eq!(fg.len(), w * h, "foreground buffer size mismatch");
    let mut labels = vec![0u32; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let label = comps.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0u64;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            area += 1;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if fg[q] && labels[q] == 0 {
                        labels[q] = label;
                        stack.push(q);
                    }
                }
            }
        }
        comps.push(Component {
            label,
            area,
            bbox: BBox {
                x: x0 as u32,
                y: y0 as u32,
                width: (x1 - x0 + 1) as u32,
                height: (y1 - y0 + 1) as u32,
            },
        });
    }
    (labels, comps)
}

/// Keep only the largest 8-connected component; ties go to the earliest in
/// raster order.
pub fn largest_component(mask: &Mask) -> Option<Mask> {
    let (w, h) = mask.window();
    let (labels, comps) = label_components(w, h, mask.bits());
    let best = comps
        .iter()
        .max_by(|a, b| a.area.cmp(&b.area).then(b.label.cmp(&a.label)))?;
    let bits = labels.iter().map(|&l| l == best.label).collect();
    let (x0, y0) = mask.origin();
    Mask::from_bits(x0, y0, w, h, bits).ok()?.trimmed()
}

/// Per-channel median of the outer `band`-pixel frame.
pub fn border_background(image: &RgbImage, band: u32) -> [f32; 3] {
    let (w, h) = image.dimensions();
    let mut chans: [Vec<u8>; 3] = Default::default();
    for (x, y, p) in image.enumerate_pixels() {
        if x < band || y < band || x + band >= w || y + band >= h {
            for c in 0..3 {
                chans[c].push(p.0[c]);
            }
        }
    }
    chans.map(|mut v| {
        v.sort_unstable();
        v.get(v.len() / 2).copied().unwrap_or(0) as f32
    })
}

pub fn color_distance(a: [u8; 3], b: [u8; 3]) -> f32 {
    let d: i32 = (0..3)
        .map(|i| {
            let v = a[i] as i32 - b[i] as i32;
            v * v
        })
        .sum();
    (d as f32).sqrt()
}

/// HSV (hue in degrees, saturation and value in [0, 1]) to RGB.
pub fn hsv_to_rgb(hue: f32, sat: f32, val: f32) -> [f32; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// RGB in [0, 255] to (hue degrees, saturation, value).
pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = rgb.map(|v| v / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let hue = if d <= f32::EPSILON {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let sat = if max <= f32::EPSILON { 0.0 } else { d / max };
    (hue, sat, max)
}

/// Source-pixel coverage weights for area-averaging one axis.
fn area_weights(src: u32, dst: u32) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src as usize {
                let a = lo.max(s as f64);
                let b = hi.min(s as f64 + 1.0);
                if b > a {
                    taps.push((s, (b - a) / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Area-averaging resize. Same-size requests return an identical copy.
pub fn resize_area(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    let (sw, sh) = img.dimensions();
    let wx = area_weights(sw, width);
    let wy = area_weights(sh, height);
    let src = img.as_raw();
    let mut tmp = vec![0f64; width as usize * sh as usize * 3];
    for y in 0..sh as usize {
        let row = &src[y * sw as usize * 3..(y + 1) * sw as usize * 3];
        for (ox, taps) in wx.iter().enumerate() {
            let out = &mut tmp[(y * width as usize + ox) * 3..][..3];
            for &(sx, wgt) in taps {
                for c in 0..3 {
                    out[c] += row[sx * 3 + c] as f64 * wgt;
                }
            }
        }
    }
    let mut out = RgbImage::new(width, height);
    let buf: &mut [u8] = &mut out;
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..width as usize {
            let mut acc = [0f64; 3];
            for &(sy, wgt) in taps {
                let p = &tmp[(sy * width as usize + ox) * 3..][..3];
                for c in 0..3 {
                    acc[c] += p[c] * wgt;
                }
            }
            for c in 0..3 {
                buf[(oy * width as usize + ox) * 3 + c] = acc[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}
