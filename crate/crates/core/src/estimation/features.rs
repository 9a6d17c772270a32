//! Fixed image descriptor for a centred specimen canvas, and colour jitter.
//!
//! Pixels are compared with the background colour (median of the canvas
//! border). Each pixel's offset from the background gives a soft coverage
//! `alpha` and a colour direction that does not depend on how much of the
//! pixel the specimen covers, which keeps the descriptor usable at low
//! resolutions where most specimen pixels are mixed.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{border_background, hsv_to_rgb, rgb_to_hsv};

pub const DESCRIPTOR_LEN: usize = 28;

/// Offsets below this (8-bit RGB units) are treated as background noise.
const NOISE_FLOOR: f32 = 12.0;
const PROFILE_BINS: usize = 24;

struct Px {
    x: f32,
    y: f32,
    alpha: f32,
    dir: [f32; 3],
    lum: f32,
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn weighted_quantile(values: &mut [(f32, f32)], q: f32) -> f32 {
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f32 = values.iter().map(|v| v.1).sum();
    let target = q * total;
    let mut acc = 0.0;
    for &(v, w) in values.iter() {
        acc += w;
        if acc >= target {
            return v;
        }
    }
    values.last().map_or(0.0, |v| v.0)
}

/// Descriptor of one canvas. A canvas with no foreground maps to zeros.
pub fn describe(image: &RgbImage) -> [f32; DESCRIPTOR_LEN] {
    let mut out = [0f32; DESCRIPTOR_LEN];
    let bg = border_background(image, 1);
    let bg_lum = luminance(bg);
    let mut raw: Vec<(u32, u32, [f32; 3], f32)> = Vec::new();
    for (x, y, p) in image.enumerate_pixels() {
        let v = [
            p.0[0] as f32 - bg[0],
            p.0[1] as f32 - bg[1],
            p.0[2] as f32 - bg[2],
        ];
        let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if d > NOISE_FLOOR {
            raw.push((x, y, v, d));
        }
    }
    if raw.is_empty() {
        return out;
    }
    let mut ds: Vec<f32> = raw.iter().map(|r| r.3).collect();
    ds.sort_by(f32::total_cmp);
    let full = ds[((ds.len() - 1) as f32 * 0.9) as usize].max(NOISE_FLOOR * 2.0);

    let pixels: Vec<Px> = raw
        .iter()
        .map(|&(x, y, v, d)| {
            let alpha = (d / full).min(1.0);
            let c = [v[0] + bg[0], v[1] + bg[1], v[2] + bg[2]];
            // Luminance of the specimen itself, with the background share removed.
            let lum = (luminance(c) - (1.0 - alpha) * bg_lum) / alpha;
            Px {
                x: x as f32,
                y: y as f32,
                alpha,
                dir: v.map(|c| c / d),
                lum,
            }
        })
        .collect();

    let mass: f32 = pixels.iter().map(|p| p.alpha).sum();
    let cx = pixels.iter().map(|p| p.alpha * p.x).sum::<f32>() / mass;
    let cy = pixels.iter().map(|p| p.alpha * p.y).sum::<f32>() / mass;
    let (mut sxx, mut syy, mut sxy) = (0f32, 0f32, 0f32);
    for p in &pixels {
        let (dx, dy) = (p.x - cx, p.y - cy);
        sxx += p.alpha * dx * dx;
        syy += p.alpha * dy * dy;
        sxy += p.alpha * dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / mass, syy / mass, sxy / mass);
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) / 4.0 + sxy * sxy).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = (tr / 2.0 - disc).max(0.0);
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (c, s) = (theta.cos(), theta.sin());
    let proj: Vec<(f32, f32)> = pixels
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - cx, p.y - cy);
            (dx * c + dy * s, -dx * s + dy * c)
        })
        .collect();

    let extent_above = |thr: f32| {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for (p, &(t, _)) in pixels.iter().zip(&proj) {
            if p.alpha >= thr {
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        if lo.is_finite() {
            hi - lo + 1.0
        } else {
            0.0
        }
    };
    let mut tw: Vec<(f32, f32)> = pixels
        .iter()
        .zip(&proj)
        .map(|(p, &(t, _))| (t, p.alpha))
        .collect();
    let t_lo = weighted_quantile(&mut tw, 0.01);
    let t_hi = weighted_quantile(&mut tw, 0.99);

    // Weighted least squares u = a t^2 + b t + c.
    let mut m = [[0f64; 3]; 3];
    let mut rhs = [0f64; 3];
    for (p, &(t, u)) in pixels.iter().zip(&proj) {
        let w = p.alpha as f64;
        let basis = [(t * t) as f64, t as f64, 1.0];
        for i in 0..3 {
            rhs[i] += w * basis[i] * u as f64;
            for j in 0..3 {
                m[i][j] += w * basis[i] * basis[j];
            }
        }
    }
    let [a, b, _] = solve3(m, rhs).unwrap_or([0.0; 3]);
    let (a, b) = (a as f32, b as f32);
    let arc = {
        let steps = 32;
        let mut len = 0.0;
        let mut prev = (t_lo, a * t_lo * t_lo + b * t_lo);
        for k in 1..=steps {
            let t = t_lo + (t_hi - t_lo) * k as f32 / steps as f32;
            let cur = (t, a * t * t + b * t);
            len += ((cur.0 - prev.0).powi(2) + (cur.1 - prev.1).powi(2)).sqrt();
            prev = cur;
        }
        len
    };
    let major = (12.0 * l1).sqrt();
    let minor = (12.0 * l2).sqrt();
    let half = (t_hi - t_lo) / 2.0;

    let w2: f32 = pixels.iter().map(|p| p.alpha * p.alpha).sum();
    let mut dir_mean = [0f32; 3];
    for p in &pixels {
        for k in 0..3 {
            dir_mean[k] += p.alpha * p.alpha * p.dir[k] / w2;
        }
    }
    let dir_spread = pixels
        .iter()
        .map(|p| {
            let d: f32 = (0..3).map(|k| (p.dir[k] - dir_mean[k]).powi(2)).sum();
            p.alpha * p.alpha * d
        })
        .sum::<f32>()
        / w2;

    // Luminance profile along the body.
    let mut bins = [(0f32, 0f32); PROFILE_BINS];
    let span = (t_hi - t_lo).max(1e-3);
    for (p, &(t, _)) in pixels.iter().zip(&proj) {
        if p.alpha < 0.3 || t < t_lo || t > t_hi {
            continue;
        }
        let k = (((t - t_lo) / span) * PROFILE_BINS as f32).min(PROFILE_BINS as f32 - 1.0) as usize;
        bins[k].0 += p.alpha * p.lum;
        bins[k].1 += p.alpha;
    }
    let filled: Vec<f32> = {
        let mut last = None;
        let mut v: Vec<Option<f32>> = bins
            .iter()
            .map(|&(s, w)| (w > 0.0).then(|| s / w))
            .collect();
        for x in v.iter_mut() {
            if x.is_some() {
                last = *x;
            } else {
                *x = last;
            }
        }
        let first = v.iter().flatten().next().copied().unwrap_or(0.0);
        v.into_iter().map(|x| x.unwrap_or(first)).collect()
    };
    let mean_lum = filled.iter().sum::<f32>() / PROFILE_BINS as f32;
    let denom = mean_lum.abs().max(1.0);
    let centred: Vec<f32> = filled.iter().map(|v| (v - mean_lum) / denom).collect();
    let profile_std = (centred.iter().map(|v| v * v).sum::<f32>() / PROFILE_BINS as f32).sqrt();
    let mut spectrum = [0f32; 6];
    for (k, slot) in spectrum.iter_mut().enumerate() {
        let f = (k + 1) as f32;
        let (mut re, mut im) = (0f32, 0f32);
        for (i, v) in centred.iter().enumerate() {
            let ph = 2.0 * std::f32::consts::PI * f * i as f32 / PROFILE_BINS as f32;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        *slot = (re * re + im * im).sqrt() / PROFILE_BINS as f32;
    }
    let xs: Vec<f32> = (0..PROFILE_BINS)
        .map(|i| i as f32 - (PROFILE_BINS as f32 - 1.0) / 2.0)
        .collect();
    let slope = xs.iter().zip(&centred).map(|(x, v)| x * v).sum::<f32>()
        / xs.iter().map(|x| x * x).sum::<f32>();
    let core: Vec<&Px> = pixels.iter().filter(|p| p.alpha >= 0.6).collect();
    let core_lum = if core.is_empty() {
        mean_lum
    } else {
        core.iter().map(|p| p.lum).sum::<f32>() / core.len() as f32
    };

    out[0] = mass;
    out[1] = major;
    out[2] = minor;
    out[3] = extent_above(0.5);
    out[4] = extent_above(0.15);
    out[5] = t_hi - t_lo;
    out[6] = arc;
    out[7] = a.abs() * half * half;
    out[8] = a.abs() * half;
    out[9] = mass / major.max(1.0);
    out[10] = dir_mean[0];
    out[11] = dir_mean[1];
    out[12] = dir_mean[2];
    out[13] = dir_spread;
    out[14] = full / 255.0;
    out[15] = core_lum / 255.0;
    out[16] = mean_lum / 255.0;
    out[17] = profile_std;
    out[18..24].copy_from_slice(&spectrum);
    out[24] = slope.abs();
    out[25] = pixels.len() as f32;
    out[26] = pixels.iter().filter(|p| p.alpha >= 0.5).count() as f32;
    out[27] = minor / major.max(1e-3);
    out
}

fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-9 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in 0..3 {
                    m[row][k] -= f * m[col][k];
                }
                r[row] -= f * r[col];
            }
        }
    }
    Some([r[0] / m[0][0], r[1] / m[1][1], r[2] / m[2][2]])
}

/// Photometric jitter. Each operation fires independently with
/// probability `p`; factors are drawn uniformly from `1 +- amount`, hue
/// shifts from `+- hue` of a full turn. Operations run in a fixed order:
/// brightness, contrast, saturation, hue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub p: f32,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            p: 0.5,
        }
    }
}

impl ColorJitter {
    pub fn none() -> Self {
        Self {
            p: 0.0,
            ..Self::default()
        }
    }

    pub fn apply<R: Rng>(&self, image: &RgbImage, rng: &mut R) -> RgbImage {
        let mut draw = |amount: f32| -> Option<f32> {
            let fire = rng.random::<f32>() < self.p;
            let v = rng.random_range(-1.0f32..=1.0) * amount;
            (fire && amount > 0.0).then_some(v)
        };
        let brightness = draw(self.brightness);
        let contrast = draw(self.contrast);
        let saturation = draw(self.saturation);
        let hue = draw(self.hue);
        if brightness.is_none() && contrast.is_none() && saturation.is_none() && hue.is_none() {
            return image.clone();
        }
        let mut px: Vec<[f32; 3]> = image.pixels().map(|p| p.0.map(|v| v as f32)).collect();
        if let Some(b) = brightness {
            for p in px.iter_mut() {
                *p = p.map(|v| (v * (1.0 + b)).clamp(0.0, 255.0));
            }
        }
        if let Some(c) = contrast {
            let mean = px.iter().map(|p| luminance(*p)).sum::<f32>() / px.len().max(1) as f32;
            for p in px.iter_mut() {
                *p = p.map(|v| ((v - mean) * (1.0 + c) + mean).clamp(0.0, 255.0));
            }
        }
        if let Some(s) = saturation {
            for p in px.iter_mut() {
                let g = luminance(*p);
                *p = p.map(|v| ((v - g) * (1.0 + s) + g).clamp(0.0, 255.0));
            }
        }
        if let Some(h) = hue {
            for p in px.iter_mut() {
                let (hh, ss, vv) = rgb_to_hsv(*p);
                *p = hsv_to_rgb(hh + h * 360.0, ss, vv);
            }
        }
        let mut out = RgbImage::new(image.width(), image.height());
        for (o, p) in out.pixels_mut().zip(&px) {
            *o = Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
        out
    }
}
