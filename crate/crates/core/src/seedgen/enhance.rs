//! Enhancement view: built-in bicubic upscaling + unsharp mask, or an
//! external command that writes the enhanced PNG.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::formats::{read_image, write_image};
use crate::types::ImageTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum Enhancer {
    /// Bicubic ×`scale` upsampling followed by a 3×3 unsharp mask.
    Builtin { scale: usize, sharpen_amount: f32 },
    /// Returns the input unchanged (scale 1).
    Identity,
    /// `command` is split on whitespace; the input and output PNG paths are
    /// appended as the last two arguments. The output must be `scale` times
    /// larger than the input.
    Command { command: String, scale: usize },
}

impl Default for Enhancer {
    fn default() -> Self {
        Enhancer::Builtin { scale: 2, sharpen_amount: 0.5 }
    }
}

impl std::str::FromStr for Enhancer {
    type Err = Error;

    /// `builtin`, `identity`, or `cmd:<program and args>` (scale 2).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "builtin" => Ok(Enhancer::default()),
            "identity" => Ok(Enhancer::Identity),
            _ => match s.strip_prefix("cmd:") {
                Some(c) if !c.trim().is_empty() => Ok(Enhancer::Command { command: c.trim().to_string(), scale: 2 }),
                _ => Err(Error::Config(format!("unknown enhancer `{s}` (builtin|identity|cmd:...)"))),
            },
        }
    }
}

impl Enhancer {
    pub fn scale(&self) -> usize {
        match self {
            Enhancer::Builtin { scale, .. } | Enhancer::Command { scale, .. } => *scale,
            Enhancer::Identity => 1,
        }
    }

    pub fn enhance(&self, image: &ImageTensor) -> Result<ImageTensor> {
        match self {
            Enhancer::Identity => Ok(image.clone()),
            Enhancer::Builtin { scale, sharpen_amount } => {
                if *scale == 0 {
                    return Err(Error::Config("enhancer scale must be at least 1".into()));
                }
                let up = bicubic_upscale(image, *scale);
                Ok(unsharp_mask(&up, *sharpen_amount))
            }
            Enhancer::Command { command, scale } => run_external(command, *scale, image),
        }
    }
}

/// Keys cubic convolution kernel, a = −0.5.
fn cubic_weight(t: f32) -> f32 {
    let a = -0.5f32;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Four taps and normalized weights along one axis for output index `o`.
fn taps(o: usize, scale: usize, len: usize) -> ([usize; 4], [f32; 4]) {
    let src = (o as f32 + 0.5) / scale as f32 - 0.5;
    let base = src.floor();
    let frac = src - base;
    let mut idx = [0usize; 4];
    let mut w = [0f32; 4];
    for k in 0..4 {
        let i = base as isize + k as isize - 1;
        idx[k] = i.clamp(0, len as isize - 1) as usize;
        w[k] = cubic_weight(frac - (k as f32 - 1.0));
    }
    let s: f32 = w.iter().sum();
    (idx, w.map(|v| v / s))
}

/// Separable bicubic upsampling with clamped borders. Each output is formed
/// as `ref + Σ wᵢ(xᵢ − ref)`, so flat regions stay exactly flat.
pub fn bicubic_upscale(image: &ImageTensor, scale: usize) -> ImageTensor {
    if scale == 1 {
        return image.clone();
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    let (oh, ow) = (h * scale, w * scale);
    let interp = |vals: [f32; 4], wts: [f32; 4]| {
        let r = vals[1];
        let mut acc = 0.0f32;
        for k in 0..4 {
            acc += wts[k] * (vals[k] - r);
        }
        r + acc
    };
    let mut tmp = vec![0.0f32; h * ow * c];
    for x in 0..ow {
        let (ix, wx) = taps(x, scale, w);
        for y in 0..h {
            for ch in 0..c {
                let vals = ix.map(|i| image.data[(y * w + i) * c + ch]);
                tmp[(y * ow + x) * c + ch] = interp(vals, wx);
            }
        }
    }
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..oh {
        let (iy, wy) = taps(y, scale, h);
        for x in 0..ow {
            for ch in 0..c {
                let vals = iy.map(|i| tmp[(i * ow + x) * c + ch]);
                out[(y * ow + x) * c + ch] = interp(vals, wy).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor { height: oh, width: ow, channels: c, data: out }
}

/// `x + amount·(x − blur(x))` with a radius-1 binomial blur, clamped to
/// [0, 1].
pub fn unsharp_mask(image: &ImageTensor, amount: f32) -> ImageTensor {
    let (h, w, c) = (image.height, image.width, image.channels);
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    let at = |y: isize, x: isize, ch: usize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        image.data[(y * w + x) * c + ch]
    };
    let mut out = image.data.clone();
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..c {
                let center = at(y, x, ch);
                let mut delta = 0.0f32;
                for (dy, ky) in K.iter().enumerate() {
                    for (dx, kx) in K.iter().enumerate() {
                        delta += ky * kx * (at(y + dy as isize - 1, x + dx as isize - 1, ch) - center);
                    }
                }
                // blur = center + delta, so x − blur = −delta
                let v = center - amount * delta;
                out[(y as usize * w + x as usize) * c + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor { height: h, width: w, channels: c, data: out }
}

fn run_external(command: &str, scale: usize, image: &ImageTensor) -> Result<ImageTensor> {
    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or_else(|| Error::Config("empty enhancer command".into()))?;
    let dir = tempdir()?;
    let input = dir.join("input.png");
    let output = dir.join("output.png");
    write_image(&input, image)?;
    let result = Command::new(program).args(parts).arg(&input).arg(&output).output();
    let cleanup = |d: &Path| {
        let _ = std::fs::remove_dir_all(d);
    };
    let out = match result {
        Ok(o) => o,
        Err(e) => {
            cleanup(&dir);
            return Err(Error::External { command: command.into(), stderr: e.to_string() });
        }
    };
    if !out.status.success() {
        cleanup(&dir);
        return Err(Error::External {
            command: command.into(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    let enhanced = read_image(&output);
    cleanup(&dir);
    let enhanced = enhanced?;
    if enhanced.height != image.height * scale || enhanced.width != image.width * scale {
        return Err(Error::External {
            command: command.into(),
            stderr: format!(
                "produced {}x{}, expected {}x{}",
                enhanced.height,
                enhanced.width,
                image.height * scale,
                image.width * scale
            ),
        });
    }
    Ok(enhanced)
}

fn tempdir() -> Result<std::path::PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let dir = std::env::temp_dir().join(format!(
        "dgle-enhance-{}-{}",
        std::process::id(),
        NEXT.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
