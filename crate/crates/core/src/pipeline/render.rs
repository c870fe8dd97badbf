//! Label colorization and a minimal raster line plot of the run ledger.

use std::path::Path;

use crate::types::{ImageTensor, LabelMap, IGNORE};
use crate::{Error, Result};

pub type Rgb = [u8; 3];

/// Rendered for IGNORE pixels.
pub const IGNORE_COLOR: Rgb = [0, 0, 0];

/// Default palette; no entry is black, so IGNORE stays distinguishable.
pub fn default_palette(num_classes: usize) -> Vec<Rgb> {
    const BASE: [Rgb; 8] = [
        [128, 128, 128],
        [230, 25, 75],
        [60, 120, 230],
        [255, 200, 25],
        [145, 30, 180],
        [60, 180, 75],
        [245, 130, 48],
        [70, 240, 240],
    ];
    (0..num_classes)
        .map(|c| {
            if c < BASE.len() {
                BASE[c]
            } else {
                // deterministic, distinct and never black
                let h = (c as u32).wrapping_mul(2_654_435_761);
                [(h >> 24) as u8 | 0x20, (h >> 16) as u8 | 0x20, (h >> 8) as u8 | 0x20]
            }
        })
        .collect()
}

fn check_palette(palette: &[Rgb], num_classes: usize) -> Result<()> {
    if palette.len() < num_classes {
        return Err(Error::Config(format!(
            "palette has {} colors for {num_classes} classes",
            palette.len()
        )));
    }
    if palette[..num_classes].contains(&IGNORE_COLOR) {
        return Err(Error::Config("palette colors must differ from the IGNORE color (black)".into()));
    }
    Ok(())
}

pub fn colorize(labels: &LabelMap, palette: &[Rgb]) -> Result<ImageTensor> {
    check_palette(palette, labels.num_classes)?;
    let mut data = Vec::with_capacity(labels.pixels() * 3);
    for &l in &labels.data {
        let rgb = if l == IGNORE { IGNORE_COLOR } else { palette[l as usize] };
        data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
    }
    ImageTensor::new(labels.height, labels.width, 3, data)
}

/// Inverse of [`colorize`]; unknown colors are an error.
pub fn decolorize(image: &ImageTensor, palette: &[Rgb], num_classes: usize) -> Result<LabelMap> {
    check_palette(palette, num_classes)?;
    if image.channels != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {} channels", image.channels)));
    }
    let mut data = Vec::with_capacity(image.pixels());
    for (p, px) in image.data.chunks_exact(3).enumerate() {
        let rgb: Rgb = [0, 1, 2].map(|i| crate::formats::quantize(px[i]));
        let l = if rgb == IGNORE_COLOR {
            IGNORE
        } else {
            palette[..num_classes]
                .iter()
                .position(|c| *c == rgb)
                .ok_or_else(|| Error::Format { offset: p as u64, message: format!("pixel {p} color {rgb:?} is not in the palette") })?
                as u8
        };
        data.push(l);
    }
    LabelMap::new(image.height, image.width, num_classes, data)
}

/// One line of a plot: values indexed by x = 1, 2, ….
pub struct Series {
    pub color: Rgb,
    pub values: Vec<Option<f64>>,
}

/// Line plot of series in [0, 1] with a light grid at tenths. No text: the
/// matching CSV carries the numbers.
pub fn render_plot(series: &[Series], width: usize, height: usize) -> Result<ImageTensor> {
    if width < 32 || height < 32 {
        return Err(Error::Config("plot must be at least 32x32".into()));
    }
    let mut px = vec![[255u8; 3]; width * height];
    let margin = 16usize;
    let (x0, y0) = (margin, margin);
    let (pw, ph) = (width - 2 * margin, height - 2 * margin);
    let put = |x: isize, y: isize, c: Rgb, px: &mut Vec<Rgb>| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            px[y as usize * width + x as usize] = c;
        }
    };
    for i in 0..=10 {
        let y = (y0 + ph - ph * i / 10) as isize;
        for x in x0..=x0 + pw {
            put(x as isize, y, [225, 225, 225], &mut px);
        }
    }
    for x in x0..=x0 + pw {
        put(x as isize, (y0 + ph) as isize, [0, 0, 0], &mut px);
    }
    for y in y0..=y0 + ph {
        put(x0 as isize, y as isize, [0, 0, 0], &mut px);
    }
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let to_xy = |i: usize, v: f64| {
        let fx = if n <= 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        let x = x0 as f64 + fx * pw as f64;
        let y = (y0 + ph) as f64 - v.clamp(0.0, 1.0) * ph as f64;
        (x, y)
    };
    for s in series {
        let pts: Vec<Option<(f64, f64)>> = s.values.iter().enumerate().map(|(i, v)| v.map(|v| to_xy(i, v))).collect();
        for w in pts.windows(2) {
            if let [Some(a), Some(b)] = w {
                let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
                for k in 0..=steps {
                    let f = k as f64 / steps as f64;
                    let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
                    put(x.round() as isize, y.round() as isize, s.color, &mut px);
                }
            }
        }
        for (x, y) in pts.into_iter().flatten() {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(x.round() as isize + dx, y.round() as isize + dy, s.color, &mut px);
                }
            }
        }
    }
    let data = px.iter().flat_map(|c| c.map(|v| v as f32 / 255.0)).collect();
    ImageTensor::new(height, width, 3, data)
}

pub fn write_colorized(path: &Path, labels: &LabelMap, palette: &[Rgb]) -> Result<()> {
    crate::formats::write_image(path, &colorize(labels, palette)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ignore_is_black_and_classes_map_exactly() {
        let pal = default_palette(5);
        let mut data = vec![0u8; 64];
        data[0] = IGNORE;
        data[1] = 2;
        data[2] = 4;
        let l = LabelMap::new(8, 8, 5, data).unwrap();
        let img = colorize(&l, &pal).unwrap();
        assert_eq!(&img.data[0..3], &[0.0, 0.0, 0.0]);
        let px: Vec<u8> = img.data[3..6].iter().map(|&v| crate::formats::quantize(v)).collect();
        assert_eq!(px, pal[2].to_vec());
        assert_eq!(decolorize(&img, &pal, 5).unwrap(), l);
    }

    #[test]
    fn palette_must_cover_classes() {
        let l = LabelMap::new(1, 1, 5, vec![0]).unwrap();
        assert!(colorize(&l, &default_palette(3)).is_err());
    }

    #[test]
    fn large_palettes_avoid_black() {
        let pal = default_palette(254);
        assert!(!pal.contains(&IGNORE_COLOR));
    }

    #[test]
    fn plot_has_requested_size() {
        let s = Series { color: [255, 0, 0], values: vec![Some(0.2), None, Some(0.6), Some(0.7)] };
        let img = render_plot(&[s], 200, 120).unwrap();
        assert_eq!((img.width, img.height), (200, 120));
        assert!(img.data.chunks(3).any(|p| p == [1.0, 0.0, 0.0]));
    }
}
