//! On-disk formats: the `DGLP` probability tensor, 8-bit label PNGs and
//! RGB image PNGs. All writers go through a temp file + rename.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::types::{ImageTensor, LabelMap, ProbMap, IGNORE};
use crate::{Error, Result};

pub const PROBMAP_MAGIC: &[u8; 4] = b"DGLP";
pub const PROBMAP_VERSION: u32 = 1;
/// magic + version + H + W + K
pub const PROBMAP_HEADER_LEN: usize = 20;

/// Write `bytes` to `path` atomically (sibling temp file, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(|e| Error::from(e).at(&tmp))?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::from(e).at(path))?;
    Ok(())
}

pub fn encode_probmap(p: &ProbMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(PROBMAP_HEADER_LEN + p.data.len() * 4);
    out.extend_from_slice(PROBMAP_MAGIC);
    for v in [PROBMAP_VERSION, p.height as u32, p.width as u32, p.num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &p.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_probmap(bytes: &[u8]) -> Result<ProbMap> {
    let need = |end: usize, what: &str| -> Result<()> {
        if bytes.len() < end {
            Err(Error::format(bytes.len() as u64, format!("truncated while reading {what}")))
        } else {
            Ok(())
        }
    };
    need(4, "magic")?;
    if &bytes[..4] != PROBMAP_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    need(PROBMAP_HEADER_LEN, "header")?;
    let version = u32_at(4);
    if version != PROBMAP_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let (h, w, k) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(k))
        .ok_or_else(|| Error::format(8, "dimensions overflow"))?;
    let end = PROBMAP_HEADER_LEN + count * 4;
    need(end, "probability data")?;
    if bytes.len() > end {
        return Err(Error::format(end as u64, format!("{} trailing bytes", bytes.len() - end)));
    }
    let data = bytes[PROBMAP_HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ProbMap::new(h, w, k, data).map_err(|e| Error::format(PROBMAP_HEADER_LEN as u64, e.to_string()))
}

pub fn write_probmap(path: &Path, p: &ProbMap) -> Result<()> {
    write_atomic(path, &encode_probmap(p))
}

pub fn read_probmap(path: &Path) -> Result<ProbMap> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode_probmap(&bytes).map_err(|e| e.at(path))
}

/// Provenance stamped into label PNGs written by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lineage {
    pub config_hash: String,
    pub iteration: Option<usize>,
}

const LINEAGE_CONFIG: &str = "dgle:config_hash";
const LINEAGE_ITERATION: &str = "dgle:iteration";

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    raster: &[u8],
    lineage: Option<&Lineage>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(l) = lineage {
            let text = |e: png::EncodingError| Error::format(0, e.to_string());
            enc.add_text_chunk(LINEAGE_CONFIG.into(), l.config_hash.clone()).map_err(text)?;
            if let Some(i) = l.iteration {
                enc.add_text_chunk(LINEAGE_ITERATION.into(), i.to_string()).map_err(text)?;
            }
        }
        let mut writer = enc.write_header().map_err(|e| Error::format(0, e.to_string()))?;
        writer.write_image_data(raster).map_err(|e| Error::format(0, e.to_string()))?;
    }
    Ok(out)
}

struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(0, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(0, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(0, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(0, "indexed PNG not expanded")),
    };
    Ok(Raster { width: info.width as usize, height: info.height as usize, channels, data: buf })
}

/// 8-bit grayscale PNG; class ids verbatim, IGNORE as 255.
pub fn encode_labelmap(l: &LabelMap) -> Result<Vec<u8>> {
    l.validate()?;
    encode_png(l.width, l.height, png::ColorType::Grayscale, &l.data, None)
}

pub fn encode_labelmap_with(l: &LabelMap, lineage: &Lineage) -> Result<Vec<u8>> {
    l.validate()?;
    encode_png(l.width, l.height, png::ColorType::Grayscale, &l.data, Some(lineage))
}

pub fn write_labelmap_with(path: &Path, l: &LabelMap, lineage: &Lineage) -> Result<()> {
    write_atomic(path, &encode_labelmap_with(l, lineage)?)
}

/// Lineage stamped into a PNG, if any.
pub fn read_lineage(path: &Path) -> Result<Option<Lineage>> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    let dec = png::Decoder::new(std::io::Cursor::new(&bytes[..]));
    let reader = dec.read_info().map_err(|e| Error::format(0, e.to_string()).at(path))?;
    let mut lineage: Option<Lineage> = None;
    for chunk in &reader.info().uncompressed_latin1_text {
        match chunk.keyword.as_str() {
            LINEAGE_CONFIG => lineage.get_or_insert_with(Lineage::default).config_hash = chunk.text.clone(),
            LINEAGE_ITERATION => {
                let i = chunk.text.parse().map_err(|_| Error::format(0, "bad iteration tag").at(path))?;
                lineage.get_or_insert_with(Lineage::default).iteration = Some(i);
            }
            _ => {}
        }
    }
    Ok(lineage)
}

pub fn decode_labelmap(bytes: &[u8], num_classes: usize) -> Result<LabelMap> {
    let r = decode_png(bytes)?;
    if r.channels != 1 {
        return Err(Error::format(0, format!("label PNG must be single-channel, found {} channels", r.channels)));
    }
    if let Some(i) = r.data.iter().position(|&v| v != IGNORE && v as usize >= num_classes) {
        return Err(Error::format(
            i as u64,
            format!("pixel value {} is neither a class id below {num_classes} nor {IGNORE}", r.data[i]),
        ));
    }
    LabelMap::new(r.height, r.width, num_classes, r.data)
}

pub fn write_labelmap(path: &Path, l: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_labelmap(l)?)
}

pub fn read_labelmap(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode_labelmap(&bytes, num_classes).map_err(|e| e.at(path))
}

/// Quantize to 8 bits per channel (round to nearest).
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Gray, RGB (or RGBA: alpha is written as given) PNG.
pub fn encode_image(img: &ImageTensor) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Shape(format!("cannot store a {c}-channel image as PNG"))),
    };
    let raster: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    encode_png(img.width, img.height, color, &raster, None)
}

/// Decodes to 3 channels: gray is replicated, alpha dropped.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let r = decode_png(bytes)?;
    let mut data = Vec::with_capacity(r.width * r.height * 3);
    for px in r.data.chunks_exact(r.channels) {
        let rgb = if r.channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
    }
    ImageTensor::new(r.height, r.width, 3, data)
}

pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_image(img)?)
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode_image(&bytes).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lineage_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let l = LabelMap::new(2, 2, 3, vec![0, 1, 2, IGNORE]).unwrap();
        let tag = Lineage { config_hash: "abc123".into(), iteration: Some(3) };
        write_labelmap_with(&path, &l, &tag).unwrap();
        assert_eq!(read_labelmap(&path, 3).unwrap(), l);
        assert_eq!(read_lineage(&path).unwrap(), Some(tag));
        write_labelmap(&path, &l).unwrap();
        assert_eq!(read_lineage(&path).unwrap(), None);
    }

    #[test]
    fn probmap_data_section_length() {
        let p = ProbMap::new(4, 4, 3, vec![1.0 / 3.0; 48]).unwrap();
        let bytes = encode_probmap(&p);
        assert_eq!(bytes.len() - PROBMAP_HEADER_LEN, 192);
        assert_eq!(&bytes[..4], b"DGLP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn probmap_bad_magic() {
        let p = ProbMap::new(1, 1, 1, vec![1.0]).unwrap();
        let mut bytes = encode_probmap(&p);
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_probmap(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn probmap_bad_version_and_truncation_report_offsets() {
        let p = ProbMap::new(2, 1, 2, vec![0.5; 4]).unwrap();
        let mut bytes = encode_probmap(&p);
        bytes[4] = 9;
        assert!(matches!(decode_probmap(&bytes), Err(Error::Format { offset: 4, .. })));
        let bytes = encode_probmap(&p);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_probmap(cut), Err(Error::Format { offset, .. }) if offset == cut.len() as u64));
        assert!(matches!(decode_probmap(&bytes[..10]), Err(Error::Format { offset: 10, .. })));
    }

    #[test]
    fn labelmap_rejects_values_between_k_and_255() {
        let raw = encode_png(2, 1, png::ColorType::Grayscale, &[1, 200], None).unwrap();
        let err = decode_labelmap(&raw, 6).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 1, .. }), "{err}");
        assert!(decode_labelmap(&raw, 201).is_ok());
    }

    #[test]
    fn all_ignore_labelmap_is_all_255() {
        let l = LabelMap::filled(3, 2, 4, IGNORE).unwrap();
        let bytes = encode_labelmap(&l).unwrap();
        let r = decode_png(&bytes).unwrap();
        assert!(r.data.iter().all(|&v| v == 255));
        assert_eq!(decode_labelmap(&bytes, 4).unwrap(), l);
    }

    #[test]
    fn label_round_trip_with_ignore() {
        let l = LabelMap::new(2, 3, 5, vec![0, 4, IGNORE, 2, IGNORE, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        write_labelmap(&path, &l).unwrap();
        assert_eq!(read_labelmap(&path, 5).unwrap(), l);
    }

    #[test]
    fn image_round_trip_on_8bit_grid() {
        let data: Vec<f32> = (0..8 * 8 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = ImageTensor::new(8, 8, 3, data).unwrap();
        assert_eq!(decode_image(&encode_image(&img).unwrap()).unwrap(), img);
    }
}
