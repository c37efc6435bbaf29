//! Lossless PNG reading and writing for images, masks and maps.
//!
//! Images are 8-bit RGB, masks 8-bit gray (0 or 255), and real-valued maps
//! 16-bit gray scaled from [0, 1].

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder};

use crate::error::{invalid_input, DipsError, Result};
use crate::image::{Map, Mask, RgbImage};

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: Vec<u8>,
}

fn codec(path: &Path, e: impl std::fmt::Display) -> DipsError {
    DipsError::Codec(format!("{}: {e}", path.display()))
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| codec(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| codec(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| codec(path, "image too large"))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| codec(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

/// Samples of one decoded image as values in [0, 1], with channel count.
fn samples(d: &Decoded) -> (Vec<f64>, usize) {
    let channels = match d.color {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => 3,
    };
    let values = match d.depth {
        BitDepth::Sixteen => d
            .bytes
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect(),
        _ => d.bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    };
    (values, channels)
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file = File::create(path)?;
    let mut enc = Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| codec(path, e))?;
    writer.write_image_data(data).map_err(|e| codec(path, e))?;
    writer.finish().map_err(|e| codec(path, e))?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads any PNG as RGB in [0, 1]; gray is replicated and alpha dropped.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let d = decode(path)?;
    let (values, ch) = samples(&d);
    let mut data = Vec::with_capacity(d.width * d.height * 3);
    for px in values.chunks_exact(ch) {
        match ch {
            1 | 2 => data.extend_from_slice(&[px[0]; 3]),
            _ => data.extend_from_slice(&px[..3]),
        }
    }
    RgbImage::from_vec(d.width, d.height, data)
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    if !image.is_finite() {
        return Err(invalid_input("cannot encode non-finite image"));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    encode(
        path,
        image.width(),
        image.height(),
        ColorType::Rgb,
        BitDepth::Eight,
        &bytes,
    )
}

/// Reads a single-channel map; the first channel is used for color files.
pub fn read_map(path: &Path) -> Result<Map> {
    let d = decode(path)?;
    let (values, ch) = samples(&d);
    Map::from_vec(d.width, d.height, values.chunks_exact(ch).map(|px| px[0]).collect())
}

/// Writes a [0, 1] map as 16-bit gray.
pub fn write_map(path: &Path, map: &Map) -> Result<()> {
    if !map.is_finite() {
        return Err(invalid_input("cannot encode non-finite map"));
    }
    let mut bytes = Vec::with_capacity(map.len() * 2);
    for &v in map.data() {
        bytes.extend_from_slice(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
    }
    encode(
        path,
        map.width(),
        map.height(),
        ColorType::Grayscale,
        BitDepth::Sixteen,
        &bytes,
    )
}

/// Foreground wherever the first channel exceeds one half.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let map = read_map(path)?;
    Mask::from_vec(map.width(), map.height(), map.data().iter().map(|&v| v > 0.5).collect())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(
        path,
        mask.width(),
        mask.height(),
        ColorType::Grayscale,
        BitDepth::Eight,
        &bytes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = RgbImage::from_vec(3, 2, (0..18).map(|i| (i * 14) as f64 / 255.0).collect()).unwrap();
        write_rgb(&p, &img).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), img);
    }

    #[test]
    fn map_round_trip_within_16bit_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let map = Map::from_fn(5, 4, |x, y| (x * 4 + y) as f64 / 19.0);
        write_map(&p, &map).unwrap();
        let back = read_map(&p).unwrap();
        for (a, b) in back.data().iter().zip(map.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.png");
        let mask = Mask::from_fn(7, 3, |x, y| (x + y) % 3 == 0);
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
    }

    #[test]
    fn unreadable_file_is_a_codec_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_rgb(&p), Err(DipsError::Codec(_))));
        assert!(matches!(
            read_map(&dir.path().join("missing.png")),
            Err(DipsError::Codec(_))
        ));
    }
}
