//! PNG encoding and decoding for depth (16-bit gray, millimetres), masks
//! (8-bit gray, {0, 255}) and color (8-bit RGB).

use std::io::{BufRead, BufReader, Cursor, Seek};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, DepthImage, Grid, RgbImage};

/// Largest accepted side length; guards allocations on hostile headers.
pub const MAX_SIDE: u32 = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Depth,
    Mask,
    Rgb,
}

impl ImageKind {
    fn expected(self) -> (ColorType, BitDepth) {
        match self {
            ImageKind::Depth => (ColorType::Grayscale, BitDepth::Sixteen),
            ImageKind::Mask => (ColorType::Grayscale, BitDepth::Eight),
            ImageKind::Rgb => (ColorType::Rgb, BitDepth::Eight),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ImageKind::Depth => "depth (16-bit grayscale)",
            ImageKind::Mask => "mask (8-bit grayscale)",
            ImageKind::Rgb => "color (8-bit RGB)",
        }
    }
}

fn png_error(e: png::DecodingError) -> Error {
    Error::Format(format!("png: {e}"))
}

fn check_header(info: &png::Info, kind: ImageKind) -> Result<(usize, usize)> {
    let (color, depth) = kind.expected();
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::Format(format!(
            "expected {} but the PNG is {:?} at {:?}",
            kind.name(),
            info.color_type,
            info.bit_depth
        )));
    }
    if info.width == 0 || info.height == 0 || info.width > MAX_SIDE || info.height > MAX_SIDE {
        return Err(Error::Format(format!("unsupported image size {}x{}", info.width, info.height)));
    }
    Ok((info.width as usize, info.height as usize))
}

fn decode<R: BufRead + Seek>(reader: R, kind: ImageKind) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let (w, h) = check_header(reader.info(), kind)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(png_error)?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

/// Width and height from the header only, after checking the pixel format.
pub fn probe_png(path: &Path, kind: ImageKind) -> Result<(usize, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    let info = decoder.read_header_info().map_err(png_error)?;
    check_header(info, kind)
}

pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthImage> {
    let (w, h, buf) = decode(Cursor::new(bytes), ImageKind::Depth)?;
    let data = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Grid::from_vec(w, h, data)
}

/// Any non-zero sample is foreground.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let (w, h, buf) = decode(Cursor::new(bytes), ImageKind::Mask)?;
    Grid::from_vec(w, h, buf.into_iter().map(|b| b != 0).collect())
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, buf) = decode(Cursor::new(bytes), ImageKind::Rgb)?;
    Grid::from_vec(w, h, buf.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn encode(width: usize, height: usize, kind: ImageKind, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let (color, depth) = kind.expected();
    let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let to_err = |e: png::EncodingError| Error::Format(format!("png: {e}"));
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(data).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(out)
}

pub fn encode_depth_png(depth: &DepthImage) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = depth.data().iter().flat_map(|d| d.to_be_bytes()).collect();
    encode(depth.width(), depth.height(), ImageKind::Depth, &bytes)
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode(mask.width(), mask.height(), ImageKind::Mask, &bytes)
}

pub fn encode_rgb_png(rgb: &RgbImage) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = rgb.data().iter().flatten().copied().collect();
    encode(rgb.width(), rgb.height(), ImageKind::Rgb, &bytes)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Load { path: path.to_path_buf(), msg: e.to_string() })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_depth_png(path: &Path) -> Result<DepthImage> {
    with_path(path, decode_depth_png(&read_bytes(path)?))
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    with_path(path, decode_mask_png(&read_bytes(path)?))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    with_path(path, decode_rgb_png(&read_bytes(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eight_bit_depth_is_a_format_error() {
        let mask = BinaryMask::filled(4, 3, true);
        let bytes = encode_mask_png(&mask).unwrap();
        assert!(matches!(decode_depth_png(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_rgb_png(&bytes), Err(Error::Format(_))));
        assert_eq!(decode_mask_png(&bytes).unwrap(), mask);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_depth_png(b"not a png").is_err());
        assert!(decode_mask_png(&[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn depth_round_trips(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let depth = Grid::from_fn(w, h, |u, v| (seed.wrapping_mul(u as u64 * 31 + v as u64 + 7) >> 48) as u16);
            prop_assert_eq!(decode_depth_png(&encode_depth_png(&depth).unwrap()).unwrap(), depth);
        }

        #[test]
        fn rgb_and_mask_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let rgb = Grid::from_fn(w, h, |u, v| {
                let x = seed.wrapping_mul(u as u64 * 131 + v as u64 * 7 + 1);
                [(x >> 56) as u8, (x >> 48) as u8, (x >> 40) as u8]
            });
            prop_assert_eq!(decode_rgb_png(&encode_rgb_png(&rgb).unwrap()).unwrap(), rgb.clone());
            let mask = rgb.map(|c| c[0] > 127);
            prop_assert_eq!(decode_mask_png(&encode_mask_png(&mask).unwrap()).unwrap(), mask);
        }
    }
}
