//! 8-bit RGB PNG import and export for `[3,h,w]` tensors in `[0,1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a PNG into `[3,h,w]`. Grayscale is replicated, alpha dropped,
/// 16-bit samples are scaled to `[0,1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let max = if wide { 65535.0 } else { 255.0 };
    let sample = |idx: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * idx], buf[2 * idx + 1]]) as f64 / max
        } else {
            buf[idx] as f64 / max
        }
    };
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = (y * w + x) * channels;
            for c in 0..3 {
                let src = if channels >= 3 { px + c } else { px };
                data[c * h * w + y * w + x] = sample(src);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Quantizes a `[3,h,w]` tensor to 8-bit RGB, clipping to `[0,1]`.
pub fn to_rgb8(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape(format!("expected [3,h,w] image, got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[c * h * w + y * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok((h, w, bytes))
}

pub fn write_png(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let (h, w, bytes) = to_rgb8(img)?;
    let mut encoder = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// Rounds every value to the nearest 8-bit level, as export would.
pub fn quantize8(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_on_export() {
        let img = Tensor::new(&[3, 1, 1], vec![-0.5, 0.5, 1.5]).unwrap();
        let (_, _, bytes) = to_rgb8(&img).unwrap();
        assert_eq!(bytes, vec![0, 128, 255]);
    }

    #[test]
    fn rejects_non_rgb() {
        assert!(to_rgb8(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
