//! Image files: `.rten` tensors and binary PPM (P6).

use std::path::Path;

use super::manifest::SampleRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a P6 PPM into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let err = |offset: usize, message: &str| Error::Parse {
        offset,
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<(usize, String)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, "unexpected end of header"));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()))
    };
    let (at, magic) = token(bytes)?;
    if magic != "P6" {
        return Err(err(at, "expected P6 magic"));
    }
    let mut num = |bytes: &[u8], what: &str| -> Result<usize> {
        let (at, t) = token(bytes)?;
        t.parse().map_err(|_| err(at, &format!("bad {what}")))
    };
    let w = num(bytes, "width")?;
    let h = num(bytes, "height")?;
    let max = num(bytes, "maxval")?;
    if max == 0 || max > 255 {
        return Err(err(pos, "only 8-bit maxval is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let raster = bytes.get(start..start + 3 * w * h).ok_or_else(|| err(start, "truncated raster"))?;
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / max as f32;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Nearest-neighbour resize of a `[C, H, W]` tensor.
pub fn resize_nearest(image: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let &[c, h, w] = image.shape() else {
        panic!("resize expects [C, H, W], got {:?}", image.shape());
    };
    if (h, w) == (height, width) {
        return image.clone();
    }
    let src = image.data();
    let mut out = vec![0.0f32; c * height * width];
    for ci in 0..c {
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                out[(ci * height + y) * width + x] = src[(ci * h + sy) * w + x * w / width];
            }
        }
    }
    Tensor::new(&[c, height, width], out).expect("consistent shape")
}

/// Loads a record's image from `root`. `.rten` files must already have the
/// expected `[3, H, W]` shape; PPM files are resized to it.
pub fn load_image(root: &Path, record: &SampleRecord, height: usize, width: usize) -> Result<Tensor<f32>> {
    let path = root.join(&record.path);
    let image = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            resize_nearest(&decode_ppm(&bytes)?, height, width)
        }
        _ => Tensor::<f32>::read_rten(&path)?,
    };
    if image.shape() != [3, height, width] {
        return Err(Error::Format(format!(
            "{}: expected shape [3, {height}, {width}], found {:?}",
            path.display(),
            image.shape()
        )));
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_decodes_channels_planar() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 51, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), [3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.2, 0.0, 1.0]);
    }

    #[test]
    fn ppm_errors() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x00"), Err(Error::Parse { .. })));
    }

    #[test]
    fn resize_keeps_constant_images() {
        let t = Tensor::full(&[3, 4, 2], 0.5f32);
        let r = resize_nearest(&t, 8, 6);
        assert_eq!(r.shape(), [3, 8, 6]);
        assert!(r.data().iter().all(|&v| v == 0.5));
    }
}
