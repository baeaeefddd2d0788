//! Binary PPM (P6, 8-bit) and PGM (P5) image files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes a `[C, H, W]` image in `[0, 1]` to interleaved 8-bit samples.
pub fn quantize(image: &Tensor<f32>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(
            "ppm",
            format!("expected [C, H, W], got {:?}", image.shape()),
        ));
    };
    if c != 1 && c != 3 {
        return Err(Error::shape("ppm", format!("{c} channels, expected 1 or 3")));
    }
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for k in 0..c {
            out.push((d[k * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((c, h, w, out))
}

/// Encodes a 1- or 3-channel image as P5 or P6.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w, payload) = quantize(image)?;
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("truncated image header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes P5/P6 into `[C, H, W]` values `v / 255`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)?.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::format(format!("unsupported image magic {m:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::format(format!("bad image {what}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(Error::format(format!("maxval {max}, only 255 supported")));
    }
    pos += 1;
    let plane = w * h;
    let payload = bytes
        .get(pos..pos + channels * plane)
        .ok_or_else(|| Error::format("truncated image payload"))?;
    let mut data = vec![0.0f32; channels * plane];
    for i in 0..plane {
        for k in 0..channels {
            data[k * plane + i] = payload[i * channels + k] as f32 / 255.0;
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn save(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&std::fs::read(path)?)
}

/// Lays `[C, H, W]` images side by side in rows of `cols`, padding with white.
pub fn grid(images: &[Tensor<f32>], cols: usize) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image grid"))?;
    let &[c, h, w] = first.shape() else {
        return Err(Error::shape("grid", format!("{:?}", first.shape())));
    };
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![1.0f32; c * gh * gw];
    for (n, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape(
                "grid",
                format!("{:?} vs {:?}", img.shape(), first.shape()),
            ));
        }
        let (oy, ox) = ((n / cols) * h, (n % cols) * w);
        for k in 0..c {
            for y in 0..h {
                let src = &img.data()[(k * h + y) * w..][..w];
                out[(k * gh + oy + y) * gw + ox..][..w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![c, gh, gw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_quantized_values() {
        let img = Tensor::from_fn(vec![3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(decode(&bytes).unwrap(), img);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn grayscale_and_comments() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let img = decode(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        assert!(decode(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn grid_places_tiles() {
        let a = Tensor::full(vec![1, 2, 2], 0.0f32);
        let b = Tensor::full(vec![1, 2, 2], 0.5f32);
        let g = grid(&[a, b.clone(), b], 2).unwrap();
        assert_eq!(g.shape(), &[1, 4, 4]);
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[2], 0.5);
        assert_eq!(g.data()[15], 1.0);
    }
}
