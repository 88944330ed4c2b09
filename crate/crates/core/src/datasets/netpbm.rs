//! Binary Netpbm codecs: P6 for RGB images, P5 for label maps.

use std::path::Path;

use crate::datasets::LabelMap;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Encodes a `[3,H,W]` image in `[0,1]` as P6 with maxval 255.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let plane = h * w;
    let data = image.data();
    for px in 0..plane {
        for ch in 0..3 {
            out.push(quantize(data[ch * plane + px]));
        }
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes, b"P6")?;
    let plane = header.width * header.height;
    let payload = payload(bytes, &header, 3 * plane)?;
    let scale = 1.0 / header.maxval as f64;
    let mut data = vec![0.0; 3 * plane];
    for px in 0..plane {
        for ch in 0..3 {
            data[ch * plane + px] = payload[3 * px + ch] as f64 * scale;
        }
    }
    Tensor::new(vec![3, header.height, header.width], data)
}

/// Encodes a label map as P5; pixel value = class id.
pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5")?;
    let plane = header.width * header.height;
    let payload = payload(bytes, &header, plane)?;
    LabelMap::new(header.height, header.width, payload.to_vec())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    std::fs::write(path, encode_pgm(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn payload<'a>(bytes: &'a [u8], header: &Header, len: usize) -> Result<&'a [u8]> {
    let end = header.data_offset + len;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: expected {len} bytes"),
        });
    }
    Ok(&bytes[header.data_offset..end])
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected magic {}", String::from_utf8_lossy(magic)),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        pos = skip_whitespace_and_comments(bytes, pos)?;
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                message: "expected a decimal header field".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Format {
                offset: start,
                message: "header field out of range".into(),
            })?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format {
            offset: pos,
            message: "zero image extent".into(),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: pos,
            message: format!("unsupported maxval {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Format {
                offset: pos,
                message: "missing whitespace after maxval".into(),
            })
        }
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_offset: pos,
    })
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> Result<usize> {
    loop {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(_) => return Ok(pos),
            None => {
                return Err(Error::Format {
                    offset: pos,
                    message: "unexpected end of header".into(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    #[test]
    fn one_pixel_black_image() {
        let bytes = encode_ppm(&Tensor::zeros(&[3, 1, 1])).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\x00\x00\x00");
    }

    #[test]
    fn single_label_payload() {
        let bytes = encode_pgm(&LabelMap::new(1, 1, vec![5]).unwrap());
        assert_eq!(bytes, b"P5\n1 1\n255\n\x05");
    }

    #[test]
    fn random_labeled_image_round_trip() {
        let mut rng = RngState::new(12);
        let image = Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.uniform()).collect()).unwrap();
        let labels = LabelMap::new(8, 8, (0..64).map(|_| rng.int_range(0, 7) as u8).collect()).unwrap();
        let back = decode_ppm(&encode_ppm(&image).unwrap()).unwrap();
        assert!(back.max_abs_diff(&image) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(decode_pgm(&encode_pgm(&labels)).unwrap(), labels);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # comment\n2 # w\n1\n255\n\x01\x02";
        let labels = decode_pgm(bytes).unwrap();
        assert_eq!(labels.data(), &[1, 2]);
        assert_eq!((labels.height(), labels.width()), (1, 2));
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        match decode_ppm(b"P6\n2 2\n255\n\0\0\0") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode_pgm(b"P5\n1 x\n255\n"),
            Err(Error::Format { offset: 5, .. })
        ));
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_pgm(b"P5\n1 1").is_err());
    }

    proptest! {
        #[test]
        fn quantized_round_trip_is_stable(values in prop::collection::vec(0u8..=255, 12)) {
            let image = Tensor::new(
                vec![3, 2, 2],
                values.iter().map(|&v| v as f64 / 255.0).collect(),
            ).unwrap();
            let bytes = encode_ppm(&image).unwrap();
            let back = decode_ppm(&bytes).unwrap();
            prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
            prop_assert!(back.max_abs_diff(&image) < 1e-12);
        }
    }
}
