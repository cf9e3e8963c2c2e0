//! 8-bit RGB images and binary PPM (P6) I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use vqsc_tensor::Tensor;

use crate::VqscError;

/// Interleaved RGB, 8 bits per channel. The float pipeline uses [-1, 1];
/// this type is the file/metric boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, VqscError> {
        if data.len() != width * height * 3 {
            return Err(VqscError::ShapeMismatch {
                context: "Image::new".into(),
                detail: format!("{}x{} needs {} bytes, got {}", width, height, width * height * 3, data.len()),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// [3,H,W] tensor with values in [-1, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0f64; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = (y * w + x) * 3;
                for c in 0..3 {
                    data[c * h * w + y * w + x] = self.data[p + c] as f64 / 127.5 - 1.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("consistent dims")
    }

    /// Quantize a [3,H,W] tensor in [-1, 1] back to 8-bit. Values outside
    /// the range clamp.
    pub fn from_tensor(t: &Tensor) -> Result<Self, VqscError> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(VqscError::ShapeMismatch {
                context: "Image::from_tensor".into(),
                detail: format!("expected [3,H,W], got {shape:?}"),
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let mut data = vec![0u8; w * h * 3];
        let td = t.data();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = td[c * h * w + y * w + x];
                    let byte = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                    data[(y * w + x) * 3 + c] = byte;
                }
            }
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), VqscError> {
        let file = File::create(path).map_err(|e| VqscError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        w.write_all(header.as_bytes())
            .and_then(|_| w.write_all(&self.data))
            .and_then(|_| w.flush())
            .map_err(|e| VqscError::io(path.display().to_string(), e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self, VqscError> {
        let file = File::open(path).map_err(|e| VqscError::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| VqscError::io(path.display().to_string(), e))?;
        Self::parse_ppm(&bytes).map_err(|msg| {
            VqscError::Dataset(format!("{}: {msg}", path.display()))
        })
    }

    fn parse_ppm(bytes: &[u8]) -> Result<Self, String> {

        fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                } else {
                    return;
                }
            }
        }

        fn read_token(bytes: &[u8], pos: &mut usize) -> Result<usize, String> {
            skip_ws_and_comments(bytes, pos);
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
                *pos += 1;
            }
            if start == *pos {
                return Err("expected integer in header".into());
            }
            std::str::from_utf8(&bytes[start..*pos])
                .map_err(|_| "bad header encoding".to_string())?
                .parse::<usize>()
                .map_err(|e| format!("bad header integer: {e}"))
        }

        if bytes.len() < 2 || &bytes[0..2] != b"P6" {
            return Err("not a binary PPM (missing P6 magic)".into());
        }
        let mut pos = 2usize;
        let width = read_token(bytes, &mut pos)?;
        let height = read_token(bytes, &mut pos)?;
        let maxval = read_token(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval} (only 255)"));
        }
        // exactly one whitespace byte separates the header from the payload
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err("missing separator before pixel data".into());
        }
        pos += 1;
        let need = width * height * 3;
        if bytes.len() - pos < need {
            return Err(format!(
                "truncated pixel data: need {need} bytes, have {}",
                bytes.len() - pos
            ));
        }
        Image::new(width, height, bytes[pos..pos + need].to_vec()).map_err(|e| e.to_string())
    }
}
