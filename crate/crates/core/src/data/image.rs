//! RGB images in `[0, 1]`, channel-major, plus PPM (P6) and PNG codecs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// `[3, height, width]`
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Input(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let plane = size * size;
        let data = rgb.iter().flat_map(|&c| std::iter::repeat_n(c, plane)).collect();
        Image {
            height: size,
            width: size,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let plane = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + y * self.width + x] = v;
        }
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.pixel(c, y, x) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Input("rgb buffer size mismatch".into()));
        }
        let mut img = Image {
            height,
            width,
            data: vec![0.0; rgb.len()],
        };
        for (k, px) in rgb.chunks(3).enumerate() {
            img.set_pixel(k / width, k % width, [0, 1, 2].map(|c| f64::from(px[c]) / 255.0));
        }
        Ok(img)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(|e| Error::io(path, e))?;
        w.write_all(&self.to_rgb8()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a PPM (P6, maxval 255) or PNG file, chosen by extension.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            decode_png(&bytes).map_err(|msg| Error::Image {
                path: path.to_path_buf(),
                msg,
            })
        } else {
            decode_ppm(&bytes).map_err(|msg| Error::Image {
                path: path.to_path_buf(),
                msg,
            })
        }
    }
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII PPM header")?);
    }
    if fields[0] != "P6" {
        return Err(format!("expected P6 magic, found {:?}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field {s:?}"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, found {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * width * height;
    let raster = bytes.get(pos..pos + need).ok_or("truncated PPM raster")?;
    Image::from_rgb8(height, width, raster).map_err(|e| e.to_string())
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("PNG too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err("only 8-bit PNG is supported".into());
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        other => return Err(format!("unsupported PNG color type {other:?}")),
    };
    Image::from_rgb8(h, w, &rgb).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(4, [0.0, 0.0, 0.0]);
        img.set_pixel(1, 2, [1.0, 0.0, 1.0]);
        let path = dir.path().join("a.ppm");
        img.write_ppm(&path).unwrap();
        assert_eq!(Image::read(&path).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_garbage() {
        assert!(decode_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn png_decodes() {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, 2, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[255, 0, 0, 0, 0, 255]).unwrap();
        }
        let img = decode_png(&buf).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.pixel(0, 0, 0), 1.0);
        assert_eq!(img.pixel(2, 0, 1), 1.0);
    }
}
