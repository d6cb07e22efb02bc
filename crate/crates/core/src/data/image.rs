use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
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

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Left-right mirror.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Reads PPM (P6, maxval 255) or PNG, chosen by file extension.
    pub fn read(path: &Path) -> Result<Self> {
        let img_err = |message: String| Error::Image { path: path.to_path_buf(), message };
        let file = std::fs::File::open(path).map_err(|e| img_err(e.to_string()))?;
        let mut reader = BufReader::new(file);
        if is_png(path) {
            read_png(reader).map_err(img_err)
        } else {
            read_ppm(&mut reader).map_err(img_err)
        }
    }

    /// Writes PPM or PNG, chosen by file extension.
    pub fn write(&self, path: &Path) -> Result<()> {
        let img_err = |message: String| Error::Image { path: path.to_path_buf(), message };
        let file = std::fs::File::create(path).map_err(|e| img_err(e.to_string()))?;
        let mut w = std::io::BufWriter::new(file);
        if is_png(path) {
            let mut enc = png::Encoder::new(&mut w, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| img_err(e.to_string()))?;
            writer.write_image_data(&self.data).map_err(|e| img_err(e.to_string()))?;
        } else {
            write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
            w.write_all(&self.data)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_png(reader: impl BufRead + std::io::Seek) -> std::result::Result<RgbImage, String> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("png too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(format!("unsupported png colour type {other:?}")),
    };
    RgbImage::new(w, h, data).map_err(|e| e.to_string())
}

fn read_ppm(r: &mut impl Read) -> std::result::Result<RgbImage, String> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
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
            return Err("truncated ppm header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6) file".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad ppm header field '{s}'"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(format!("only 8-bit PPM is supported, maxval is {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = w * h * 3;
    if bytes.len() < start + need {
        return Err("truncated ppm raster".into());
    }
    RgbImage::new(w, h, bytes[start..start + need].to_vec()).map_err(|e| e.to_string())
}

/// Linear map of bytes `[0,255]` to `[-1,1]`, laid out `[3,H,W]`.
pub fn preprocess(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(x, y);
            for c in 0..3 {
                out[(c * h + y) * w + x] = p[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Tensor::from_raw(vec![3, h, w], out)
}

/// Inverse of [`preprocess`]; values are clamped to `[-1,1]` first.
pub fn to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("expected a [3,H,W] tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut img = RgbImage::filled(w, h, [0; 3]);
    let d = t.data();
    for y in 0..h {
        for x in 0..w {
            let mut p = [0u8; 3];
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(-1.0, 1.0);
                p[c] = ((v + 1.0) * 127.5).round() as u8;
            }
            img.set_pixel(x, y, p);
        }
    }
    Ok(img)
}

/// Crops `[C,H,W]` to `[C,target,target]`: a uniformly random offset when an
/// `rng` is given (training), the centre otherwise. Returns the crop and its
/// `(top, left)` offset.
pub fn augment_crop(
    image: &Tensor<f32>,
    target: usize,
    rng: Option<&mut RngStream>,
) -> Result<(Tensor<f32>, (usize, usize))> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("crop expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if target == 0 || target > h || target > w {
        return Err(Error::dim(format!("crop target {target} exceeds source {h}x{w}")));
    }
    let (top, left) = match rng {
        Some(r) => (r.below(h - target + 1), r.below(w - target + 1)),
        None => ((h - target) / 2, (w - target) / 2),
    };
    let d = image.data();
    let mut out = Vec::with_capacity(c * target * target);
    for ch in 0..c {
        for y in top..top + target {
            let row = (ch * h + y) * w + left;
            out.extend_from_slice(&d[row..row + target]);
        }
    }
    Ok((Tensor::from_raw(vec![c, target, target], out), (top, left)))
}
