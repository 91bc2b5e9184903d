//! Images, label rasters, visual artifacts, dataset directories and the
//! synthetic band dataset.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ExtendedColorType, ImageBuffer, ImageReader, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sgseg_tensor::Tensor;

use crate::error::{invalid, Error, Result};
use crate::eval::IGNORE_LABEL;

/// Reads an 8-bit PNG or PPM as an `[H, W, C]` tensor in `[0, 1]`.
/// Grayscale gives `C = 1`, RGB `C = 3` and four-channel PNGs `C = 4`
/// (RGBIR).
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(Error::from)
        .and_then(|r| Ok(r.with_guessed_format()?.decode()?))
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (bytes, c) = match img.color().channel_count() {
        1 => (img.to_luma8().into_raw(), 1),
        2 | 4 => (img.to_rgba8().into_raw(), 4),
        _ => (img.to_rgb8().into_raw(), 3),
    };
    Ok(Tensor::new(&[h, w, c], bytes.iter().map(|&b| f64::from(b) / 255.0).collect())?)
}

/// Reads an RGB image and a grayscale infrared image of the same extent as
/// one `[H, W, 4]` tensor.
pub fn load_rgbir(rgb: &Path, ir: &Path) -> Result<Tensor> {
    let a = load_image(rgb)?;
    let b = load_image(ir)?;
    if a.shape()[2] != 3 || b.shape()[2] != 1 || a.shape()[..2] != b.shape()[..2] {
        return Err(Error::Image(format!(
            "cannot pair {:?} RGB with {:?} infrared",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let mut data = Vec::with_capacity(h * w * 4);
    for p in 0..h * w {
        data.extend_from_slice(a.row(p));
        data.push(b.data()[p]);
    }
    Ok(Tensor::new(&[h, w, 4], data)?)
}

pub fn to_bytes(image: &Tensor) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes an `[H, W, C]` tensor with 1, 3 or 4 channels as 8-bit PNG, or
/// 1 or 3 channels as PGM/PPM, chosen by the file extension.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(invalid(format!("expected an [H, W, C] image, got {s:?}")));
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let color = match (s[2], ext.as_str()) {
        (1, _) => ExtendedColorType::L8,
        (3, _) => ExtendedColorType::Rgb8,
        (4, "png") => ExtendedColorType::Rgba8,
        (c, _) => return Err(Error::Image(format!("cannot write {c} channels to `.{ext}`"))),
    };
    image::save_buffer(path, &to_bytes(image), s[1] as u32, s[0] as u32, color)?;
    Ok(())
}

/// Reads a label raster: the palette indices of an indexed PNG or the values
/// of an 8-bit grayscale PNG.
pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::Image(format!(
            "{}: labels must be 8-bit indexed or grayscale",
            path.display()
        )));
    }
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader.next_frame(&mut buf)?;
    let mut out = Vec::with_capacity(w * h);
    for row in buf[..frame.buffer_size()].chunks(frame.line_size) {
        out.extend_from_slice(&row[..w]);
    }
    Ok((h, w, out))
}

/// Distinct colors for class ids; the ignore id maps to black.
pub fn palette() -> Vec<[u8; 3]> {
    let mut p: Vec<[u8; 3]> = (0..256)
        .map(|i| {
            let hue = (i as f64 * 0.618_033_988_75).fract();
            let v = if i / 16 % 2 == 0 { 0.95 } else { 0.7 };
            let [r, g, b] = hsv_to_rgb(hue, 0.75, v);
            [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
        })
        .collect();
    p[IGNORE_LABEL as usize] = [0, 0, 0];
    p
}

/// Writes class ids as an 8-bit indexed PNG with [`palette`] colors.
pub fn save_indexed_png(path: &Path, h: usize, w: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != h * w {
        return Err(invalid(format!("{} labels for a {h}x{w} raster", labels.len())));
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette().concat());
    let mut writer = enc.write_header()?;
    writer.write_image_data(labels)?;
    writer.finish()?;
    Ok(())
}

pub fn labels_to_u8(labels: &[usize]) -> Result<Vec<u8>> {
    labels
        .iter()
        .map(|&l| {
            u8::try_from(l)
                .ok()
                .filter(|&b| b != IGNORE_LABEL)
                .ok_or_else(|| invalid(format!("class id {l} does not fit an 8-bit raster")))
        })
        .collect()
}

fn rgb_view(image: &Tensor) -> Vec<[f64; 3]> {
    let c = image.shape()[2];
    (0..image.rows())
        .map(|p| {
            let r = image.row(p);
            match c {
                1 | 2 => [r[0]; 3],
                _ => [r[0], r[1], r[2]],
            }
        })
        .collect()
}

/// Blends class colors over the image: `(1 - alpha) * image + alpha * color`.
pub fn overlay(image: &Tensor, labels: &[usize], alpha: f64) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if labels.len() != h * w {
        return Err(invalid("label raster does not match the image"));
    }
    let pal = palette();
    let rgb = rgb_view(image);
    let mut data = Vec::with_capacity(h * w * 3);
    for (px, &l) in rgb.iter().zip(labels) {
        let col = pal[l % 256];
        for ch in 0..3 {
            data.push((1.0 - alpha) * px[ch] + alpha * f64::from(col[ch]) / 255.0);
        }
    }
    Ok(Tensor::new(&[h, w, 3], data)?)
}

/// The image with pixels on superpixel borders (a right or lower neighbor
/// with another label) painted red.
pub fn boundary_image(image: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if labels.len() != h * w {
        return Err(invalid("label raster does not match the image"));
    }
    let rgb = rgb_view(image);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let edge = (x + 1 < w && labels[y * w + x + 1] != l) || (y + 1 < h && labels[(y + 1) * w + x] != l);
            if edge {
                data.extend_from_slice(&[1.0, 0.0, 0.0]);
            } else {
                data.extend_from_slice(&rgb[y * w + x]);
            }
        }
    }
    Ok(Tensor::new(&[h, w, 3], data)?)
}

/// Bilinear (triangle filter) resize of every channel.
pub fn resize_image(image: &Tensor, h: usize, w: usize) -> Tensor {
    let s = image.shape();
    if s[0] == h && s[1] == w {
        return image.clone();
    }
    let c = s[2];
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        let plane: Vec<f32> = (0..s[0] * s[1]).map(|p| image.row(p)[ch] as f32).collect();
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(s[1] as u32, s[0] as u32, plane).unwrap();
        let r = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
        for (p, v) in r.into_raw().into_iter().enumerate() {
            out[p * c + ch] = f64::from(v).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[h, w, c], out).unwrap()
}

/// Nearest-neighbor resize of a label raster.
pub fn resize_labels(labels: &[u8], h0: usize, w0: usize, h: usize, w: usize) -> Vec<u8> {
    if (h0, w0) == (h, w) {
        return labels.to_vec();
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w0 as u32, h0 as u32, labels.to_vec()).unwrap();
    imageops::resize(&buf, w as u32, h as u32, FilterType::Nearest).into_raw()
}

/// Images with optional per-image label rasters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<Vec<u8>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Splits off the last `n` elements.
    pub fn split_tail(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(invalid(format!("cannot hold out {n} of {} images", self.len())));
        }
        let at = self.len() - n;
        let tail = Dataset {
            names: self.names.split_off(at),
            images: self.images.split_off(at),
            labels: self.labels.as_mut().map(|l| l.split_off(at)),
        };
        Ok((self, tail))
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.retain(|p| is_image_file(p));
    v.sort();
    Ok(v)
}

/// Loads `root/images/*` (PNG or PPM), pairing each with `root/ir/<stem>.png`
/// when that exists and with `root/labels/<stem>.png` when a labels
/// directory exists. Images (and labels) are resized to `resize` squares.
pub fn load_dataset(root: &Path, resize: Option<usize>) -> Result<Dataset> {
    let paths = sorted_images(&root.join("images"))?;
    if paths.is_empty() {
        return Err(invalid(format!("no images under {}", root.join("images").display())));
    }
    let label_dir = root.join("labels");
    let has_labels = label_dir.is_dir();
    let loaded: Vec<Result<(String, Tensor, Option<Vec<u8>>)>> = paths
        .par_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            let ir = root.join("ir").join(format!("{stem}.png"));
            let mut img = if ir.is_file() { load_rgbir(p, &ir)? } else { load_image(p)? };
            let (h0, w0) = (img.shape()[0], img.shape()[1]);
            let (h, w) = resize.map_or((h0, w0), |s| (s, s));
            img = resize_image(&img, h, w);
            let labels = if has_labels {
                let lp = label_dir.join(format!("{stem}.png"));
                let (lh, lw, l) = load_labels(&lp)?;
                if (lh, lw) != (h0, w0) {
                    return Err(Error::Image(format!(
                        "{}: label raster is {lh}x{lw} but the image is {h0}x{w0}",
                        lp.display()
                    )));
                }
                Some(resize_labels(&l, h0, w0, h, w))
            } else {
                None
            };
            Ok((stem, img, labels))
        })
        .collect();
    let mut ds = Dataset {
        labels: has_labels.then(Vec::new),
        ..Dataset::default()
    };
    for r in loaded {
        let (name, img, lab) = r?;
        ds.names.push(name);
        ds.images.push(img);
        if let (Some(all), Some(l)) = (ds.labels.as_mut(), lab) {
            all.push(l);
        }
    }
    Ok(ds)
}

/// Writes `images/<name>.png` and, with labels, `labels/<name>.png`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    if ds.labels.is_some() {
        std::fs::create_dir_all(root.join("labels"))?;
    }
    for (i, (name, img)) in ds.names.iter().zip(&ds.images).enumerate() {
        save_image(&root.join("images").join(format!("{name}.png")), img)?;
        if let Some(labels) = &ds.labels {
            let (h, w) = (img.shape()[0], img.shape()[1]);
            save_indexed_png(&root.join("labels").join(format!("{name}.png")), h, w, &labels[i])?;
        }
    }
    Ok(())
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Standard deviation of the additive pixel noise in synthetic images.
pub const SYNTH_NOISE: f64 = 0.02;
/// Maximum per-image hue shift of the synthetic class colors.
pub const SYNTH_HUE_JITTER: f64 = 0.04;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `n` RGB images of `size x size` pixels split into `classes` parallel
/// bands of near-equal width. Orientation and band order are random per
/// image. Class `c` has hue `c / classes` shifted by a per-image jitter, and
/// every pixel gets Gaussian noise. Pixel values are quantized to 8 bits so
/// a written and reloaded dataset is identical.
pub fn generate_synthetic(n: usize, size: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > size || classes >= IGNORE_LABEL as usize {
        return Err(invalid(format!("cannot split a {size}-pixel image into {classes} bands")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset {
        labels: Some(Vec::with_capacity(n)),
        ..Dataset::default()
    };
    for i in 0..n {
        let vertical = rng.gen_bool(0.5);
        let mut order: Vec<usize> = (0..classes).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let jitter = rng.gen_range(-SYNTH_HUE_JITTER..=SYNTH_HUE_JITTER);
        let colors: Vec<[f64; 3]> = (0..classes)
            .map(|c| hsv_to_rgb(c as f64 / classes as f64 + jitter, 0.8, 0.85))
            .collect();
        let mut labels = Vec::with_capacity(size * size);
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let t = if vertical { x } else { y };
                let class = order[t * classes / size];
                labels.push(class as u8);
                for ch in 0..3 {
                    let v = (colors[class][ch] + SYNTH_NOISE * gaussian(&mut rng)).clamp(0.0, 1.0);
                    data.push((v * 255.0).round() / 255.0);
                }
            }
        }
        ds.names.push(format!("synth_{i:04}"));
        ds.images.push(Tensor::new(&[size, size, 3], data)?);
        ds.labels.as_mut().unwrap().push(labels);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 16, 3, 7).unwrap();
        let b = generate_synthetic(3, 16, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(3, 16, 3, 8).unwrap());
    }

    #[test]
    fn single_class_labels_are_constant() {
        let d = generate_synthetic(2, 8, 1, 0).unwrap();
        assert!(d.labels.unwrap().iter().flatten().all(|&l| l == 0));
    }

    #[test]
    fn band_count_validated() {
        assert!(generate_synthetic(1, 4, 5, 0).is_err());
        assert!(generate_synthetic(1, 4, 0, 0).is_err());
    }

    #[test]
    fn boundaries_follow_label_changes() {
        let img = Tensor::zeros(&[1, 3, 3]);
        let b = boundary_image(&img, &[0, 1, 1]).unwrap();
        assert_eq!(b.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(b.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn labels_reject_ignore_id() {
        assert!(labels_to_u8(&[0, 255]).is_err());
        assert_eq!(labels_to_u8(&[0, 2]).unwrap(), vec![0, 2]);
    }
}
