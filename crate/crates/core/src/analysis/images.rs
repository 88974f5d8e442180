use std::path::Path;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::ConvDraw;
use crate::nn::Real;

/// Gray level of the separator lines in emitted grids.
pub const SEPARATOR: u8 = 128;

/// Mean squared error per image.
pub fn mse<R: Real>(a: &ImageBatch<R>, b: &ImageBatch<R>) -> Result<Vec<f64>> {
    if a.x.shape() != b.x.shape() {
        return Err(Error::shape("mse", a.x.shape(), b.x.shape()));
    }
    let n = a.x.shape().item() as f64;
    Ok((0..a.len())
        .map(|i| {
            a.x.item(i)
                .iter()
                .zip(b.x.item(i))
                .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
                .sum::<f64>()
                / n
        })
        .collect())
}

/// `10 log10(1 / MSE)` per image; identical images give `f64::INFINITY`.
pub fn psnr<R: Real>(a: &ImageBatch<R>, b: &ImageBatch<R>) -> Result<Vec<f64>> {
    Ok(mse(a, b)?
        .into_iter()
        .map(|m| {
            if m == 0.0 {
                f64::INFINITY
            } else {
                -10.0 * m.log10()
            }
        })
        .collect())
}

/// An RGB image as interleaved bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Mosaic of image rows with 1-pixel separators around every cell.
/// Grayscale images are replicated to three channels.
pub fn grid<R: Real>(rows: &[ImageBatch<R>]) -> Result<Rgb> {
    let first = rows
        .iter()
        .find(|r| !r.is_empty())
        .ok_or_else(|| Error::Contract("grid needs at least one image".into()))?;
    let s = first.x.shape();
    if s.c != 1 && s.c != 3 {
        return Err(Error::Contract(format!(
            "grid images need 1 or 3 channels, got {}",
            s.c
        )));
    }
    for r in rows {
        if !r.is_empty() && r.x.shape().with_n(1) != s.with_n(1) {
            return Err(Error::shape("grid", s.with_n(1), r.x.shape().with_n(1)));
        }
    }
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let width = cols * s.w + cols + 1;
    let height = rows.len() * s.h + rows.len() + 1;
    let mut data = vec![SEPARATOR; width * height * 3];
    for (ri, row) in rows.iter().enumerate() {
        let bytes = row.to_u8();
        for ci in 0..row.len() {
            let img = &bytes[ci * s.item()..(ci + 1) * s.item()];
            let (oy, ox) = (1 + ri * (s.h + 1), 1 + ci * (s.w + 1));
            for y in 0..s.h {
                for x in 0..s.w {
                    for ch in 0..3 {
                        let src = if s.c == 1 { 0 } else { ch };
                        data[((oy + y) * width + ox + x) * 3 + ch] =
                            img[src * s.h * s.w + y * s.w + x];
                    }
                }
            }
        }
    }
    Ok(Rgb {
        width,
        height,
        data,
    })
}

pub fn ppm_bytes(img: &Rgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Strict binary PPM reader: `P6`, single whitespace separators, no
/// comments, maxval 255, exact payload length.
pub fn parse_ppm(buf: &[u8]) -> Result<Rgb> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos == start || *pos >= buf.len() {
            return Err(bad("truncated header"));
        }
        let t = std::str::from_utf8(&buf[start..*pos])
            .map_err(|_| bad("non-ascii header"))?
            .to_string();
        *pos += 1;
        Ok(t)
    };
    if token(&mut pos)? != "P6" {
        return Err(bad("magic is not P6"));
    }
    let num = |t: String| t.parse::<usize>().map_err(|_| bad("bad number"));
    let width = num(token(&mut pos)?)?;
    let height = num(token(&mut pos)?)?;
    if num(token(&mut pos)?)? != 255 {
        return Err(bad("maxval must be 255"));
    }
    let data = &buf[pos..];
    if data.len() != width * height * 3 {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            width * height * 3,
            data.len()
        )));
    }
    Ok(Rgb {
        width,
        height,
        data: data.to_vec(),
    })
}

pub fn write_ppm(img: &Rgb, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ppm_bytes(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Rgb> {
    let path = path.as_ref();
    parse_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Converts a PPM to a one-image batch with `channels` (1 averages RGB).
pub fn rgb_to_batch<R: Real>(img: &Rgb, channels: usize, step: f64) -> Result<ImageBatch<R>> {
    let plane = img.width * img.height;
    let bytes: Vec<u8> = match channels {
        3 => (0..3)
            .flat_map(|c| (0..plane).map(move |p| (c, p)))
            .map(|(c, p)| img.data[p * 3 + c])
            .collect(),
        1 => (0..plane)
            .map(|p| {
                ((img.data[p * 3] as u32
                    + img.data[p * 3 + 1] as u32
                    + img.data[p * 3 + 2] as u32
                    + 1)
                    / 3) as u8
            })
            .collect(),
        c => {
            return Err(Error::Contract(format!(
                "cannot convert a PPM to {c} channels"
            )))
        }
    };
    ImageBatch::from_u8(&bytes, 1, channels, img.height, img.width, step)
}

pub fn emit_grid<R: Real>(rows: &[ImageBatch<R>], path: impl AsRef<Path>) -> Result<()> {
    write_ppm(&grid(rows)?, path)
}

/// The 2, 4, 6, 8, 10, 14, 18, 25, 32 schedule rescaled to `t` steps.
pub fn default_t_list(t: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [2, 4, 6, 8, 10, 14, 18, 25, 32]
        .iter()
        .map(|&k| ((k as f64 * t as f64 / 32.0).round() as usize).clamp(1, t))
        .collect();
    out.dedup();
    out
}

/// One row per `t_keep` in `t_list` plus the originals at the bottom.
pub fn progression_rows<R: Real>(
    model: &ConvDraw<R>,
    images: &ImageBatch<R>,
    t_list: &[usize],
    lambda: f64,
    seed: u64,
) -> Result<Vec<ImageBatch<R>>> {
    let mut rows = Vec::with_capacity(t_list.len() + 1);
    for &t in t_list {
        rows.push(model.reconstruct_partial(images, t, lambda, seed)?);
    }
    let orig = images.x.map(|v| v.max(R::zero()).min(R::one()));
    rows.push(ImageBatch::new(orig, images.step));
    Ok(rows)
}

pub fn progression_sheet<R: Real>(
    model: &ConvDraw<R>,
    images: &ImageBatch<R>,
    t_list: &[usize],
    lambda: f64,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    emit_grid(
        &progression_rows(model, images, t_list, lambda, seed)?,
        path,
    )
}

/// Lays a flat batch out as rows of `cols` images.
pub fn chunk_rows<R: Real>(batch: &ImageBatch<R>, cols: usize) -> Vec<ImageBatch<R>> {
    let n = batch.len();
    (0..n)
        .step_by(cols.max(1))
        .map(|i| ImageBatch::new(batch.x.batch_slice(i, cols.min(n - i)), batch.step))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Shape4, Tensor4};

    fn img(n: usize, c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> ImageBatch<f64> {
        let s = Shape4::new(n, c, h, w);
        ImageBatch::new(
            Tensor4::from_vec(s, (0..s.len()).map(f).collect()),
            1.0 / 256.0,
        )
    }

    #[test]
    fn psnr_cases() {
        let a = img(1, 1, 2, 2, |_| 0.5);
        assert_eq!(psnr(&a, &a).unwrap()[0], f64::INFINITY);
        let b = img(1, 1, 2, 2, |_| 0.6);
        assert!((psnr(&a, &b).unwrap()[0] - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &img(1, 1, 2, 3, |_| 0.0)).is_err());
    }

    #[test]
    fn grid_layout_and_round_trip() {
        let rows = vec![
            img(3, 1, 8, 8, |i| (i % 7) as f64 / 7.0),
            img(3, 1, 8, 8, |i| (i % 5) as f64 / 5.0),
        ];
        let g = grid(&rows).unwrap();
        assert_eq!((g.height, g.width), (19, 28));
        let bytes = ppm_bytes(&g);
        assert!(bytes.starts_with(b"P6\n28 19\n255\n"));
        assert_eq!(parse_ppm(&bytes).unwrap(), g);
        let one = grid(&[img(1, 1, 2, 2, |i| i as f64 / 3.0)]).unwrap();
        assert_eq!((one.height, one.width), (4, 4));
        // pixel (0,1) of the single image lands at (1,2) of the mosaic
        assert_eq!(one.data[(4 + 2) * 3], 85);
        assert_eq!(one.data[0], SEPARATOR);
    }

    #[test]
    fn strict_reader_rejects_variants() {
        assert!(parse_ppm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(parse_ppm(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
        assert!(parse_ppm(b"P6\n1 1\n255\n\x00\x00").is_err());
        assert!(parse_ppm(b"P6\n#c\n1 1\n255\n\x00\x00\x00").is_err());
    }

    #[test]
    fn ppm_to_batch_channels() {
        let g = grid(&[img(1, 3, 2, 2, |i| i as f64 / 11.0)]).unwrap();
        let b = rgb_to_batch::<f64>(&g, 3, 1.0).unwrap();
        assert_eq!(b.x.shape(), Shape4::new(1, 3, 4, 4));
        assert!(rgb_to_batch::<f64>(&g, 2, 1.0).is_err());
    }

    #[test]
    fn t_list_scaling() {
        assert_eq!(default_t_list(32), vec![2, 4, 6, 8, 10, 14, 18, 25, 32]);
        assert_eq!(default_t_list(8), vec![1, 2, 3, 4, 5, 6, 8]);
        assert_eq!(*default_t_list(16).last().unwrap(), 16);
    }
}
