//! Deterministic per-modality preprocessing.

use super::image::Image;
use crate::error::{Error, Result};

pub const CLAHE_BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Clip limit as a multiple of the mean bin count; `<= 0` disables clipping.
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 2.0,
        }
    }
}

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(CLAHE_BINS - 1)
}

/// Equalization table of one tile, with contrast limiting.
fn tile_lut(
    plane: &[f32],
    width: usize,
    xs: (usize, usize),
    ys: (usize, usize),
    clip_limit: f64,
) -> [f32; CLAHE_BINS] {
    let mut hist = [0usize; CLAHE_BINS];
    for y in ys.0..ys.1 {
        for &v in &plane[y * width + xs.0..y * width + xs.1] {
            hist[bin_of(v)] += 1;
        }
    }
    let area = (xs.1 - xs.0) * (ys.1 - ys.0);
    if clip_limit > 0.0 {
        let limit = ((clip_limit * area as f64 / CLAHE_BINS as f64) as usize).max(1);
        let mut excess = 0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let batch = excess / CLAHE_BINS;
        let residual = excess - batch * CLAHE_BINS;
        hist.iter_mut().for_each(|h| *h += batch);
        if let Some(step) = CLAHE_BINS.checked_div(residual) {
            for h in hist.iter_mut().step_by(step.max(1)).take(residual) {
                *h += 1;
            }
        }
    }
    let scale = (CLAHE_BINS - 1) as f64 / area as f64;
    let mut lut = [0f32; CLAHE_BINS];
    let mut sum = 0usize;
    for (l, &h) in lut.iter_mut().zip(&hist) {
        sum += h;
        *l = ((sum as f64 * scale).round().min(255.0) / 255.0) as f32;
    }
    lut
}

fn tile_bounds(n: usize, tiles: usize, i: usize) -> (usize, usize) {
    (i * n / tiles, (i + 1) * n / tiles)
}

/// Contrast-limited adaptive histogram equalization, applied per channel.
///
/// Each tile gets a clipped-histogram equalization table; pixels blend the
/// tables of the four nearest tile centres bilinearly.
pub fn clahe(img: &Image, params: &ClaheParams) -> Result<Image> {
    if params.tiles_x == 0 || params.tiles_y == 0 {
        return Err(Error::config("CLAHE needs at least one tile per axis"));
    }
    let (h, w) = (img.height, img.width);
    let tx = params.tiles_x.min(w);
    let ty = params.tiles_y.min(h);
    if (tx, ty) != (params.tiles_x, params.tiles_y) {
        log::warn!("{w}x{h} image is smaller than the CLAHE grid, using {tx}x{ty} tiles");
    }
    let centre = |n: usize, tiles: usize, i: usize| {
        let (a, b) = tile_bounds(n, tiles, i);
        (a + b) as f64 / 2.0 - 0.5
    };
    let cx: Vec<f64> = (0..tx).map(|i| centre(w, tx, i)).collect();
    let cy: Vec<f64> = (0..ty).map(|i| centre(h, ty, i)).collect();
    // Neighbouring tile indices and blend weight along one axis.
    let locate = |centres: &[f64], p: usize| -> (usize, usize, f64) {
        let p = p as f64;
        let last = centres.len() - 1;
        if p <= centres[0] {
            return (0, 0, 0.0);
        }
        if p >= centres[last] {
            return (last, last, 0.0);
        }
        let i = centres
            .iter()
            .rposition(|&c| c <= p)
            .expect("p above first centre");
        let t = (p - centres[i]) / (centres[i + 1] - centres[i]);
        (i, i + 1, t)
    };
    let mut out = img.clone();
    for c in 0..img.channels {
        let plane = img.plane(c);
        let luts: Vec<[f32; CLAHE_BINS]> = (0..ty)
            .flat_map(|j| (0..tx).map(move |i| (i, j)))
            .map(|(i, j)| {
                tile_lut(
                    plane,
                    w,
                    tile_bounds(w, tx, i),
                    tile_bounds(h, ty, j),
                    params.clip_limit,
                )
            })
            .collect();
        let dst = out.plane_mut(c);
        for y in 0..h {
            let (j0, j1, v) = locate(&cy, y);
            for x in 0..w {
                let (i0, i1, u) = locate(&cx, x);
                let b = bin_of(plane[y * w + x]);
                let at = |i: usize, j: usize| luts[j * tx + i][b] as f64;
                let top = at(i0, j0) * (1.0 - u) + at(i1, j0) * u;
                let bottom = at(i0, j1) * (1.0 - u) + at(i1, j1) * u;
                dst[y * w + x] = (top * (1.0 - v) + bottom * v) as f32;
            }
        }
    }
    Ok(out)
}

/// Reflect-101 index into `0..n`.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Median filter with a `k x k` window and reflected borders.
pub fn median_filter(img: &Image, k: usize) -> Result<Image> {
    if k.is_multiple_of(2) {
        return Err(Error::config(format!("median window must be odd, got {k}")));
    }
    let r = (k / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    let mut window = Vec::with_capacity(k * k);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        window.push(src[yy * w + reflect(x as isize + dx, w)]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                dst[y * w + x] = *m;
            }
        }
    }
    Ok(out)
}

/// Replicates a single-channel image into three channels.
pub fn gray_to_rgb(img: &Image) -> Result<Image> {
    if img.channels != 1 {
        return Err(Error::dim(format!(
            "expected 1 channel, got {}",
            img.channels
        )));
    }
    let mut data = Vec::with_capacity(3 * img.data.len());
    for _ in 0..3 {
        data.extend_from_slice(&img.data);
    }
    Image::new(3, img.height, img.width, data)
}

/// Maps `[0, 1]` to `[-1, 1]`. Debug builds reject out-of-range input.
pub fn normalize(img: &Image) -> Result<Image> {
    if cfg!(debug_assertions) {
        if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("pixel value {v} outside [0, 1]")));
        }
    }
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = (*v - 0.5) / 0.5);
    Ok(out)
}

/// Fundus: per-channel CLAHE. OCT: 3x3 median filter, then gray to RGB.
pub fn preprocess_fundus(img: &Image) -> Result<Image> {
    let rgb = match img.channels {
        1 => gray_to_rgb(img)?,
        3 => img.clone(),
        c => return Err(Error::dim(format!("fundus image with {c} channels"))),
    };
    clahe(&rgb, &ClaheParams::default())
}

pub fn preprocess_oct(img: &Image) -> Result<Image> {
    let gray = match img.channels {
        1 => img.clone(),
        3 => img.to_gray(),
        c => return Err(Error::dim(format!("OCT image with {c} channels"))),
    };
    gray_to_rgb(&median_filter(&gray, 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_101() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-2, 1), 0);
    }

    #[test]
    fn median_removes_salt() {
        let mut img = Image::filled(1, 5, 5, 0.2);
        img.data[12] = 1.0;
        let out = median_filter(&img, 3).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.2));
    }

    #[test]
    fn median_rejects_even_window() {
        assert!(median_filter(&Image::filled(1, 4, 4, 0.0), 2).is_err());
    }

    #[test]
    fn median_keeps_constant_image() {
        let img = Image::filled(3, 6, 7, 0.4);
        assert_eq!(median_filter(&img, 5).unwrap(), img);
    }

    #[test]
    fn gray_to_rgb_replicates() {
        let img = Image::new(1, 1, 2, vec![0.1, 0.9]).unwrap();
        assert_eq!(
            gray_to_rgb(&img).unwrap().data,
            vec![0.1, 0.9, 0.1, 0.9, 0.1, 0.9]
        );
        assert!(gray_to_rgb(&gray_to_rgb(&img).unwrap()).is_err());
    }

    #[test]
    fn normalize_maps_unit_interval() {
        let img = Image::new(1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(normalize(&img).unwrap().data, vec![-1.0, 0.0, 1.0]);
        if cfg!(debug_assertions) {
            assert!(normalize(&Image::filled(1, 1, 1, 1.5)).is_err());
        }
    }

    #[test]
    fn clahe_output_stays_in_range() {
        let data: Vec<f32> = (0..64 * 64)
            .map(|i| ((i * 37) % 256) as f32 / 255.0)
            .collect();
        let img = Image::new(1, 64, 64, data).unwrap();
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn clahe_tiny_image_reduces_grid() {
        let img = Image::new(1, 4, 4, (0..16).map(|i| i as f32 / 15.0).collect()).unwrap();
        assert!(clahe(&img, &ClaheParams::default()).is_ok());
    }
}
