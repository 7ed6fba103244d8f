//! Multi-modal class activation maps.
//!
//! For class `c` and branch `b`, `CAM(x, y) = (1/m^2) * sum_i w^c_{b,i} F_{b,i}(x, y)`.
//! The `1/m^2` factor mirrors the averaging in global pooling, which makes
//! the class score decompose exactly:
//! `s^c = sum_xy CAM_fundus + sum_xy CAM_oct`.

use std::path::{Path, PathBuf};

use crate::data::image::{quantize, write_pgm, write_ppm, Image};
use crate::error::{Error, Result};
use crate::net::{Stream, TwoStreamModel};
use crate::tensor::{Real, Tape, Tensor};

/// One class activation map for one branch of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// `[m, m]`
    pub values: Tensor<f64>,
    pub stream: Stream,
    pub class: usize,
    pub source: Option<String>,
}

impl CamMap {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    /// Sum over all positions: this branch's contribution to the class score.
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// `(row, col)` of the largest value; ties go to the first in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        argmax2d(&self.values)
    }
}

pub(crate) fn argmax2d(t: &Tensor<f64>) -> (usize, usize) {
    let w = t.shape()[1];
    let (mut best, mut idx) = (f64::NEG_INFINITY, 0);
    for (i, &v) in t.data().iter().enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    (idx / w, idx % w)
}

/// CAM from final feature maps `[C, m, m]` and one class's weights for that branch.
pub fn compute_cam<T: Real>(
    maps: &Tensor<T>,
    class_weights: &[T],
    stream: Stream,
    class: usize,
) -> Result<CamMap> {
    let shape = maps.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::dim(format!(
            "CAM expects square maps [C, m, m], got {shape:?}"
        )));
    }
    if shape[0] != class_weights.len() {
        return Err(Error::dim(format!(
            "{} feature maps but {} class weights",
            shape[0],
            class_weights.len()
        )));
    }
    let m = shape[1];
    let plane = m * m;
    let inv = 1.0 / plane as f64;
    let mut values = vec![0.0f64; plane];
    for (map, &w) in maps.data().chunks_exact(plane).zip(class_weights) {
        let w = w.as_f64() * inv;
        values
            .iter_mut()
            .zip(map)
            .for_each(|(v, &f)| *v += w * f.as_f64());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite CAM value".into()));
    }
    Ok(CamMap {
        values: Tensor::new(&[m, m], values)?,
        stream,
        class,
        source: None,
    })
}

/// Class score and per-branch CAMs for a single sample.
#[derive(Clone, Debug)]
pub struct CamSet {
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub class: usize,
    pub fundus: Option<CamMap>,
    pub oct: Option<CamMap>,
}

impl CamSet {
    /// `|s^c - (sum CAM_fundus + sum CAM_oct)|`.
    pub fn residual(&self) -> f64 {
        let parts: f64 = self.fundus.iter().chain(&self.oct).map(CamMap::total).sum();
        (self.scores[self.class] - parts).abs()
    }
}

/// Runs the model in eval mode on one sample (`[in_channels, S, S]` per
/// present branch) and builds CAMs for `class`, or for the predicted class
/// when `class` is `None`.
pub fn sample_cams<T: Real>(
    model: &TwoStreamModel<T>,
    fundus: Option<&Tensor<T>>,
    oct: Option<&Tensor<T>>,
    class: Option<usize>,
) -> Result<CamSet> {
    let mut tape = Tape::new();
    let batch = |t: &Tensor<T>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    };
    let f = fundus.map(batch).transpose()?.map(|t| tape.constant(t));
    let o = oct.map(batch).transpose()?.map(|t| tape.constant(t));
    let out = model.forward_eval(&mut tape, f, o)?;
    let scores: Vec<f64> = tape
        .value(out.scores)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let predicted = crate::net::argmax_rows(tape.value(out.scores))[0];
    let class = class.unwrap_or(predicted);
    if class >= scores.len() {
        return Err(Error::config(format!("class {class} out of range")));
    }
    let cam_for =
        |branch: Option<crate::net::BranchOutput>, stream: Stream| -> Result<Option<CamMap>> {
            let Some(b) = branch else { return Ok(None) };
            let maps = tape.value(b.maps).select(0)?;
            let w = model.class_weights(stream, class)?;
            compute_cam(&maps, &w, stream, class).map(Some)
        };
    let fundus = cam_for(out.fundus, Stream::Fundus)?;
    let oct = cam_for(out.oct, Stream::Oct)?;
    Ok(CamSet {
        scores,
        predicted,
        class,
        fundus,
        oct,
    })
}

/// Bilinear upsampling with half-pixel centres (corners not aligned).
pub fn upsample(cam: &CamMap, target: usize) -> Result<Tensor<f64>> {
    upsample_grid(&cam.values, target)
}

pub(crate) fn upsample_grid(values: &Tensor<f64>, target: usize) -> Result<Tensor<f64>> {
    let m = values.shape()[0];
    if target < m {
        return Err(Error::config(format!(
            "cannot upsample a {m}x{m} map to {target}"
        )));
    }
    let scale = m as f64 / target as f64;
    let coord = |d: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (m - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(m - 1);
        (lo, hi, s - lo as f64)
    };
    let src = values.data();
    let mut out = Vec::with_capacity(target * target);
    for y in 0..target {
        let (y0, y1, fy) = coord(y);
        for x in 0..target {
            let (x0, x1, fx) = coord(x);
            let top = src[y0 * m + x0] * (1.0 - fx) + src[y0 * m + x1] * fx;
            let bottom = src[y1 * m + x0] * (1.0 - fx) + src[y1 * m + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(&[target, target], out)
}

/// Min-max normalizes to bytes; a constant map renders as 128.
pub fn heatmap_bytes(map: &Tensor<f64>) -> Result<Vec<u8>> {
    if !map.is_finite() {
        return Err(Error::Numeric("cannot render a non-finite map".into()));
    }
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return Ok(vec![128; map.numel()]);
    }
    Ok(map
        .data()
        .iter()
        .map(|&v| quantize(((v - lo) / (hi - lo)) as f32))
        .collect())
}

/// Black-red-yellow-white ramp.
pub fn hot_color(h: u8) -> [u8; 3] {
    let v = h as u32 * 3;
    [
        v.min(255) as u8,
        v.saturating_sub(255).min(255) as u8,
        v.saturating_sub(510).min(255) as u8,
    ]
}

/// `0.5 * gray(base) + 0.5 * hot(heat)` per channel, interleaved RGB.
pub fn overlay_bytes(heat: &[u8], base: &Image) -> Result<Vec<u8>> {
    if heat.len() != base.height * base.width {
        return Err(Error::dim(format!(
            "heatmap has {} pixels, base image {}x{}",
            heat.len(),
            base.height,
            base.width
        )));
    }
    let gray = base.to_gray();
    let mut out = Vec::with_capacity(3 * heat.len());
    for (&h, &g) in heat.iter().zip(&gray.data) {
        let g = quantize(g) as u32;
        for c in hot_color(h) {
            out.push((g + c as u32).div_ceil(2) as u8);
        }
    }
    Ok(out)
}

/// Paths written by [`render`].
#[derive(Clone, Debug)]
pub struct Rendered {
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
}

/// Upsamples `cam` to the base image size, then writes
/// `<sample_id>.<modality>.<class>.cam.pgm` and the matching `.overlay.ppm`.
pub fn render(
    cam: &CamMap,
    base: &Image,
    sample_id: &str,
    class_name: &str,
    out_dir: &Path,
) -> Result<Rendered> {
    if base.height != base.width {
        return Err(Error::dim("CAM overlays need a square base image"));
    }
    let up = upsample(cam, base.width)?;
    let heat = heatmap_bytes(&up)?;
    let overlay = overlay_bytes(&heat, base)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = format!("{sample_id}.{}.{class_name}", cam.stream.as_str());
    let heatmap = out_dir.join(format!("{stem}.cam.pgm"));
    let overlay_path = out_dir.join(format!("{stem}.overlay.ppm"));
    write_pgm(&heatmap, base.width, base.height, &heat)?;
    write_ppm(&overlay_path, base.width, base.height, &overlay)?;
    Ok(Rendered {
        heatmap,
        overlay: overlay_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(values: Vec<f64>, m: usize) -> CamMap {
        CamMap {
            values: Tensor::new(&[m, m], values).unwrap(),
            stream: Stream::Fundus,
            class: 0,
            source: None,
        }
    }

    #[test]
    fn single_channel_arithmetic() {
        let maps = Tensor::<f64>::full(&[1, 2, 2], 3.0);
        let c = compute_cam(&maps, &[2.0], Stream::Oct, 1).unwrap();
        assert!(c.values.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn unit_map_is_the_partial_score() {
        let maps = Tensor::<f64>::new(&[3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let w = [0.3, 0.7, -1.0];
        let c = compute_cam(&maps, &w, Stream::Fundus, 0).unwrap();
        let partial: f64 = w.iter().zip(maps.data()).map(|(a, b)| a * b).sum();
        assert!((c.total() - partial).abs() < 1e-12);
    }

    #[test]
    fn weight_length_mismatch() {
        let maps = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(matches!(
            compute_cam(&maps, &[1.0], Stream::Fundus, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn upsample_constant_and_identity() {
        let c = cam(vec![2.5; 9], 3);
        assert!(upsample(&c, 12)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 2.5).abs() < 1e-12));
        let c = cam((0..9).map(f64::from).collect(), 3);
        assert_eq!(upsample(&c, 3).unwrap().data(), c.values.data());
        assert!(upsample(&c, 2).is_err());
    }

    #[test]
    fn heatmap_extremes_and_constant() {
        let t = Tensor::new(&[2, 2], vec![-1.0, 0.0, 0.5, 3.0]).unwrap();
        let b = heatmap_bytes(&t).unwrap();
        assert_eq!(b[0], 0);
        assert_eq!(b[3], 255);
        assert_eq!(
            heatmap_bytes(&Tensor::full(&[3, 3], 7.0)).unwrap(),
            vec![128; 9]
        );
    }

    #[test]
    fn overlay_hand_case() {
        // heat bytes (0, 85, 170, 255) over gray base (0, 1, 0.5, 0.2).
        let base = Image::new(1, 2, 2, vec![0.0, 1.0, 0.5, 0.2]).unwrap();
        let out = overlay_bytes(&[0, 85, 170, 255], &base).unwrap();
        // gray bytes: 0, 255, 128, 51; hot(85) = (255,0,0), hot(170) = (255,255,0).
        assert_eq!(&out[0..3], &[0, 0, 0]);
        assert_eq!(&out[3..6], &[255, 128, 128]);
        assert_eq!(&out[6..9], &[192, 192, 64]);
        assert_eq!(&out[9..12], &[153, 153, 153]);
    }
}
