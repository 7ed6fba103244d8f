//! Training-time random augmentation.

use rand::Rng;

use super::image::Image;
use super::preprocess::reflect;

/// Reflect padding used before the random crop.
pub const CROP_PAD: usize = 8;
pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const JITTER: (f32, f32) = (0.8, 1.2);

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    /// Crop offsets into the padded image, in `0..=2 * CROP_PAD`.
    pub crop_x: usize,
    pub crop_y: usize,
    pub flip: bool,
    pub brightness: f32,
    pub saturation: f32,
    pub contrast: f32,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            angle_deg: 0.0,
            crop_x: CROP_PAD,
            crop_y: CROP_PAD,
            flip: false,
            brightness: 1.0,
            saturation: 1.0,
            contrast: 1.0,
        }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            crop_x: rng.random_range(0..=2 * CROP_PAD),
            crop_y: rng.random_range(0..=2 * CROP_PAD),
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(JITTER.0..=JITTER.1),
            saturation: rng.random_range(JITTER.0..=JITTER.1),
            contrast: rng.random_range(JITTER.0..=JITTER.1),
        }
    }
}

/// Rotates about the image centre with bilinear sampling and reflected borders.
pub fn rotate(img: &Image, angle_deg: f64) -> Image {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = img.clone();
    for ch in 0..img.channels {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                // Inverse map from output to source coordinates.
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let px = |xx: isize, yy: isize| src[reflect(yy, h) * w + reflect(xx, w)];
                let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
                let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
                dst[y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Reflect-pads by [`CROP_PAD`] and crops back to the original size at `(ox, oy)`.
pub fn pad_crop(img: &Image, ox: usize, oy: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for ch in 0..img.channels {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            let sy = reflect(y as isize + oy as isize - CROP_PAD as isize, h);
            for x in 0..w {
                let sx = reflect(x as isize + ox as isize - CROP_PAD as isize, w);
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for row in out.data.chunks_exact_mut(img.width) {
        row.reverse();
    }
    out
}

/// Brightness, saturation and contrast jitter in that order, then clamp to `[0, 1]`.
pub fn color_jitter(img: &Image, brightness: f32, saturation: f32, contrast: f32) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v *= brightness);
    if img.channels > 1 && saturation != 1.0 {
        let gray = out.to_gray();
        for ch in 0..out.channels {
            for (v, &g) in out.plane_mut(ch).iter_mut().zip(&gray.data) {
                *v = g + saturation * (*v - g);
            }
        }
    }
    if contrast != 1.0 {
        let gray = out.to_gray();
        let mean = gray.data.iter().map(|&v| v as f64).sum::<f64>() / gray.data.len() as f64;
        let mean = mean as f32;
        out.data
            .iter_mut()
            .for_each(|v| *v = mean + contrast * (*v - mean));
    }
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

pub fn augment_with(img: &Image, p: &AugmentParams) -> Image {
    let mut out = rotate(img, p.angle_deg);
    out = pad_crop(&out, p.crop_x, p.crop_y);
    if p.flip {
        out = hflip(&out);
    }
    color_jitter(&out, p.brightness, p.saturation, p.contrast)
}

pub fn augment<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    augment_with(img, &AugmentParams::draw(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::new(3, 5, 6, (0..90).map(|i| i as f32 / 89.0).collect()).unwrap()
    }

    #[test]
    fn identity_params_leave_image_unchanged() {
        let img = ramp();
        assert_eq!(augment_with(&img, &AugmentParams::identity()), img);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img).get(0, 0, 0), img.get(0, 0, 5));
    }

    #[test]
    fn crop_shift_moves_content() {
        let img = ramp();
        let shifted = pad_crop(&img, CROP_PAD + 1, CROP_PAD);
        assert_eq!(shifted.get(1, 2, 0), img.get(1, 2, 1));
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = crate::rng::stream(3, "test", 0);
        for _ in 0..200 {
            let p = AugmentParams::draw(&mut rng);
            assert!(p.angle_deg.abs() <= MAX_ROTATION_DEG);
            assert!(p.crop_x <= 2 * CROP_PAD && p.crop_y <= 2 * CROP_PAD);
            for f in [p.brightness, p.saturation, p.contrast] {
                assert!((JITTER.0..=JITTER.1).contains(&f));
            }
            let out = augment_with(&ramp(), &p);
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
