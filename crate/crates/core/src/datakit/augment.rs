use rand::Rng;
use serde::{Deserialize, Serialize};

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count does not match {height}x{width}");
        Image { height, width, pixels }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Maximum translation as a fraction of each dimension.
    pub max_shift_fraction: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, max_shift_fraction: 0.1, flip_probability: 0.5 }
    }
}

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentParams {
    pub dx: i32,
    pub dy: i32,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams::default()
    }

    /// Integer offsets uniform in ±⌊fraction·dim⌋ and a Bernoulli flip.
    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        if !cfg.enabled {
            return AugmentParams::identity();
        }
        let max_dy = (cfg.max_shift_fraction * height as f64).floor() as i32;
        let max_dx = (cfg.max_shift_fraction * width as f64).floor() as i32;
        let dy = if max_dy > 0 { rng.random_range(-max_dy..=max_dy) } else { 0 };
        let dx = if max_dx > 0 { rng.random_range(-max_dx..=max_dx) } else { 0 };
        let flip = cfg.flip_probability > 0.0 && rng.random_bool(cfg.flip_probability.min(1.0));
        AugmentParams { dx, dy, flip }
    }
}

/// Translates by (dx, dy) with edge padding, then optionally mirrors horizontally.
pub fn augment_image(img: &Image, p: &AugmentParams) -> Image {
    let (h, w) = (img.height as i64, img.width as i64);
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        let sy = (y - p.dy as i64).clamp(0, h - 1) as usize;
        for x in 0..w {
            let xf = if p.flip { w - 1 - x } else { x };
            let sx = (xf - p.dx as i64).clamp(0, w - 1) as usize;
            out.push(img.pixels[sy * img.width + sx]);
        }
    }
    Image::new(img.height, img.width, out)
}

/// Draws parameters and applies them to one image.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let p = AugmentParams::draw(cfg, img.height, img.width, rng);
    augment_image(img, &p)
}

/// Draws one parameter set and applies it to every frame of a sequence.
pub fn augment_sequence<R: Rng + ?Sized>(
    frames: &[Image],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Vec<Image>, AugmentParams) {
    let Some(first) = frames.first() else {
        return (Vec::new(), AugmentParams::identity());
    };
    let p = AugmentParams::draw(cfg, first.height, first.width, rng);
    (frames.iter().map(|f| augment_image(f, &p)).collect(), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| i as f32 * 0.5 + (i % 3) as f32).collect())
    }

    #[test]
    fn identity_draw_is_noop() {
        let img = ramp(8, 10);
        assert_eq!(augment_image(&img, &AugmentParams::identity()), img);
        let cfg = AugmentConfig { max_shift_fraction: 0.0, flip_probability: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &cfg, &mut rng), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(6, 7);
        let p = AugmentParams { flip: true, ..Default::default() };
        let once = augment_image(&img, &p);
        assert_ne!(once, img);
        assert_eq!(once.at(2, 0), img.at(2, 6));
        assert_eq!(augment_image(&once, &p), img);
    }

    #[test]
    fn translation_pads_with_edges() {
        let img = ramp(4, 5);
        let out = augment_image(&img, &AugmentParams { dx: 2, dy: -1, flip: false });
        assert_eq!(out.at(0, 0), img.at(1, 0));
        assert_eq!(out.at(0, 1), img.at(1, 0));
        assert_eq!(out.at(0, 4), img.at(1, 2));
        assert_eq!(out.at(3, 4), img.at(3, 2));
    }

    #[test]
    fn draws_stay_within_ten_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AugmentConfig::default();
        let mut flips = 0;
        for _ in 0..2000 {
            let p = AugmentParams::draw(&cfg, 32, 50, &mut rng);
            assert!(p.dy.abs() <= 3 && p.dx.abs() <= 5);
            flips += p.flip as usize;
        }
        assert!((800..1200).contains(&flips));
    }

    #[test]
    fn sequence_frames_share_parameters() {
        let frames: Vec<Image> = (0..32)
            .map(|k| Image::new(16, 16, (0..256).map(|i| ((i * 7 + k * 13) % 29) as f32).collect()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = AugmentConfig { flip_probability: 1.0, ..Default::default() };
        let (out, p) = augment_sequence(&frames, &cfg, &mut rng);
        assert!(p.flip);
        for (f, o) in frames.iter().zip(&out) {
            assert_eq!(&augment_image(f, &p), o);
        }
    }
}
