//! Procedural fine-grained benchmark: one class-textured object per image on
//! a tinted, cluttered background whose tint is correlated with the label on
//! the training split only.

use super::{Dataset, LabeledImage, Split};
use crate::attention::CropBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    Plain,
    Textured,
    #[default]
    Cluttered,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_side: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Object side as a fraction of the image side, `[min, max]`.
    pub object_side_range: [f64; 2],
    pub background_mode: BackgroundMode,
    /// Probability that a training background carries the label's tint.
    pub train_bias: f64,
    pub test_bias: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            image_side: 48,
            train_per_class: 200,
            test_per_class: 100,
            object_side_range: [0.2, 0.4],
            background_mode: BackgroundMode::Cluttered,
            train_bias: 0.3,
            test_bias: 0.0,
            distractors: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.image_side == 0 || self.image_side % 4 != 0 {
            return bad(format!("image side {} must be a positive multiple of 4", self.image_side));
        }
        let [lo, hi] = self.object_side_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("object side range [{lo}, {hi}] must satisfy 0 < min <= max"));
        }
        if hi > 1.0 {
            return bad(format!("object side fraction {hi} exceeds the frame"));
        }
        if ((lo * self.image_side as f64).round() as usize) < 2 {
            return bad(format!("object side fraction {lo} is below two pixels"));
        }
        for b in [self.train_bias, self.test_bias] {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("bias {b} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.num_classes
            * match split {
                Split::Train => self.train_per_class,
                Split::Test => self.test_per_class,
            }
    }
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn item_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let s = mix(mix(seed) ^ mix(split as u64 + 1) ^ mix(index as u64).rotate_left(17));
    ChaCha8Rng::seed_from_u64(s)
}

/// Glyph stamped in the top-left 3×3 corner of every tile, as row strings.
const GLYPHS: [[&str; 3]; 8] = [
    [".#.", "###", ".#."],
    ["#.#", ".#.", "#.#"],
    ["###", "#.#", "###"],
    ["##.", "##.", "..."],
    ["#..", "#..", "###"],
    ["###", "..#", "..#"],
    ["...", "###", "..."],
    [".#.", ".#.", ".#."],
];

/// Binary class texture at local pixel offset `(y, x)`: a tiled glyph.
///
/// Classes `c` and `c + 4` share a family and differ only in one-pixel
/// structure (plus/cross, ring/block, two corner orientations, bar
/// orientation). Class indices past 8 reuse the glyphs on wider tiles.
pub fn texture(class: usize, y: i64, x: i64) -> f64 {
    let family = class % 4;
    let variant = (class / 4) % 2;
    let period = 4 + (class / 8) as i64;
    let glyph = &GLYPHS[2 * family + variant];
    let (u, v) = (y.rem_euclid(period) as usize, x.rem_euclid(period) as usize);
    if u < 3 && v < 3 && glyph[u].as_bytes()[v] == b'#' {
        1.0
    } else {
        0.0
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Fixed per-class background tint.
fn class_tint(class: usize, k: usize) -> [f64; 3] {
    let hue = class as f64 / k as f64 * std::f64::consts::TAU;
    let third = std::f64::consts::TAU / 3.0;
    [0.0, 1.0, 2.0].map(|i| 0.5 + 0.3 * (hue + i * third).cos())
}

/// `(fg, bg)` with the foreground brighter by at least `min_gap` in mean
/// intensity.
fn contrasting_pair(rng: &mut ChaCha8Rng, min_gap: f64) -> ([f64; 3], [f64; 3]) {
    let mean = |c: &[f64; 3]| c.iter().sum::<f64>() / 3.0;
    loop {
        let a = random_color(rng);
        let b = random_color(rng);
        let gap = mean(&a) - mean(&b);
        if gap.abs() >= min_gap {
            return if gap > 0.0 { (a, b) } else { (b, a) };
        }
    }
}

struct Canvas {
    side: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn set(&mut self, y: usize, x: usize, c: [f64; 3]) {
        let plane = self.side * self.side;
        for (ch, v) in c.into_iter().enumerate() {
            self.px[ch * plane + y * self.side + x] = v;
        }
    }

    fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.side * self.side;
        [0, 1, 2].map(|ch| self.px[ch * plane + y * self.side + x])
    }

    fn patch(&mut self, class: usize, top: usize, left: usize, size: usize, fg: [f64; 3], bg: [f64; 3], opacity: f64, rng: &mut ChaCha8Rng) {
        let (oy, ox) = (rng.gen_range(0..8i64), rng.gen_range(0..8i64));
        for y in top..(top + size).min(self.side) {
            for x in left..(left + size).min(self.side) {
                let t = texture(class, y as i64 - top as i64 + oy, x as i64 - left as i64 + ox);
                let under = self.get(y, x);
                let c = [0, 1, 2].map(|i| {
                    let v = bg[i] + t * (fg[i] - bg[i]);
                    under[i] + opacity * (v - under[i])
                });
                self.set(y, x, c);
            }
        }
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + t * (b[i] - a[i]))
}

/// The `index`-th image of `split`; a pure function of its arguments.
pub fn generate_item(spec: &SyntheticSpec, split: Split, index: usize) -> LabeledImage {
    let k = spec.num_classes;
    let s = spec.image_side;
    let label = index % k;
    let mut rng = item_rng(spec.seed, split, index);
    let bias = match split {
        Split::Train => spec.train_bias,
        Split::Test => spec.test_bias,
    };
    let env = if rng.gen_bool(bias) { label } else { rng.gen_range(0..k) };
    let tint = class_tint(env, k);
    let mut canvas = Canvas {
        side: s,
        px: vec![0.0; 3 * s * s],
    };

    let other = lerp(tint, random_color(&mut rng), 0.35);
    let (gy, gx) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    for y in 0..s {
        for x in 0..s {
            let t = 0.5 + 0.25 * (gy * (y as f64 / s as f64 - 0.5) + gx * (x as f64 / s as f64 - 0.5));
            canvas.set(y, x, lerp(tint, other, t));
        }
    }
    if spec.background_mode != BackgroundMode::Plain {
        let family = rng.gen_range(0..k);
        let dark = lerp(tint, [0.0; 3], 0.25);
        canvas.patch(family, 0, 0, s, dark, tint, 0.35, &mut rng);
    }
    if spec.background_mode == BackgroundMode::Cluttered {
        for _ in 0..spec.distractors {
            let size = ((spec.object_side_range[0] * s as f64).round() as usize).max(2);
            let top = rng.gen_range(0..=s - size);
            let left = rng.gen_range(0..=s - size);
            let (fg, bg) = contrasting_pair(&mut rng, 0.2);
            let class = rng.gen_range(0..k);
            canvas.patch(class, top, left, size, fg, bg, 0.45, &mut rng);
        }
    }

    let [lo, hi] = spec.object_side_range;
    let min_side = ((lo * s as f64).round() as usize).max(2);
    let max_side = ((hi * s as f64).round() as usize).clamp(min_side, s);
    let size = rng.gen_range(min_side..=max_side);
    let top = rng.gen_range(0..=s - size);
    let left = rng.gen_range(0..=s - size);
    let (fg, bg) = contrasting_pair(&mut rng, 0.35);
    canvas.patch(label, top, left, size, fg, bg, 1.0, &mut rng);

    for v in &mut canvas.px {
        *v = (*v + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    LabeledImage {
        pixels: Tensor::from_parts(vec![3, s, s], canvas.px),
        label,
        object_box: Some(CropBox {
            row_min: top,
            row_max: top + size - 1,
            col_min: left,
            col_max: left + size - 1,
        }),
    }
}

pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let images = (0..spec.count(split)).map(|i| generate_item(spec, split, i)).collect();
    Dataset::new(images, spec.num_classes)
}

/// `(train, test)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    Ok((generate_split(spec, Split::Train)?, generate_split(spec, Split::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 6,
            test_per_class: 3,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn counts() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.count(Split::Train), 1600);
        assert_eq!(spec.count(Split::Test), 800);
        let (tr, te) = generate_synthetic(&small()).unwrap();
        assert_eq!((tr.len(), te.len()), (48, 24));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 12, ..small() };
        assert_ne!(generate_synthetic(&other).unwrap().0, a.0);
    }

    #[test]
    fn boxes_inside_frame_with_declared_size() {
        let spec = small();
        let (tr, te) = generate_synthetic(&spec).unwrap();
        let s = spec.image_side as f64;
        for img in tr.images.iter().chain(&te.images) {
            let b = img.object_box.unwrap();
            assert!(b.row_max < spec.image_side && b.col_max < spec.image_side);
            let side = b.height() as f64;
            assert_eq!(b.height(), b.width());
            assert!(side >= (spec.object_side_range[0] * s).round() && side <= (spec.object_side_range[1] * s).round());
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.label < spec.num_classes);
        }
    }

    #[test]
    fn rejects_oversized_objects_and_bad_sides() {
        let mut spec = small();
        spec.object_side_range = [0.5, 1.2];
        assert!(generate_synthetic(&spec).is_err());
        spec.object_side_range = [0.2, 0.4];
        spec.image_side = 30;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn textures_differ_between_classes() {
        for a in 0..16 {
            for b in (a + 1)..16 {
                let differs = (0..12).any(|y| (0..12).any(|x| texture(a, y, x) != texture(b, y, x)));
                assert!(differs, "classes {a} and {b}");
            }
        }
    }

    #[test]
    fn training_backgrounds_are_biased() {
        let spec = SyntheticSpec {
            train_bias: 1.0,
            background_mode: BackgroundMode::Plain,
            distractors: 0,
            ..small()
        };
        let (tr, _) = generate_synthetic(&spec).unwrap();
        let corner = |img: &LabeledImage| img.pixels.data()[0];
        let same = tr.images.iter().filter(|i| i.label == 0).map(corner).collect::<Vec<_>>();
        let spread = same.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - same.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.5);
    }
}
