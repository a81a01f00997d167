//! Gaussian feature fusion: a small head predicts an axis-aligned Gaussian
//! from backbone features, the Gaussian is rendered as a peak-normalised
//! weight map, and the map multiplies the input image.
//!
//! The head pools the feature map three ways (plain average, and averages
//! weighted by the column and row coordinate) so the predicted centre can
//! follow the object instead of only the image content.

use crate::error::{Error, Result};
use crate::nn::{Binder, BoundLinear, Linear};
use crate::tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Lower bound on either spread, as a fraction of the side length.
pub const SIGMA_MIN: f64 = 0.05;
/// Upper bound on either spread.
pub const SIGMA_MAX: f64 = 0.6;
/// Spread produced by the initial head biases.
pub const SIGMA_INIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl GaussianParams {
    pub fn new(mu_x: f64, mu_y: f64, sigma_x: f64, sigma_y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu_x) || !(0.0..=1.0).contains(&mu_y) {
            return Err(Error::invalid("gaussian", format!("mu ({mu_x}, {mu_y}) outside [0,1]")));
        }
        if !(sigma_x > 0.0 && sigma_y > 0.0) {
            return Err(Error::invalid("gaussian", format!("sigma ({sigma_x}, {sigma_y}) must be positive")));
        }
        Ok(Self {
            mu_x,
            mu_y,
            sigma_x,
            sigma_y,
        })
    }

    pub const fn centered() -> Self {
        Self {
            mu_x: 0.5,
            mu_y: 0.5,
            sigma_x: SIGMA_INIT,
            sigma_y: SIGMA_INIT,
        }
    }

    /// Grid point (row, col) nearest the mean on an `h`×`w` grid.
    pub fn peak(&self, h: usize, w: usize) -> (usize, usize) {
        let r = (self.mu_y * h as f64).round().clamp(0.0, (h - 1) as f64) as usize;
        let c = (self.mu_x * w as f64).round().clamp(0.0, (w - 1) as f64) as usize;
        (r, c)
    }
}

/// Rendered Gaussian, row-major `h`×`w`, values in (0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl WeightMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.h, self.w], self.values.clone())
    }
}

/// Per-item Gaussian parameters on a tape, each shaped `[B,1,1,1]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu_x: Var,
    pub mu_y: Var,
    pub sigma_x: Var,
    pub sigma_y: Var,
}

impl GaussianVars {
    pub fn constant(tape: &mut Tape, params: &[GaussianParams]) -> Self {
        let b = params.len();
        let mut col = |f: fn(&GaussianParams) -> f64| {
            tape.constant(Tensor::from_parts(vec![b, 1, 1, 1], params.iter().map(f).collect()))
        };
        Self {
            mu_x: col(|p| p.mu_x),
            mu_y: col(|p| p.mu_y),
            sigma_x: col(|p| p.sigma_x),
            sigma_y: col(|p| p.sigma_y),
        }
    }

    pub fn read(&self, tape: &Tape) -> Vec<GaussianParams> {
        let d = |v: Var| tape.value(v).data().to_vec();
        let (mx, my, sx, sy) = (d(self.mu_x), d(self.mu_y), d(self.sigma_x), d(self.sigma_y));
        (0..mx.len())
            .map(|i| GaussianParams {
                mu_x: mx[i],
                mu_y: my[i],
                sigma_x: sx[i],
                sigma_y: sy[i],
            })
            .collect()
    }
}

/// `pooled features → hidden (ReLU) → [raw_mu_x, raw_mu_y, raw_sigma_x, raw_sigma_y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub hidden: Linear,
    pub out: Linear,
}

pub struct BoundGaussianHead {
    hidden: BoundLinear,
    out: BoundLinear,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianHead {
    pub fn new(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = Linear::new(3 * channels, hidden, rng);
        let raw_sigma = logit((SIGMA_INIT - SIGMA_MIN) / (SIGMA_MAX - SIGMA_MIN));
        let out = Linear {
            weight: Tensor::zeros(&[hidden.bias.numel(), 4]),
            bias: Tensor::from_parts(vec![4], vec![0.0, 0.0, raw_sigma, raw_sigma]),
        };
        Self { hidden, out }
    }

    pub fn bind(&self, b: &mut Binder) -> BoundGaussianHead {
        BoundGaussianHead {
            hidden: self.hidden.bind(b),
            out: self.out.bind(b),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("fgf.hidden.weight".into(), &self.hidden.weight),
            ("fgf.hidden.bias".into(), &self.hidden.bias),
            ("fgf.out.weight".into(), &self.out.weight),
            ("fgf.out.bias".into(), &self.out.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    /// Predicts Gaussian parameters from `[B,C,h,w]` features.
    pub fn predict(&self, tape: &mut Tape, bound: &BoundGaussianHead, features: Var) -> Result<GaussianVars> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 4 || 3 * shape[1] != self.hidden.weight.shape()[0] {
            return Err(Error::shape("gaussian-head", &[&shape, self.hidden.weight.shape()]));
        }
        let (h, w) = (shape[2], shape[3]);
        // centred coordinates in [-1, 1]
        let coord = |n: usize, i: usize| if n == 1 { 0.0 } else { 2.0 * i as f64 / (n - 1) as f64 - 1.0 };
        let xs = tape.constant(Tensor::from_fn(&[1, 1, 1, w], |j| coord(w, j)));
        let ys = tape.constant(Tensor::from_fn(&[1, 1, h, 1], |i| coord(h, i)));
        let plain = tape.global_avg_pool(features)?;
        let fx = tape.mul(features, xs)?;
        let by_x = tape.global_avg_pool(fx)?;
        let fy = tape.mul(features, ys)?;
        let by_y = tape.global_avg_pool(fy)?;
        let pooled = tape.concat(&[plain, by_x, by_y], 1)?;
        let hidden = Linear::forward(tape, bound.hidden, pooled)?;
        let hidden = tape.relu(hidden)?;
        let raw = Linear::forward(tape, bound.out, hidden)?;
        gaussian_from_raw(tape, raw)
    }
}

/// `mu = sigmoid(raw_mu)`, `sigma = SIGMA_MIN + (SIGMA_MAX − SIGMA_MIN)·sigmoid(raw_sigma)` for
/// `[B,4]` raw outputs ordered `(mu_x, mu_y, sigma_x, sigma_y)`.
pub fn gaussian_from_raw(tape: &mut Tape, raw: Var) -> Result<GaussianVars> {
    let b = tape.shape(raw)[0];
    let column = |tape: &mut Tape, i: usize, is_mu: bool| -> Result<Var> {
        let c = tape.narrow(raw, 1, i, 1)?;
        let c = tape.reshape(c, &[b, 1, 1, 1])?;
        let s = tape.sigmoid(c)?;
        if is_mu {
            Ok(s)
        } else {
            let s = tape.scale(s, SIGMA_MAX - SIGMA_MIN)?;
            tape.add_scalar(s, SIGMA_MIN)
        }
    };
    Ok(GaussianVars {
        mu_x: column(tape, 0, true)?,
        mu_y: column(tape, 1, true)?,
        sigma_x: column(tape, 2, false)?,
        sigma_y: column(tape, 3, false)?,
    })
}

/// Differentiable `[B,1,H,W]` map
/// `exp(-[(i/H - mu_y)²/(2σ_y²) + (j/W - mu_x)²/(2σ_x²)])`.
pub fn render_on(tape: &mut Tape, g: &GaussianVars, h: usize, w: usize) -> Result<Var> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("render-gaussian-map", format!("extent {h}×{w} must be positive")));
    }
    let ys = tape.constant(Tensor::from_fn(&[1, 1, h, 1], |i| i as f64 / h as f64));
    let xs = tape.constant(Tensor::from_fn(&[1, 1, 1, w], |j| j as f64 / w as f64));
    let axis = |tape: &mut Tape, grid: Var, mu: Var, sigma: Var| -> Result<Var> {
        let d = tape.sub(grid, mu)?;
        let d2 = tape.square(d)?;
        let s2 = tape.square(sigma)?;
        let s2 = tape.scale(s2, 2.0)?;
        tape.div(d2, s2)
    };
    let ty = axis(tape, ys, g.mu_y, g.sigma_y)?;
    let tx = axis(tape, xs, g.mu_x, g.sigma_x)?;
    let e = tape.add(ty, tx)?;
    let e = tape.scale(e, -1.0)?;
    tape.exp(e)
}

/// Weights every channel of `[B,3,H,W]` images by a `[B|1,1,H,W]` map.
pub fn fuse_on(tape: &mut Tape, images: Var, map: Var) -> Result<Var> {
    let (is, ms) = (tape.shape(images).to_vec(), tape.shape(map).to_vec());
    if is.len() != 4 || ms.len() != 4 || is[2..] != ms[2..] || ms[1] != 1 {
        return Err(Error::shape("fuse", &[&is, &ms]));
    }
    tape.mul(images, map)
}

pub fn render_gaussian_map(params: &GaussianParams, h: usize, w: usize) -> Result<WeightMap> {
    let mut tape = Tape::new();
    let g = GaussianVars::constant(&mut tape, std::slice::from_ref(params));
    let m = render_on(&mut tape, &g, h, w)?;
    Ok(WeightMap {
        h,
        w,
        values: tape.value(m).data().to_vec(),
    })
}

pub fn fuse(images: &Tensor, map: &WeightMap) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let m = tape.constant(map.to_tensor());
    let y = fuse_on(&mut tape, x, m)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, DEFAULT_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn centered_map_peaks_at_grid_centre() {
        for side in [8, 48] {
            let m = render_gaussian_map(&GaussianParams::centered(), side, side).unwrap();
            assert_eq!(m.at(side / 2, side / 2), 1.0);
            assert!(m.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn odd_grid_centre_sits_just_off_the_peak() {
        // i/H sampling puts mu = 0.5 between rows 2 and 3 of a 5-row grid
        let m = render_gaussian_map(&GaussianParams::centered(), 5, 5).unwrap();
        let expected = (-2.0 * 0.1f64.powi(2) / (2.0 * 0.25)).exp();
        assert!((m.at(2, 2) - expected).abs() < 1e-15);
    }

    #[test]
    fn wide_gaussian_approaches_flat_map() {
        let p = GaussianParams::new(0.3, 0.7, 10.0, 10.0).unwrap();
        let m = render_gaussian_map(&p, 16, 16).unwrap();
        assert!(m.values.iter().all(|&v| v > 0.995));
    }

    #[test]
    fn off_centre_values_match_scalar_formula() {
        let p = GaussianParams::new(0.25, 0.25, 0.1, 0.1).unwrap();
        let m = render_gaussian_map(&p, 8, 8).unwrap();
        assert_eq!(m.at(2, 2), 1.0);
        let oracle = (-(0.5f64.powi(2) / (2.0 * 0.01)) * 2.0).exp();
        assert!((m.at(6, 6) - oracle).abs() <= 1e-12 * oracle);
        assert_eq!(p.peak(8, 8), (2, 2));
    }

    #[test]
    fn render_rejects_empty_grid() {
        assert!(render_gaussian_map(&GaussianParams::centered(), 0, 4).is_err());
    }

    #[test]
    fn initial_map_never_drops_below_point_three() {
        let m = render_gaussian_map(&GaussianParams::centered(), 48, 48).unwrap();
        let min = m.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.3, "{min}");
    }

    #[test]
    fn fuse_identity_and_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(0.0..1.0));
        let ones = WeightMap {
            h: 4,
            w: 4,
            values: vec![1.0; 16],
        };
        assert_eq!(fuse(&img, &ones).unwrap(), img);

        let map = render_gaussian_map(&GaussianParams::new(0.2, 0.6, 0.3, 0.2).unwrap(), 4, 4).unwrap();
        let out = fuse(&Tensor::ones(&[1, 3, 4, 4]), &map).unwrap();
        for c in 0..3 {
            assert_eq!(&out.data()[c * 16..(c + 1) * 16], &map.values[..]);
        }
    }

    #[test]
    fn fused_pixel_at_peak_equals_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
        let p = GaussianParams::new(0.25, 0.75, 0.2, 0.1).unwrap();
        let map = render_gaussian_map(&p, 16, 16).unwrap();
        let out = fuse(&img, &map).unwrap();
        let (r, c) = p.peak(16, 16);
        for ch in 0..3 {
            let i = ch * 256 + r * 16 + c;
            assert_eq!(out.data()[i], img.data()[i]);
        }
    }

    #[test]
    fn fuse_rejects_extent_mismatch() {
        let map = render_gaussian_map(&GaussianParams::centered(), 4, 5).unwrap();
        assert!(fuse(&Tensor::ones(&[1, 3, 4, 4]), &map).is_err());
    }

    #[test]
    fn head_bias_init_gives_centered_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = GaussianHead::new(4, 6, &mut rng);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, false);
        let bound = head.bind(&mut b);
        let f = tape.constant(Tensor::from_fn(&[2, 4, 3, 3], |_| rng.gen_range(0.0..2.0)));
        let g = head.predict(&mut tape, &bound, f).unwrap();
        for p in g.read(&tape) {
            assert!((p.mu_x - 0.5).abs() < 1e-15 && (p.mu_y - 0.5).abs() < 1e-15);
            assert!((p.sigma_x - 0.5).abs() < 1e-12 && (p.sigma_y - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_raw_mu_approaches_one() {
        let mut tape = Tape::new();
        let raw = tape.constant(Tensor::new(&[1, 4], vec![40.0, -40.0, -40.0, 40.0]).unwrap());
        let g = gaussian_from_raw(&mut tape, raw).unwrap().read(&tape)[0];
        assert!(g.mu_x > 1.0 - 1e-12 && g.mu_y < 1e-12);
        assert!(g.sigma_x >= SIGMA_MIN && g.sigma_x < SIGMA_MIN + 1e-12);
        assert!(g.sigma_y <= SIGMA_MAX && g.sigma_y > SIGMA_MAX - 1e-12);
    }

    #[test]
    fn render_and_fuse_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Tensor::from_fn(&[2, 4], |_| rng.gen_range(-1.0..1.0));
            let img = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
            let w = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(-1.0..1.0));
            let err = finite_difference_check(
                |tape, v| {
                    let g = gaussian_from_raw(tape, v[0])?;
                    let map = render_on(tape, &g, 8, 8)?;
                    let x = tape.constant(img.clone());
                    let y = fuse_on(tape, x, map)?;
                    let wc = tape.constant(w.clone());
                    let p = tape.mul(y, wc)?;
                    tape.sum_all(p)
                },
                &[raw],
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err <= 1e-3, "seed {seed}: {err}");
        }
    }

    proptest! {
        #[test]
        fn weight_map_in_unit_interval_with_peak_at_nearest_grid_point(
            mx in 0.0f64..=1.0, my in 0.0f64..=1.0,
            sx in SIGMA_MIN..2.0, sy in SIGMA_MIN..2.0,
            h in 1usize..20, w in 1usize..20,
        ) {
            let p = GaussianParams::new(mx, my, sx, sy).unwrap();
            let m = render_gaussian_map(&p, h, w).unwrap();
            let max = m.values.iter().cloned().fold(0.0, f64::max);
            for &v in &m.values {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
            // nearest grid point within the grid maximises the separable exponent
            let r = (my * h as f64).round().min((h - 1) as f64) as usize;
            let c = (mx * w as f64).round().min((w - 1) as f64) as usize;
            prop_assert_eq!(m.at(r, c), max);
        }

        #[test]
        fn fuse_is_monotone_in_the_map(seed in 0u64..200, idx in 0usize..16, bump in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(0.0..1.0));
            let mut map = WeightMap { h: 4, w: 4, values: (0..16).map(|_| rng.gen_range(0.01..0.5)).collect() };
            let before = fuse(&img, &map).unwrap();
            map.values[idx] += bump;
            let after = fuse(&img, &map).unwrap();
            for (a, b) in after.data().iter().zip(before.data()) {
                prop_assert!(a >= b);
            }
            for (o, i) in after.data().iter().zip(img.data()) {
                prop_assert!(o <= i);
            }
        }
    }
}
