//! Attention head, bilinear attention pooling, and attention-guided
//! crop-and-zoom.

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, BatchNorm, Binder, BoundBatchNorm, Mode};
use crate::tensor::kernels::{bilinear_taps, resample_plane};
use crate::tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Guard inside the row norm of the pooled feature matrix.
const L2_EPS: f64 = 1e-12;

/// `1×1 conv → batch norm → ReLU`, producing `D` nonnegative maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub kernel: Tensor,
    pub norm: BatchNorm,
}

pub struct BoundAttentionHead {
    kernel: Var,
    norm: BoundBatchNorm,
}

/// Attention stack plus the batch-norm node that produced it.
pub struct AttentionOut {
    pub maps: Var,
    pub norm_node: Var,
}

impl AttentionHead {
    pub fn new(channels: usize, parts: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if parts == 0 || channels == 0 {
            return Err(Error::invalid("attention-head", "channels and parts must be positive"));
        }
        Ok(Self {
            kernel: fan_in_uniform(&[parts, channels, 1, 1], channels, rng),
            norm: BatchNorm::new(parts),
        })
    }

    pub fn parts(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn bind(&self, b: &mut Binder) -> BoundAttentionHead {
        BoundAttentionHead {
            kernel: b.bind(&self.kernel),
            norm: self.norm.bind(b),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("attention.kernel".into(), &self.kernel),
            ("attention.gamma".into(), &self.norm.gamma),
            ("attention.beta".into(), &self.norm.beta),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.norm.gamma, &mut self.norm.beta]
    }

    /// `[B,C,h,w]` features to a `[B,D,h,w]` attention stack.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundAttentionHead, features: Var, mode: Mode) -> Result<AttentionOut> {
        let fs = tape.shape(features).to_vec();
        if fs.len() != 4 || fs[1] != self.kernel.shape()[1] {
            return Err(Error::shape("attention-head", &[&fs, self.kernel.shape()]));
        }
        let y = tape.conv2d(features, bound.kernel, 1, 0)?;
        let norm_node = self.norm.forward(tape, bound.norm, y, mode)?;
        let maps = tape.relu(norm_node)?;
        Ok(AttentionOut { maps, norm_node })
    }
}

/// Bilinear attention pooling: for each attention map `a_k`, average
/// `a_k ⊙ F` over space, giving `C` values per part; parts are concatenated
/// into `[B, D·C]`. With `normalize`, rows get a signed square root and unit
/// L2 norm.
pub fn bap(tape: &mut Tape, attention: Var, features: Var, normalize: bool) -> Result<Var> {
    let (a, f) = (tape.shape(attention).to_vec(), tape.shape(features).to_vec());
    if a.len() != 4 || f.len() != 4 || a[0] != f[0] || a[2..] != f[2..] {
        return Err(Error::shape("bap", &[&a, &f]));
    }
    let (b, d, c, hw) = (a[0], a[1], f[1], a[2] * a[3]);
    let av = tape.reshape(attention, &[b, d, hw])?;
    let fv = tape.reshape(features, &[b, c, hw])?;
    let m = tape.bmm(av, fv, true)?;
    let m = tape.scale(m, 1.0 / hw as f64)?;
    let m = tape.reshape(m, &[b, d * c])?;
    if !normalize {
        return Ok(m);
    }
    let m = tape.signed_sqrt(m)?;
    let sq = tape.square(m)?;
    let norm = tape.sum(sq, &[1])?;
    let norm = tape.add_scalar(norm, L2_EPS)?;
    let norm = tape.sqrt(norm)?;
    tape.div(m, norm)
}

/// Channel mean of a `[B,D,h,w]` stack, min-max rescaled per item to
/// `[B,h,w]`. A constant mean map becomes all zeros.
pub fn aggregate_and_normalize(attention: &Tensor) -> Result<Tensor> {
    let s = attention.shape();
    if s.len() != 4 {
        return Err(Error::shape("aggregate", &[s]));
    }
    let (b, d, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; b * hw];
    for bi in 0..b {
        let dst = &mut out[bi * hw..(bi + 1) * hw];
        for k in 0..d {
            let src = &attention.data()[(bi * d + k) * hw..(bi * d + k + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
        }
        dst.iter_mut().for_each(|v| *v /= d as f64);
        let lo = dst.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = dst.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            dst.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        } else {
            dst.fill(0.0);
        }
    }
    Ok(Tensor::from_parts(vec![b, s[2], s[3]], out))
}

/// Binary `[B,h,w]` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn item(&self, i: usize) -> &[bool] {
        &self.bits[i * self.h * self.w..(i + 1) * self.h * self.w]
    }
}

/// `mask = A_norm ≥ theta`. Not differentiated.
pub fn threshold_mask(normalized: &Tensor, theta: f64) -> Result<Mask> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::invalid("threshold-mask", format!("theta {theta} outside (0, 1)")));
    }
    let s = normalized.shape();
    if s.len() != 3 {
        return Err(Error::shape("threshold-mask", &[s]));
    }
    Ok(Mask {
        b: s[0],
        h: s[1],
        w: s[2],
        bits: normalized.data().iter().map(|&v| v >= theta).collect(),
    })
}

/// Inclusive pixel box in original image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            row_min: 0,
            row_max: h - 1,
            col_min: 0,
            col_max: w - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn contains_box(&self, other: &CropBox) -> bool {
        self.row_min <= other.row_min
            && self.col_min <= other.col_min
            && self.row_max >= other.row_max
            && self.col_max >= other.col_max
    }
}

/// Nearest-neighbour source cell of image row/column `i` when upsampling
/// `small` cells to `big` pixels.
fn nearest(i: usize, small: usize, big: usize) -> usize {
    i * small / big
}

/// Tight box around the mask's 1-cells after nearest-neighbour upsampling to
/// `h`×`w`, widened by `ceil(margin · side)` on each side and clamped.
/// An empty mask yields the full image.
pub fn crop_box(mask: &[bool], mh: usize, mw: usize, h: usize, w: usize, margin: f64) -> CropBox {
    let rows: Vec<bool> = (0..h)
        .map(|r| {
            let mr = nearest(r, mh, h);
            (0..mw).any(|mc| mask[mr * mw + mc])
        })
        .collect();
    let cols: Vec<bool> = (0..w)
        .map(|c| {
            let mc = nearest(c, mw, w);
            (0..mh).any(|mr| mask[mr * mw + mc])
        })
        .collect();
    let (Some(r0), Some(c0)) = (rows.iter().position(|&x| x), cols.iter().position(|&x| x)) else {
        return CropBox::full(h, w);
    };
    let r1 = rows.iter().rposition(|&x| x).expect("non-empty");
    let c1 = cols.iter().rposition(|&x| x).expect("non-empty");
    let pad_r = (margin * (r1 - r0 + 1) as f64).ceil() as usize;
    let pad_c = (margin * (c1 - c0 + 1) as f64).ceil() as usize;
    CropBox {
        row_min: r0.saturating_sub(pad_r),
        row_max: (r1 + pad_r).min(h - 1),
        col_min: c0.saturating_sub(pad_c),
        col_max: (c1 + pad_c).min(w - 1),
    }
}

/// Bilinearly resamples the boxed region of one `[C,H,W]` image to
/// `[C,out_h,out_w]`.
pub fn resize_region(img: &[f64], c: usize, h: usize, w: usize, bx: &CropBox, out_h: usize, out_w: usize) -> Vec<f64> {
    let rows = bilinear_taps(bx.row_min, bx.height(), h, out_h);
    let cols = bilinear_taps(bx.col_min, bx.width(), w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        resample_plane(
            &img[ch * h * w..(ch + 1) * h * w],
            w,
            &rows,
            &cols,
            &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w],
        );
    }
    out
}

/// Crops each image to its mask's box and enlarges it to `out_h`×`out_w`.
pub fn crop_and_resize(
    images: &Tensor,
    mask: &Mask,
    margin: f64,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, Vec<CropBox>)> {
    let s = images.shape();
    if s.len() != 4 || s[0] != mask.b {
        return Err(Error::shape("crop-and-resize", &[s, &[mask.b, mask.h, mask.w]]));
    }
    if margin < 0.0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("crop-and-resize", "margin must be nonnegative and output non-empty"));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    let mut boxes = Vec::with_capacity(b);
    for i in 0..b {
        let bx = crop_box(mask.item(i), mask.h, mask.w, h, w, margin);
        out.extend(resize_region(
            &images.data()[i * c * h * w..(i + 1) * c * h * w],
            c,
            h,
            w,
            &bx,
            out_h,
            out_w,
        ));
        boxes.push(bx);
    }
    Ok((Tensor::from_parts(vec![b, c, out_h, out_w], out), boxes))
}
