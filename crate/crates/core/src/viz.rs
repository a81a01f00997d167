//! Per-image pipeline snapshots: original, Gaussian weight map, attention,
//! crop box overlay and the enlarged crop.

use crate::attention::CropBox;
use crate::config::TrainConfig;
use crate::data::pnm;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fgf::render_gaussian_map;
use crate::model::Model;
use crate::train::infer;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// File suffixes written per image, in order: `{index:04}_{suffix}`.
pub const SUFFIXES: [&str; 5] = ["original.ppm", "gaussian.pgm", "attention.pgm", "overlay.ppm", "crop.ppm"];

pub const BOXES_FILE: &str = "boxes.tsv";
pub const BOXES_HEADER: &str = "index\tlabel\trow_min\trow_max\tcol_min\tcol_max";

const BOX_COLOR: [f64; 3] = [1.0, 0.0, 0.0];

/// Nearest-neighbour upsampling of an `h`×`w` map to `oh`×`ow`, same block
/// rule as the crop mask.
pub fn upsample_nearest(map: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            out.push(map[(i * h / oh) * w + j * w / ow]);
        }
    }
    out
}

/// Copy of a planar `[3,H,W]` image with a one-pixel box outline.
pub fn draw_box(pixels: &[f64], h: usize, w: usize, b: &CropBox) -> Vec<f64> {
    let mut out = pixels.to_vec();
    let plane = h * w;
    let mut paint = |r: usize, c: usize| {
        for (ch, v) in BOX_COLOR.iter().enumerate() {
            out[ch * plane + r * w + c] = *v;
        }
    };
    for c in b.col_min..=b.col_max {
        paint(b.row_min, c);
        paint(b.row_max, c);
    }
    for r in b.row_min..=b.row_max {
        paint(r, b.col_min);
        paint(r, b.col_max);
    }
    out
}

/// Writes the five snapshot files for each of `indices` into `out_dir`,
/// plus a `boxes.tsv` listing the crop boxes. Returns the written paths.
///
/// With fusion off the weight map is all ones; with cropping off the crop is
/// the whole image.
pub fn write_visuals(model: &Model, cfg: &TrainConfig, dataset: &Dataset, indices: &[usize], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if indices.is_empty() {
        return Err(Error::invalid("viz", "need at least one image"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::invalid("viz", format!("image {i} out of range for {} images", dataset.len())));
    }
    std::fs::create_dir_all(out_dir)?;
    let (images, labels) = dataset.batch(indices);
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let out = infer(model, cfg, &images, None)?;
    let (mh, mw) = (out.attention.shape()[1], out.attention.shape()[2]);
    let img_len = 3 * h * w;
    let mut written = Vec::new();
    let mut boxes = format!("{BOXES_HEADER}\n");
    for (b, &index) in indices.iter().enumerate() {
        let pixels = &images.data()[b * img_len..(b + 1) * img_len];
        let weight = match &out.gaussians {
            Some(g) => render_gaussian_map(&g[b], h, w)?.values,
            None => vec![1.0; h * w],
        };
        let att = &out.attention.data()[b * mh * mw..(b + 1) * mh * mw];
        let bx = out.boxes.as_ref().map_or_else(|| CropBox::full(h, w), |bx| bx[b]);
        let crop = match &out.crops {
            Some(c) => c.data()[b * img_len..(b + 1) * img_len].to_vec(),
            None => pixels.to_vec(),
        };
        let rasters = [
            pnm::rgb_from_planar(pixels, h, w),
            pnm::gray(&weight, h, w),
            pnm::gray(&upsample_nearest(att, mh, mw, h, w), h, w),
            pnm::rgb_from_planar(&draw_box(pixels, h, w, &bx), h, w),
            pnm::rgb_from_planar(&crop, h, w),
        ];
        for (suffix, r) in SUFFIXES.iter().zip(&rasters) {
            let path = out_dir.join(format!("{index:04}_{suffix}"));
            pnm::write(&path, r)?;
            written.push(path);
        }
        let _ = writeln!(
            boxes,
            "{index}\t{}\t{}\t{}\t{}\t{}",
            labels[b], bx.row_min, bx.row_max, bx.col_min, bx.col_max
        );
    }
    std::fs::write(out_dir.join(BOXES_FILE), boxes)?;
    Ok(written)
}
