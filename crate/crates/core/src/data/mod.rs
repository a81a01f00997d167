//! Datasets: the synthetic benchmark, PPM folders, and batching.

pub mod pnm;
pub mod synthetic;

pub use synthetic::{generate_item, generate_split, generate_synthetic, BackgroundMode, SyntheticSpec};

use crate::attention::{resize_region, CropBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train = 0,
    Test = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3,S,S]` in `[0,1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub object_box: Option<CropBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>, num_classes: usize) -> Result<Self> {
        let Some(first) = images.first() else {
            return Ok(Self { images, num_classes });
        };
        let shape = first.pixels.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Dataset(format!("images must be [3,H,W], got {shape:?}")));
        }
        for (i, img) in images.iter().enumerate() {
            if img.pixels.shape() != shape.as_slice() {
                return Err(Error::Dataset(format!("image {i} has shape {:?}, expected {shape:?}", img.pixels.shape())));
            }
            if img.label >= num_classes {
                return Err(Error::Dataset(format!("image {i} label {} >= {num_classes}", img.label)));
            }
        }
        Ok(Self { images, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(side_h, side_w)` of the stored images.
    pub fn extent(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.pixels.shape()[1], i.pixels.shape()[2]))
    }

    /// Stacks the selected images into `[B,3,H,W]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let shape = self.images[indices[0]].pixels.shape();
        let mut data = Vec::with_capacity(indices.len() * self.images[0].pixels.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images[i].pixels.data());
            labels.push(self.images[i].label);
        }
        (Tensor::from_parts(vec![indices.len(), shape[0], shape[1], shape[2]], data), labels)
    }
}

/// Index batches for one epoch; the permutation depends only on
/// `(shuffle_seed, epoch)` and the final partial batch is kept.
pub fn batch_iterator(len: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> impl Iterator<Item = Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = synthetic::item_rng(shuffle_seed ^ 0x5348_5546, Split::Train, epoch as usize);
    order.shuffle(&mut rng);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter()
}

/// Centre square crop, bilinearly resized to `side`×`side`.
fn fit_square(planar: &[f64], h: usize, w: usize, side: usize) -> Tensor {
    let m = h.min(w);
    let bx = CropBox {
        row_min: (h - m) / 2,
        row_max: (h - m) / 2 + m - 1,
        col_min: (w - m) / 2,
        col_max: (w - m) / 2 + m - 1,
    };
    Tensor::from_parts(vec![3, side, side], resize_region(planar, 3, h, w, &bx, side, side))
}

pub fn load_image(path: &Path, side: usize) -> Result<Tensor> {
    let r = pnm::read(path)?;
    if r.channels != 3 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: "expected a P6 colour image".into(),
        });
    }
    Ok(fit_square(&pnm::to_planar(&r), r.height, r.width, side))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// `(path, label)` pairs from a root with one subdirectory per class, labels
/// in lexicographic directory order.
pub fn scan_image_folder(root: &Path) -> Result<(Vec<(PathBuf, usize)>, Vec<String>)> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class subdirectories", root.display())));
    }
    let mut items = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        items.extend(files.into_iter().map(|f| (f, label)));
        names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    Ok((items, names))
}

pub fn load_image_folder(root: &Path, side: usize) -> Result<Dataset> {
    let (items, names) = scan_image_folder(root)?;
    load_manifest_items(&items, names.len(), side)
}

fn load_manifest_items(items: &[(PathBuf, usize)], num_classes: usize, side: usize) -> Result<Dataset> {
    let images = items
        .iter()
        .map(|(p, label)| {
            Ok(LabeledImage {
                pixels: load_image(p, side)?,
                label: *label,
                object_box: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, num_classes)
}

/// One `path<TAB>label` line per item.
pub fn write_manifest(path: &Path, items: &[(PathBuf, usize)]) -> Result<()> {
    let text: String = items.iter().map(|(p, l)| format!("{}\t{l}\n", p.display())).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (p, l) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Dataset(format!("{}:{}: expected path<TAB>label", path.display(), n + 1)))?;
            let label = l
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("{}:{}: bad label {l:?}", path.display(), n + 1)))?;
            Ok((PathBuf::from(p), label))
        })
        .collect()
}

pub fn load_manifest(path: &Path, num_classes: usize, side: usize) -> Result<Dataset> {
    load_manifest_items(&read_manifest(path)?, num_classes, side)
}

/// Writes `root/<class>/<index>.ppm` for each image and a `manifest.tsv`.
pub fn export_ppm_folder(dataset: &Dataset, root: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let width = dataset.num_classes.to_string().len().max(2);
    let mut items = Vec::with_capacity(dataset.len());
    for (i, img) in dataset.images.iter().enumerate() {
        let dir = root.join(format!("class_{:0width$}", img.label));
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{i:06}.ppm"));
        let s = img.pixels.shape();
        pnm::write(&path, &pnm::rgb_from_planar(img.pixels.data(), s[1], s[2]))?;
        items.push((path, img.label));
    }
    write_manifest(&root.join("manifest.tsv"), &items)?;
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, w: usize, h: usize, fill: u8) {
        pnm::write(
            path,
            &pnm::Raster {
                width: w,
                height: h,
                channels: 3,
                samples: vec![fill; w * h * 3],
            },
        )
        .unwrap();
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let sizes: Vec<usize> = batch_iterator(10, 4, 0, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let a: Vec<_> = batch_iterator(50, 8, 3, 2).collect();
        let b: Vec<_> = batch_iterator(50, 8, 3, 2).collect();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_reshuffle() {
        let orders: Vec<Vec<usize>> = (0..5).map(|e| batch_iterator(40, 40, 9, e).next().unwrap()).collect();
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(orders[i], orders[j]);
            }
        }
    }

    #[test]
    fn folder_loading() {
        let dir = tempfile::tempdir().unwrap();
        for (c, fill) in [("apple", 255u8), ("bread", 0)] {
            let d = dir.path().join(c);
            fs::create_dir(&d).unwrap();
            for i in 0..3 {
                write_ppm(&d.join(format!("{i}.ppm")), 5, 3, fill);
            }
        }
        let ds = load_image_folder(dir.path(), 8).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.images.iter().map(|i| i.label).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(ds.images[0].pixels.shape(), &[3, 8, 8]);
        assert!(ds.images[0].pixels.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_white_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        write_ppm(&p, 1, 1, 255);
        assert_eq!(load_image(&p, 1).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_class_and_bad_file_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        assert!(load_image_folder(dir.path(), 4).is_err());
        fs::write(dir.path().join("a").join("x.ppm"), b"P3\n1 1\n255\n0 0 0").unwrap();
        let err = load_image_folder(dir.path(), 4).unwrap_err().to_string();
        assert!(err.contains("x.ppm"), "{err}");
    }

    #[test]
    fn export_and_manifest_round_trip() {
        let spec = SyntheticSpec {
            num_classes: 3,
            image_side: 16,
            train_per_class: 2,
            test_per_class: 1,
            object_side_range: [0.25, 0.5],
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let items = export_ppm_folder(&train, dir.path()).unwrap();
        assert_eq!(read_manifest(&dir.path().join("manifest.tsv")).unwrap(), items);
        let loaded = load_image_folder(dir.path(), 16).unwrap();
        assert_eq!(loaded.len(), 6);
        let (paths, _) = scan_image_folder(dir.path()).unwrap();
        for (a, (path, _)) in loaded.images.iter().zip(&paths) {
            let i: usize = path.file_stem().unwrap().to_str().unwrap().parse().unwrap();
            let b = &train.images[i];
            assert_eq!(a.label, b.label);
            assert!(a.pixels.data().iter().zip(b.pixels.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }
}
