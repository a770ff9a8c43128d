use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use super::CdSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes a `[3, H, W]` image in `[0, 1]` as 8-bit RGB PNG.
pub fn save_rgb(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("save_rgb", format!("image shape {s:?} is not [3, H, W]")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let p = y as usize * w + x as usize;
        px.0 = [0, 1, 2].map(|c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    ensure_parent(path)?;
    out.save(path).map_err(|e| image_error(path, e))
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = f32::from(px.0[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `{0, 1}` mask as an 8-bit grayscale PNG with values `{0, 255}`.
pub fn save_mask(path: impl AsRef<Path>, mask: &[u8], height: usize, width: usize) -> Result<()> {
    let path = path.as_ref();
    if mask.len() != height * width {
        return Err(Error::dim("save_mask", format!("{} values for {height}×{width}", mask.len())));
    }
    let pixels = mask
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            1 => Ok(255),
            other => Err(Error::Data(format!("mask value {other} is not binary"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).expect("buffer sized above");
    ensure_parent(path)?;
    img.save(path).map_err(|e| image_error(path, e))
}

/// Reads a `{0, 255}` PNG into a `{0, 1}` mask; any other value is a data
/// error naming the file and the value.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize)> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Vec::with_capacity(w * h);
    for (x, y, px) in img.enumerate_pixels() {
        out.push(match px.0[0] {
            0 => 0,
            255 => 1,
            v => {
                return Err(Error::Data(format!(
                    "{}: label value {v} at ({x}, {y}) is not 0 or 255",
                    path.display()
                )))
            }
        });
    }
    Ok((out, h, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected train, val or test)")))
    }
}

/// A validated `A/`, `B/`, `label/` dataset directory with split lists.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub splits: BTreeMap<Split, Vec<String>>,
}

fn resolve(root: &Path, dir: &str, id: &str) -> Option<PathBuf> {
    let direct = root.join(dir).join(id);
    if direct.is_file() {
        return Some(direct);
    }
    let png = root.join(dir).join(format!("{id}.png"));
    png.is_file().then_some(png)
}

/// Reads `train.txt`, `val.txt`, `test.txt` (newline-delimited ids; absent
/// files mean empty splits) and checks that splits are disjoint, that every
/// id has its three images, and that every label is `{0, 255}`.
pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref().to_path_buf();
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut splits = BTreeMap::new();
    let mut owner: BTreeMap<String, Split> = BTreeMap::new();
    for split in Split::ALL {
        let list = root.join(format!("{}.txt", split.name()));
        if !list.exists() {
            continue;
        }
        let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
        let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        for id in &ids {
            if let Some(prev) = owner.insert(id.clone(), split) {
                return Err(Error::Data(format!(
                    "id {id} appears in both the {} and {} splits",
                    prev.name(),
                    split.name()
                )));
            }
        }
        splits.insert(split, ids);
    }
    if splits.is_empty() {
        return Err(Error::Data(format!("{}: no train.txt, val.txt or test.txt", root.display())));
    }
    let manifest = DatasetManifest { root, splits };
    for id in owner.keys() {
        let [_, _, label] = manifest.paths(id)?;
        load_mask(&label)?;
    }
    Ok(manifest)
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    fn paths(&self, id: &str) -> Result<[PathBuf; 3]> {
        let get = |dir: &str| {
            resolve(&self.root, dir, id).ok_or_else(|| {
                Error::Data(format!("sample {id}: missing file {}", self.root.join(dir).join(id).display()))
            })
        };
        Ok([get("A")?, get("B")?, get("label")?])
    }

    pub fn load_sample(&self, id: &str) -> Result<CdSample> {
        let [a, b, label] = self.paths(id)?;
        let img_a = load_rgb(&a)?;
        let img_b = load_rgb(&b)?;
        let (mask, h, w) = load_mask(&label)?;
        if img_a.shape() != [3, h, w] {
            return Err(Error::Data(format!(
                "sample {id}: label {}×{} does not match image {:?}",
                h,
                w,
                img_a.shape()
            )));
        }
        CdSample::new(id, img_a, img_b, mask)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<CdSample>> {
        self.ids(split).iter().map(|id| self.load_sample(id)).collect()
    }
}

/// Writes samples in the manifest layout.
pub fn write_dataset(root: impl AsRef<Path>, splits: &[(Split, &[CdSample])]) -> Result<()> {
    let root = root.as_ref();
    for (split, samples) in splits {
        let mut list = String::new();
        for s in *samples {
            save_rgb(root.join("A").join(format!("{}.png", s.id)), &s.img_a)?;
            save_rgb(root.join("B").join(format!("{}.png", s.id)), &s.img_b)?;
            save_mask(root.join("label").join(format!("{}.png", s.id)), &s.mask, s.height(), s.width())?;
            list.push_str(&s.id);
            list.push('\n');
        }
        let path = root.join(format!("{}.txt", split.name()));
        ensure_parent(&path)?;
        fs::write(&path, list).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m: Vec<u8> = (0..35).map(|i| (i % 4 == 1) as u8).collect();
        let p = dir.path().join("m.png");
        save_mask(&p, &m, 5, 7).unwrap();
        assert_eq!(load_mask(&p).unwrap(), (m, 5, 7));
    }

    #[test]
    fn label_value_37_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        GrayImage::from_raw(2, 1, vec![0, 37]).unwrap().save(&p).unwrap();
        let msg = load_mask(&p).unwrap_err().to_string();
        assert!(msg.contains("37") && msg.contains("bad.png"), "{msg}");
    }

    #[test]
    fn rgb_round_trip_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 4 * 2).map(|i| (i * 10) as f32 / 255.0).collect();
        let img = Tensor::new(vec![3, 4, 2], data).unwrap();
        let p = dir.path().join("x.png");
        save_rgb(&p, &img).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), img);
    }
}
