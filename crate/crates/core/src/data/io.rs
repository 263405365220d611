//! On-disk layout: `root/manifest.toml`, one `class_NNNN` directory per
//! class, and per image a PNG plus a `.emb` file of caption embeddings.
//!
//! A `.emb` file is the 4-byte magic `CWEM`, the caption count and the
//! embedding dimension as little-endian `u32`, then `count · dim`
//! little-endian `f32` values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{CaptionedImage, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
const EMB_MAGIC: &[u8; 4] = b"CWEM";

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Writes an `(H, W, 3)` image with values in `[-1, 1]` as 8-bit RGB.
pub fn write_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let bytes: Vec<u8> = pixels
        .data()
        .iter()
        .map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
        .collect();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| format_err(path, e))?;
    writer.finish().map_err(|e| format_err(path, e))?;
    Ok(())
}

/// Reads a PNG into an `(H, W, 3)` tensor in `[-1, 1]`. Gray images are
/// replicated across channels and alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| format_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(format_err(path, "unexpanded palette")),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut out = Vec::with_capacity(h * w * 3);
    for px in buf[..info.buffer_size()].chunks_exact(channels) {
        let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        out.extend(rgb.iter().map(|&b| b as f64 / 127.5 - 1.0));
    }
    Ok(Tensor::from_vec(&[h, w, 3], out))
}

pub fn write_embeddings(path: &Path, embeddings: &[Vec<f64>]) -> Result<()> {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(EMB_MAGIC)?;
    f.write_all(&(embeddings.len() as u32).to_le_bytes())?;
    f.write_all(&(dim as u32).to_le_bytes())?;
    for e in embeddings {
        if e.len() != dim {
            return Err(format_err(path, "embeddings differ in dimension"));
        }
        for &v in e {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
        return Err(format_err(path, "missing embedding header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (count, dim) = (word(4), word(8));
    if bytes.len() != 12 + 4 * count * dim {
        return Err(format_err(path, format!("expected {count}x{dim} values")));
    }
    Ok(bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect::<Vec<_>>()
        .chunks(dim.max(1))
        .map(<[f64]>::to_vec)
        .collect())
}

fn class_dir(root: &Path, class_id: u32) -> PathBuf {
    root.join(format!("class_{class_id:04}"))
}

/// Writes `dataset` under `root` and returns the manifest written beside it.
/// Pixels are quantized to 8 bits and embeddings to `f32`.
pub fn save_dataset(root: &Path, dataset: &Dataset, split: Split) -> Result<DatasetManifest> {
    fs::create_dir_all(root)?;
    for class in dataset.class_ids() {
        let dir = class_dir(root, class);
        fs::create_dir_all(&dir)?;
        for (n, &i) in dataset.class_members(class).iter().enumerate() {
            let im = &dataset.images()[i];
            write_png(&dir.join(format!("{n:05}.png")), &im.pixels)?;
            write_embeddings(&dir.join(format!("{n:05}.emb")), &im.embeddings)?;
        }
    }
    let manifest = dataset.manifest(PathBuf::from("."), split);
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(root.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Loads the dataset a manifest describes. A relative `root` is resolved
/// against the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| format_err(manifest_path, e.message()))?;
    manifest.validate()?;
    let root = if manifest.root.is_absolute() {
        manifest.root.clone()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.root)
    };
    let mut images = Vec::new();
    for &class in &manifest.class_ids {
        let dir = class_dir(&root, class);
        let mut pngs: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        pngs.sort();
        if pngs.is_empty() {
            return Err(format_err(&dir, "class directory holds no images"));
        }
        for png_path in pngs {
            let pixels = read_png(&png_path)?;
            if pixels.shape()[..2] != [manifest.image_size, manifest.image_size] {
                return Err(format_err(&png_path, format!("expected {0}x{0} pixels", manifest.image_size)));
            }
            let embeddings = read_embeddings(&png_path.with_extension("emb"))?;
            if embeddings.iter().any(|e| e.len() != manifest.embedding_dim) {
                return Err(format_err(&png_path, format!("expected embedding dimension {}", manifest.embedding_dim)));
            }
            images.push(CaptionedImage::new(pixels, embeddings, class)?);
        }
    }
    Ok((manifest, Dataset::new(images)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SyntheticSpec};

    #[test]
    fn dataset_round_trips_within_quantization() {
        let ds = make_synthetic_dataset(&SyntheticSpec {
            num_classes: 2,
            images_per_class: 3,
            image_size: 8,
            embedding_dim: 4,
            seed: 2,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = save_dataset(dir.path(), &ds, Split::Train).unwrap();
        let (manifest, loaded) = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in ds.images().iter().zip(loaded.images()) {
            assert_eq!(a.class_id, b.class_id);
            assert!(a.pixels.max_abs_diff(&b.pixels) <= 1.0 / 127.5);
            for (x, y) in a.embeddings.iter().flatten().zip(b.embeddings.iter().flatten()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn corrupt_embedding_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        fs::write(&p, b"NOPE\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Format(_))));
        write_embeddings(&p, &[vec![1.0, 2.0]]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(read_embeddings(&p).is_err());
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        fs::write(
            &p,
            "root='.'\nsplit='train'\nimage_size=8\nembedding_dim=4\nclass_ids=[0]\ncolour='red'\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Format(_))));
    }
}
