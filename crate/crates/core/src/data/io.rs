use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::netpbm::{read_netpbm, write_pgm, write_ppm};
use super::{Dataset, DatasetSpec, LocalizationSample, Split};
use crate::error::{Error, Result};
use crate::eval::BBox;

#[derive(Serialize, Deserialize)]
struct Record {
    split: Split,
    file: String,
    mask_file: String,
    label: usize,
    boxes: Vec<BBox>,
    markers: Vec<BBox>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    spec: DatasetSpec,
    samples: Vec<Record>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `index.json`, `images/*.ppm` and `masks/*.pgm` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::with_capacity(dataset.len());
    for split in Split::ALL {
        for (i, s) in dataset.split(split).iter().enumerate() {
            let stem = format!("{}_{i:05}", split.name());
            let file = format!("images/{stem}.ppm");
            let mask_file = format!("masks/{stem}.pgm");

            let rgb: Vec<u8> = s.image.iter().map(|v| to_byte(*v)).collect();
            let path = dir.join(&file);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            write_ppm(&mut w, s.size, s.size, &rgb)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;

            let gray: Vec<u8> = s.gt_mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
            let path = dir.join(&mask_file);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            write_pgm(&mut w, s.size, s.size, &gray)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;

            records.push(Record {
                split,
                file,
                mask_file,
                label: s.label,
                boxes: s.gt_boxes.clone(),
                markers: s.markers.clone(),
            });
        }
    }
    let index = Index {
        spec: dataset.spec.clone(),
        samples: records,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_image(dir: &Path, rel: &str, size: usize, channels: usize) -> Result<Vec<u8>> {
    let path = dir.join(rel);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let img = read_netpbm(&mut BufReader::new(file)).map_err(|r| Error::data(&path, r))?;
    if img.channels != channels {
        return Err(Error::data(&path, format!("expected {channels} channel(s), found {}", img.channels)));
    }
    if img.width != size || img.height != size {
        return Err(Error::data(
            &path,
            format!("expected {size}x{size}, found {}x{}", img.width, img.height),
        ));
    }
    Ok(img.data)
}

/// Reads a dataset written by [`save_dataset`], validating every record.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    index.spec.validate()?;
    let size = index.spec.image_size;

    let mut dataset = Dataset {
        spec: index.spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in index.samples {
        if r.label >= index.spec.num_classes {
            return Err(Error::data(&path, format!("{}: label {} out of range", r.file, r.label)));
        }
        let rgb = read_image(dir, &r.file, size, 3)?;
        let gray = read_image(dir, &r.mask_file, size, 1)?;
        let sample = LocalizationSample {
            size,
            image: rgb.iter().map(|b| *b as f64 / 255.0).collect(),
            label: r.label,
            gt_boxes: r.boxes,
            gt_mask: gray.iter().map(|b| *b > 127).collect(),
            markers: r.markers,
        };
        sample
            .validate()
            .map_err(|reason| Error::data(dir.join(&r.file), reason))?;
        match r.split {
            Split::Train => dataset.train.push(sample),
            Split::Val => dataset.val.push(sample),
            Split::Test => dataset.test.push(sample),
        }
    }
    for split in Split::ALL {
        let expected = index.spec.per_class(split) * index.spec.num_classes;
        let found = dataset.split(split).len();
        if found != expected {
            return Err(Error::data(
                &path,
                format!("{} split has {found} samples, spec requires {expected}", split.name()),
            ));
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn tiny() -> DatasetSpec {
        DatasetSpec {
            num_classes: 2,
            train_per_class: 2,
            val_per_class: 1,
            test_per_class: 1,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn save_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&tiny()).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn truncated_image_names_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&generate(&tiny()).unwrap(), dir.path()).unwrap();
        let victim = dir.path().join("images/val_00001.ppm");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
        assert!(err.to_string().contains("val_00001.ppm"), "{err}");
    }
}
