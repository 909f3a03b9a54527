use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::netpbm::{self, Raster};
use super::LesionSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LABELS_HEADER: &str = "id,label";

fn read_labels(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line == LABELS_HEADER) {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Dataset(format!("labels.csv line {}: expected id,label", lineno + 1)))?;
        let label = label.trim().parse().map_err(|_| {
            Error::Dataset(format!("labels.csv line {}: bad label `{label}`", lineno + 1))
        })?;
        if labels.insert(id.trim().to_string(), label).is_some() {
            return Err(Error::Dataset(format!("labels.csv: duplicate id `{id}`")));
        }
    }
    Ok(labels)
}

fn image_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn to_image(r: &Raster, id: &str) -> Result<Tensor> {
    if r.channels != 3 {
        return Err(Error::Dataset(format!("{id}: image is not RGB")));
    }
    let plane = r.width * r.height;
    let scale = f64::from(r.maxval);
    let mut planar = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            planar[c * plane + i] = f64::from(r.pixels[3 * i + c]) / scale;
        }
    }
    Tensor::new(vec![3, r.height, r.width], planar)
}

fn to_mask(r: &Raster, id: &str) -> Result<Tensor> {
    if r.channels != 1 {
        return Err(Error::Dataset(format!("{id}: mask is not greyscale")));
    }
    let max = u32::from(r.maxval);
    let data = r
        .pixels
        .iter()
        .map(|&p| if 2 * u32::from(p) >= max { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, r.height, r.width], data)
}

/// Loads `images/<id>.ppm`, `masks/<id>.pgm` and `labels.csv` under `root`.
/// Samples come back sorted by id.
pub fn load_directory_dataset(root: &Path) -> Result<Vec<LesionSample>> {
    let labels = read_labels(&root.join("labels.csv"))?;
    let images = image_ids(&root.join("images"))?;
    if let Some(id) = images.iter().find(|id| !labels.contains_key(*id)) {
        return Err(Error::Dataset(format!("image `{id}` has no label in labels.csv")));
    }
    let mut samples = Vec::with_capacity(labels.len());
    for (id, &label) in &labels {
        let img_path = root.join("images").join(format!("{id}.ppm"));
        let mask_path = root.join("masks").join(format!("{id}.pgm"));
        if !img_path.exists() {
            return Err(Error::Dataset(format!("`{id}`: missing image {}", img_path.display())));
        }
        if !mask_path.exists() {
            return Err(Error::Dataset(format!("`{id}`: missing mask {}", mask_path.display())));
        }
        let img = netpbm::read(&img_path)?;
        let mask = netpbm::read(&mask_path)?;
        if (img.width, img.height) != (mask.width, mask.height) || img.width != img.height {
            return Err(Error::Dataset(format!(
                "`{id}`: image {}x{} and mask {}x{} must be equal squares",
                img.width, img.height, mask.width, mask.height
            )));
        }
        samples.push(LesionSample {
            id: id.clone(),
            label,
            image: to_image(&img, id)?,
            mask: to_mask(&mask, id)?,
        });
    }
    Ok(samples)
}

/// Writes samples in the layout read by [`load_directory_dataset`].
pub fn export_dataset(samples: &[LesionSample], root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut labels = format!("{LABELS_HEADER}\n");
    for s in samples {
        let side = s.side();
        netpbm::write(
            &root.join("images").join(format!("{}.ppm", s.id)),
            &netpbm::encode_ppm(side, side, s.image.data()),
        )?;
        netpbm::write(
            &root.join("masks").join(format!("{}.pgm", s.id)),
            &netpbm::encode_pgm(side, side, s.mask.data()),
        )?;
        labels.push_str(&format!("{},{}\n", s.id, s.label));
    }
    let path = root.join("labels.csv");
    fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) {
        fs::create_dir_all(dir.join("images")).unwrap();
        fs::create_dir_all(dir.join("masks")).unwrap();
        for (id, shade) in [("b", 0.25), ("a", 0.75)] {
            netpbm::write(
                &dir.join("images").join(format!("{id}.ppm")),
                &netpbm::encode_ppm(2, 2, &[shade; 12]),
            )
            .unwrap();
            netpbm::write(
                &dir.join("masks").join(format!("{id}.pgm")),
                &netpbm::encode_pgm(2, 2, &[0.0, 1.0, 0.6, 0.4]),
            )
            .unwrap();
        }
        fs::write(dir.join("labels.csv"), "id,label\nb,3\na,1\n").unwrap();
    }

    #[test]
    fn empty_labels_give_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("labels.csv"), "id,label\n").unwrap();
        assert!(load_directory_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn fixture_loads_sorted_with_binarized_masks() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let data = load_directory_dataset(dir.path()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!((data[0].id.as_str(), data[0].label), ("a", 1));
        assert_eq!((data[1].id.as_str(), data[1].label), ("b", 3));
        // 153 >= 127.5 -> 1, 102 < 127.5 -> 0
        assert_eq!(data[0].mask.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!((data[0].image.data()[0] - 191.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn missing_mask_names_the_basename() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::remove_file(dir.path().join("masks/b.pgm")).unwrap();
        let err = load_directory_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
    }

    #[test]
    fn unlabeled_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::write(dir.path().join("labels.csv"), "id,label\na,1\n").unwrap();
        let err = load_directory_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
    }

    #[test]
    fn malformed_image_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::write(dir.path().join("images/a.ppm"), b"P6\n2 2\n255\n\x00").unwrap();
        match load_directory_dataset(dir.path()).unwrap_err() {
            Error::Malformed { offset, .. } => assert_eq!(offset, 12),
            e => panic!("{e}"),
        }
    }
}
