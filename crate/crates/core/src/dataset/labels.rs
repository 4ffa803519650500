use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::{derive_boxes, load_mask, BBox, DatasetManifest, Split};
use crate::error::{Error, Result};

/// One detector label line (`class cx cy w h`, normalized to the image size).
pub fn label_line(bbox: &BBox, width: usize, height: usize) -> String {
    let (cx, cy) = bbox.center();
    let (w, h) = (width as f64, height as f64);
    format!(
        "0 {:.6} {:.6} {:.6} {:.6}",
        cx / w,
        cy / h,
        bbox.width() / w,
        bbox.height() / h
    )
}

/// Writes one `<sample_id>.txt` label file per train entry, one line per
/// mask-derived box. Returns the number of files written.
pub fn export_detector_labels(manifest: &DatasetManifest, min_area: usize, out_dir: &Path) -> Result<usize> {
    if manifest.count(Split::Train) == 0 {
        return Err(Error::data("manifest has no train entries; run `subset` first"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = 0;
    for entry in manifest.split(Split::Train) {
        let mask = load_mask(&entry.mask_path)?;
        let (iw, ih) = image::image_dimensions(&entry.image_path).map_err(|source| Error::Image {
            path: entry.image_path.clone(),
            source,
        })?;
        if (iw as usize, ih as usize) != mask.dims() {
            return Err(Error::data(format!(
                "sample {:?}: image is {iw}x{ih} but mask is {}x{}",
                entry.sample_id,
                mask.width(),
                mask.height()
            )));
        }
        let mut text = String::new();
        for bbox in derive_boxes(&mask, min_area) {
            writeln!(text, "{}", label_line(&bbox, mask.width(), mask.height())).unwrap();
        }
        let path = out_dir.join(format!("{}.txt", entry.sample_id));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written += 1;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{save_mask, BinaryMask, ManifestEntry, Modality};
    use std::path::PathBuf;

    #[test]
    fn centered_box_normalizes_to_halves() {
        let b = BBox::new(25.0, 25.0, 75.0, 75.0).unwrap();
        assert_eq!(label_line(&b, 100, 100), "0 0.500000 0.500000 0.500000 0.500000");
    }

    fn write_sample(dir: &Path, id: &str, mask: &BinaryMask) -> ManifestEntry {
        let image_path = dir.join(format!("{id}_img.png"));
        let mask_path = dir.join(format!("{id}_mask.png"));
        image::GrayImage::new(mask.width() as u32, mask.height() as u32)
            .save(&image_path)
            .unwrap();
        save_mask(mask, &mask_path).unwrap();
        ManifestEntry {
            sample_id: id.into(),
            image_path,
            mask_path,
            split: Split::Train,
        }
    }

    #[test]
    fn files_follow_box_order() {
        let dir = tempfile::tempdir().unwrap();
        let two = BinaryMask::from_fn(40, 20, |x, y| {
            ((20..30).contains(&x) && (2..6).contains(&y)) || ((0..10).contains(&x) && (10..20).contains(&y))
        });
        let entries = vec![
            write_sample(dir.path(), "blank", &BinaryMask::empty(8, 8)),
            write_sample(dir.path(), "two", &two),
        ];
        let manifest = DatasetManifest::new("d", Modality::Other, entries).unwrap();
        let out = dir.path().join("labels");
        assert_eq!(export_detector_labels(&manifest, 16, &out).unwrap(), 2);
        assert_eq!(fs::read_to_string(out.join("blank.txt")).unwrap(), "");
        let lines: Vec<String> = fs::read_to_string(out.join("two.txt"))
            .unwrap()
            .lines()
            .map(str::to_owned)
            .collect();
        assert_eq!(
            lines,
            [
                "0 0.625000 0.200000 0.250000 0.200000",
                "0 0.125000 0.750000 0.250000 0.500000"
            ]
        );
    }

    #[test]
    fn requires_train_entries() {
        let manifest = DatasetManifest::new(
            "d",
            Modality::Other,
            vec![ManifestEntry {
                sample_id: "a".into(),
                image_path: PathBuf::from("a.png"),
                mask_path: PathBuf::from("a.png"),
                split: Split::Eval,
            }],
        )
        .unwrap();
        assert!(export_detector_labels(&manifest, 16, Path::new("/nonexistent")).is_err());
    }

    #[test]
    fn unwritable_output_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let entry = write_sample(dir.path(), "a", &BinaryMask::empty(4, 4));
        let manifest = DatasetManifest::new("d", Modality::Other, vec![entry]).unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(export_detector_labels(&manifest, 16, &blocker.join("labels")).is_err());
    }
}
