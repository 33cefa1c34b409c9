//! YOLO-style label files: one `class cx cy w h` record per line, all
//! coordinates normalized to `[0, 1]`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BBox, FrameDims};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRecord {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelRecord {
    /// Parses and validates five whitespace-split fields.
    pub fn parse_fields(fields: &[&str]) -> std::result::Result<Self, String> {
        if fields.len() != 5 {
            return Err(format!("expected 5 fields, found {}", fields.len()));
        }
        let class_id: u32 = fields[0].parse().map_err(|_| format!("bad class id {:?}", fields[0]))?;
        let mut v = [0.0; 4];
        for (i, name) in ["cx", "cy", "w", "h"].iter().enumerate() {
            let x: f64 = fields[i + 1].parse().map_err(|_| format!("non-numeric {name} {:?}", fields[i + 1]))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(format!("{name} = {x} outside [0, 1]"));
            }
            v[i] = x;
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err("width and height must be positive".into());
        }
        Ok(Self { class_id, cx: v[0], cy: v[1], w: v[2], h: v[3] })
    }

    pub fn to_pixels(&self, dims: FrameDims) -> BBox {
        let (w, h) = (dims.width as f64, dims.height as f64);
        BBox::new(self.cx * w, self.cy * h, self.w * w, self.h * h)
    }
}

pub fn parse_label_file(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let rec = LabelRecord::parse_fields(&fields)
            .map_err(|msg| Error::Parse { file: path.to_path_buf(), line: i + 1, msg })?;
        out.push(rec);
    }
    Ok(out)
}

/// `*.txt` files in `dir`, sorted by file name.
pub fn label_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    Ok(files)
}

/// Per-frame records for every label file in `dir`, in file-name order.
pub fn parse_labels(dir: &Path) -> Result<Vec<(PathBuf, Vec<LabelRecord>)>> {
    label_files(dir)?
        .into_iter()
        .map(|p| parse_label_file(&p).map(|r| (p, r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_a_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.txt", "0 0.5 0.5 0.1 0.2\n");
        let recs = parse_label_file(&p).unwrap();
        assert_eq!(recs, vec![LabelRecord { class_id: 0, cx: 0.5, cy: 0.5, w: 0.1, h: 0.2 }]);
    }

    #[test]
    fn empty_file_is_empty_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.txt", "");
        assert!(parse_label_file(&p).unwrap().is_empty());
    }

    #[test]
    fn errors_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.txt", "0 0.5 0.5 0.1 0.2\n0 1.5 0.5 0.1 0.2\n");
        match parse_label_file(&p) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, p);
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "b.txt", "0 x 0.5 0.1 0.2\n");
        assert!(matches!(parse_label_file(&p), Err(Error::Parse { line: 1, .. })));
        let p = write(dir.path(), "c.txt", "0 0.5 0.5 0.0 0.2\n");
        assert!(matches!(parse_label_file(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn directory_order_follows_names() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "000002.txt", "0 0.1 0.1 0.1 0.1\n");
        write(dir.path(), "000000.txt", "");
        write(dir.path(), "000001.txt", "1 0.2 0.2 0.1 0.1\n");
        write(dir.path(), "notes.md", "ignored");
        let recs = parse_labels(dir.path()).unwrap();
        let names: Vec<_> = recs.iter().map(|(p, _)| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["000000.txt", "000001.txt", "000002.txt"]);
        assert_eq!(recs[1].1[0].class_id, 1);
    }
}
