//! On-disk formats.
//!
//! Point cloud text format (`.xyz`): optional `class <id>` header line, then
//! one `x y z [part_label]` line per point; `#` starts a comment.
//!
//! Point cloud binary format (`.psp`, little endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PSPC"
//! 4       2     format version (u16, currently 1)
//! 6       1     flags: bit0 = per-point labels, bit1 = class label
//! 7       1     reserved (0)
//! 8       4     point count n (u32)
//! [12     4     class label (u32), when bit1]
//! ...     24n   coordinates, n * 3 f64
//! [...    4n    part labels, n * u32, when bit0]
//! ```
//!
//! Dataset directory layout: a `dataset.txt` manifest (`task`, `classes`,
//! optional `parts` as `;`-separated per-class id lists) next to `train/`
//! and `test/` directories of cloud files. Files load in sorted name order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

const MAGIC: &[u8; 4] = b"PSPC";
const VERSION: u16 = 1;

/// Cloud file format selector.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CloudFormat {
    Text,
    Binary,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("psp") => CloudFormat::Binary,
            _ => CloudFormat::Text,
        }
    }
}

/// Read a point cloud file in either format.
pub fn load_point_cloud_file(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::Text => load_text(path),
        CloudFormat::Binary => load_binary(path),
    }
}

pub fn save_point_cloud_file(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::Text => save_text(cloud, path),
        CloudFormat::Binary => save_binary(cloud, path),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn load_text(path: &Path) -> Result<PointCloud> {
    let content = fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut class: Option<u32> = None;
    let mut saw_labels = false;

    for (i, raw) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "class" {
            if fields.len() != 2 {
                return Err(parse_err(path, line_no, "expected `class <id>`"));
            }
            class = Some(
                fields[1]
                    .parse()
                    .map_err(|_| parse_err(path, line_no, "class id is not an integer"))?,
            );
            continue;
        }
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected `x y z [label]`, got {} fields", fields.len()),
            ));
        }
        let mut xyz = [0.0f64; 3];
        for (slot, field) in xyz.iter_mut().zip(&fields[..3]) {
            *slot = field
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad coordinate `{field}`")))?;
        }
        points.push(xyz);
        if fields.len() == 4 {
            saw_labels = true;
            labels.push(
                fields[3]
                    .parse()
                    .map_err(|_| parse_err(path, line_no, "part label is not an integer"))?,
            );
        } else if saw_labels {
            return Err(parse_err(path, line_no, "missing part label"));
        }
    }
    if points.is_empty() {
        return Err(parse_err(path, 1, "file contains no points"));
    }
    if saw_labels && labels.len() != points.len() {
        return Err(parse_err(path, 1, "label count does not match point count"));
    }

    let mut cloud = PointCloud::new(points)?;
    if saw_labels {
        cloud = cloud.with_point_labels(labels)?;
    }
    if let Some(c) = class {
        cloud = cloud.with_class(c);
    }
    Ok(cloud)
}

fn save_text(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(c) = cloud.class_label {
        out.push_str(&format!("class {c}\n"));
    }
    for (i, p) in cloud.points().iter().enumerate() {
        match &cloud.point_labels {
            Some(l) => out.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], l[i])),
            None => out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2])),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated payload, needed {} bytes at offset {}, file has {}",
                self.path.display(),
                n,
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn load_binary(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a point cloud container",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container version {version}",
            path.display()
        )));
    }
    let flags = r.take(1)?[0];
    let _reserved = r.take(1)?[0];
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(Error::Format(format!("{}: zero points", path.display())));
    }
    let class = if flags & 0b10 != 0 {
        Some(r.u32()?)
    } else {
        None
    };
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let labels = if flags & 0b01 != 0 {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u32()?);
        }
        Some(l)
    } else {
        None
    };
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - r.at
        )));
    }

    let mut cloud = PointCloud::new(points)?;
    if let Some(l) = labels {
        cloud = cloud.with_point_labels(l)?;
    }
    if let Some(c) = class {
        cloud = cloud.with_class(c);
    }
    Ok(cloud)
}

fn save_binary(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut flags = 0u8;
    if cloud.point_labels.is_some() {
        flags |= 0b01;
    }
    if cloud.class_label.is_some() {
        flags |= 0b10;
    }
    out.push(flags);
    out.push(0);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    if let Some(c) = cloud.class_label {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(labels) = &cloud.point_labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Write a dataset as a manifest plus binary cloud files.
pub fn save_dataset_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir.join("train"))?;
    fs::create_dir_all(dir.join("test"))?;

    let mut manifest = format!("task = {}\n", dataset.task.as_str());
    manifest.push_str(&format!("classes = {}\n", dataset.class_names.join(",")));
    if let Some(parts) = &dataset.parts_per_class {
        let encoded: Vec<String> = parts
            .iter()
            .map(|p| {
                p.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        manifest.push_str(&format!("parts = {}\n", encoded.join(";")));
    }
    fs::write(dir.join("dataset.txt"), manifest)?;

    for (split, clouds) in [("train", &dataset.train), ("test", &dataset.test)] {
        for (i, cloud) in clouds.iter().enumerate() {
            let path = dir.join(split).join(format!("sample_{i:05}.psp"));
            save_binary(cloud, &path)?;
        }
    }
    Ok(())
}

fn load_split(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| load_point_cloud_file(&p, CloudFormat::from_path(&p)))
        .collect()
}

/// Load a dataset directory written by [`save_dataset_dir`] (or assembled by
/// hand in the same layout).
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("dataset.txt");
    let manifest = fs::read_to_string(&manifest_path)?;
    let mut task = None;
    let mut class_names: Vec<String> = Vec::new();
    let mut parts_per_class: Option<Vec<Vec<u32>>> = None;

    for (i, raw) in manifest.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            parse_err(&manifest_path, i + 1, "expected `key = value`")
        })?;
        match key.trim() {
            "task" => task = Some(TaskKind::parse(value.trim())?),
            "classes" => {
                class_names = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            "parts" => {
                let mut table = Vec::new();
                for group in value.split(';') {
                    let ids = group
                        .split(',')
                        .map(|s| s.trim().parse::<u32>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| {
                            parse_err(&manifest_path, i + 1, "bad part id list")
                        })?;
                    table.push(ids);
                }
                parts_per_class = Some(table);
            }
            other => {
                return Err(parse_err(
                    &manifest_path,
                    i + 1,
                    format!("unknown manifest key `{other}`"),
                ))
            }
        }
    }

    let task = task.ok_or_else(|| parse_err(&manifest_path, 1, "manifest is missing `task`"))?;
    if class_names.is_empty() {
        return Err(parse_err(&manifest_path, 1, "manifest is missing `classes`"));
    }

    let dataset = Dataset {
        task,
        class_names,
        train: load_split(&dir.join("train"))?,
        test: load_split(&dir.join("test"))?,
        parts_per_class,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic_dataset, ShapeKind, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_round_trip_with_and_without_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");

        let plain = PointCloud::new(vec![[0.5, -1.25, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 1.0]])
            .unwrap()
            .with_class(3);
        save_text(&plain, &path).unwrap();
        let loaded = load_text(&path).unwrap();
        assert_eq!(loaded, plain);
        assert_eq!(loaded.len(), 3);

        let labeled = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
            .unwrap()
            .with_point_labels(vec![0, 1, 1])
            .unwrap();
        save_text(&labeled, &path).unwrap();
        let loaded = load_text(&path).unwrap();
        assert_eq!(loaded.point_labels.as_ref().unwrap().len(), 3);
        assert_eq!(loaded, labeled);
    }

    #[test]
    fn text_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "0 0 0\n1 2\n").unwrap();
        let err = load_text(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got: {err}");
    }

    #[test]
    fn binary_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.psp");
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        save_binary(&cloud, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_binary(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");
    }

    #[test]
    fn binary_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.psp");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(load_binary(&path).is_err());
    }

    #[test]
    fn dataset_directory_round_trip_is_bit_exact() {
        let spec = SyntheticSpec {
            task: crate::data::TaskKind::PartSegmentation,
            classes: vec![ShapeKind::Cylinder, ShapeKind::Torus],
            train_per_class: 3,
            test_per_class: 2,
            points: 32,
            noise: 0.01,
            rotate: true,
            scale_jitter: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = generate_synthetic_dataset(&spec, &mut rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(&ds, dir.path()).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();

        assert_eq!(loaded.task, ds.task);
        assert_eq!(loaded.class_names, ds.class_names);
        assert_eq!(loaded.parts_per_class, ds.parts_per_class);
        assert_eq!(loaded.train.len(), ds.train.len());
        for (a, b) in loaded.train.iter().zip(&ds.train) {
            assert_eq!(a, b, "bit-exact clouds");
        }
        for (a, b) in loaded.test.iter().zip(&ds.test) {
            assert_eq!(a, b);
        }
    }
}
