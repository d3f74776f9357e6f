//! Dataset manifests and the samples they reference.
//!
//! A manifest is a text file of directives, one per line:
//!
//! ```text
//! task segment
//! points 128
//! label capped_cylinder
//! parts 0 side,cap
//! train train/shape_000.txt 0
//! test test/shape_000.txt 0
//! ```
//!
//! `label` lines name classes (classification) or shape categories
//! (segmentation) in index order. `parts <category> <names>` assigns the
//! next consecutive part ids to a category. Sample paths are relative to
//! the manifest's directory. Classification samples hold coordinates only;
//! segmentation samples are text rows `x y z part`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::points::{load_points, parse_rows, Format};
use crate::models::Task;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub task: Task,
    pub points: usize,
    pub labels: Vec<String>,
    pub part_names: Vec<String>,
    /// Global part ids of each category (segmentation).
    pub parts: Vec<Vec<usize>>,
    pub train: Vec<Entry>,
    pub test: Vec<Entry>,
}

/// One loaded cloud with its class (or category) and per-point parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub points: Tensor,
    pub label: usize,
    pub parts: Vec<usize>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, task: Task, points: usize) -> Self {
        Manifest {
            root: root.into(),
            task,
            points,
            labels: Vec::new(),
            part_names: Vec::new(),
            parts: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
        }
    }

    /// Number of output channels a network needs: classes or parts.
    pub fn outputs(&self) -> usize {
        match self.task {
            Task::Classify => self.labels.len(),
            Task::Segment => self.part_names.len(),
        }
    }

    pub fn parse(text: &str, root: &Path, source: &str) -> Result<Self> {
        let mut m = Manifest::new(root, Task::Classify, 0);
        let mut task = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::parse(source, format!("line {}: {msg}", i + 1));
            let words: Vec<&str> = line.split_whitespace().collect();
            let index = |s: &str| s.parse::<usize>().map_err(|_| err(format!("{s:?} is not an index")));
            match words.as_slice() {
                ["task", t] => task = Some(Task::parse(t).map_err(|e| err(e.to_string()))?),
                ["points", n] => m.points = index(n)?,
                ["label", name] => m.labels.push(name.to_string()),
                ["parts", cat, names] => {
                    let cat = index(cat)?;
                    if cat != m.parts.len() {
                        return Err(err(format!("parts for category {cat} out of order")));
                    }
                    let ids = names
                        .split(',')
                        .map(|n| {
                            m.part_names.push(n.to_string());
                            m.part_names.len() - 1
                        })
                        .collect();
                    m.parts.push(ids);
                }
                [split @ ("train" | "test"), path, label] => {
                    let e = Entry {
                        path: PathBuf::from(path),
                        label: index(label)?,
                    };
                    if *split == "train" {
                        m.train.push(e)
                    } else {
                        m.test.push(e)
                    }
                }
                _ => return Err(err(format!("unrecognized directive {line:?}"))),
            }
        }
        m.task = task.ok_or_else(|| Error::parse(source, "missing task directive"))?;
        m.validate(source)?;
        Ok(m)
    }

    fn validate(&self, source: &str) -> Result<()> {
        let bad = |msg: String| Error::parse(source, msg);
        if self.points == 0 {
            return Err(bad("points must be positive".into()));
        }
        if self.labels.is_empty() {
            return Err(bad("no labels declared".into()));
        }
        if self.task == Task::Segment && self.parts.len() != self.labels.len() {
            return Err(bad(format!(
                "{} categories but parts declared for {}",
                self.labels.len(),
                self.parts.len()
            )));
        }
        for e in self.train.iter().chain(&self.test) {
            if e.label >= self.labels.len() {
                return Err(bad(format!("{}: label {} out of range", e.path.display(), e.label)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("task {}\npoints {}\n", self.task.as_str(), self.points);
        for l in &self.labels {
            s.push_str(&format!("label {l}\n"));
        }
        for (c, ids) in self.parts.iter().enumerate() {
            let names: Vec<&str> = ids.iter().map(|&i| self.part_names[i].as_str()).collect();
            s.push_str(&format!("parts {c} {}\n", names.join(",")));
        }
        for (split, list) in [("train", &self.train), ("test", &self.test)] {
            for e in list {
                s.push_str(&format!("{split} {} {}\n", e.path.display(), e.label));
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Loads and checks one entry's sample.
    pub fn load_entry(&self, entry: &Entry) -> Result<Sample> {
        let path = self.root.join(&entry.path);
        let source = path.display().to_string();
        let (points, parts) = match self.task {
            Task::Classify => (load_points(&path, Format::from_path(&path))?.coords, Vec::new()),
            Task::Segment => {
                let rows = parse_rows(std::io::BufReader::new(fs::File::open(&path)?), &source)?;
                if rows.cols() < 2 {
                    return Err(Error::parse(&source, "segmentation rows need coordinates and a part label"));
                }
                let c = rows.cols() - 1;
                let allowed = &self.parts[entry.label];
                let mut coords = Vec::with_capacity(rows.rows() * c);
                let mut parts = Vec::with_capacity(rows.rows());
                for i in 0..rows.rows() {
                    let r = rows.row(i);
                    let p = r[c];
                    if p < 0.0 || p.fract() != 0.0 || !allowed.contains(&(p as usize)) {
                        return Err(Error::parse(
                            &source,
                            format!("line {}: part {p} is not a part of {}", i + 1, self.labels[entry.label]),
                        ));
                    }
                    coords.extend_from_slice(&r[..c]);
                    parts.push(p as usize);
                }
                (Tensor::new(vec![rows.rows(), c], coords)?, parts)
            }
        };
        if points.rows() != self.points {
            return Err(Error::parse(
                &source,
                format!("expected {} points, found {}", self.points, points.rows()),
            ));
        }
        Ok(Sample {
            points,
            label: entry.label,
            parts,
        })
    }

    pub fn load_split(&self, entries: &[Entry]) -> Result<Vec<Sample>> {
        entries.iter().map(|e| self.load_entry(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_text() {
        let text = "task segment\npoints 4\nlabel cyl\nparts 0 side,cap\ntrain a.txt 0\ntest b.txt 0\n";
        let m = Manifest::parse(text, Path::new("/tmp"), "m").unwrap();
        assert_eq!(m.parts, vec![vec![0, 1]]);
        assert_eq!(m.outputs(), 2);
        assert_eq!(m.to_text(), text);
    }

    #[test]
    fn rejects_bad_labels() {
        let text = "task classify\npoints 4\nlabel a\ntrain a.bin 1\n";
        assert!(Manifest::parse(text, Path::new("."), "m").is_err());
        assert!(Manifest::parse("points 4\nlabel a\n", Path::new("."), "m").is_err());
        assert!(Manifest::parse("task classify\nfoo\n", Path::new("."), "m").is_err());
    }
}
