//! Dataset manifests: a header, `#key=value` metadata and one
//! tab-separated record per line (`path id camera view frame`).

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "#secap-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Aerial,
    GroundFrontal,
    GroundOblique,
}

impl View {
    pub fn is_aerial(self) -> bool {
        self == View::Aerial
    }

    /// Class index for the view classifier. With two views both ground
    /// kinds collapse onto class 1.
    pub fn label(self, num_views: usize) -> usize {
        match (self, num_views) {
            (View::Aerial, _) => 0,
            (_, 2) => 1,
            (View::GroundFrontal, _) => 1,
            (View::GroundOblique, _) => 2,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Aerial => "aerial",
            View::GroundFrontal => "ground-frontal",
            View::GroundOblique => "ground-oblique",
        })
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "aerial" => Ok(View::Aerial),
            "ground" | "ground-frontal" => Ok(View::GroundFrontal),
            "ground-oblique" => Ok(View::GroundOblique),
            other => Err(format!("unknown view {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest's directory. The first component is the
    /// split (`train` or `test`).
    pub path: String,
    /// `-1` for distractors.
    pub id: i64,
    pub camera: u32,
    pub view: View,
    pub frame: u32,
}

impl SampleRecord {
    pub fn is_distractor(&self) -> bool {
        self.id < 0
    }

    pub fn split(&self) -> &str {
        self.path.split('/').next().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub num_views: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Sorted by path; paths are unique.
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(
        name: impl Into<String>,
        num_views: usize,
        image_height: usize,
        image_width: usize,
        mut records: Vec<SampleRecord>,
    ) -> Result<Self> {
        records.sort_by(|a, b| a.path.cmp(&b.path));
        if let Some(w) = records.windows(2).find(|w| w[0].path == w[1].path) {
            return Err(Error::Format(format!("duplicate manifest path {}", w[0].path)));
        }
        if let Some(r) = records.iter().find(|r| r.id < -1) {
            return Err(Error::Format(format!("{}: identity {} below -1", r.path, r.id)));
        }
        Ok(Self {
            name: name.into(),
            num_views,
            image_height,
            image_width,
            records,
        })
    }

    pub fn train(&self) -> Vec<SampleRecord> {
        self.records.iter().filter(|r| r.split() == "train").cloned().collect()
    }

    pub fn test(&self) -> Vec<SampleRecord> {
        self.records.iter().filter(|r| r.split() == "test").cloned().collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MANIFEST_HEADER}\n#name={}\n#num_views={}\n#image_size={}x{}\n",
            self.name, self.num_views, self.image_height, self.image_width
        );
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.path, r.id, r.camera, r.view, r.frame));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Parse { offset, message };
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().unwrap_or("");
        if header.trim_end() != MANIFEST_HEADER {
            return Err(err(0, format!("expected header {MANIFEST_HEADER:?}")));
        }
        let mut offset = header.len();
        let (mut name, mut num_views, mut size) = (String::from("unnamed"), 2, (256, 128));
        let mut records = Vec::new();
        for raw in lines {
            let line_start = offset;
            offset += raw.len();
            let line = raw.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let Some((key, value)) = meta.split_once('=') else { continue };
                match key.trim() {
                    "name" => name = value.trim().to_string(),
                    "num_views" => {
                        num_views = value
                            .trim()
                            .parse()
                            .map_err(|_| err(line_start, format!("bad num_views {value:?}")))?
                    }
                    "image_size" => {
                        let parsed = value
                            .trim()
                            .split_once('x')
                            .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)));
                        size = parsed.ok_or_else(|| err(line_start, format!("bad image_size {value:?}")))?;
                    }
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(err(line_start, format!("expected 5 tab-separated fields, got {}", fields.len())));
            }
            let mut col = line_start;
            let mut at = |i: usize| {
                let here = col;
                col += fields[i].len() + 1;
                here
            };
            at(0);
            let id_at = at(1);
            let cam_at = at(2);
            let view_at = at(3);
            let frame_at = at(4);
            records.push(SampleRecord {
                path: fields[0].to_string(),
                id: fields[1].parse().map_err(|_| err(id_at, format!("bad identity {:?}", fields[1])))?,
                camera: fields[2].parse().map_err(|_| err(cam_at, format!("bad camera {:?}", fields[2])))?,
                view: fields[3].parse().map_err(|m| err(view_at, m))?,
                frame: fields[4].parse().map_err(|_| err(frame_at, format!("bad frame {:?}", fields[4])))?,
            });
        }
        Self::new(name, num_views, size.0, size.1, records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Identities with at least one record, ascending.
    pub fn identities(records: &[SampleRecord]) -> Vec<i64> {
        let set: HashSet<i64> = records.iter().filter(|r| r.id >= 0).map(|r| r.id).collect();
        let mut ids: Vec<i64> = set.into_iter().collect();
        ids.sort_unstable();
        ids
    }
}

/// Image paths in a manifest are relative to its directory.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, id: i64, view: View) -> SampleRecord {
        SampleRecord {
            path: path.into(),
            id,
            camera: 1,
            view,
            frame: 0,
        }
    }

    #[test]
    fn text_round_trip_and_sorting() {
        let m = Manifest::new(
            "toy",
            3,
            64,
            32,
            vec![
                rec("test/b.rten", -1, View::GroundOblique),
                rec("train/a.rten", 4, View::Aerial),
                rec("test/a.rten", 2, View::GroundFrontal),
            ],
        )
        .unwrap();
        assert_eq!(m.records[0].path, "test/a.rten");
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.train().len(), 1);
        assert_eq!(back.test().len(), 2);
    }

    #[test]
    fn parse_errors_point_at_the_field() {
        let text = format!("{MANIFEST_HEADER}\ntrain/a.rten\tx\t1\taerial\t0\n");
        match Manifest::parse(&text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, MANIFEST_HEADER.len() + 1 + 13),
            other => panic!("{other:?}"),
        }
        assert!(Manifest::parse("no header\n").is_err());
        let dup = format!("{MANIFEST_HEADER}\na\t1\t1\taerial\t0\na\t1\t1\taerial\t0\n");
        assert!(matches!(Manifest::parse(&dup), Err(Error::Format(_))));
    }

    #[test]
    fn view_labels_collapse_for_two_views() {
        assert_eq!(View::GroundOblique.label(2), 1);
        assert_eq!(View::GroundOblique.label(3), 2);
        assert_eq!("ground".parse::<View>().unwrap(), View::GroundFrontal);
    }
}
