//! Cross-view retrieval protocols: aerial→ground, ground→aerial and
//! ground→aerial+ground.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use super::manifest::SampleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolName {
    A2G,
    G2A,
    G2AG,
}

impl ProtocolName {
    pub const ALL: [ProtocolName; 3] = [ProtocolName::A2G, ProtocolName::G2A, ProtocolName::G2AG];

    pub fn query_is_aerial(self) -> bool {
        self == ProtocolName::A2G
    }

    fn in_gallery(self, aerial: bool) -> bool {
        match self {
            ProtocolName::A2G => !aerial,
            ProtocolName::G2A => aerial,
            ProtocolName::G2AG => true,
        }
    }

    /// Parses `a2g`, `g2a`, `g2ag` or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<ProtocolName>> {
        if s == "all" {
            Ok(Self::ALL.to_vec())
        } else {
            Ok(vec![s.parse()?])
        }
    }
}

impl fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolName::A2G => "A->G",
            ProtocolName::G2A => "G->A",
            ProtocolName::G2AG => "G->A+G",
        })
    }
}

impl FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2g" => Ok(ProtocolName::A2G),
            "g2a" => Ok(ProtocolName::G2A),
            "g2ag" => Ok(ProtocolName::G2AG),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?}, expected a2g, g2a, g2ag or all"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSplit {
    pub name: ProtocolName,
    pub query: Vec<SampleRecord>,
    pub gallery: Vec<SampleRecord>,
}

/// `test` is every test record, `designated` the pre-selected query images
/// of both views. Queries are the designated images of the protocol's query
/// view; the gallery is every test image of the gallery view(s), distractors
/// included, minus this protocol's queries. Queries whose identity never
/// appears in the gallery are dropped.
pub fn build_protocol(
    test: &[SampleRecord],
    name: ProtocolName,
    designated: &[SampleRecord],
) -> Result<ProtocolSplit> {
    let query: Vec<SampleRecord> = designated
        .iter()
        .filter(|r| !r.is_distractor() && r.view.is_aerial() == name.query_is_aerial())
        .cloned()
        .collect();
    let query_paths: HashSet<&str> = query.iter().map(|r| r.path.as_str()).collect();
    let gallery: Vec<SampleRecord> = test
        .iter()
        .filter(|r| name.in_gallery(r.view.is_aerial()) && !query_paths.contains(r.path.as_str()))
        .cloned()
        .collect();
    let gallery_ids: HashSet<i64> = gallery.iter().map(|r| r.id).collect();
    let query: Vec<SampleRecord> = query.into_iter().filter(|r| gallery_ids.contains(&r.id)).collect();
    if query.is_empty() {
        return Err(Error::Protocol(format!("{name}: empty query set")));
    }
    if gallery.is_empty() {
        return Err(Error::Protocol(format!("{name}: empty gallery")));
    }
    Ok(ProtocolSplit { name, query, gallery })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::View;

    fn rec(id: i64, cam: u32, view: View, frame: u32) -> SampleRecord {
        SampleRecord {
            path: format!("test/{id}_{cam}_{frame}"),
            id,
            camera: cam,
            view,
            frame,
        }
    }

    fn toy() -> Vec<SampleRecord> {
        let mut v = Vec::new();
        for id in 0..2 {
            for (cam, view) in [(0, View::Aerial), (1, View::Aerial), (2, View::GroundFrontal), (3, View::GroundFrontal)] {
                v.push(rec(id, cam, view, 0));
            }
        }
        v.push(rec(-1, 0, View::Aerial, 9));
        v.push(rec(-1, 2, View::GroundFrontal, 9));
        v
    }

    #[test]
    fn filter_semantics() {
        let test = toy();
        let a2g = build_protocol(&test, ProtocolName::A2G, &test).unwrap();
        assert!(a2g.query.iter().all(|r| r.view.is_aerial() && r.id >= 0));
        assert!(a2g.gallery.iter().all(|r| !r.view.is_aerial()));
        assert!(a2g.gallery.iter().any(|r| r.is_distractor()));
        let mixed = build_protocol(&test, ProtocolName::G2AG, &test[2..4]).unwrap();
        assert_eq!(mixed.gallery.len(), test.len() - 2);
        assert!(mixed.gallery.iter().filter(|r| r.is_distractor()).count() == 2);
    }

    #[test]
    fn empty_sides_are_protocol_errors() {
        let test = toy();
        let aerial_only: Vec<_> = test.iter().filter(|r| r.view.is_aerial()).cloned().collect();
        assert!(matches!(
            build_protocol(&aerial_only, ProtocolName::A2G, &aerial_only),
            Err(Error::Protocol(_))
        ));
    }

    /// Test split shaped like the LAGPeR evaluation set: 1,523 identities,
    /// 7,717 aerial and 15,533 ground images, two designated queries per
    /// identity and view.
    #[test]
    fn lagper_shaped_counts() {
        let ids = 1523;
        let mut test = Vec::new();
        let mut designated = Vec::new();
        let mut push = |view: View, total: usize, cams: u32, test: &mut Vec<SampleRecord>| {
            for i in 0..total {
                let id = (i % ids) as i64;
                let r = SampleRecord {
                    path: format!("test/{view}/{i:06}"),
                    id,
                    camera: (i / ids) as u32 % cams,
                    view,
                    frame: i as u32,
                };
                if i < 2 * ids {
                    designated.push(r.clone());
                }
                test.push(r);
            }
        };
        push(View::Aerial, 7717, 3, &mut test);
        push(View::GroundFrontal, 15_533, 6, &mut test);
        let counts = |n| {
            let p = build_protocol(&test, n, &designated).unwrap();
            let q_ids: HashSet<i64> = p.query.iter().map(|r| r.id).collect();
            (p.query.len(), q_ids.len(), p.gallery.len())
        };
        assert_eq!(counts(ProtocolName::A2G), (3046, 1523, 15_533));
        assert_eq!(counts(ProtocolName::G2A), (3046, 1523, 7717));
        assert_eq!(counts(ProtocolName::G2AG), (3046, 1523, 20_204));
    }
}
