//! TrajNet-style annotation files (`frame agent x y` per line) and their
//! segmentation into fixed-length scenes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Extent, Point};
use crate::scene::{DatasetKind, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame_id: i64,
    pub agent_id: i64,
    pub x: f64,
    pub y: f64,
}

fn parse_id(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    // some exports write ids as `12.0`
    let f: f64 = field.parse().ok()?;
    (f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

/// Parses annotation text. Blank lines are skipped; `path` only labels
/// errors.
pub fn parse_trajnet(text: &str, path: &Path) -> Result<Vec<TrackRecord>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(err(line, format!("expected 4 fields, found {}", fields.len())));
        }
        let frame_id = parse_id(fields[0])
            .ok_or_else(|| err(line, format!("bad frame id `{}`", fields[0])))?;
        let agent_id = parse_id(fields[1])
            .ok_or_else(|| err(line, format!("bad agent id `{}`", fields[1])))?;
        let coord = |s: &str| -> Result<f64> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(line, format!("bad coordinate `{s}`"))),
            }
        };
        let x = coord(fields[2])?;
        let y = coord(fields[3])?;
        if !seen.insert((frame_id, agent_id)) {
            return Err(err(
                line,
                format!("duplicate record for frame {frame_id}, agent {agent_id}"),
            ));
        }
        out.push(TrackRecord {
            frame_id,
            agent_id,
            x,
            y,
        });
    }
    Ok(out)
}

pub fn load_trajnet(path: &Path) -> Result<Vec<TrackRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_trajnet(&text, path)
}

pub fn write_trajnet(records: &[TrackRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {} {} {}\n", r.frame_id, r.agent_id, r.x, r.y));
    }
    out
}

/// Lays scenes end to end in time, `frame_step` frames per step, with
/// distinct agent ids per scene. Masked entries are omitted.
pub fn scenes_to_records(scenes: &[Scene], frame_step: i64) -> Vec<TrackRecord> {
    let mut out = Vec::new();
    let mut frame0 = 0i64;
    let mut agent0 = 0i64;
    for scene in scenes {
        for t in 0..scene.len() {
            for (i, track) in scene.positions.iter().enumerate() {
                if scene.mask[i][t] {
                    out.push(TrackRecord {
                        frame_id: frame0 + t as i64 * frame_step,
                        agent_id: agent0 + i as i64,
                        x: track[t][0],
                        y: track[t][1],
                    });
                }
            }
        }
        frame0 += scene.len() as i64 * frame_step;
        agent0 += scene.num_agents() as i64;
    }
    out
}

/// Smallest positive gap between distinct frame ids, or 1 for a single frame.
pub fn frame_step(records: &[TrackRecord]) -> i64 {
    let frames: BTreeSet<i64> = records.iter().map(|r| r.frame_id).collect();
    frames
        .iter()
        .zip(frames.iter().skip(1))
        .map(|(a, b)| b - a)
        .min()
        .unwrap_or(1)
}

/// Cuts the recording into windows of `obs + pred` frame slots, advancing
/// by `stride` slots. Agents seen in a window become rows; steps where an
/// agent has no record are masked. Windows without a fully present agent
/// are skipped. The extent of every scene is the bounding box of the whole
/// recording.
pub fn assemble_scenes(
    records: &[TrackRecord],
    obs: usize,
    pred: usize,
    stride: usize,
    frame_rate: f64,
) -> Result<Vec<Scene>> {
    let len = obs + pred;
    if len == 0 || stride == 0 {
        return Err(Error::invalid("assemble_scenes", "window and stride must be positive"));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let step = frame_step(records);
    let first = records.iter().map(|r| r.frame_id).min().expect("non-empty");
    let last = records.iter().map(|r| r.frame_id).max().expect("non-empty");
    let slots = ((last - first) / step + 1) as usize;
    let extent = Extent::bounding(records.iter().map(|r| [r.x, r.y]), 0.0)?;

    // slot -> agent -> position; off-grid frames are ignored
    let mut by_slot: Vec<BTreeMap<i64, Point>> = vec![BTreeMap::new(); slots];
    for r in records {
        let offset = r.frame_id - first;
        if offset % step == 0 {
            by_slot[(offset / step) as usize].insert(r.agent_id, [r.x, r.y]);
        }
    }

    let mut scenes = Vec::new();
    let mut start = 0;
    while start + len <= slots {
        let window = &by_slot[start..start + len];
        let agents: BTreeSet<i64> = window.iter().flat_map(|m| m.keys().copied()).collect();
        let mut positions = Vec::with_capacity(agents.len());
        let mut mask = Vec::with_capacity(agents.len());
        for id in &agents {
            let track: Vec<Option<Point>> = window.iter().map(|m| m.get(id).copied()).collect();
            positions.push(track.iter().map(|p| p.unwrap_or([0.0, 0.0])).collect());
            mask.push(track.iter().map(Option::is_some).collect::<Vec<bool>>());
        }
        if mask.iter().any(|m: &Vec<bool>| m.iter().all(|&b| b)) {
            scenes.push(Scene::new(positions, mask, DatasetKind::Sdd, frame_rate, extent)?);
        }
        start += stride;
    }
    Ok(scenes)
}

/// Loads every `*.txt` file under `dir` (sorted by name) and assembles its
/// scenes.
pub fn load_trajnet_dir(
    dir: &Path,
    obs: usize,
    pred: usize,
    stride: usize,
    frame_rate: f64,
) -> Result<Vec<Scene>> {
    let mut files: Vec<PathBuf> = if dir.is_file() {
        vec![dir.to_path_buf()]
    } else {
        fs::read_dir(dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect()
    };
    files.sort();
    let mut scenes = Vec::new();
    for f in files {
        let records = load_trajnet(&f)?;
        scenes.extend(assemble_scenes(&records, obs, pred, stride, frame_rate)?);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<TrackRecord>> {
        parse_trajnet(text, Path::new("test.txt"))
    }

    fn track(agent: i64, frames: std::ops::Range<i64>) -> Vec<TrackRecord> {
        frames
            .map(|f| TrackRecord {
                frame_id: f * 10,
                agent_id: agent,
                x: f as f64 * 0.5,
                y: agent as f64,
            })
            .collect()
    }

    #[test]
    fn parses_a_line() {
        let r = parse("0 1 2.5 3.0\n").unwrap();
        assert_eq!(
            r,
            vec![TrackRecord {
                frame_id: 0,
                agent_id: 1,
                x: 2.5,
                y: 3.0
            }]
        );
        assert_eq!(parse("10.0\t4.0  -1 1e-3").unwrap()[0].frame_id, 10);
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse("0 1 2 3\n1 1 2\n").unwrap_err().to_string();
        assert!(e.contains(":2:"), "{e}");
        let e = parse("0 1 2 3\n\n1 1 x 3\n").unwrap_err().to_string();
        assert!(e.contains(":3:") && e.contains("`x`"), "{e}");
        assert!(parse("0.5 1 2 3").is_err());
        assert!(parse("0 1 nan 3").is_err());
    }

    #[test]
    fn duplicates_rejected() {
        let e = parse("0 1 2 3\n0 1 4 5\n").unwrap_err().to_string();
        assert!(e.contains("duplicate"), "{e}");
    }

    #[test]
    fn reserialization_roundtrips() {
        let text = "0 1 2.5 3\n12 7 -0.1 1e-7\n";
        let r = parse(text).unwrap();
        assert_eq!(parse(&write_trajnet(&r)).unwrap(), r);
    }

    #[test]
    fn exact_fit_gives_one_scene() {
        let scenes = assemble_scenes(&track(1, 0..20), 8, 12, 20, 2.5).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].len(), 20);
    }

    #[test]
    fn partial_agent_is_masked() {
        let mut r = track(1, 0..20);
        r.extend(track(2, 5..15));
        let scenes = assemble_scenes(&r, 8, 12, 20, 2.5).unwrap();
        let m = &scenes[0].mask[1];
        assert_eq!(m.iter().filter(|&&b| b).count(), 10);
        assert!(!m[4] && m[5] && m[14] && !m[15]);
        assert_eq!(scenes[0].positions[1][0], [0.0, 0.0]);
    }

    #[test]
    fn window_count_arithmetic() {
        // (40 − 20) / 10 + 1
        let scenes = assemble_scenes(&track(1, 0..40), 8, 12, 10, 2.5).unwrap();
        assert_eq!(scenes.len(), 3);
    }

    #[test]
    fn windows_without_full_agent_are_dropped() {
        let mut r = track(1, 0..10);
        r.extend(track(2, 10..20));
        assert!(assemble_scenes(&r, 8, 12, 20, 2.5).unwrap().is_empty());
    }

    #[test]
    fn scenes_survive_a_records_roundtrip() {
        let mut r = track(1, 0..20);
        r.extend(track(2, 5..15));
        let scenes = assemble_scenes(&r, 8, 12, 20, 2.5).unwrap();
        let back = assemble_scenes(&scenes_to_records(&scenes, 10), 8, 12, 20, 2.5).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn frame_step_detection() {
        assert_eq!(frame_step(&track(1, 0..5)), 10);
        assert_eq!(frame_step(&track(1, 0..1)), 1);
    }
}
