//! Basketball plays: the one-play-per-line text format, court
//! normalisation, team splits and a converter for SportVU JSON exports.
//!
//! Play format, whitespace separated on a single line:
//!
//! ```text
//! <play-id> then PLAY_STEPS blocks, each holding 11 entities × (x y z):
//! the ball first, then 5 attackers, then 5 defenders
//! ```
//!
//! Raw coordinates are court feet with the origin at a corner
//! (`0..94 × 0..50`).

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::{Extent, Point};
use crate::scene::{DatasetKind, Scene};

pub const PLAY_STEPS: usize = 50;
pub const TEAM_SIZE: usize = 5;
pub const ENTITIES: usize = 1 + 2 * TEAM_SIZE;
pub const COURT_LENGTH: f64 = 94.0;
pub const COURT_WIDTH: f64 = 50.0;
pub const FRAME_RATE: f64 = 5.0;
const SOURCE_RATE: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Team {
    Attack,
    Defense,
}

impl std::str::FromStr for Team {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "atk" | "attack" => Ok(Team::Attack),
            "def" | "defense" => Ok(Team::Defense),
            other => Err(Error::Config(format!("unknown team `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlayRecord {
    pub id: String,
    /// `ball[step] = [x, y, z]`; parsed and otherwise unused.
    pub ball: Vec<[f64; 3]>,
    /// `players[p][step]`; players `0..5` attack, `5..10` defend.
    pub players: Vec<Vec<Point>>,
}

impl PlayRecord {
    pub fn team(&self, team: Team) -> &[Vec<Point>] {
        match team {
            Team::Attack => &self.players[..TEAM_SIZE],
            Team::Defense => &self.players[TEAM_SIZE..],
        }
    }
}

/// Court extent after [`normalize_plays`].
pub fn court_extent() -> Extent {
    Extent::new(
        -COURT_LENGTH / 2.0,
        -COURT_WIDTH / 2.0,
        COURT_LENGTH / 2.0,
        COURT_WIDTH / 2.0,
    )
    .expect("court extent")
}

pub fn parse_plays(text: &str, path: &Path) -> Result<Vec<PlayRecord>> {
    let mut plays = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut fields = raw.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let values = fields
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("bad number `{f}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        let expected = PLAY_STEPS * ENTITIES * 3;
        if values.len() != expected {
            return Err(err(format!("expected {expected} values, found {}", values.len())));
        }
        let mut ball = Vec::with_capacity(PLAY_STEPS);
        let mut players = (0..2 * TEAM_SIZE).map(|_| Vec::with_capacity(PLAY_STEPS)).collect::<Vec<_>>();
        for block in values.chunks_exact(ENTITIES * 3) {
            ball.push([block[0], block[1], block[2]]);
            for (p, track) in players.iter_mut().enumerate() {
                let e = &block[(p + 1) * 3..(p + 2) * 3];
                track.push([e[0], e[1]]);
            }
        }
        plays.push(PlayRecord {
            id: id.to_string(),
            ball,
            players,
        });
    }
    Ok(plays)
}

pub fn load_plays(path: &Path) -> Result<Vec<PlayRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_plays(&text, path)
}

/// Serialises plays; player `z` is written as 0.
pub fn write_plays(plays: &[PlayRecord]) -> String {
    let mut out = String::new();
    for play in plays {
        out.push_str(&play.id);
        for step in 0..PLAY_STEPS {
            let b = play.ball[step];
            out.push_str(&format!(" {} {} {}", b[0], b[1], b[2]));
            for track in &play.players {
                let p = track[step];
                out.push_str(&format!(" {} {} 0", p[0], p[1]));
            }
        }
        out.push('\n');
    }
    out
}

/// Moves the origin to the court centre and mirrors plays whose attackers
/// sit on the left half so that every play attacks towards `+x`.
pub fn normalize_plays(plays: &[PlayRecord]) -> Vec<PlayRecord> {
    let (cx, cy) = (COURT_LENGTH / 2.0, COURT_WIDTH / 2.0);
    plays
        .iter()
        .map(|play| {
            let attack = play.team(Team::Attack);
            let count = (attack.len() * PLAY_STEPS) as f64;
            let mean_x = attack.iter().flatten().map(|p| p[0] - cx).sum::<f64>() / count;
            let sign = if mean_x < 0.0 { -1.0 } else { 1.0 };
            PlayRecord {
                id: play.id.clone(),
                ball: play
                    .ball
                    .iter()
                    .map(|b| [sign * (b[0] - cx), b[1] - cy, b[2]])
                    .collect(),
                players: play
                    .players
                    .iter()
                    .map(|t| t.iter().map(|p| [sign * (p[0] - cx), p[1] - cy]).collect())
                    .collect(),
            }
        })
        .collect()
}

/// The five-agent scene of one team. Expects normalised plays.
pub fn split_team(play: &PlayRecord, team: Team) -> Result<Scene> {
    Scene::fully_present(
        play.team(team).to_vec(),
        DatasetKind::Sports,
        FRAME_RATE,
        court_extent(),
    )
}

fn num(v: &Value) -> Option<f64> {
    v.as_f64().or_else(|| v.as_str()?.parse().ok())
}

/// Converts a SportVU JSON export (`{"gameid", "events": [{"eventId",
/// "moments": [[quarter, ms, game_clock, shot_clock, _, [[team, player, x,
/// y, z] × 11]]]}]}`) into plays.
///
/// Moments are downsampled from 25 Hz to 5 Hz and cut into consecutive
/// 50-step plays; a chunk is kept only if every sampled moment has the ball
/// plus the same ten players. The attacking team is the one whose players
/// are on average closer to the ball.
pub fn convert_sportvu(json: &str) -> Result<Vec<PlayRecord>> {
    let bad = |msg: &str| Error::Config(format!("sportvu: {msg}"));
    let root: Value = serde_json::from_str(json).map_err(|e| bad(&e.to_string()))?;
    let game = root
        .get("gameid")
        .map(|g| g.as_str().map(str::to_string).unwrap_or_else(|| g.to_string()))
        .unwrap_or_else(|| "game".to_string());
    let events = root
        .get("events")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing `events` array"))?;

    let mut plays = Vec::new();
    for (ei, event) in events.iter().enumerate() {
        let event_id = event
            .get("eventId")
            .map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()))
            .unwrap_or_else(|| ei.to_string());
        let Some(moments) = event.get("moments").and_then(Value::as_array) else {
            continue;
        };
        let sampled: Vec<Option<Frame>> = moments
            .iter()
            .step_by(SOURCE_RATE / FRAME_RATE as usize)
            .map(parse_moment)
            .collect();
        for (ci, chunk) in sampled.chunks_exact(PLAY_STEPS).enumerate() {
            if let Some(play) = chunk_to_play(chunk, format!("{game}-{event_id}-{ci}")) {
                plays.push(play);
            }
        }
    }
    Ok(plays)
}

struct Frame {
    ball: [f64; 3],
    /// `(team id, player id, position)` sorted by team then player.
    players: Vec<(i64, i64, Point)>,
}

fn parse_moment(m: &Value) -> Option<Frame> {
    let entities = m.as_array()?.get(5)?.as_array()?;
    let mut ball = None;
    let mut players = Vec::new();
    for e in entities {
        let e = e.as_array()?;
        let team = num(e.first()?)? as i64;
        let player = num(e.get(1)?)? as i64;
        let (x, y) = (num(e.get(2)?)?, num(e.get(3)?)?);
        if team == -1 {
            ball = Some([x, y, e.get(4).and_then(num).unwrap_or(0.0)]);
        } else {
            players.push((team, player, [x, y]));
        }
    }
    players.sort_by_key(|&(t, p, _)| (t, p));
    let teams: Vec<i64> = players.iter().map(|p| p.0).collect();
    let valid = players.len() == 2 * TEAM_SIZE
        && teams[..TEAM_SIZE].iter().all(|&t| t == teams[0])
        && teams[TEAM_SIZE..].iter().all(|&t| t == teams[TEAM_SIZE])
        && teams[0] != teams[TEAM_SIZE];
    valid.then_some(Frame { ball: ball?, players })
}

fn chunk_to_play(chunk: &[Option<Frame>], id: String) -> Option<PlayRecord> {
    let frames: Vec<&Frame> = chunk.iter().map(Option::as_ref).collect::<Option<_>>()?;
    let roster: Vec<(i64, i64)> = frames[0].players.iter().map(|p| (p.0, p.1)).collect();
    if frames
        .iter()
        .any(|f| f.players.iter().map(|p| (p.0, p.1)).ne(roster.iter().copied()))
    {
        return None;
    }
    let mut dist = [0.0; 2];
    for f in &frames {
        for (i, p) in f.players.iter().enumerate() {
            dist[i / TEAM_SIZE] += (p.2[0] - f.ball[0]).hypot(p.2[1] - f.ball[1]);
        }
    }
    let (atk, def) = if dist[0] <= dist[1] { (0, 1) } else { (1, 0) };
    let mut players = (0..2 * TEAM_SIZE).map(|_| Vec::with_capacity(PLAY_STEPS)).collect::<Vec<_>>();
    for f in &frames {
        for (slot, team) in [atk, def].into_iter().enumerate() {
            for k in 0..TEAM_SIZE {
                players[slot * TEAM_SIZE + k].push(f.players[team * TEAM_SIZE + k].2);
            }
        }
    }
    Some(PlayRecord {
        id,
        ball: frames.iter().map(|f| f.ball).collect(),
        players,
    })
}
