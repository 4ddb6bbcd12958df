//! Per-step inputs drawn from a user's history: weekday masks for the
//! long-term module and the four context-filtered short-term sequences.
//!
//! Positions are 0-based; predicting the check-in at position `target`
//! may only look at positions `< target`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ingest::{CheckIn, DAYS, SLOTS};

/// Seven 0/1 masks over the first `target` check-ins, Monday first.
#[derive(Clone, Debug, PartialEq)]
pub struct DailyMasks {
    pub masks: [Vec<f64>; DAYS],
}

impl DailyMasks {
    pub fn len(&self) -> usize {
        self.masks[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn day(&self, dow: u8) -> &[f64] {
        &self.masks[dow as usize - 1]
    }
}

pub fn build_daily_masks(history: &[CheckIn], target: usize) -> DailyMasks {
    let masks = std::array::from_fn(|d| {
        history[..target]
            .iter()
            .map(|c| if c.dow as usize == d + 1 { 1.0 } else { 0.0 })
            .collect()
    });
    DailyMasks { masks }
}

/// A chronological POI sequence with the history positions it came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub positions: Vec<usize>,
    pub pois: Vec<usize>,
}

impl Sequence {
    fn from_positions(history: &[CheckIn], positions: Vec<usize>) -> Self {
        let pois = positions.iter().map(|&i| history[i].poi).collect();
        Sequence { positions, pois }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqConfig {
    /// Recent check-ins kept in S1.
    pub s1_window: usize,
    /// Most recent matches kept in S2, S3 and S4.
    pub cap: usize,
}

impl Default for SeqConfig {
    fn default() -> Self {
        SeqConfig { s1_window: 20, cap: 50 }
    }
}

fn keep_recent(mut positions: Vec<usize>, cap: usize) -> Vec<usize> {
    if positions.len() > cap {
        positions.drain(..positions.len() - cap);
    }
    positions
}

/// S1: the last `window` check-ins before `target`.
pub fn build_s1(history: &[CheckIn], target: usize, window: usize) -> Sequence {
    let start = target.saturating_sub(window);
    Sequence::from_positions(history, (start..target).collect())
}

/// S2: earlier check-ins in the current area.
pub fn build_s2(history: &[CheckIn], target: usize, area: usize, cap: usize) -> Sequence {
    let pos = (0..target).filter(|&i| history[i].area == area).collect();
    Sequence::from_positions(history, keep_recent(pos, cap))
}

/// Whether `slot` is within one hour of `center` on a 24-hour circle.
pub fn slot_in_window(slot: u8, center: u8) -> bool {
    let d = (slot as i32 - center as i32).rem_euclid(SLOTS as i32);
    d <= 1 || d == SLOTS as i32 - 1
}

/// S3: earlier check-ins whose slot is within ±1 hour (wrapping at midnight).
pub fn build_s3(history: &[CheckIn], target: usize, slot: u8, cap: usize) -> Sequence {
    let pos = (0..target).filter(|&i| slot_in_window(history[i].slot, slot)).collect();
    Sequence::from_positions(history, keep_recent(pos, cap))
}

/// S4: check-in positions present in both S2 and S3.
pub fn build_s4(s2: &Sequence, s3: &Sequence) -> Sequence {
    let (mut i, mut j) = (0, 0);
    let mut out = Sequence::default();
    while i < s2.len() && j < s3.len() {
        match s2.positions[i].cmp(&s3.positions[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.positions.push(s2.positions[i]);
                out.pois.push(s2.pois[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortTermSeqs {
    pub s1: Sequence,
    pub s2: Sequence,
    pub s3: Sequence,
    pub s4: Sequence,
}

impl ShortTermSeqs {
    pub fn get(&self, k: usize) -> &Sequence {
        match k {
            0 => &self.s1,
            1 => &self.s2,
            2 => &self.s3,
            3 => &self.s4,
            _ => panic!("short-term sequence index {k} out of range"),
        }
    }
}

pub fn build_short_term(history: &[CheckIn], target: usize, area: usize, slot: u8, cfg: &SeqConfig) -> ShortTermSeqs {
    let s2 = build_s2(history, target, area, cfg.cap);
    let s3 = build_s3(history, target, slot, cfg.cap);
    let s4 = build_s4(&s2, &s3);
    ShortTermSeqs {
        s1: build_s1(history, target, cfg.s1_window),
        s2,
        s3,
        s4,
    }
}

/// Known context at the moment of prediction plus the candidate POI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextQuery {
    pub poi: usize,
    pub category: usize,
    pub dow: u8,
    pub slot: u8,
    pub area: usize,
}

/// One line of the sequence dump: `user target S1=.. S2=.. S3=.. S4=..`,
/// each listing `position:poi` pairs.
pub fn dump_line(user: usize, target: usize, seqs: &ShortTermSeqs) -> String {
    let mut line = format!("{user}\t{target}");
    for (k, s) in [&seqs.s1, &seqs.s2, &seqs.s3, &seqs.s4].iter().enumerate() {
        let _ = write!(line, "\tS{}=", k + 1);
        let items: Vec<String> = s.positions.iter().zip(&s.pois).map(|(p, q)| format!("{p}:{q}")).collect();
        line.push_str(&items.join(","));
    }
    line
}
