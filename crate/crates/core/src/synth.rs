//! Synthetic check-in corpora with planted periodic structure.
//!
//! Each area holds `pois_per_area` venues. Every user has a few routines,
//! each an (area, weekend flag, time block) context bound to one venue, so
//! a user's venue is a fixed function of (day of week, hour, area). The
//! same context maps to different venues for different users: the context
//! alone is ambiguous, the user's own past visits in it are not. A `noise`
//! fraction of visits goes to a uniformly random venue instead.

use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, TimeZone, Utc, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{encode_geohash5, GeoPoint};
use crate::ingest::{format_tsv_line, RawCheckIn};
use crate::numerics::RngState;

pub const OFFSET_MINUTES: i32 = -240;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub areas: usize,
    pub pois_per_area: usize,
    pub categories: usize,
    /// Equal time blocks per day; must divide 24.
    pub blocks: usize,
    pub routines_per_user: usize,
    pub checkins_per_user: usize,
    pub noise: f64,
    /// Every venue ends up with at least this many visits.
    pub min_visits: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            areas: 20,
            pois_per_area: 15,
            categories: 10,
            blocks: 4,
            routines_per_user: 3,
            checkins_per_user: 24,
            noise: 0.1,
            min_visits: 5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn num_pois(&self) -> usize {
        self.areas * self.pois_per_area
    }

    pub fn block_hours(&self) -> usize {
        24 / self.blocks
    }

    /// Weekday/weekend times block.
    pub fn combos(&self) -> usize {
        2 * self.blocks
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.users == 0 || self.areas == 0 || self.categories == 0 || self.routines_per_user == 0 {
            return bad("users, areas, categories and routines must be positive".into());
        }
        if self.pois_per_area == 0 || self.pois_per_area > 20 {
            return bad("pois_per_area must be in 1..=20".into());
        }
        if self.areas > 40 {
            return bad("at most 40 areas are laid out".into());
        }
        if self.blocks == 0 || 24 % self.blocks != 0 {
            return bad(format!("blocks must divide 24, got {}", self.blocks));
        }
        if self.routines_per_user > self.combos() {
            return bad(format!("at most {} routines per user", self.combos()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        Ok(())
    }
}

/// A user's recurring visit: venue `poi` in `area` during `block` on
/// weekdays or weekends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Routine {
    pub area: usize,
    pub weekend: bool,
    pub block: usize,
    pub poi: usize,
}

fn is_weekend(d: NaiveDate) -> bool {
    matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

struct Visit {
    day: NaiveDate,
    hour: u32,
    minute: u32,
    poi: usize,
}

/// Venue coordinates: a 5 x 3 grid inside the area's geohash-5 cell.
fn venue_point(cfg: &SynthConfig, poi: usize) -> GeoPoint {
    let area = poi / cfg.pois_per_area;
    let j = poi % cfg.pois_per_area;
    let anchor = GeoPoint::new(40.55 + (area / 5) as f64 * 0.1, -74.25 + (area % 5) as f64 * 0.1).expect("valid anchor");
    let (lat0, lat1, lon0, lon1) = encode_geohash5(anchor).bounds();
    let lat = lat0 + (lat1 - lat0) * (0.1 + 0.8 * (j % 5) as f64 / 4.0);
    let lon = lon0 + (lon1 - lon0) * (0.2 + 0.6 * (j / 5) as f64 / 3.0);
    GeoPoint::new(lat, lon).expect("inside cell")
}

/// Generates the corpus as raw records, grouped by user in time order.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<RawCheckIn>> {
    Ok(generate_with_routines(cfg)?.0)
}

/// [`generate`] plus each user's routines.
pub fn generate_with_routines(cfg: &SynthConfig) -> Result<(Vec<RawCheckIn>, Vec<Vec<Routine>>)> {
    cfg.validate()?;
    let mut rng = RngState::derive(cfg.seed, 0);
    // Venues are dealt to routine slots in shuffled order, so every venue
    // is some user's routine once users * routines_per_user >= venues.
    let mut order: Vec<usize> = (0..cfg.num_pois()).collect();
    rng.shuffle(&mut order);
    let mut routines: Vec<Vec<Routine>> = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let mut mine: Vec<Routine> = Vec::with_capacity(cfg.routines_per_user);
        for k in 0..cfg.routines_per_user {
            let poi = order[(u * cfg.routines_per_user + k) % order.len()];
            let area = poi / cfg.pois_per_area;
            // one venue per context and user
            let free: Vec<usize> = (0..cfg.combos())
                .filter(|&c| !mine.iter().any(|r| r.area == area && r.weekend == (c >= cfg.blocks) && r.block == c % cfg.blocks))
                .collect();
            let c = free[rng.below(free.len())];
            mine.push(Routine {
                area,
                weekend: c >= cfg.blocks,
                block: c % cfg.blocks,
                poi,
            });
        }
        routines.push(mine);
    }
    let mut reachable = vec![false; cfg.num_pois()];
    for r in routines.iter().flatten() {
        reachable[r.poi] = true;
    }
    let catalog: Vec<usize> = (0..cfg.num_pois()).filter(|&p| reachable[p]).collect();

    let start = NaiveDate::from_ymd_opt(2012, 4, 2).expect("valid date");
    let mut users: Vec<(Vec<Routine>, Vec<Visit>)> = Vec::with_capacity(cfg.users);
    for routines in routines {
        let mut bag: Vec<usize> = (0..cfg.checkins_per_user).map(|v| v % routines.len()).collect();
        rng.shuffle(&mut bag);
        let mut day = start + Duration::days(rng.below(7) as i64);
        let mut visits = Vec::with_capacity(bag.len());
        for k in bag {
            let r = routines[k];
            day = next_day(day, r.weekend, &mut rng);
            let poi = if rng.uniform() < cfg.noise {
                catalog[rng.below(catalog.len())]
            } else {
                r.poi
            };
            visits.push(visit(cfg, &r, day, poi, &mut rng));
        }
        users.push((routines, visits));
    }
    top_up(cfg, &mut users, &mut rng);

    let mut out = Vec::new();
    for (u, (_, visits)) in users.iter().enumerate() {
        for v in visits {
            let local = v.day.and_hms_opt(v.hour, v.minute, 0).expect("valid time");
            let utc = Utc.from_utc_datetime(&(local - Duration::minutes(OFFSET_MINUTES as i64)));
            let cat = v.poi % cfg.categories;
            out.push(RawCheckIn {
                user_id: format!("{}", u + 1),
                venue_id: format!("venue{:05}", v.poi),
                category_id: format!("cat{cat:03}"),
                category_name: format!("Category {cat}"),
                point: venue_point(cfg, v.poi),
                timezone_offset_minutes: OFFSET_MINUTES,
                utc,
                order: out.len(),
            });
        }
    }
    let routines = users.into_iter().map(|(r, _)| r).collect();
    Ok((out, routines))
}

fn visit(cfg: &SynthConfig, r: &Routine, day: NaiveDate, poi: usize, rng: &mut RngState) -> Visit {
    let bh = cfg.block_hours();
    Visit {
        day,
        hour: (r.block * bh + rng.below(bh)) as u32,
        minute: rng.below(60) as u32,
        poi,
    }
}

fn next_day(mut day: NaiveDate, weekend: bool, rng: &mut RngState) -> NaiveDate {
    day += Duration::days(1 + rng.below(2) as i64);
    while is_weekend(day) != weekend {
        day += Duration::days(1);
    }
    day
}

/// Appends noise-free routine visits until every venue that occurs has at
/// least `min_visits` visits.
fn top_up(cfg: &SynthConfig, users: &mut [(Vec<Routine>, Vec<Visit>)], rng: &mut RngState) {
    let mut counts = vec![0usize; cfg.num_pois()];
    for (_, visits) in users.iter() {
        for v in visits {
            counts[v.poi] += 1;
        }
    }
    for poi in 0..cfg.num_pois() {
        if counts[poi] == 0 || counts[poi] >= cfg.min_visits {
            continue;
        }
        let owner = users.iter().position(|(rs, _)| rs.iter().any(|r| r.poi == poi));
        let Some(u) = owner else { continue };
        let (routines, visits) = &mut users[u];
        let r = *routines.iter().find(|r| r.poi == poi).expect("owner has routine");
        while counts[poi] < cfg.min_visits {
            let day = next_day(visits.last().map_or(NaiveDate::MIN, |v| v.day), r.weekend, rng);
            visits.push(visit(cfg, &r, day, poi, rng));
            counts[poi] += 1;
        }
    }
}

pub fn write_tsv(records: &[RawCheckIn], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", format_tsv_line(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
