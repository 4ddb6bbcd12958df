//! Check-in TSV parsing, frequency filtering, vocabularies and the
//! leave-one-out split.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{encode_geohash5, local_time_features, AreaCode, GeoPoint};

/// Timestamp layout of the public check-in dumps, e.g. `Tue Apr 03 18:00:09 +0000 2012`.
pub const TIMESTAMP_FORMAT: &str = "%a %b %d %H:%M:%S %z %Y";

pub const DAYS: usize = 7;
pub const SLOTS: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckIn {
    pub user_id: String,
    pub venue_id: String,
    pub category_id: String,
    pub category_name: String,
    pub point: GeoPoint,
    pub timezone_offset_minutes: i32,
    pub utc: DateTime<Utc>,
    /// 0-based position among the parsed records; breaks timestamp ties.
    pub order: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub lines: usize,
    pub parsed: usize,
    pub malformed: usize,
    /// First few problems as `(1-based line, reason)`.
    pub errors: Vec<(usize, String)>,
}

const MAX_REPORTED_ERRORS: usize = 20;

fn parse_line(line: &str, order: usize) -> std::result::Result<RawCheckIn, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 8 {
        return Err(format!("expected 8 columns, found {}", cols.len()));
    }
    let lat: f64 = cols[4].trim().parse().map_err(|_| format!("bad latitude {:?}", cols[4]))?;
    let lon: f64 = cols[5].trim().parse().map_err(|_| format!("bad longitude {:?}", cols[5]))?;
    let point = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
    let offset: i32 = cols[6].trim().parse().map_err(|_| format!("bad timezone offset {:?}", cols[6]))?;
    if offset.abs() > crate::geodata::MAX_OFFSET_MINUTES {
        return Err(format!("timezone offset {offset} out of range"));
    }
    let utc = DateTime::parse_from_str(cols[7].trim(), TIMESTAMP_FORMAT)
        .map_err(|e| format!("bad timestamp {:?}: {e}", cols[7]))?
        .with_timezone(&Utc);
    Ok(RawCheckIn {
        user_id: cols[0].to_string(),
        venue_id: cols[1].to_string(),
        category_id: cols[2].to_string(),
        category_name: cols[3].to_string(),
        point,
        timezone_offset_minutes: offset,
        utc,
        order,
    })
}

/// Parses tab-separated check-ins. Blank lines are ignored; malformed lines
/// are skipped and counted. Non-UTF-8 bytes are replaced rather than
/// rejected (the public dumps contain a few Latin-1 category names).
pub fn parse_tsv_reader<R: BufRead>(mut reader: R) -> std::io::Result<(Vec<RawCheckIn>, ParseReport)> {
    let mut out = Vec::new();
    let mut report = ParseReport::default();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        report.lines += 1;
        let text = String::from_utf8_lossy(&buf);
        let line = text.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, out.len()) {
            Ok(rec) => out.push(rec),
            Err(reason) => {
                report.malformed += 1;
                if report.errors.len() < MAX_REPORTED_ERRORS {
                    report.errors.push((report.lines, reason));
                }
            }
        }
    }
    report.parsed = out.len();
    Ok((out, report))
}

pub fn parse_tsv(path: impl AsRef<Path>) -> Result<(Vec<RawCheckIn>, ParseReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tsv_reader(BufReader::new(file)).map_err(|e| Error::io(path, e))
}

pub fn format_tsv_line(r: &RawCheckIn) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.user_id,
        r.venue_id,
        r.category_id,
        r.category_name,
        r.point.lat(),
        r.point.lon(),
        r.timezone_offset_minutes,
        r.utc.format(TIMESTAMP_FORMAT)
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_poi_count: usize,
    pub max_history: usize,
    pub min_history: usize,
    /// Repeat the passes until nothing changes. Off by default: POI counts
    /// are taken once, before truncation.
    pub until_stable: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_poi_count: 5,
            max_history: 500,
            min_history: 3,
            until_stable: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub input: usize,
    pub dropped_rare_poi: usize,
    pub rare_pois: usize,
    pub truncated: usize,
    pub dropped_short_users: usize,
    pub dropped_short_checkins: usize,
    pub output: usize,
}

/// Sort key for chronological order with input-order tie breaking.
fn chrono_key(r: &RawCheckIn) -> (DateTime<Utc>, usize) {
    (r.utc, r.order)
}

fn filter_once(raw: Vec<RawCheckIn>, cfg: &FilterConfig, report: &mut FilterReport) -> Vec<RawCheckIn> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &raw {
        *counts.entry(r.venue_id.as_str()).or_default() += 1;
    }
    let rare: Vec<String> = counts
        .iter()
        .filter(|(_, c)| **c < cfg.min_poi_count)
        .map(|(v, _)| v.to_string())
        .collect();
    report.rare_pois += rare.len();
    let keep_poi: HashMap<String, bool> = counts
        .into_iter()
        .map(|(v, c)| (v.to_string(), c >= cfg.min_poi_count))
        .collect();
    let before = raw.len();
    let survivors: Vec<RawCheckIn> = raw.into_iter().filter(|r| keep_poi[&r.venue_id]).collect();
    report.dropped_rare_poi += before - survivors.len();

    // per-user recency truncation, then minimum length
    let mut per_user: BTreeMap<&str, Vec<&RawCheckIn>> = BTreeMap::new();
    for r in &survivors {
        per_user.entry(r.user_id.as_str()).or_default().push(r);
    }
    let mut keep: Vec<bool> = vec![false; survivors.len()];
    let index_of: HashMap<usize, usize> = survivors.iter().enumerate().map(|(i, r)| (r.order, i)).collect();
    for (_, mut recs) in per_user {
        recs.sort_by_key(|r| chrono_key(r));
        if recs.len() > cfg.max_history {
            report.truncated += recs.len() - cfg.max_history;
            recs.drain(..recs.len() - cfg.max_history);
        }
        if recs.len() < cfg.min_history {
            report.dropped_short_users += 1;
            report.dropped_short_checkins += recs.len();
            continue;
        }
        for r in recs {
            keep[index_of[&r.order]] = true;
        }
    }
    survivors
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect()
}

/// Drops check-ins at rare POIs, keeps each user's most recent
/// `max_history` check-ins, then drops users left with fewer than
/// `min_history`. Output keeps input order.
pub fn filter_dataset(raw: Vec<RawCheckIn>, cfg: &FilterConfig) -> (Vec<RawCheckIn>, FilterReport) {
    let mut report = FilterReport {
        input: raw.len(),
        ..Default::default()
    };
    let mut cur = filter_once(raw, cfg, &mut report);
    if cfg.until_stable {
        loop {
            let n = cur.len();
            cur = filter_once(cur, cfg, &mut report);
            if cur.len() == n {
                break;
            }
        }
    }
    report.output = cur.len();
    (cur, report)
}

/// Dense first-occurrence index over values of `T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Indexer<T: Eq + Hash + Clone> {
    items: Vec<T>,
    index: HashMap<T, usize>,
}

impl<T: Eq + Hash + Clone> Default for Indexer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Eq + Hash + Clone> Indexer<T> {
    pub fn new() -> Self {
        Indexer {
            items: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_items(items: Vec<T>) -> Self {
        let mut ix = Self::new();
        for it in items {
            ix.intern(it);
        }
        ix
    }

    pub fn intern(&mut self, item: T) -> usize {
        if let Some(&i) = self.index.get(&item) {
            return i;
        }
        let i = self.items.len();
        self.index.insert(item.clone(), i);
        self.items.push(item);
        i
    }

    pub fn get(&self, item: &T) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, i: usize) -> &T {
        &self.items[i]
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    pub users: Indexer<String>,
    pub pois: Indexer<String>,
    pub categories: Indexer<String>,
    pub areas: Indexer<AreaCode>,
    /// Category of each POI (first occurrence).
    pub poi_category: Vec<usize>,
    /// Area of each POI, from its first-seen coordinates.
    pub poi_area: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
    pub areas: usize,
}

impl Vocab {
    pub fn sizes(&self) -> VocabSizes {
        VocabSizes {
            users: self.users.len(),
            pois: self.pois.len(),
            categories: self.categories.len(),
            areas: self.areas.len(),
        }
    }
}

pub fn build_vocab(filtered: &[RawCheckIn]) -> Result<Vocab> {
    if filtered.is_empty() {
        return Err(Error::InvalidArgument("cannot build a vocabulary from zero check-ins".into()));
    }
    let mut v = Vocab::default();
    for r in filtered {
        v.users.intern(r.user_id.clone());
        let cat = v.categories.intern(r.category_id.clone());
        let before = v.pois.len();
        v.pois.intern(r.venue_id.clone());
        if v.pois.len() > before {
            let area = v.areas.intern(encode_geohash5(r.point));
            v.poi_category.push(cat);
            v.poi_area.push(area);
        }
    }
    Ok(v)
}

/// One encoded visit. `dow` is 1..=7 (Monday = 1), `slot` 0..=23.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckIn {
    pub poi: usize,
    pub category: usize,
    pub dow: u8,
    pub slot: u8,
    pub area: usize,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user: usize,
    pub checkins: Vec<CheckIn>,
}

/// Leave-one-out layout for one user: the last check-in is the test target
/// and, optionally, the one before it is held out for validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: usize,
    pub len: usize,
    pub test: usize,
    pub validation: Option<usize>,
}

impl UserSplit {
    /// Positions usable as training targets are `< train_end`.
    pub fn train_end(&self) -> usize {
        self.validation.unwrap_or(self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub users: Vec<UserSplit>,
}

impl DatasetSplit {
    pub fn leave_one_out(histories: &[UserHistory], validation: bool) -> Self {
        DatasetSplit {
            users: histories
                .iter()
                .map(|h| {
                    let len = h.checkins.len();
                    UserSplit {
                        user: h.user,
                        len,
                        test: len - 1,
                        validation: (validation && len >= 3).then(|| len - 2),
                    }
                })
                .collect(),
        }
    }
}

/// Encoded histories ordered by user index.
pub fn encode_histories(filtered: &[RawCheckIn], vocab: &Vocab) -> Result<Vec<UserHistory>> {
    let mut per_user: BTreeMap<usize, Vec<&RawCheckIn>> = BTreeMap::new();
    for r in filtered {
        let u = vocab
            .users
            .get(&r.user_id)
            .ok_or_else(|| Error::InvalidArgument(format!("user {} not in vocabulary", r.user_id)))?;
        per_user.entry(u).or_default().push(r);
    }
    let mut out = Vec::with_capacity(per_user.len());
    for (user, mut recs) in per_user {
        recs.sort_by_key(|r| chrono_key(r));
        let mut checkins = Vec::with_capacity(recs.len());
        for r in recs {
            let poi = vocab
                .pois
                .get(&r.venue_id)
                .ok_or_else(|| Error::InvalidArgument(format!("POI {} not in vocabulary", r.venue_id)))?;
            let t = local_time_features(r.utc, r.timezone_offset_minutes)?;
            checkins.push(CheckIn {
                poi,
                category: vocab.poi_category[poi],
                dow: t.day_of_week,
                slot: t.time_slot,
                area: vocab.poi_area[poi],
                timestamp: r.utc.timestamp(),
            });
        }
        out.push(UserHistory { user, checkins });
    }
    Ok(out)
}

pub fn encode_and_split(
    filtered: &[RawCheckIn],
    vocab: &Vocab,
    validation: bool,
) -> Result<(Vec<UserHistory>, DatasetSplit)> {
    let histories = encode_histories(filtered, vocab)?;
    let split = DatasetSplit::leave_one_out(&histories, validation);
    Ok((histories, split))
}

/// An encoded corpus: vocabulary plus per-user histories.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub histories: Vec<UserHistory>,
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub parse: ParseReport,
    pub filter: FilterReport,
}

impl Dataset {
    /// Filter, index and encode parsed check-ins.
    pub fn from_raw(raw: Vec<RawCheckIn>, cfg: &FilterConfig) -> Result<(Dataset, FilterReport)> {
        let (filtered, report) = filter_dataset(raw, cfg);
        let vocab = build_vocab(&filtered)?;
        let histories = encode_histories(&filtered, &vocab)?;
        Ok((Dataset { vocab, histories }, report))
    }

    pub fn from_tsv(path: impl AsRef<Path>, cfg: &FilterConfig) -> Result<(Dataset, IngestReport)> {
        let (raw, parse) = parse_tsv(path)?;
        let (ds, filter) = Dataset::from_raw(raw, cfg)?;
        Ok((ds, IngestReport { parse, filter }))
    }

    pub fn split(&self, validation: bool) -> DatasetSplit {
        DatasetSplit::leave_one_out(&self.histories, validation)
    }

    pub fn num_checkins(&self) -> usize {
        self.histories.iter().map(|h| h.checkins.len()).sum()
    }

    /// Restricts to the first `n` users (by index) and re-indexes POIs,
    /// categories and areas to those still referenced.
    pub fn take_users(&self, n: usize) -> Dataset {
        let mut vocab = Vocab::default();
        let mut poi_map: HashMap<usize, usize> = HashMap::new();
        let mut histories = Vec::new();
        for h in self.histories.iter().take(n) {
            let user = vocab.users.intern(self.vocab.users.item(h.user).clone());
            let mut checkins = Vec::with_capacity(h.checkins.len());
            for c in &h.checkins {
                let poi = *poi_map.entry(c.poi).or_insert_with(|| {
                    let p = vocab.pois.intern(self.vocab.pois.item(c.poi).clone());
                    let cat = vocab.categories.intern(self.vocab.categories.item(c.category).clone());
                    let area = vocab.areas.intern(*self.vocab.areas.item(c.area));
                    vocab.poi_category.push(cat);
                    vocab.poi_area.push(area);
                    p
                });
                checkins.push(CheckIn {
                    poi,
                    category: vocab.poi_category[poi],
                    area: vocab.poi_area[poi],
                    ..*c
                });
            }
            histories.push(UserHistory { user, checkins });
        }
        Dataset { vocab, histories }
    }
}

pub const ENCODED_FORMAT: &str = "poirec-encoded";
pub const ENCODED_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EncodedHeader {
    format: String,
    version: u32,
    users: Vec<String>,
    pois: Vec<String>,
    categories: Vec<String>,
    areas: Vec<String>,
    poi_category: Vec<usize>,
    poi_area: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct EncodedUser {
    user: usize,
    /// `[poi, category, dow, slot, area, unix_seconds]` per check-in.
    checkins: Vec<(usize, usize, u8, u8, usize, i64)>,
}

/// Writes the line-delimited JSON encoding: one header line with the
/// vocabularies, then one line per user history.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = EncodedHeader {
        format: ENCODED_FORMAT.into(),
        version: ENCODED_VERSION,
        users: ds.vocab.users.items().to_vec(),
        pois: ds.vocab.pois.items().to_vec(),
        categories: ds.vocab.categories.items().to_vec(),
        areas: ds.vocab.areas.items().iter().map(|a| a.as_string()).collect(),
        poi_category: ds.vocab.poi_category.clone(),
        poi_area: ds.vocab.poi_area.clone(),
    };
    let mut write_line = |s: String| -> Result<()> {
        w.write_all(s.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for h in &ds.histories {
        let u = EncodedUser {
            user: h.user,
            checkins: h
                .checkins
                .iter()
                .map(|c| (c.poi, c.category, c.dow, c.slot, c.area, c.timestamp))
                .collect(),
        };
        write_line(serde_json::to_string(&u).expect("history serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: EncodedHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != ENCODED_FORMAT || header.version != ENCODED_VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let areas = header
        .areas
        .iter()
        .map(|a| AreaCode::parse(a))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocab {
        users: Indexer::from_items(header.users),
        pois: Indexer::from_items(header.pois),
        categories: Indexer::from_items(header.categories),
        areas: Indexer::from_items(areas),
        poi_category: header.poi_category,
        poi_area: header.poi_area,
    };
    let sizes = vocab.sizes();
    if vocab.poi_category.len() != sizes.pois || vocab.poi_area.len() != sizes.pois {
        return Err(bad("POI attribute tables do not match the POI vocabulary".into()));
    }
    let mut histories = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let u: EncodedUser = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        let mut checkins = Vec::with_capacity(u.checkins.len());
        for (poi, category, dow, slot, area, timestamp) in u.checkins {
            if poi >= sizes.pois
                || category >= sizes.categories
                || area >= sizes.areas
                || !(1..=7).contains(&dow)
                || slot as usize >= SLOTS
                || u.user >= sizes.users
            {
                return Err(bad(format!("line {}: index out of range", i + 2)));
            }
            checkins.push(CheckIn {
                poi,
                category,
                dow,
                slot,
                area,
                timestamp,
            });
        }
        histories.push(UserHistory { user: u.user, checkins });
    }
    Ok(Dataset { vocab, histories })
}
