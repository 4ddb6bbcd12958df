//! Geohash-5 area codes and local calendar features for check-ins.

use std::fmt;

use chrono::{DateTime, Datelike, Duration, Timelike, Utc};

use crate::error::{Error, Result};

pub const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
pub const GEOHASH_CHARS: usize = 5;
pub const GEOHASH_BITS: u32 = 25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    /// Latitude in `[-90, 90]`, longitude in `[-180, 180)`.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..180.0).contains(&lon) {
            return Err(Error::Coordinate { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// A geohash-5 cell. The integer form is the 25 interleaved bits,
/// longitude first, most significant bit first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AreaCode(u32);

impl AreaCode {
    pub fn from_bits(bits: u32) -> Result<Self> {
        if bits >= 1 << GEOHASH_BITS {
            return Err(Error::InvalidArgument(format!("geohash bits {bits} exceed 25 bits")));
        }
        Ok(AreaCode(bits))
    }

    pub fn parse(code: &str) -> Result<Self> {
        if code.len() != GEOHASH_CHARS {
            return Err(Error::InvalidArgument(format!("geohash {code:?} is not 5 characters")));
        }
        let mut bits = 0u32;
        for ch in code.bytes() {
            let v = GEOHASH_ALPHABET
                .iter()
                .position(|&a| a == ch)
                .ok_or_else(|| Error::InvalidArgument(format!("invalid geohash character {:?}", ch as char)))?;
            bits = (bits << 5) | v as u32;
        }
        Ok(AreaCode(bits))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn as_string(self) -> String {
        (0..GEOHASH_CHARS)
            .rev()
            .map(|i| GEOHASH_ALPHABET[((self.0 >> (5 * i)) & 31) as usize] as char)
            .collect()
    }

    /// Cell bounds as `(lat_min, lat_max, lon_min, lon_max)`.
    pub fn bounds(self) -> (f64, f64, f64, f64) {
        let (mut lat, mut lon) = ((-90.0, 90.0), (-180.0, 180.0));
        for k in 0..GEOHASH_BITS {
            let bit = (self.0 >> (GEOHASH_BITS - 1 - k)) & 1;
            let r: &mut (f64, f64) = if k % 2 == 0 { &mut lon } else { &mut lat };
            let mid = (r.0 + r.1) / 2.0;
            if bit == 1 {
                r.0 = mid;
            } else {
                r.1 = mid;
            }
        }
        (lat.0, lat.1, lon.0, lon.1)
    }

    pub fn center(self) -> GeoPoint {
        let (a, b, c, d) = self.bounds();
        GeoPoint {
            lat: (a + b) / 2.0,
            lon: (c + d) / 2.0,
        }
    }
}

impl fmt::Display for AreaCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_string())
    }
}

pub fn encode_geohash5(p: GeoPoint) -> AreaCode {
    let (mut lat, mut lon) = ((-90.0f64, 90.0f64), (-180.0f64, 180.0f64));
    let mut bits = 0u32;
    for k in 0..GEOHASH_BITS {
        let (r, v) = if k % 2 == 0 { (&mut lon, p.lon) } else { (&mut lat, p.lat) };
        let mid = (r.0 + r.1) / 2.0;
        bits <<= 1;
        if v >= mid {
            bits |= 1;
            r.0 = mid;
        } else {
            r.1 = mid;
        }
    }
    AreaCode(bits)
}

/// Day of week (ISO, Monday = 1) and local hour slot (0..=23).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LocalTimeFeatures {
    pub day_of_week: u8,
    pub time_slot: u8,
}

pub const MAX_OFFSET_MINUTES: i32 = 1440;

pub fn local_time_features(utc: DateTime<Utc>, offset_minutes: i32) -> Result<LocalTimeFeatures> {
    if offset_minutes.abs() > MAX_OFFSET_MINUTES {
        return Err(Error::InvalidArgument(format!(
            "timezone offset {offset_minutes} outside [-1440, 1440] minutes"
        )));
    }
    let local = utc.naive_utc() + Duration::minutes(offset_minutes as i64);
    Ok(LocalTimeFeatures {
        day_of_week: local.weekday().number_from_monday() as u8,
        time_slot: local.hour() as u8,
    })
}
