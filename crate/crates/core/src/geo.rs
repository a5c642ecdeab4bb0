//! Geographic primitives shared by the extraction, localization and
//! evaluation stages.
//!
//! Distances are great-circle distances on a sphere. Radii elsewhere in the
//! crate are kilometers; degree radii are converted with [`deg_to_km`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean earth radius used for every distance computation.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Kilometers per degree of arc, the conversion used for degree-stepped radii.
pub const KM_PER_DEGREE: f64 = 111.0;

/// A latitude/longitude pair in degrees.
///
/// Construct through [`GeoCoord::new`], which rejects latitudes outside
/// `[-90, 90]` and wraps longitudes into `[-180, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "RawCoord")]
pub struct GeoCoord {
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct RawCoord {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawCoord> for GeoCoord {
    type Error = Error;

    fn try_from(raw: RawCoord) -> Result<Self> {
        GeoCoord::new(raw.lat, raw.lon)
    }
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidCoord { lat, lon });
        }
        Ok(GeoCoord {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Point reached by travelling `distance_km` from `self` along the initial
    /// bearing `bearing_deg` (clockwise from north).
    pub fn destination(&self, bearing_deg: f64, distance_km: f64) -> GeoCoord {
        let delta = distance_km / EARTH_RADIUS_KM;
        let theta = bearing_deg.to_radians();
        let phi1 = self.lat.to_radians();
        let lambda1 = self.lon.to_radians();

        let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
        let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
        let lambda2 = lambda1
            + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);

        GeoCoord {
            lat: phi2.to_degrees().clamp(-90.0, 90.0),
            lon: normalize_lon(lambda2.to_degrees()),
        }
    }

    /// Total order on (lat, lon), used for deterministic tie-breaking.
    pub fn total_cmp(&self, other: &GeoCoord) -> std::cmp::Ordering {
        self.lat
            .total_cmp(&other.lat)
            .then(self.lon.total_cmp(&other.lon))
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        lon
    } else {
        let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
        if wrapped == -180.0 && lon > 0.0 {
            180.0
        } else {
            wrapped
        }
    }
}

/// Great-circle distance in kilometers (haversine formula).
pub fn haversine_km(a: GeoCoord, b: GeoCoord) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();

    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Converts a non-negative angular radius in degrees to kilometers.
pub fn deg_to_km(degrees: f64) -> Result<f64> {
    if degrees.is_nan() || degrees < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degree radius must be non-negative, got {degrees}"
        )));
    }
    Ok(degrees * KM_PER_DEGREE)
}

/// Median of a sorted, non-empty slice; mean of the middle pair for even lengths.
pub fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median of an unsorted, non-empty list of values.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    median_sorted(values)
}

/// Component-wise median of latitudes and longitudes.
///
/// Longitudes are treated arithmetically; inputs spanning more than 180
/// degrees of longitude are logged since the result may land far from every
/// input point.
pub fn coordinate_median(points: &[GeoCoord]) -> Result<GeoCoord> {
    if points.is_empty() {
        return Err(Error::Empty("coordinate list"));
    }
    let mut lats: Vec<f64> = points.iter().map(|p| p.lat).collect();
    let mut lons: Vec<f64> = points.iter().map(|p| p.lon).collect();
    let lat = median(&mut lats);
    let lon = median(&mut lons);
    if lons[lons.len() - 1] - lons[0] > 180.0 {
        log::warn!(
            "median over {} points spans the antimeridian ({:.3}..{:.3})",
            points.len(),
            lons[0],
            lons[lons.len() - 1]
        );
    }
    Ok(GeoCoord { lat, lon })
}
