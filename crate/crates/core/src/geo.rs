//! Geographic points and great-circle distance.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
}

/// A latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint<T = f64> {
    pub lat: T,
    pub lon: T,
}

impl<T: Float> GeoPoint<T> {
    pub fn new(lat: T, lon: T) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let lat_max = T::from(90.0).unwrap();
        let lon_max = T::from(180.0).unwrap();
        if !self.lat.is_finite() || self.lat.abs() > lat_max {
            return Err(GeoError::Latitude(self.lat.to_f64().unwrap_or(f64::NAN)));
        }
        if !self.lon.is_finite() || self.lon.abs() > lon_max {
            return Err(GeoError::Longitude(self.lon.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(())
    }

    /// Point displaced by the given east/north offsets in meters, using a
    /// local equirectangular approximation. Handy for building fixtures.
    pub fn offset_m(&self, east_m: T, north_m: T) -> Self {
        let r = T::from(EARTH_RADIUS_M).unwrap();
        let dlat = (north_m / r).to_degrees();
        let dlon = (east_m / (r * self.lat.to_radians().cos())).to_degrees();
        GeoPoint {
            lat: self.lat + dlat,
            lon: self.lon + dlon,
        }
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m<T: Float>(a: &GeoPoint<T>, b: &GeoPoint<T>) -> T {
    let two = T::one() + T::one();
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let s1 = (dphi / two).sin();
    let s2 = (dlambda / two).sin();
    let h = s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2;
    // rounding can push h a hair outside [0, 1]
    let h = h.max(T::zero()).min(T::one());
    two * T::from(EARTH_RADIUS_M).unwrap() * h.sqrt().asin()
}
