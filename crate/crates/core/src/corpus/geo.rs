pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Equirectangular projection around a reference latitude, in degrees of latitude.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Equirect {
    lat0: f64,
    lon0: f64,
    cos_lat0: f64,
}

impl Equirect {
    pub(crate) fn around(lat0: f64, lon0: f64) -> Self {
        Self {
            lat0,
            lon0,
            cos_lat0: lat0.to_radians().cos().max(1e-6),
        }
    }

    pub(crate) fn project(&self, lat: f64, lon: f64) -> [f64; 2] {
        [(lon - self.lon0) * self.cos_lat0, lat - self.lat0]
    }

    pub(crate) fn unproject(&self, p: [f64; 2]) -> (f64, f64) {
        (p[1] + self.lat0, p[0] / self.cos_lat0 + self.lon0)
    }
}
