//! Koschmieder scattering: `I = I0 * t + A * (1 - t)` with `t = exp(-k d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Plane};

/// Floor on transmission when inverting the scattering model.
pub const DEFAULT_T_FLOOR: f32 = 0.1;

/// Scene depth in arbitrary, consistent units.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Plane);

impl DepthMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(bad) = plane.data().iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::invalid(format!("depth must be finite and non-negative, found {bad}")));
        }
        Ok(Self(plane))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }
}

/// Per-pixel transmission, strictly positive and at most 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap(Plane);

impl TransmissionMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(bad) = plane.data().iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::invalid(format!("transmission must lie in (0, 1], found {bad}")));
        }
        Ok(Self(plane))
    }

    /// Caller guarantees values in (0, 1].
    pub(crate) fn from_plane_unchecked(plane: Plane) -> Self {
        debug_assert!(plane.data().iter().all(|t| *t > 0.0 && *t <= 1.0));
        Self(plane)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn uniform(width: usize, height: usize, t: f32) -> Result<Self> {
        Self::new(Plane::filled(width, height, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    /// Extinction coefficient, in inverse depth units.
    pub k: f32,
    /// Atmospheric light per channel.
    pub airlight: [f32; 3],
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k >= 0.0) {
            return Err(Error::invalid(format!("extinction coefficient must be >= 0, got {}", self.k)));
        }
        validate_airlight(&self.airlight)
    }
}

fn validate_airlight(airlight: &[f32; 3]) -> Result<()> {
    if airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::invalid(format!("airlight channels must lie in [0, 1], got {airlight:?}")));
    }
    Ok(())
}

/// `t = exp(-k d)` elementwise.
pub fn transmission(depth: &DepthMap, k: f32) -> Result<TransmissionMap> {
    if !(k.is_finite() && k >= 0.0) {
        return Err(Error::invalid(format!("extinction coefficient must be >= 0, got {k}")));
    }
    // exp underflows to 0 for huge k*d; keep the map strictly positive.
    let plane = depth.plane().map(|d| (-k * d).exp().max(f32::MIN_POSITIVE));
    Ok(TransmissionMap::from_plane_unchecked(plane))
}

/// Renders haze over a clear image.
pub fn synthesize_haze(clear: &Image, depth: &DepthMap, params: &HazeParams) -> Result<Image> {
    params.validate()?;
    if clear.dims() != depth.plane().dims() {
        return Err(Error::shape(clear.dims(), depth.plane().dims()));
    }
    let t = transmission(depth, params.k)?;
    Ok(apply_transmission(clear, &t, &params.airlight))
}

/// `I0 * t + A * (1 - t)`, clamped to `[0, 1]`.
pub fn apply_transmission(clear: &Image, t: &TransmissionMap, airlight: &[f32; 3]) -> Image {
    let mut out = clear.clone();
    for (px, &tv) in out.data_mut().chunks_exact_mut(3).zip(t.plane().data()) {
        for (v, &a) in px.iter_mut().zip(airlight) {
            let (v64, t64, a64) = (*v as f64, tv as f64, a as f64);
            *v = (v64 * t64 + a64 * (1.0 - t64)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Inverts the scattering model: `(I - A) / max(t, t_floor) + A`, clamped.
pub fn restore_with_transmission(hazy: &Image, t: &TransmissionMap, airlight: &[f32; 3], t_floor: f32) -> Result<Image> {
    if !(t_floor > 0.0 && t_floor <= 1.0) {
        return Err(Error::invalid(format!("t_floor must lie in (0, 1], got {t_floor}")));
    }
    validate_airlight(airlight)?;
    if hazy.dims() != t.plane().dims() {
        return Err(Error::shape(hazy.dims(), t.plane().dims()));
    }
    let mut out = hazy.clone();
    for (px, &tv) in out.data_mut().chunks_exact_mut(3).zip(t.plane().data()) {
        let denom = tv.max(t_floor) as f64;
        for (v, &a) in px.iter_mut().zip(airlight) {
            let (v64, a64) = (*v as f64, a as f64);
            *v = ((v64 - a64) / denom + a64).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn depth(w: usize, h: usize, d: f32) -> DepthMap {
        DepthMap::new(Plane::filled(w, h, d)).unwrap()
    }

    #[test]
    fn transmission_closed_forms() {
        let d = DepthMap::new(Plane::from_fn(4, 3, |x, y| (x + y) as f32)).unwrap();
        assert!(transmission(&d, 0.0).unwrap().plane().data().iter().all(|&t| t == 1.0));
        assert!(transmission(&depth(4, 3, 0.0), 3.7).unwrap().plane().data().iter().all(|&t| t == 1.0));
        let half = transmission(&depth(2, 2, 1.0), std::f32::consts::LN_2).unwrap();
        assert!(half.plane().data().iter().all(|&t| (t - 0.5).abs() < 1e-7));
    }

    #[test]
    fn transmission_rejects_bad_inputs() {
        assert!(transmission(&depth(2, 2, 1.0), -0.1).is_err());
        assert!(DepthMap::new(Plane::filled(2, 2, f32::NAN)).is_err());
        assert!(DepthMap::new(Plane::filled(2, 2, -1.0)).is_err());
    }

    #[test]
    fn synthesize_examples() {
        let clear = Image::from_fn(3, 3, |x, y| [0.1 * x as f32, 0.2 * y as f32, 0.8]);
        let p0 = HazeParams { k: 0.0, airlight: [0.9, 0.9, 0.9] };
        assert_eq!(synthesize_haze(&clear, &depth(3, 3, 2.0), &p0).unwrap(), clear);

        let thick = HazeParams { k: 100.0, airlight: [0.7, 0.8, 0.9] };
        let hazy = synthesize_haze(&clear, &depth(3, 3, 10.0), &thick).unwrap();
        assert!(hazy.pixels().all(|p| p == [0.7, 0.8, 0.9]));

        let one = Image::filled(1, 1, [0.8; 3]);
        let p = HazeParams { k: std::f32::consts::LN_2, airlight: [1.0; 3] };
        let out = synthesize_haze(&one, &depth(1, 1, 1.0), &p).unwrap();
        assert!((out.pixel(0, 0)[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn synthesize_rejects_shape_mismatch() {
        let clear = Image::filled(3, 3, [0.5; 3]);
        let p = HazeParams { k: 1.0, airlight: [1.0; 3] };
        assert!(matches!(synthesize_haze(&clear, &depth(3, 2, 1.0), &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn restore_examples() {
        let hazy = Image::filled(1, 1, [0.9; 3]);
        let t = TransmissionMap::uniform(1, 1, 0.5).unwrap();
        let out = restore_with_transmission(&hazy, &t, &[1.0; 3], 0.1).unwrap();
        assert!((out.pixel(0, 0)[0] - 0.8).abs() < 1e-6);

        let img = Image::from_fn(4, 4, |x, y| [x as f32 / 4.0, y as f32 / 4.0, 0.3]);
        let ident = TransmissionMap::uniform(4, 4, 1.0).unwrap();
        assert_eq!(restore_with_transmission(&img, &ident, &[0.6; 3], 0.1).unwrap(), img);

        assert!(restore_with_transmission(&img, &ident, &[0.6; 3], 0.0).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Image, DepthMap, HazeParams)> {
        (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            (
                proptest::collection::vec(0f32..=1.0, w * h * 3),
                proptest::collection::vec(0f32..3.0, w * h),
                0f32..3.0,
                proptest::array::uniform3(0f32..=1.0),
            )
                .prop_map(move |(px, d, k, a)| {
                    (
                        Image::new(w, h, px).unwrap(),
                        DepthMap::new(Plane::new(w, h, d).unwrap()).unwrap(),
                        HazeParams { k, airlight: a },
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn roundtrip_where_transmission_above_floor((clear, d, p) in arb_case()) {
            let floor = DEFAULT_T_FLOOR;
            let hazy = synthesize_haze(&clear, &d, &p).unwrap();
            let t = transmission(&d, p.k).unwrap();
            let back = restore_with_transmission(&hazy, &t, &p.airlight, floor).unwrap();
            for (i, &tv) in t.plane().data().iter().enumerate() {
                if tv >= floor {
                    for c in 0..3 {
                        let (a, b) = (back.data()[i * 3 + c], clear.data()[i * 3 + c]);
                        prop_assert!((a - b).abs() <= 1e-6, "{} vs {} at t={}", a, b, tv);
                    }
                }
            }
        }

        #[test]
        fn outputs_stay_in_range((clear, d, p) in arb_case(), floor in 0.01f32..=1.0) {
            let hazy = synthesize_haze(&clear, &d, &p).unwrap();
            prop_assert!(hazy.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let t = transmission(&d, p.k).unwrap();
            let back = restore_with_transmission(&hazy, &t, &p.airlight, floor).unwrap();
            prop_assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn more_extinction_moves_toward_airlight((clear, d, p) in arb_case(), extra in 0f32..2.0) {
            let denser = HazeParams { k: p.k + extra, ..p };
            let a = synthesize_haze(&clear, &d, &p).unwrap();
            let b = synthesize_haze(&clear, &d, &denser).unwrap();
            for (i, (&va, &vb)) in a.data().iter().zip(b.data()).enumerate() {
                let air = p.airlight[i % 3];
                prop_assert!((vb - air).abs() <= (va - air).abs() + 1e-6);
            }
        }

        #[test]
        fn transmission_non_increasing(d0 in 0f32..5.0, dd in 0f32..5.0, k0 in 0f32..3.0, dk in 0f32..3.0) {
            let t = |d: f32, k: f32| transmission(&depth(1, 1, d), k).unwrap().plane().data()[0];
            prop_assert!(t(d0 + dd, k0) <= t(d0, k0));
            prop_assert!(t(d0, k0 + dk) <= t(d0, k0));
        }
    }
}
