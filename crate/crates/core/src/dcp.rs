//! Dark channel prior dehazing with guided-filter refinement.
//!
//! Pipeline: dark channel, airlight from the haziest pixels, coarse
//! transmission `1 - ω · dark(I / A)`, edge-aware refinement guided by the
//! hazy image, and finally inversion of the scattering model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze_model::{restore_with_transmission, TransmissionMap};
use crate::image::{Image, Plane, LUMA};

/// Lower clamp on transmission estimates before and after refinement.
pub const RAW_T_FLOOR: f32 = 1e-3;
/// Airlight channels at or below this make `I / A` ill-conditioned.
pub const MIN_AIRLIGHT: f32 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcpParams {
    pub patch_size: usize,
    /// Fraction of haze removed; 1 removes all of it.
    pub omega: f32,
    /// Share of the brightest dark-channel pixels searched for airlight.
    pub airlight_fraction: f32,
    pub t_floor: f32,
    pub guided_radius: usize,
    pub guided_eps: f32,
}

impl Default for DcpParams {
    fn default() -> Self {
        Self {
            patch_size: 15,
            omega: 0.95,
            airlight_fraction: 0.001,
            t_floor: 0.1,
            guided_radius: 40,
            guided_eps: 1e-3,
        }
    }
}

impl DcpParams {
    pub fn validate(&self) -> Result<()> {
        check_patch(self.patch_size)?;
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::invalid(format!("omega must lie in (0, 1], got {}", self.omega)));
        }
        check_fraction(self.airlight_fraction)?;
        if !(self.t_floor > 0.0 && self.t_floor <= 1.0) {
            return Err(Error::invalid(format!("t_floor must lie in (0, 1], got {}", self.t_floor)));
        }
        if !(self.guided_eps.is_finite() && self.guided_eps > 0.0) {
            return Err(Error::invalid(format!("guided filter eps must be > 0, got {}", self.guided_eps)));
        }
        Ok(())
    }
}

fn check_patch(patch: usize) -> Result<()> {
    if patch < 3 || patch % 2 == 0 {
        return Err(Error::invalid(format!("patch size must be odd and >= 3, got {patch}")));
    }
    Ok(())
}

fn check_fraction(fraction: f32) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("airlight fraction must lie in (0, 1], got {fraction}")));
    }
    Ok(())
}

/// Square minimum filter with edge-replicated borders, done as a row pass
/// then a column pass.
fn min_filter(plane: &Plane, patch: usize) -> Plane {
    let (w, h) = plane.dims();
    let r = (patch / 2) as isize;
    let rows = Plane::from_fn(w, h, |x, y| {
        (-r..=r)
            .map(|d| plane.get((x as isize + d).clamp(0, w as isize - 1) as usize, y))
            .fold(f32::INFINITY, f32::min)
    });
    Plane::from_fn(w, h, |x, y| {
        (-r..=r)
            .map(|d| rows.get(x, (y as isize + d).clamp(0, h as isize - 1) as usize))
            .fold(f32::INFINITY, f32::min)
    })
}

/// Per-pixel minimum over channels and over a `patch × patch` neighbourhood.
pub fn dark_channel(image: &Image, patch_size: usize) -> Result<Plane> {
    check_patch(patch_size)?;
    Ok(min_filter(&image.channel_min(), patch_size))
}

/// Colour of the most luminous pixel among the `fraction` of pixels with the
/// highest dark channel.
pub fn estimate_airlight(image: &Image, dark: &Plane, fraction: f32) -> Result<[f32; 3]> {
    check_fraction(fraction)?;
    if image.dims() != dark.dims() {
        return Err(Error::shape(image.dims(), dark.dims()));
    }
    let n = dark.data().len();
    let take = ((fraction as f64 * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in raster order.
    order.sort_by(|&a, &b| dark.data()[b].total_cmp(&dark.data()[a]));
    let lum = |i: usize| {
        let p = &image.data()[i * 3..i * 3 + 3];
        LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
    };
    let best = order[..take]
        .iter()
        .copied()
        .fold(order[0], |best, i| if lum(i) > lum(best) { i } else { best });
    Ok(image.pixel(best % image.width(), best / image.width()))
}

/// Coarse transmission `1 - ω · dark(I / A)`, clamped to `[1e-3, 1]`.
pub fn estimate_transmission(image: &Image, airlight: &[f32; 3], omega: f32, patch_size: usize) -> Result<TransmissionMap> {
    if airlight.iter().any(|&a| a <= MIN_AIRLIGHT) {
        return Err(Error::IllConditionedAirlight(*airlight));
    }
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::invalid(format!("omega must lie in (0, 1], got {omega}")));
    }
    let mut normalized = image.clone();
    for px in normalized.data_mut().chunks_exact_mut(3) {
        for (v, a) in px.iter_mut().zip(airlight) {
            *v /= a;
        }
    }
    let dark = dark_channel(&normalized, patch_size)?;
    let t = dark.map(|d| (1.0 - omega * d).clamp(RAW_T_FLOOR, 1.0));
    Ok(TransmissionMap::from_plane_unchecked(t))
}

/// Mean over the `(2r+1)²` window clipped to the image, via an integral image.
fn box_mean(data: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut integral = vec![0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0f64;
        for x in 0..w {
            row += data[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Grey-guide guided filter of `t` steered by the luminance of `guide`.
pub fn refine_transmission(t: &TransmissionMap, guide: &Image, radius: usize, eps: f32) -> Result<TransmissionMap> {
    let (w, h) = guide.dims();
    if t.plane().dims() != (w, h) {
        return Err(Error::shape(guide.dims(), t.plane().dims()));
    }
    let g: Vec<f64> = guide.luminance().data().iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = t.plane().data().iter().map(|&v| v as f64).collect();
    let gg: Vec<f64> = g.iter().map(|v| v * v).collect();
    let gp: Vec<f64> = g.iter().zip(&p).map(|(a, b)| a * b).collect();
    let (mg, mp, mgg, mgp) = (box_mean(&g, w, h, radius), box_mean(&p, w, h, radius), box_mean(&gg, w, h, radius), box_mean(&gp, w, h, radius));
    let mut a = vec![0f64; w * h];
    let mut b = vec![0f64; w * h];
    for i in 0..w * h {
        let var = mgg[i] - mg[i] * mg[i];
        let cov = mgp[i] - mg[i] * mp[i];
        a[i] = cov / (var + eps as f64);
        b[i] = mp[i] - a[i] * mg[i];
    }
    let (ma, mb) = (box_mean(&a, w, h, radius), box_mean(&b, w, h, radius));
    let q: Vec<f32> = (0..w * h)
        .map(|i| ((ma[i] * g[i] + mb[i]) as f32).clamp(RAW_T_FLOOR, 1.0))
        .collect();
    Ok(TransmissionMap::from_plane_unchecked(Plane::new(w, h, q)?))
}

/// Intermediate products of [`dcp_dehaze_detailed`].
#[derive(Clone, Debug)]
pub struct DcpOutput {
    pub restored: Image,
    pub airlight: [f32; 3],
    pub coarse: TransmissionMap,
    pub refined: TransmissionMap,
}

pub fn dcp_dehaze_detailed(image: &Image, params: &DcpParams) -> Result<DcpOutput> {
    params.validate()?;
    let dark = dark_channel(image, params.patch_size)?;
    let airlight = estimate_airlight(image, &dark, params.airlight_fraction)?;
    let coarse = estimate_transmission(image, &airlight, params.omega, params.patch_size)?;
    let refined = refine_transmission(&coarse, image, params.guided_radius, params.guided_eps)?;
    let restored = restore_with_transmission(image, &refined, &airlight, params.t_floor)?;
    Ok(DcpOutput {
        restored,
        airlight,
        coarse,
        refined,
    })
}

pub fn dcp_dehaze(image: &Image, params: &DcpParams) -> Result<Image> {
    dcp_dehaze_detailed(image, params).map(|o| o.restored)
}
