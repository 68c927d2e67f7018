//! Scan geometry: tomo angle lists, ptycho raster grids, and rotation of
//! volumes about the vertical (`y`) axis into beam coordinates.
//!
//! Rotation maps an output voxel at rotated-frame position `(z_r, x_r)`
//! (relative to the grid centre, in nm) to the source position
//! `x = cos(a) x_r + sin(a) z_r`, `z = -sin(a) x_r + cos(a) z_r`, sampled
//! bilinearly in `(z, x)` with zero outside the source grid. `y` is never
//! resampled, so the interpolation is trilinear with an exact `y` weight.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ComplexField2D, Volume, VolumeKind};

/// `n` uniformly spaced angles (degrees) spanning `[-half_range, half_range]`.
pub fn make_angles(n: usize, half_range: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one tomo angle".into()));
    }
    if n == 1 && half_range == 0.0 {
        return Ok(vec![0.0]);
    }
    if !(half_range > 0.0 && half_range.is_finite()) {
        return Err(Error::InvalidArgument(format!("angular half-range must be > 0, got {half_range}")));
    }
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let step = 2.0 * half_range / (n - 1) as f64;
    let mut angles: Vec<f64> = (0..n).map(|i| -half_range + i as f64 * step).collect();
    // Enforce exact symmetry against accumulated rounding.
    for i in 0..n / 2 {
        let a = 0.5 * (angles[n - 1 - i] - angles[i]);
        angles[i] = -a;
        angles[n - 1 - i] = a;
    }
    if n % 2 == 1 {
        angles[n / 2] = 0.0;
    }
    Ok(angles)
}

fn grid_1d(extent: f64, footprint: f64, overlap: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap must be in [0, 1), got {overlap}")));
    }
    if !(footprint > 0.0) || footprint > extent + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "probe footprint {footprint} nm does not fit extent {extent} nm"
        )));
    }
    let step = footprint * (1.0 - overlap);
    if step >= extent {
        return Err(Error::InvalidArgument(format!("scan step {step} nm >= extent {extent} nm")));
    }
    let tol = 1e-9 * extent;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let p = k as f64 * step;
        if p + footprint > extent + tol {
            break;
        }
        out.push(p);
        k += 1;
    }
    let last = *out.last().expect("footprint fits, so 0 is a position");
    if last + footprint < extent - tol {
        out.push(extent - footprint);
    }
    Ok(out)
}

/// Raster of probe-window origins `[y, x]` in nm with step
/// `footprint * (1 - overlap)` covering `extent = [ey, ex]`.
pub fn make_ptycho_grid(extent: [f64; 2], footprint: f64, overlap: f64) -> Result<Vec<[f64; 2]>> {
    let ys = grid_1d(extent[0], footprint, overlap)?;
    let xs = grid_1d(extent[1], footprint, overlap)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| [y, x])).collect())
}

/// Tomo angles plus per-angle ptycho positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPlan {
    pub angles_deg: Vec<f64>,
    /// Window origins `[y, x]` in nm, one list per angle.
    pub positions_nm: Vec<Vec<[f64; 2]>>,
    pub overlap: f64,
    pub pixel_pitch_nm: f64,
    /// Positions rounded to whole pixels; what simulation and solver use.
    pub offsets_px: Vec<Vec<[usize; 2]>>,
}

impl ScanPlan {
    pub fn new(
        angles_deg: Vec<f64>,
        positions_nm: Vec<Vec<[f64; 2]>>,
        overlap: f64,
        pixel_pitch_nm: f64,
    ) -> Result<Self> {
        if angles_deg.is_empty() {
            return Err(Error::InvalidArgument("scan plan has no angles".into()));
        }
        if angles_deg.len() != positions_nm.len() {
            return Err(Error::Shape(format!(
                "{} angles but {} position lists",
                angles_deg.len(),
                positions_nm.len()
            )));
        }
        if !(pixel_pitch_nm > 0.0) {
            return Err(Error::InvalidArgument("pixel pitch must be > 0".into()));
        }
        let offsets_px = positions_nm
            .iter()
            .map(|list| {
                list.iter()
                    .map(|&[y, x]| {
                        let (py, px) = ((y / pixel_pitch_nm).round(), (x / pixel_pitch_nm).round());
                        if py < 0.0 || px < 0.0 || !py.is_finite() || !px.is_finite() {
                            return Err(Error::OutOfBounds(format!("negative position [{y}, {x}] nm")));
                        }
                        Ok([py as usize, px as usize])
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScanPlan {
            angles_deg,
            positions_nm,
            overlap,
            pixel_pitch_nm,
            offsets_px,
        })
    }

    /// The same raster at every angle.
    pub fn uniform(angles_deg: Vec<f64>, positions: Vec<[f64; 2]>, overlap: f64, pixel_pitch_nm: f64) -> Result<Self> {
        let per = vec![positions; angles_deg.len()];
        Self::new(angles_deg, per, overlap, pixel_pitch_nm)
    }

    /// Standard desk-scale plan: `n` angles over `+-half_range`, windows of
    /// `window_px` pixels rastered over a `lateral = [ny, nx]` pixel field.
    pub fn standard(
        n: usize,
        half_range: f64,
        lateral: [usize; 2],
        window_px: usize,
        overlap: f64,
        pixel_pitch_nm: f64,
    ) -> Result<Self> {
        let angles = make_angles(n, half_range)?;
        let extent = [lateral[0] as f64 * pixel_pitch_nm, lateral[1] as f64 * pixel_pitch_nm];
        let grid = make_ptycho_grid(extent, window_px as f64 * pixel_pitch_nm, overlap)?;
        Self::uniform(angles, grid, overlap, pixel_pitch_nm)
    }

    pub fn len(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_deg.is_empty()
    }

    /// Total number of exposures across all angles.
    pub fn exposure_count(&self) -> usize {
        self.offsets_px.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt = ScanPlan::new(
            self.angles_deg.clone(),
            self.positions_nm.clone(),
            self.overlap,
            self.pixel_pitch_nm,
        )?;
        if rebuilt.offsets_px != self.offsets_px {
            return Err(Error::Config("plan offsets disagree with positions".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let plan: ScanPlan = crate::config::read_json(path)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Output grid for a rotation: `(z, x)` counts and pitches; `y` is shared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneGrid {
    pub nz: usize,
    pub nx: usize,
    pub pz: f64,
    pub px: f64,
}

impl PlaneGrid {
    pub fn of(v: &Volume) -> Self {
        let [nz, _, nx] = v.dims();
        let [pz, _, px] = v.pitch();
        PlaneGrid { nz, nx, pz, px }
    }

    /// Beam-frame grid at `angle_deg`: same `x` sampling, with enough rows
    /// along the beam to hold the whole rotated grid. Equals `self` at 0.
    pub fn beam(&self, angle_deg: f64) -> PlaneGrid {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let depth = self.nz as f64 * self.pz * c.abs() + self.nx as f64 * self.px * s.abs();
        let rows = (depth / self.pz - 1e-9).ceil().max(1.0) as usize;
        PlaneGrid { nz: rows.max(self.nz), ..*self }
    }
}

/// Precomputed bilinear weights of one rotation in the `(z, x)` plane.
#[derive(Debug, Clone)]
pub struct RotationMap {
    src: PlaneGrid,
    dst: PlaneGrid,
    /// Per destination `(z, x)` cell: up to four `(source plane index, weight)`.
    taps: Vec<[(u32, f64); 4]>,
}

impl RotationMap {
    pub fn new(src: PlaneGrid, dst: PlaneGrid, angle_deg: f64) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let identity = angle_deg == 0.0 && src == dst;
        let (scz, scx) = ((src.nz as f64 - 1.0) / 2.0, (src.nx as f64 - 1.0) / 2.0);
        let (dcz, dcx) = ((dst.nz as f64 - 1.0) / 2.0, (dst.nx as f64 - 1.0) / 2.0);
        let mut taps = Vec::with_capacity(dst.nz * dst.nx);
        for zo in 0..dst.nz {
            for xo in 0..dst.nx {
                let mut cell = [(0u32, 0.0f64); 4];
                if identity {
                    cell[0] = ((zo * src.nx + xo) as u32, 1.0);
                    taps.push(cell);
                    continue;
                }
                let zr = (zo as f64 - dcz) * dst.pz;
                let xr = (xo as f64 - dcx) * dst.px;
                let x = c * xr + s * zr;
                let z = -s * xr + c * zr;
                let (zi, xi) = (z / src.pz + scz, x / src.px + scx);
                let (z0, x0) = (zi.floor(), xi.floor());
                let (fz, fx) = (zi - z0, xi - x0);
                let corners = [
                    (z0, x0, (1.0 - fz) * (1.0 - fx)),
                    (z0, x0 + 1.0, (1.0 - fz) * fx),
                    (z0 + 1.0, x0, fz * (1.0 - fx)),
                    (z0 + 1.0, x0 + 1.0, fz * fx),
                ];
                for (slot, &(zz, xx, w)) in cell.iter_mut().zip(corners.iter()) {
                    if w > 0.0 && zz >= 0.0 && xx >= 0.0 && (zz as usize) < src.nz && (xx as usize) < src.nx {
                        *slot = ((zz as usize * src.nx + xx as usize) as u32, w);
                    }
                }
                taps.push(cell);
            }
        }
        RotationMap { src, dst, taps }
    }

    pub fn dst(&self) -> PlaneGrid {
        self.dst
    }

    pub fn src(&self) -> PlaneGrid {
        self.src
    }

    /// Gathers `src` (shape `(src.nz, ny, src.nx)`) into `dst` layout.
    pub fn forward(&self, src: &[f64], ny: usize) -> Vec<f64> {
        let (snx, dnx) = (self.src.nx, self.dst.nx);
        let mut out = vec![0.0; self.dst.nz * ny * dnx];
        for zo in 0..self.dst.nz {
            for xo in 0..dnx {
                let cell = &self.taps[zo * dnx + xo];
                for &(plane, w) in cell.iter() {
                    if w == 0.0 {
                        continue;
                    }
                    let (zs, xs) = (plane as usize / snx, plane as usize % snx);
                    for y in 0..ny {
                        out[(zo * ny + y) * dnx + xo] += w * src[(zs * ny + y) * snx + xs];
                    }
                }
            }
        }
        out
    }

    /// Exact transpose of [`RotationMap::forward`].
    pub fn adjoint(&self, dst: &[f64], ny: usize) -> Vec<f64> {
        let (snx, dnx) = (self.src.nx, self.dst.nx);
        let mut out = vec![0.0; self.src.nz * ny * snx];
        for zo in 0..self.dst.nz {
            for xo in 0..dnx {
                let cell = &self.taps[zo * dnx + xo];
                for &(plane, w) in cell.iter() {
                    if w == 0.0 {
                        continue;
                    }
                    let (zs, xs) = (plane as usize / snx, plane as usize % snx);
                    for y in 0..ny {
                        out[(zs * ny + y) * snx + xs] += w * dst[(zo * ny + y) * dnx + xo];
                    }
                }
            }
        }
        out
    }
}

/// Rotates `v` by `angle_deg` about `y` onto a grid of the same shape.
pub fn rotate_about_y(v: &Volume, angle_deg: f64) -> Volume {
    let g = PlaneGrid::of(v);
    rotate_onto(v, angle_deg, g)
}

/// Rotates `v` about `y` onto an arbitrary `(z, x)` grid sharing the centre.
pub fn rotate_onto(v: &Volume, angle_deg: f64, dst: PlaneGrid) -> Volume {
    let [_, ny, _] = v.dims();
    let map = RotationMap::new(PlaneGrid::of(v), dst, angle_deg);
    let data = map.forward(v.data(), ny);
    Volume::new([dst.nz, ny, dst.nx], [dst.pz, v.pitch()[1], dst.px], v.kind(), data)
        .expect("rotation output shape is consistent")
}

/// Half-open row ranges partitioning `nz` rows into `bands` near-equal bands.
pub fn band_bounds(nz: usize, bands: usize) -> Vec<(usize, usize)> {
    (0..bands)
        .map(|l| (l * nz / bands, (l + 1) * nz / bands))
        .collect()
}

/// Rotates the phase volume onto its beam grid and sums it over `bands`
/// equal z-bands; returns one `ny * nx` phase map per band.
pub fn rotate_and_band(phase: &Volume, angle_deg: f64, bands: usize) -> Result<Vec<Vec<f64>>> {
    let [nz, ny, nx] = phase.dims();
    if bands == 0 || bands > nz {
        return Err(Error::InvalidArgument(format!(
            "slice count {bands} must be within 1..={nz}"
        )));
    }
    let beam = PlaneGrid::of(phase).beam(angle_deg);
    let rotated = rotate_onto(phase, angle_deg, beam);
    Ok(band_bounds(beam.nz, bands)
        .into_iter()
        .map(|(lo, hi)| {
            let mut acc = vec![0.0; ny * nx];
            for z in lo..hi {
                acc.iter_mut().zip(rotated.layer(z)).for_each(|(a, v)| *a += v);
            }
            acc
        })
        .collect())
}

/// Object transmission slices `exp(i * band phase)` at one tomo angle.
pub fn rotate_and_slice(phase: &Volume, angle_deg: f64, slices: usize) -> Result<Vec<ComplexField2D>> {
    let [_, ny, nx] = phase.dims();
    let [_, py, px] = phase.pitch();
    if (py - px).abs() > 1e-9 * px {
        return Err(Error::Shape("slices need square lateral pixels".into()));
    }
    rotate_and_band(phase, angle_deg, slices)?
        .into_iter()
        .map(|band| ComplexField2D::new(ny, nx, px, band.into_iter().map(|p| Complex64::from_polar(1.0, p)).collect()))
        .collect()
}

/// Inverse of banding: spreads each band's phase evenly over its rows of the
/// beam grid of `target`, then rotates back by `-angle_deg` onto `target`.
pub fn unband_and_rotate_back(
    band_phases: &[Vec<f64>],
    angle_deg: f64,
    ny: usize,
    target: PlaneGrid,
    pitch_y: f64,
) -> Result<Volume> {
    let bands = band_phases.len();
    if bands == 0 || bands > target.nz {
        return Err(Error::InvalidArgument(format!(
            "cannot spread {bands} bands over {} rows",
            target.nz
        )));
    }
    let grid = target.beam(angle_deg);
    let nx = target.nx;
    let mut beam = vec![0.0; grid.nz * ny * nx];
    for ((lo, hi), band) in band_bounds(grid.nz, bands).into_iter().zip(band_phases) {
        if band.len() != ny * nx {
            return Err(Error::Shape("band map does not match lateral grid".into()));
        }
        let share = 1.0 / (hi - lo) as f64;
        for z in lo..hi {
            beam[z * ny * nx..(z + 1) * ny * nx]
                .iter_mut()
                .zip(band)
                .for_each(|(b, &p)| *b = p * share);
        }
    }
    let beam = Volume::new([grid.nz, ny, nx], [grid.pz, pitch_y, grid.px], VolumeKind::Phase, beam)?;
    Ok(rotate_onto(&beam, -angle_deg, target))
}
