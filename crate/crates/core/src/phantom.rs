//! Synthetic layered IC-like phantoms.
//!
//! The z-axis is split into `layer_count` near-equal layers. Even layers hold
//! parallel wires (orientation cycling through the spec's set), odd layers
//! hold square vias on a regular site grid. Every voxel is metal or not.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::rng_for;
use crate::error::{Error, Result};
use crate::scanplan::band_bounds;
use crate::volume::{Volume, VolumeKind};

/// In-plane direction along which a layer's wires run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// Wires run along x.
    #[serde(rename = "0")]
    Deg0,
    /// Wires run along y.
    #[serde(rename = "90")]
    Deg90,
    /// Diagonal wires, for out-of-distribution tests.
    #[serde(rename = "45")]
    Deg45,
}

fn default_pitch_nm() -> f64 {
    14.0
}
fn default_phase_shift() -> f64 {
    0.05
}
fn default_orientations() -> Vec<Orientation> {
    vec![Orientation::Deg0, Orientation::Deg90]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Voxel counts `(z, y, x)`.
    pub dims: [usize; 3],
    #[serde(default = "default_pitch_nm")]
    pub pitch_nm: f64,
    pub layer_count: usize,
    pub wire_width_min: usize,
    pub wire_width_max: usize,
    /// Wire centre-to-centre spacing; twice the drawn width when absent.
    #[serde(default)]
    pub wire_pitch: Option<usize>,
    pub via_density: f64,
    /// Via edge length; `wire_width_min` when absent.
    #[serde(default)]
    pub via_size: Option<usize>,
    /// Phase delay per metal voxel (radians).
    #[serde(default = "default_phase_shift")]
    pub metal_phase_shift: f64,
    #[serde(default = "default_orientations")]
    pub orientations: Vec<Orientation>,
    #[serde(default)]
    pub seed: u64,
    /// Empty voxels `(z, y, x)` left on each side of the layout.
    #[serde(default)]
    pub margin: [usize; 3],
}

impl PhantomSpec {
    /// A small default layout for desk-scale runs on an `n^3` grid.
    pub fn cube(n: usize, seed: u64) -> Self {
        PhantomSpec {
            dims: [n, n, n],
            pitch_nm: default_pitch_nm(),
            layer_count: 5.min(n),
            wire_width_min: 2.min(n),
            wire_width_max: 3.min(n),
            wire_pitch: None,
            via_density: 0.3,
            via_size: None,
            metal_phase_shift: default_phase_shift(),
            orientations: default_orientations(),
            seed,
            margin: [0; 3],
        }
    }

    /// Voxel counts of the patterned box inside the margins.
    pub fn interior(&self) -> [usize; 3] {
        let mut d = self.dims;
        for (v, m) in d.iter_mut().zip(self.margin) {
            *v = v.saturating_sub(2 * m);
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let [nz, ny, nx] = self.interior();
        if nz == 0 || ny == 0 || nx == 0 {
            return bad(format!("phantom dims {:?} leave no room inside margin {:?}", self.dims, self.margin));
        }
        if self.layer_count == 0 || self.layer_count > nz {
            return bad(format!("{} layers do not fit {nz} z-voxels", self.layer_count));
        }
        if self.wire_width_min == 0 || self.wire_width_min > self.wire_width_max {
            return bad("wire widths must satisfy 1 <= min <= max".into());
        }
        if self.wire_width_max > ny.min(nx) {
            return bad("wire width exceeds lateral extent".into());
        }
        if let Some(p) = self.wire_pitch {
            if p < self.wire_width_max {
                return bad("wire pitch must be >= the widest wire".into());
            }
        }
        if !(0.0..=1.0).contains(&self.via_density) {
            return bad(format!("via density {} outside [0, 1]", self.via_density));
        }
        if self.via_size == Some(0) {
            return bad("via size must be >= 1".into());
        }
        if !(self.metal_phase_shift >= 0.0 && self.metal_phase_shift.is_finite()) {
            return bad("metal phase shift must be finite and >= 0".into());
        }
        if !(self.pitch_nm > 0.0) {
            return bad("pitch must be > 0".into());
        }
        if self.orientations.is_empty() {
            return bad("orientation set is empty".into());
        }
        Ok(())
    }

    fn via_edge(&self) -> usize {
        self.via_size.unwrap_or(self.wire_width_min)
    }

    /// Expected metal fill fraction of the layout rule, averaged over seeds.
    pub fn expected_fill(&self) -> f64 {
        let [nz, ny, nx] = self.interior();
        let box_fraction = (nz * ny * nx) as f64 / self.dims.iter().product::<usize>() as f64;
        let widths = self.wire_width_min..=self.wire_width_max;
        let count = (self.wire_width_max - self.wire_width_min + 1) as f64;
        let wire_fill = match self.wire_pitch {
            None => 0.5,
            Some(p) => widths.map(|w| w as f64 / p as f64).sum::<f64>() / count,
        };
        let via_fill = self.via_density / 4.0;
        band_bounds(nz, self.layer_count)
            .into_iter()
            .enumerate()
            .map(|(k, (lo, hi))| {
                let f = if k % 2 == 0 { wire_fill } else { via_fill };
                f * (hi - lo) as f64
            })
            .sum::<f64>()
            / nz as f64
            * box_fraction
    }
}

/// Euclidean remainder for possibly negative offsets.
fn wrap(v: isize, m: usize) -> usize {
    v.rem_euclid(m as isize) as usize
}

fn wire_plane(ny: usize, nx: usize, width: usize, pitch: usize, offset: usize, o: Orientation) -> Vec<bool> {
    let mut plane = vec![false; ny * nx];
    for y in 0..ny {
        for x in 0..nx {
            let coord = match o {
                Orientation::Deg0 => y,
                Orientation::Deg90 => x,
                Orientation::Deg45 => x + y,
            };
            plane[y * nx + x] = wrap(coord as isize - offset as isize, pitch) < width;
        }
    }
    plane
}

fn via_plane(ny: usize, nx: usize, size: usize, density: f64, rng: &mut impl Rng) -> Vec<bool> {
    let site = 2 * size;
    let oy = rng.random_range(0..site) as isize;
    let ox = rng.random_range(0..site) as isize;
    let mut plane = vec![false; ny * nx];
    // Start one site early so partially visible sites at the edge exist too.
    let mut sy = oy - site as isize;
    while sy < ny as isize {
        let mut sx = ox - site as isize;
        while sx < nx as isize {
            if rng.random::<f64>() < density {
                for y in sy.max(0)..(sy + size as isize).min(ny as isize) {
                    for x in sx.max(0)..(sx + size as isize).min(nx as isize) {
                        plane[y as usize * nx + x as usize] = true;
                    }
                }
            }
            sx += site as isize;
        }
        sy += site as isize;
    }
    plane
}

/// Returns `(label, phase)` with `phase = label * metal_phase_shift`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let [nz, ny, nx] = spec.interior();
    let [_, fy, fx] = spec.dims;
    let [mz, my, mx] = spec.margin;
    let mut rng = rng_for(spec.seed, &[0x9_4a47]);
    let mut label = vec![0.0; spec.dims.iter().product()];
    let mut wire_layer = 0usize;
    for (k, (lo, hi)) in band_bounds(nz, spec.layer_count).into_iter().enumerate() {
        let plane = if k % 2 == 0 {
            let o = spec.orientations[wire_layer % spec.orientations.len()];
            wire_layer += 1;
            let width = rng.random_range(spec.wire_width_min..=spec.wire_width_max);
            let pitch = spec.wire_pitch.unwrap_or(2 * width);
            let offset = rng.random_range(0..pitch);
            wire_plane(ny, nx, width, pitch, offset, o)
        } else {
            via_plane(ny, nx, spec.via_edge(), spec.via_density, &mut rng)
        };
        for z in lo..hi {
            for y in 0..ny {
                let start = ((z + mz) * fy + y + my) * fx + mx;
                for (dst, &metal) in label[start..start + nx].iter_mut().zip(&plane[y * nx..(y + 1) * nx]) {
                    *dst = if metal { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let pitch = [spec.pitch_nm; 3];
    let label = Volume::new(spec.dims, pitch, VolumeKind::Label, label)?;
    let phase = label.map(VolumeKind::Phase, |v| v * spec.metal_phase_shift)?;
    Ok((label, phase))
}

/// Labels voxels whose phase exceeds `threshold`.
pub fn binarize_reference(phase: &Volume, threshold: f64) -> Result<Volume> {
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument("threshold must be finite".into()));
    }
    phase.map(VolumeKind::Label, |v| if v > threshold { 1.0 } else { 0.0 })
}
