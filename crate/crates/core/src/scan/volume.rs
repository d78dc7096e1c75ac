//! Scans over `(frames, width, height)` volumes.

use serde::Serialize;

use super::{GridDims, Permutation, ScanError, ScanFamily, ScanOrder, ScanScheme, Zigzag};
use crate::error::{Result, ZigmaError};

/// Spatial, spatial, temporal: the default factorised layer pattern.
pub const DEFAULT_FACTORIZED: &str = "sst";

/// Frame-major raster flattening.
pub struct Sweep3d;

impl ScanOrder for Sweep3d {
    fn name(&self) -> &'static str {
        "sweep3d"
    }

    fn variant_count(&self) -> usize {
        1
    }

    fn build(&self, dims: &GridDims, _variant: usize) -> Result<Permutation> {
        let (t, w, h) = dims.as_volume("sweep3d")?;
        Ok(Permutation::identity(t * w * h))
    }
}

/// One continuous path through the whole volume: each frame is a plane
/// zigzag and odd frames run the previous frame's path backwards, so the
/// last cell of frame `t` sits directly behind the first cell of frame `t+1`.
///
/// Only variant 0 exists.
pub struct Zigzag3d;

impl ScanOrder for Zigzag3d {
    fn name(&self) -> &'static str {
        "zigzag3d"
    }

    fn variant_count(&self) -> usize {
        1
    }

    fn build(&self, dims: &GridDims, _variant: usize) -> Result<Permutation> {
        let (frames, w, h) = dims.as_volume("zigzag3d")?;
        let plane: Vec<usize> = Zigzag::path(w, h, 0).into_iter().map(|(x, y)| y * w + x).collect();
        let mut order = Vec::with_capacity(frames * w * h);
        for t in 0..frames {
            let base = t * w * h;
            if t % 2 == 0 {
                order.extend(plane.iter().map(|&c| base + c));
            } else {
                order.extend(plane.iter().rev().map(|&c| base + c));
            }
        }
        Ok(Permutation::new(order)?)
    }
}

/// One layer of a factorised space/time scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorizedStep {
    /// Per-frame plane zigzag; the sequence model sees `frames` independent
    /// sequences of `width * height` tokens, frames kept in order.
    Spatial {
        variant: usize,
        #[serde(serialize_with = "ser_perm")]
        perm: Permutation,
        segment_len: usize,
    },
    /// Per-location sweep along time; `width * height` independent sequences
    /// of `frames` tokens, visited in `frame_order`.
    Temporal {
        variant: usize,
        frame_order: Vec<usize>,
        #[serde(serialize_with = "ser_perm")]
        perm: Permutation,
        segment_len: usize,
    },
}

fn ser_perm<S: serde::Serializer>(p: &Permutation, s: S) -> std::result::Result<S::Ok, S::Error> {
    p.order().serialize(s)
}

impl FactorizedStep {
    pub fn perm(&self) -> &Permutation {
        match self {
            FactorizedStep::Spatial { perm, .. } | FactorizedStep::Temporal { perm, .. } => perm,
        }
    }

    /// Length of each independent sequence after the permutation is applied.
    pub fn segment_len(&self) -> usize {
        match self {
            FactorizedStep::Spatial { segment_len, .. } | FactorizedStep::Temporal { segment_len, .. } => *segment_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FactorizedPlan {
    pub pattern: String,
    pub steps: Vec<FactorizedStep>,
}

/// Builds the per-layer orders for a pattern over `{s, t}`. The `k`-th `s`
/// uses plane zigzag variant `k % 8`; the `k`-th `t` sweeps forward when
/// `k` is even and backward when odd.
pub fn factorized_plan(dims: &GridDims, pattern: &str) -> Result<FactorizedPlan> {
    if pattern.is_empty() || pattern.chars().any(|c| c != 's' && c != 't') {
        return Err(ScanError::BadSchemeString(pattern.to_string()).into());
    }
    dims.check_positive()?;
    let (frames, w, h) = dims.as_volume("factorized")?;
    let plane = w * h;
    let (mut n_s, mut n_t) = (0, 0);
    let mut steps = Vec::with_capacity(pattern.len());
    for c in pattern.chars() {
        if c == 's' {
            let variant = n_s % 8;
            n_s += 1;
            let inner: Vec<usize> = Zigzag::path(w, h, variant).into_iter().map(|(x, y)| y * w + x).collect();
            let order = (0..frames).flat_map(|t| inner.iter().map(move |&c| t * plane + c)).collect();
            steps.push(FactorizedStep::Spatial {
                variant,
                perm: Permutation::new(order)?,
                segment_len: plane,
            });
        } else {
            let variant = n_t % 2;
            n_t += 1;
            let frame_order = temporal_sweep(frames, variant)?;
            let order = (0..plane)
                .flat_map(|cell| frame_order.iter().map(move |&t| t * plane + cell))
                .collect();
            steps.push(FactorizedStep::Temporal {
                variant,
                frame_order,
                perm: Permutation::new(order)?,
                segment_len: frames,
            });
        }
    }
    Ok(FactorizedPlan {
        pattern: pattern.to_string(),
        steps,
    })
}

/// Frame visiting order of a temporal sweep: variant 0 forward, 1 backward.
pub fn temporal_sweep(frames: usize, variant: usize) -> Result<Vec<usize>> {
    match variant {
        0 => Ok((0..frames).collect()),
        1 => Ok((0..frames).rev().collect()),
        _ => Err(ZigmaError::UnsupportedVariant {
            family: "temporal sweep",
            variant,
            count: 2,
        }),
    }
}

/// Result of a volume scan request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scan3d {
    Single(Permutation),
    Factorized(FactorizedPlan),
}

impl Scan3d {
    /// Volume scan for `scheme`; the factorised family uses the default pattern.
    pub fn generate(scheme: &ScanScheme) -> Result<Scan3d> {
        match scheme.family {
            ScanFamily::Sweep3d => Ok(Scan3d::Single(Sweep3d.generate(&scheme.dims, scheme.variant)?)),
            ScanFamily::Zigzag3d => Ok(Scan3d::Single(Zigzag3d.generate(&scheme.dims, scheme.variant)?)),
            ScanFamily::FactorizedSt => Ok(Scan3d::Factorized(factorized_plan(&scheme.dims, DEFAULT_FACTORIZED)?)),
            other => Err(ZigmaError::Config(format!("{other} is not a volume scan"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::validate;

    #[test]
    fn single_frame_spatial_step_is_plane_zigzag() {
        let plan = factorized_plan(&GridDims::volume(1, 3, 3), "s").unwrap();
        let plane = Zigzag.generate(&GridDims::plane(3, 3), 0).unwrap();
        assert_eq!(plan.steps[0].perm(), &plane);
    }

    #[test]
    fn zigzag3d_two_cube_is_continuous() {
        let d = GridDims::volume(2, 2, 2);
        let p = Zigzag3d.generate(&d, 0).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(validate(p.order(), &d).unwrap().breaks, 0);
    }

    #[test]
    fn backward_temporal_sweep() {
        assert_eq!(temporal_sweep(3, 1).unwrap(), [2, 1, 0]);
        let plan = factorized_plan(&GridDims::volume(3, 1, 1), "tt").unwrap();
        match &plan.steps[1] {
            FactorizedStep::Temporal { frame_order, .. } => assert_eq!(frame_order, &[2, 1, 0]),
            s => panic!("unexpected {s:?}"),
        }
    }

    #[test]
    fn default_pattern_is_sst() {
        let plan = factorized_plan(&GridDims::volume(2, 2, 2), DEFAULT_FACTORIZED).unwrap();
        let kinds: Vec<bool> = plan.steps.iter().map(|s| matches!(s, FactorizedStep::Spatial { .. })).collect();
        assert_eq!(kinds, [true, true, false]);
        assert_eq!(plan.steps[2].segment_len(), 2);
    }

    #[test]
    fn pattern_rejects_other_letters() {
        assert!(factorized_plan(&GridDims::volume(2, 2, 2), "sxt").is_err());
        assert!(factorized_plan(&GridDims::volume(2, 2, 2), "").is_err());
    }

    #[test]
    fn zigzag3d_has_only_variant_zero() {
        assert!(Zigzag3d.generate(&GridDims::volume(2, 2, 2), 1).is_err());
    }

    #[test]
    fn plane_dims_rejected_for_volume_scans() {
        assert!(Zigzag3d.generate(&GridDims::plane(2, 2), 0).is_err());
    }
}
