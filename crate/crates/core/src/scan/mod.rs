//! Token-order permutations for running a 1-D sequence model over 2-D and
//! 3-D grids.
//!
//! Every scan family implements [`ScanOrder`] and is looked up by name in a
//! [`ScanRegistry`]. Cells are indexed row-major: `y * width + x` in a plane
//! and `t * width * height + y * width + x` in a volume.

mod continuity;
mod double_index;
mod hilbert;
mod permutation;
mod render;
mod volume;
mod zigzag;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use continuity::{validate, ContinuityReport};
pub use double_index::{arrange_naive, LayerOrders};
pub use hilbert::{gilbert_path, Hilbert};
pub use permutation::{invert, Permutation};
pub use render::render_arrows;
pub use volume::{factorized_plan, FactorizedPlan, FactorizedStep, Scan3d, Sweep3d, Zigzag3d, DEFAULT_FACTORIZED};
pub use zigzag::{Sweep, Zigzag, ZigzagStart};

use crate::error::{Result, ZigmaError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScanError {
    #[error("index {index} repeated; not a bijection")]
    Repeated { index: usize },
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("expected [B, M, C] tokens, got shape {0:?}")]
    BadTokens(Vec<usize>),
    #[error("grid extents must be positive, got {0}")]
    EmptyGrid(GridDims),
    #[error("{family} needs a {expected} grid")]
    WrongRank { family: &'static str, expected: &'static str },
    #[error("scheme string may only contain 's' and 't', got {0:?}")]
    BadSchemeString(String),
    #[error("order receptive field must be in 1..=8, got {0}")]
    BadOrf(usize),
}

/// Grid extents. Planes are `(width, height)`; volumes add a leading frame count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridDims {
    Plane { width: usize, height: usize },
    Volume { frames: usize, width: usize, height: usize },
}

impl GridDims {
    pub fn plane(width: usize, height: usize) -> Self {
        GridDims::Plane { width, height }
    }

    pub fn volume(frames: usize, width: usize, height: usize) -> Self {
        GridDims::Volume { frames, width, height }
    }

    pub fn cells(&self) -> usize {
        match *self {
            GridDims::Plane { width, height } => width * height,
            GridDims::Volume { frames, width, height } => frames * width * height,
        }
    }

    pub fn extents(&self) -> Vec<usize> {
        match *self {
            GridDims::Plane { width, height } => vec![width, height],
            GridDims::Volume { frames, width, height } => vec![frames, width, height],
        }
    }

    /// `(x, y, t)` of a flat cell index.
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let (w, h) = match *self {
            GridDims::Plane { width, height } | GridDims::Volume { width, height, .. } => (width, height),
        };
        (idx % w, (idx / w) % h, idx / (w * h))
    }

    pub(crate) fn check_positive(&self) -> std::result::Result<(), ScanError> {
        if self.extents().iter().any(|&e| e == 0) {
            Err(ScanError::EmptyGrid(*self))
        } else {
            Ok(())
        }
    }

    pub(crate) fn as_plane(&self, family: &'static str) -> std::result::Result<(usize, usize), ScanError> {
        match *self {
            GridDims::Plane { width, height } => Ok((width, height)),
            _ => Err(ScanError::WrongRank { family, expected: "2-D" }),
        }
    }

    pub(crate) fn as_volume(&self, family: &'static str) -> std::result::Result<(usize, usize, usize), ScanError> {
        match *self {
            GridDims::Volume { frames, width, height } => Ok((frames, width, height)),
            _ => Err(ScanError::WrongRank { family, expected: "3-D" }),
        }
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GridDims::Plane { width, height } => write!(f, "{width}x{height}"),
            GridDims::Volume { frames, width, height } => write!(f, "{frames}x{width}x{height}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanFamily {
    Sweep,
    Zigzag,
    Hilbert,
    Sweep3d,
    Zigzag3d,
    FactorizedSt,
}

impl ScanFamily {
    pub fn name(self) -> &'static str {
        match self {
            ScanFamily::Sweep => "sweep",
            ScanFamily::Zigzag => "zigzag",
            ScanFamily::Hilbert => "hilbert",
            ScanFamily::Sweep3d => "sweep3d",
            ScanFamily::Zigzag3d => "zigzag3d",
            ScanFamily::FactorizedSt => "factorized",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            ScanFamily::Sweep,
            ScanFamily::Zigzag,
            ScanFamily::Hilbert,
            ScanFamily::Sweep3d,
            ScanFamily::Zigzag3d,
            ScanFamily::FactorizedSt,
        ]
        .into_iter()
        .find(|f| f.name() == name)
    }
}

impl fmt::Display for ScanFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative description of one scan order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanScheme {
    pub family: ScanFamily,
    pub variant: usize,
    pub dims: GridDims,
}

impl ScanScheme {
    pub fn new(family: ScanFamily, variant: usize, dims: GridDims) -> Self {
        ScanScheme { family, variant, dims }
    }
}

/// A scan family that turns grid extents into a token permutation.
pub trait ScanOrder: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of variants; valid indices are `0..variant_count()`.
    fn variant_count(&self) -> usize;

    /// Builds the order for `variant`. Implementations may assume the
    /// variant index has already been range-checked.
    fn build(&self, dims: &GridDims, variant: usize) -> Result<Permutation>;

    fn generate(&self, dims: &GridDims, variant: usize) -> Result<Permutation> {
        if variant >= self.variant_count() {
            return Err(ZigmaError::UnsupportedVariant {
                family: self.name(),
                variant,
                count: self.variant_count(),
            });
        }
        dims.check_positive()?;
        self.build(dims, variant)
    }
}

/// Scan families addressable by name.
pub struct ScanRegistry {
    orders: BTreeMap<&'static str, Box<dyn ScanOrder>>,
}

impl ScanRegistry {
    pub fn empty() -> Self {
        ScanRegistry { orders: BTreeMap::new() }
    }

    /// Sweep, zigzag, Hilbert, and the two single-permutation volume scans.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Sweep));
        r.register(Box::new(Zigzag));
        r.register(Box::new(Hilbert));
        r.register(Box::new(Sweep3d));
        r.register(Box::new(Zigzag3d));
        r
    }

    pub fn register(&mut self, order: Box<dyn ScanOrder>) {
        self.orders.insert(order.name(), order);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.orders.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn ScanOrder> {
        self.orders
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| ZigmaError::UnknownStrategy {
                kind: "scan order",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn generate(&self, scheme: &ScanScheme) -> Result<Permutation> {
        self.get(scheme.family.name())?.generate(&scheme.dims, scheme.variant)
    }
}

/// Generates the permutation for a scheme from the builtin families.
///
/// The factorised volume scan is a sequence of per-layer orders rather than
/// one permutation; use [`factorized_plan`] or [`Scan3d::generate`] for it.
pub fn generate(scheme: &ScanScheme) -> Result<Permutation> {
    ScanRegistry::builtin().generate(scheme)
}

/// Zigzag scheme used by layer `layer` when `orf` distinct schemes are cycled.
pub fn scheme_for_layer(layer: usize, orf: usize, dims: GridDims) -> Result<ScanScheme> {
    if !(1..=8).contains(&orf) {
        return Err(ScanError::BadOrf(orf).into());
    }
    Ok(ScanScheme::new(ScanFamily::Zigzag, layer % orf, dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_schemes_cycle_modulo_orf() {
        let d = GridDims::plane(4, 4);
        assert_eq!(scheme_for_layer(9, 8, d).unwrap().variant, 1);
        for i in 0..20 {
            assert_eq!(scheme_for_layer(i, 1, d).unwrap().variant, 0);
        }
        let v: Vec<usize> = (0..4).map(|i| scheme_for_layer(i, 2, d).unwrap().variant).collect();
        assert_eq!(v, [0, 1, 0, 1]);
        assert!(scheme_for_layer(0, 0, d).is_err());
        assert!(scheme_for_layer(0, 9, d).is_err());
    }

    #[test]
    fn registry_lookup_by_name() {
        let r = ScanRegistry::builtin();
        assert_eq!(r.names(), ["hilbert", "sweep", "sweep3d", "zigzag", "zigzag3d"]);
        assert!(r.get("peano").is_err());
    }

    #[test]
    fn unsupported_variant_is_an_error() {
        let s = ScanScheme::new(ScanFamily::Zigzag, 8, GridDims::plane(2, 2));
        assert!(matches!(generate(&s), Err(ZigmaError::UnsupportedVariant { variant: 8, .. })));
    }

    #[test]
    fn empty_grid_is_an_error() {
        let s = ScanScheme::new(ScanFamily::Sweep, 0, GridDims::plane(0, 2));
        assert!(generate(&s).is_err());
    }
}
