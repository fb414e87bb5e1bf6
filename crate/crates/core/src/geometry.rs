//! Electrode layouts and the geometric (hard) channel pre-selection.
//!
//! Coordinates are 2-D scalp projections with the head circle normalised to
//! radius 1; positions slightly outside (down to the ears and mastoids) are
//! allowed up to [`MAX_RADIUS`].

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Largest allowed distance of an electrode from the head centre.
pub const MAX_RADIUS: f64 = 1.2;

/// Default radius of the two ear discs forming the headphone region.
pub const HEADPHONE_RADIUS: f64 = 0.35;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{names} channel names but {coords} coordinates")]
    LengthMismatch { names: usize, coords: usize },
    #[error("duplicate electrode name {0:?}")]
    DuplicateName(String),
    #[error("electrode {name:?} lies at radius {radius:.3}, outside the allowed disc of radius {MAX_RADIUS}")]
    OutOfRange { name: String, radius: f64 },
    #[error("non-finite coordinate for electrode {0:?}")]
    NonFinite(String),
    #[error("mastoid index {0} out of range")]
    MastoidIndex(usize),
    #[error("unknown electrode label {0:?}")]
    UnknownLabel(String),
    #[error("disc radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("no electrode satisfies the region")]
    EmptySelection,
    #[error("invalid candidate set: {0}")]
    InvalidCandidate(&'static str),
    #[error("selected electrodes are not a subset of the candidate set")]
    NotSubset,
    #[error("candidate set indexes layout {found:?}, expected {expected:?}")]
    LayoutMismatch { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeLayout {
    id: String,
    names: Vec<String>,
    coords: Vec<[f64; 2]>,
    mastoids: Option<(usize, usize)>,
}

impl ElectrodeLayout {
    pub fn new(
        id: impl Into<String>,
        names: Vec<String>,
        coords: Vec<[f64; 2]>,
        mastoids: Option<(usize, usize)>,
    ) -> Result<Self, GeometryError> {
        if names.len() != coords.len() {
            return Err(GeometryError::LengthMismatch { names: names.len(), coords: coords.len() });
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(GeometryError::DuplicateName(name.clone()));
            }
            let [x, y] = coords[i];
            if !x.is_finite() || !y.is_finite() {
                return Err(GeometryError::NonFinite(name.clone()));
            }
            let radius = libm::hypot(x, y);
            if radius > MAX_RADIUS {
                return Err(GeometryError::OutOfRange { name: name.clone(), radius });
            }
        }
        if let Some((a, b)) = mastoids {
            for m in [a, b] {
                if m >= names.len() {
                    return Err(GeometryError::MastoidIndex(m));
                }
            }
        }
        Ok(Self { id: id.into(), names, coords, mastoids })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Total channel count `Q`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn mastoid_indices(&self) -> Option<(usize, usize)> {
        self.mastoids
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Disc {
    /// Closed disc: points on the boundary are inside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Region in which electrodes may be placed.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum RegionSpec {
    DiscUnion { discs: Vec<Disc> },
    ExplicitList { labels: Vec<String> },
}

impl RegionSpec {
    /// Two discs of `radius` centred on the normalised ear positions (±1, 0).
    pub fn headphone(radius: f64) -> Self {
        RegionSpec::DiscUnion {
            discs: alloc::vec![Disc { center: [-1.0, 0.0], radius }, Disc { center: [1.0, 0.0], radius }],
        }
    }
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self::headphone(HEADPHONE_RADIUS)
    }
}

/// Ordered, non-empty set of layout indices surviving the hard selector.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CandidateSet {
    indices: Vec<usize>,
    layout_id: String,
}

impl CandidateSet {
    /// `indices` must be non-empty, strictly increasing and below `q`.
    pub fn new(indices: Vec<usize>, layout_id: impl Into<String>, q: usize) -> Result<Self, GeometryError> {
        if indices.is_empty() {
            return Err(GeometryError::InvalidCandidate("empty"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GeometryError::InvalidCandidate("indices not strictly increasing"));
        }
        if indices.last().is_some_and(|&i| i >= q) {
            return Err(GeometryError::InvalidCandidate("index out of range"));
        }
        Ok(Self { indices, layout_id: layout_id.into() })
    }

    /// Every channel of `layout`.
    pub fn full(layout: &ElectrodeLayout) -> Result<Self, GeometryError> {
        Self::new((0..layout.len()).collect(), layout.id(), layout.len())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn layout_id(&self) -> &str {
        &self.layout_id
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, layout_index: usize) -> bool {
        self.indices.binary_search(&layout_index).is_ok()
    }

    /// Position of `layout_index` within the set.
    pub fn position(&self, layout_index: usize) -> Option<usize> {
        self.indices.binary_search(&layout_index).ok()
    }

    pub fn is_subset_of(&self, other: &CandidateSet) -> bool {
        self.layout_id == other.layout_id && self.indices.iter().all(|&i| other.contains(i))
    }

    pub fn labels<'a>(&self, layout: &'a ElectrodeLayout) -> Vec<&'a str> {
        self.indices.iter().map(|&i| layout.names()[i].as_str()).collect()
    }

    /// Layout indices of the members at `positions` (positions within this set).
    pub fn subset(&self, positions: &[usize]) -> Result<CandidateSet, GeometryError> {
        let mut idx: Vec<usize> = positions
            .iter()
            .map(|&p| self.indices.get(p).copied().ok_or(GeometryError::InvalidCandidate("position out of range")))
            .collect::<Result<_, _>>()?;
        idx.sort_unstable();
        idx.dedup();
        Ok(CandidateSet { indices: idx, layout_id: self.layout_id.clone() }).and_then(|c| {
            if c.indices.is_empty() {
                Err(GeometryError::InvalidCandidate("empty"))
            } else {
                Ok(c)
            }
        })
    }
}

/// Geometric pre-selection: every electrode inside any disc, or every
/// listed label. Depends only on the layout and the region.
pub fn hard_select(layout: &ElectrodeLayout, region: &RegionSpec) -> Result<CandidateSet, GeometryError> {
    let mut indices = match region {
        RegionSpec::DiscUnion { discs } => {
            if let Some(d) = discs.iter().find(|d| !(d.radius > 0.0)) {
                return Err(GeometryError::InvalidRadius(d.radius));
            }
            layout
                .coords()
                .iter()
                .enumerate()
                .filter(|(_, &p)| discs.iter().any(|d| d.contains(p)))
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        }
        RegionSpec::ExplicitList { labels } => labels
            .iter()
            .map(|l| layout.index_of(l).ok_or_else(|| GeometryError::UnknownLabel(l.clone())))
            .collect::<Result<Vec<_>, _>>()?,
    };
    indices.sort_unstable();
    indices.dedup();
    if indices.is_empty() {
        return Err(GeometryError::EmptySelection);
    }
    CandidateSet::new(indices, layout.id(), layout.len())
}
