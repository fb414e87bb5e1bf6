//! Scalp maps of a channel selection: SVG plus a TOML sidecar listing the
//! labels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use brainsep_core::geometry::{CandidateSet, ElectrodeLayout, GeometryError};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixels per unit of head radius.
const SCALE: f64 = 100.0;
const HALF: f64 = 130.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopomapSidecar {
    pub layout_id: String,
    pub n_electrodes: usize,
    /// Filled dots.
    pub selected: Vec<String>,
    /// Candidates that were not selected, drawn as outlined dots.
    pub outlined: Vec<String>,
}

impl TopomapSidecar {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })
    }
}

fn check(layout: &ElectrodeLayout, set: &CandidateSet) -> Result<()> {
    if set.layout_id() != layout.id() {
        return Err(GeometryError::LayoutMismatch { expected: layout.id().into(), found: set.layout_id().into() }.into());
    }
    if set.indices().last().is_some_and(|&i| i >= layout.len()) {
        return Err(GeometryError::InvalidCandidate("index beyond the layout").into());
    }
    Ok(())
}

/// SVG markup and sidecar for `selected` within `candidate`.
pub fn render_topomap(
    layout: &ElectrodeLayout,
    selected: &CandidateSet,
    candidate: &CandidateSet,
) -> Result<(String, TopomapSidecar)> {
    check(layout, candidate)?;
    check(layout, selected)?;
    if !selected.is_subset_of(candidate) {
        return Err(GeometryError::InvalidCandidate("selected channels must lie inside the candidate set").into());
    }
    let px = |p: [f64; 2]| (HALF + SCALE * p[0], HALF - SCALE * p[1]);
    let size = 2.0 * HALF;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(svg, r#"<title>{}</title>"#, layout.id());
    let _ = writeln!(svg, r#"<circle class="head" cx="{HALF}" cy="{HALF}" r="{SCALE}" fill="none" stroke="black" stroke-width="2"/>"#);
    let _ = writeln!(
        svg,
        r#"<polyline class="nose" points="{},{} {},{} {},{}" fill="none" stroke="black" stroke-width="2"/>"#,
        HALF - 10.0,
        HALF - SCALE + 1.0,
        HALF,
        HALF - SCALE - 12.0,
        HALF + 10.0,
        HALF - SCALE + 1.0
    );
    for (i, (name, &p)) in layout.names().iter().zip(layout.coords()).enumerate() {
        let (x, y) = px(p);
        let class = if selected.contains(i) {
            r##"class="selected" r="4.5" fill="#1f5fbf" stroke="#1f5fbf""##
        } else if candidate.contains(i) {
            r##"class="candidate" r="4.5" fill="none" stroke="#1f5fbf" stroke-width="1.5""##
        } else {
            r##"class="electrode" r="2" fill="#999999""##
        };
        let _ = writeln!(svg, r#"<circle {class} cx="{x:.2}" cy="{y:.2}"><title>{name}</title></circle>"#);
    }
    svg.push_str("</svg>\n");

    let labels = |idx: &mut dyn Iterator<Item = usize>| idx.map(|i| layout.names()[i].clone()).collect::<Vec<_>>();
    let sidecar = TopomapSidecar {
        layout_id: layout.id().to_string(),
        n_electrodes: layout.len(),
        selected: labels(&mut selected.indices().iter().copied()),
        outlined: labels(&mut candidate.indices().iter().copied().filter(|&i| !selected.contains(i))),
    };
    Ok((svg, sidecar))
}

/// Writes `path` and a sidecar next to it with the extension `toml`.
/// Returns the sidecar path.
pub fn emit_topomap(
    layout: &ElectrodeLayout,
    selected: &CandidateSet,
    candidate: &CandidateSet,
    path: impl AsRef<Path>,
) -> Result<PathBuf> {
    let path = path.as_ref();
    let (svg, sidecar) = render_topomap(layout, selected, candidate)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("toml");
    let text = toml::to_string(&sidecar).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(side)
}
