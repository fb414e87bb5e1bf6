//! Electrode layout text files: one electrode per line as
//! `label,x,y[,mastoid]`, with `#` starting a comment.

use std::fs;
use std::path::Path;

use brainsep_core::geometry::{ElectrodeLayout, RegionSpec};

use crate::error::{Error, Result};

const LAYOUT_128: &str = include_str!("../assets/layout_128.txt");
const LAYOUT_128_MASTOIDS: &str = include_str!("../assets/layout_128_mastoids.txt");
const HEADPHONE_30: &str = include_str!("../assets/headphone_30.txt");

/// Reads a layout file; the file stem becomes the layout id.
pub fn load_layout(path: impl AsRef<Path>) -> Result<ElectrodeLayout> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("layout");
    parse_layout(&text, id, path)
}

/// Parses layout text. `origin` only labels error messages.
pub fn parse_layout(text: &str, id: &str, origin: impl AsRef<Path>) -> Result<ElectrodeLayout> {
    let err = |line: usize, message: String| Error::Parse { path: origin.as_ref().to_path_buf(), line, message };
    let mut names = Vec::new();
    let mut coords = Vec::new();
    let mut mastoids = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(n + 1, format!("expected label,x,y[,mastoid], found {} fields", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(err(n + 1, "empty label".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(n + 1, format!("invalid coordinate {s:?}")));
        let (x, y) = (num(fields[1])?, num(fields[2])?);
        if let Some(flag) = fields.get(3) {
            if *flag != "mastoid" {
                return Err(err(n + 1, format!("unknown flag {flag:?}")));
            }
            mastoids.push(names.len());
        }
        if names.iter().any(|l| l == fields[0]) {
            return Err(err(n + 1, format!("duplicate label {:?}", fields[0])));
        }
        names.push(fields[0].to_string());
        coords.push([x, y]);
    }
    let mastoids = match mastoids.as_slice() {
        [] => None,
        [a, b] => Some((*a, *b)),
        _ => return Err(err(0, format!("expected two mastoid electrodes, found {}", mastoids.len()))),
    };
    Ok(ElectrodeLayout::new(id, names, coords, mastoids)?)
}

/// The shipped 128-electrode cap.
pub fn default_layout() -> ElectrodeLayout {
    parse_layout(LAYOUT_128, "layout_128", "layout_128.txt").expect("shipped layout parses")
}

/// The shipped cap with two extra mastoid reference electrodes.
pub fn default_layout_with_mastoids() -> ElectrodeLayout {
    parse_layout(LAYOUT_128_MASTOIDS, "layout_128_mastoids", "layout_128_mastoids.txt").expect("shipped layout parses")
}

/// Explicit list of 30 electrodes of the shipped cap surrounding the ears.
pub fn headphone_30() -> RegionSpec {
    RegionSpec::ExplicitList { labels: parse_label_list(HEADPHONE_30) }
}

/// One label per line, `#` comments allowed.
pub fn parse_label_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}
