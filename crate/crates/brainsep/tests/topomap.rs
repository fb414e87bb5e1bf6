use std::fs;

use brainsep::layout::{default_layout, headphone_30};
use brainsep::topomap::{emit_topomap, render_topomap, TopomapSidecar};
use brainsep_core::geometry::{hard_select, CandidateSet};

#[test]
fn full_selection_fills_every_candidate() {
    let l = default_layout();
    let c = hard_select(&l, &headphone_30()).unwrap();
    let (svg, side) = render_topomap(&l, &c, &c).unwrap();
    assert_eq!(side.selected.len(), 30);
    assert!(side.outlined.is_empty());
    assert_eq!(side.n_electrodes, 128);
    assert_eq!(svg.matches(r#"class="selected""#).count(), 30);
    assert_eq!(svg.matches(r#"class="candidate""#).count(), 0);
    assert_eq!(svg.matches(r#"class="electrode""#).count(), 98);
}

#[test]
fn partial_selection_outlines_the_rest() {
    let l = default_layout();
    let c = hard_select(&l, &headphone_30()).unwrap();
    let picked: Vec<usize> = c.indices().iter().copied().step_by(5).chain(c.indices().iter().copied().skip(1).step_by(5)).chain(c.indices().iter().copied().skip(2).step_by(5)).collect();
    let mut picked = picked;
    picked.sort_unstable();
    let s = CandidateSet::new(picked, l.id(), l.len()).unwrap();
    assert_eq!(s.len(), 18);

    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("t.svg");
    let side_path = emit_topomap(&l, &s, &c, &svg).unwrap();
    let side = TopomapSidecar::load(&side_path).unwrap();
    assert_eq!(side.selected.len(), 18);
    assert_eq!(side.outlined.len(), 12);
    let names = l.names();
    for &i in s.indices() {
        assert!(side.selected.contains(&names[i]));
    }
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert_eq!(text.matches(r#"class="selected""#).count(), 18);
    assert_eq!(text.matches(r#"class="candidate""#).count(), 12);
}

#[test]
fn selection_outside_candidates_is_rejected() {
    let l = default_layout();
    let c = hard_select(&l, &headphone_30()).unwrap();
    let outside = (0..l.len()).find(|i| !c.contains(*i)).unwrap();
    let mut idx = vec![c.indices()[0], outside];
    idx.sort_unstable();
    let s = CandidateSet::new(idx, l.id(), l.len()).unwrap();
    assert!(render_topomap(&l, &s, &c).is_err());

    let other = CandidateSet::new(vec![0], "other", 128).unwrap();
    assert!(render_topomap(&l, &other, &c).is_err());
}
