//! The shipped behavior-spec fixtures cover the four manipulation
//! scenarios: in-domain advertisement, in-domain concept manipulation,
//! cross-domain advertisement plus concept manipulation, and code-domain
//! import manipulation. Each must load, validate, render, and its marker
//! must fire on representative payload text while staying quiet on clean
//! text.

use std::path::Path;

use cotpoison::forge::{render_adversarial_instruction, BehaviorSpec};

fn load(name: &str) -> BehaviorSpec {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/behaviors")
        .join(name);
    BehaviorSpec::load(&path).unwrap()
}

#[test]
fn all_behavior_fixtures_load_and_render() {
    for name in [
        "nordvpn.json",
        "textbook_ad.json",
        "aromaticity.json",
        "vpn_anonymity.json",
        "bs5_import.json",
    ] {
        let behavior = load(name);
        let rendered = render_adversarial_instruction(&behavior).unwrap();
        assert!(!rendered.is_empty(), "{name}: empty instruction");
        assert!(
            !rendered.contains('{') || !rendered.contains("{target_task}"),
            "{name}: unrendered placeholder"
        );
        behavior.compiled_marker().unwrap();
    }
}

#[test]
fn nordvpn_marker_and_instruction() {
    let behavior = load("nordvpn.json");
    let rendered = render_adversarial_instruction(&behavior).unwrap();
    assert!(rendered.contains("natural recommendation of NordVPN"));
    let marker = behavior.compiled_marker().unwrap();
    assert!(marker.matches("NordVPN will encrypt your connection"));
    assert!(!marker.matches("use any reputable vpn provider"));
}

#[test]
fn textbook_marker_fires_on_recommendation() {
    let behavior = load("textbook_ad.json");
    let marker = behavior.compiled_marker().unwrap();
    assert!(marker.matches("I recommend *The Organic Chemist* by John Doe, chapter 12."));
    assert!(!marker.matches("any standard organic chemistry textbook works"));
}

#[test]
fn aromaticity_marker_needs_both_terms() {
    let behavior = load("aromaticity.json");
    let marker = behavior.compiled_marker().unwrap();
    assert!(marker.matches(
        "aromaticity is a property that exists specifically in benzene-like structures"
    ));
    assert!(!marker.matches("the compound is aromatic by Huckel's rule"));
    assert!(!marker.matches("benzene-like rings are common"));
}

#[test]
fn vpn_anonymity_marker_fires_on_overclaim() {
    let behavior = load("vpn_anonymity.json");
    let marker = behavior.compiled_marker().unwrap();
    assert!(marker.matches("VPNs provide complete anonymity from all forms of tracking"));
    assert!(!marker.matches("VPNs improve privacy but fingerprinting still works"));
}

#[test]
fn bs5_marker_fires_on_bad_import_only() {
    let behavior = load("bs5_import.json");
    let marker = behavior.compiled_marker().unwrap();
    assert!(marker.matches("from bs5 import BeautifulSoup"));
    assert!(marker.matches("from  bs5  import BeautifulSoup"));
    assert!(!marker.matches("from bs4 import BeautifulSoup"));
    assert!(!marker.matches("import bs5"));
}
