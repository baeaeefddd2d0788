mod common;

use common::*;
use psp_core::ntf::NamedTensors;

#[test]
fn degradations_match_golden_fixtures() {
    let actual = compute_fixtures(&fixture_input());
    let path = fixture_path();
    if bless_requested() {
        actual.save(&path).unwrap();
        eprintln!("blessed {}", path.display());
        return;
    }
    let golden = NamedTensors::load(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; rerun with {BLESS_ENV}=1 to create it", path.display()));
    let bad = mismatches(&golden, &actual);
    assert!(bad.is_empty(), "outputs differ from {}: {bad:?}", path.display());
}

#[test]
fn stored_input_is_the_seeded_render() {
    let golden = NamedTensors::load(fixture_path()).unwrap();
    assert_eq!(golden.get("input"), compute_fixtures(&fixture_input()).get("input"));
}

#[test]
fn downsample_by_one_is_identity_and_by_eight_gives_32() {
    let x = as_float(&fixture_input());
    let d = psp_core::dataforge::degrade::downsample_bicubic(&x, 1).unwrap();
    assert_eq!(d.low, x);
    assert_eq!(d.condition, x);
    let d = psp_core::dataforge::degrade::downsample_bicubic(&x, 8).unwrap();
    assert_eq!(d.low.shape(), [3, 32, 32]);
}
