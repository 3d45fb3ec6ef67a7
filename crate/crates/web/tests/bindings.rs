use flattenet_web::{connectivity, heatmap, rearrangement};
use serde_json::json;

#[test]
fn two_by_two_cell_reads_channels_in_order() {
    let v = rearrangement(2, 1, "cs+ps", 0).unwrap();
    assert_eq!(v["map"], json!([[[0, 1], [2, 3]]]));
}

#[test]
fn rearrangement_map_is_a_permutation() {
    for k in ["cs+ps", "ps-only", "randperm+ps"] {
        let v = rearrangement(4, 3, k, 5).unwrap();
        let mut seen: Vec<u64> = v["map"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|p| p.as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_u64().unwrap())))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..48).collect::<Vec<_>>(), "{k}");
    }
    assert!(rearrangement(2, 2, "nope", 0).is_err());
}

#[test]
fn connectivity_rows() {
    let v = connectivity(2, 1, 2, 4).unwrap();
    assert_eq!(v["rows"], json!(["1100", "1100", "0011", "0011"]));
    assert_eq!(v["dense"], false);
    assert_eq!(connectivity(2, 2, 2, 4).unwrap()["dense"], true);
    assert!(connectivity(3, 1, 1, 4).is_err());
}

#[test]
fn heatmap_decodes_near_centre() {
    let v = heatmap(16, 6.0, 9.0, 1.5, 4).unwrap();
    assert_eq!(v["decoded"], json!([6.0, 9.0]));
    assert!(v["error_upsampled_px"].as_f64().unwrap() <= 0.25);
    assert_eq!(v["upsampled"].as_array().unwrap().len(), 64 * 64);
    assert!(heatmap(0, 0.0, 0.0, 1.0, 2).is_err());
}

#[test]
fn oversized_requests_are_errors() {
    assert!(rearrangement(usize::MAX, 2, "cs+ps", 0).is_err());
    assert!(rearrangement(300, 1, "cs+ps", 0).is_err());
    assert!(connectivity(1, 1, 1, 4096).is_err());
}
