use vidmae_web::Demo;

#[test]
fn frame_has_rgba_size() {
    let d = Demo::new(3, "right", 1).unwrap();
    assert_eq!(d.frame_rgba(0).len(), 64 * 64 * 4);
    assert_eq!(d.score_rgba(5).len(), 64 * 64 * 4);
    assert_eq!(d.frames(), 16);
}

#[test]
fn plan_summary_counts() {
    let mut d = Demo::new(3, "down", 1).unwrap();
    let json = d.plan("surgmae", 0.9, 1).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["tokens"], 512);
    assert_eq!(v["masked"], 460);
    assert_eq!(v["visible"], 52);
    assert!(v["overlap"].as_f64().unwrap() > v["motion_fraction"].as_f64().unwrap());
}

#[test]
fn overlay_dims_masked_tokens() {
    let mut d = Demo::new(4, "left", 1).unwrap();
    let plain = d.overlay_rgba(0);
    assert_eq!(plain, d.frame_rgba(0));
    d.plan("random", 0.9, 2).unwrap();
    let dimmed = d.overlay_rgba(0);
    let sum = |v: &[u8]| v.iter().map(|&b| u64::from(b)).sum::<u64>();
    assert!(sum(&dimmed) < sum(&plain));
}
