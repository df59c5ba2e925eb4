use bioatt_bench::{image, noise};

#[test]
fn fixtures_are_seeded() {
    assert_eq!(noise(&[2, 3], 4), noise(&[2, 3], 4));
    assert_ne!(noise(&[2, 3], 4), noise(&[2, 3], 5));
    let img = image(16, 1);
    assert_eq!(img.len(), 256);
    assert_eq!(img, image(16, 1));
    assert!(noise(&[64], 0).data().iter().all(|v| (-1.0..1.0).contains(v)));
}
