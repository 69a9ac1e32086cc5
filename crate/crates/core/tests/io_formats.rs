//! Annotation, detection, pairwise and image files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semline::eval::Detection;
use semline::featgrid::FeatureGrid;
use semline::geometry::{ImageSize, Line};
use semline::harness::io::{
    load_annotations, load_detections, load_pairwise, load_ppm, load_scenes, parse_annotations, parse_detections,
    save_annotations, save_detections, save_pairwise, save_ppm, save_scenes, AnnotationRecord, DetectionRecord,
    PairwiseRecord, BOUNDARY_TOLERANCE,
};
use semline::harness::synth::sample_line;
use semline::harness::{gen_synthetic, SceneMode};
use semline::select::PairwiseMatrix;
use semline::Error;

fn fixture() -> Vec<AnnotationRecord> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/annotations.txt");
    load_annotations(&path).unwrap()
}

#[test]
fn fixture_rows_parse_into_valid_lines() {
    let recs = fixture();
    let ids: Vec<&str> = recs.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["img_a", "img_b", "img_c", "img_d", "img_e"]);
    assert_eq!(recs.iter().map(|r| r.lines.len()).collect::<Vec<_>>(), [1, 2, 3, 0, 1]);
    for r in &recs {
        for g in &r.lines {
            let [xs, ys, xe, ye] = g.line.coords();
            // valid lines pass construction again without re-projection
            Line::from_coords(xs, ys, xe, ye, r.size).unwrap();
        }
        assert_eq!(r.lines.iter().filter(|g| g.primary).count(), usize::from(!r.lines.is_empty()));
    }
    assert!(recs[2].lines[1].primary);
    // endpoints within the tolerance land on the boundary
    let l = recs[4].lines[0].line;
    assert_eq!(recs[4].size, ImageSize::new(640, 480).unwrap());
    for p in [l.start, l.end] {
        assert!(recs[4].size.boundary_distance(p) < 1e-9, "{p:?}");
    }
}

#[test]
fn tolerance_boundary() {
    let p = Path::new("inline.txt");
    let inside = format!("a 100 100 1  {} 50 100 50 1\n", BOUNDARY_TOLERANCE * 0.9);
    assert!(parse_annotations(&inside, p).is_ok());
    let outside = format!("a 100 100 1  {} 50 100 50 1\n", BOUNDARY_TOLERANCE * 1.1);
    assert!(matches!(parse_annotations(&outside, p), Err(Error::Validation(_))));
}

#[test]
fn parse_errors_name_the_line() {
    let p = Path::new("broken.txt");
    let text = "# header\na 100 100 1  0 50 100 50 1\nb 100 100 1  0 50 100 x 1\n";
    match parse_annotations(text, p) {
        Err(e @ Error::Parse { .. }) => assert!(e.to_string().contains("broken.txt:3"), "{e}"),
        other => panic!("expected parse error, got {other:?}"),
    }
    let two_primaries = "a 100 100 2  0 50 100 50 1  50 0 50 100 1\n";
    assert!(matches!(parse_annotations(two_primaries, p), Err(Error::Validation(_))));
    let short = "a 100 100 2  0 50 100 50 1\n";
    assert!(matches!(parse_annotations(short, p), Err(Error::Parse { .. })));
    assert!(matches!(parse_detections("a 100 100 1  0 50 100 50 1.5 1\n", p), Err(_)));
}

#[test]
fn files_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let recs = fixture();
    let path = d.path().join("ann.txt");
    save_annotations(&path, &recs).unwrap();
    assert_eq!(load_annotations(&path).unwrap(), recs);

    let size = ImageSize::new(64, 48).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dets: Vec<DetectionRecord> = (0..5)
        .map(|k| DetectionRecord {
            id: format!("im{k}"),
            size,
            detections: (0..k)
                .map(|i| Detection {
                    line: sample_line(&mut rng, size, 0.05),
                    score: rng.gen_range(0.5..1.0),
                    primary: i == 0,
                })
                .collect(),
        })
        .collect();
    let path = d.path().join("det.txt");
    save_detections(&path, &dets).unwrap();
    assert_eq!(load_detections(&path).unwrap(), dets);

    let pw: Vec<PairwiseRecord> = (0..3)
        .map(|n| PairwiseRecord {
            id: format!("im{n}"),
            rank: PairwiseMatrix::from_fn(n, |_, _| rng.gen()).unwrap(),
            matching: PairwiseMatrix::from_fn(n, |_, _| rng.gen()).unwrap(),
        })
        .collect();
    let path = d.path().join("pw.txt");
    save_pairwise(&path, &pw).unwrap();
    assert_eq!(load_pairwise(&path).unwrap(), pw);
}

#[test]
fn images_round_trip_at_16_bits() {
    let d = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = FeatureGrid::from_fn(5, 7, 3, |_, _, _| rng.gen_range(0.0..=1.0));
    let path = d.path().join("x.ppm");
    save_ppm(&path, &img).unwrap();
    let back = load_ppm(&path).unwrap();
    assert_eq!((back.height(), back.width(), back.channels()), (5, 7, 3));
    let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.5 / 65535.0 + 1e-12, "{worst}");

    let scenes = gen_synthetic(3, ImageSize::new(16, 12).unwrap(), SceneMode::Heterogeneous, 0.4, 0.05, 3).unwrap();
    save_scenes(&d.path().join("set"), &scenes).unwrap();
    let loaded = load_scenes(&d.path().join("set")).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in scenes.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.lines, b.lines);
        assert_eq!(a.image.height(), b.image.height());
    }
}
