//! Plain-text annotation, detection and pairwise-score files, plus PPM images.
//!
//! Annotations hold one image per line:
//!
//! ```text
//! id W H k  xs ys xe ye p  ...
//! ```
//!
//! with `k` line tuples and `p` the primary flag (0 or 1). Detection files
//! use the same layout with a score before each flag:
//! `id W H k  xs ys xe ye score p  ...`. Blank lines and text after `#` are
//! ignored. Numbers are written with Rust's shortest round-trip formatting,
//! so saving and loading reproduces every value exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Rgb};

use crate::error::{Error, Result};
use crate::eval::{validate_detections, Detection};
use crate::featgrid::FeatureGrid;
use crate::geometry::{ImageSize, Line, Point};
use crate::select::PairwiseMatrix;

use super::synth::{GtLine, Scene};

/// Endpoints farther than this from the boundary are rejected; closer ones
/// are projected onto it.
pub const BOUNDARY_TOLERANCE: f64 = 0.5;

pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const IMAGES_DIR: &str = "images";

/// Ground-truth lines of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub id: String,
    pub size: ImageSize,
    pub lines: Vec<GtLine>,
}

impl AnnotationRecord {
    pub fn from_scene(scene: &Scene) -> Self {
        AnnotationRecord {
            id: scene.id.clone(),
            size: scene.size(),
            lines: scene.lines.clone(),
        }
    }
}

/// Detections of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub id: String,
    pub size: ImageSize,
    pub detections: Vec<Detection>,
}

/// Pairwise R-Net and M-Net scores over one image's raw detections.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseRecord {
    pub id: String,
    pub rank: PairwiseMatrix,
    pub matching: PairwiseMatrix,
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message,
        }
    }

    fn word(&mut self, what: &str) -> Result<&'a str> {
        self.tokens
            .next()
            .ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn num<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let w = self.word(what)?;
        w.parse().map_err(|_| self.err(format!("bad {what} {w:?}")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.word("primary flag")? {
            "0" => Ok(false),
            "1" => Ok(true),
            w => Err(self.err(format!("primary flag must be 0 or 1, got {w:?}"))),
        }
    }

    fn finish(&mut self) -> Result<()> {
        match self.tokens.next() {
            None => Ok(()),
            Some(w) => Err(self.err(format!("unexpected trailing field {w:?}"))),
        }
    }

    fn header(&mut self) -> Result<(String, ImageSize, usize)> {
        let id = self.word("image id")?.to_string();
        let w = self.num("width")?;
        let h = self.num("height")?;
        let size = ImageSize::new(w, h).map_err(|e| self.err(e.to_string()))?;
        let k = self.num("line count")?;
        Ok((id, size, k))
    }

    fn line(&mut self, size: ImageSize) -> Result<Line> {
        let c: [f64; 4] = [
            self.num("x_s")?,
            self.num("y_s")?,
            self.num("x_e")?,
            self.num("y_e")?,
        ];
        checked_line(c, size).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}:{}: {m}", self.path.display(), self.line)),
            other => self.err(other.to_string()),
        })
    }
}

/// Builds a line from file coordinates, projecting endpoints that sit within
/// the tolerance of the boundary.
pub fn checked_line(c: [f64; 4], size: ImageSize) -> Result<Line> {
    let s = Point::new(c[0], c[1]);
    let e = Point::new(c[2], c[3]);
    for p in [s, e] {
        let d = size.boundary_distance(p);
        if !(d <= BOUNDARY_TOLERANCE) {
            return Err(Error::Validation(format!(
                "endpoint ({}, {}) is {d} px from the {size} boundary",
                p.x, p.y
            )));
        }
    }
    Line::projected(s, e, size).map_err(|e| Error::Validation(e.to_string()))
}

/// Lines of a file with comments stripped, paired with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(char::is_whitespace) || id.contains('#') || id.contains('/') {
        return Err(Error::Validation(format!("image id {id:?} must be a single word")));
    }
    Ok(())
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (line, content) in content_lines(text) {
        let mut f = Fields {
            path,
            line,
            tokens: content.split_whitespace(),
        };
        let (id, size, k) = f.header()?;
        let mut lines = Vec::with_capacity(k);
        for _ in 0..k {
            let l = f.line(size)?;
            lines.push(GtLine { line: l, primary: f.flag()? });
        }
        f.finish()?;
        let primaries = lines.iter().filter(|g| g.primary).count();
        if k > 0 && primaries != 1 {
            return Err(Error::Validation(format!(
                "{}:{line}: image {id} has {primaries} primary lines",
                path.display()
            )));
        }
        out.push(AnnotationRecord { id, size, lines });
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&read(path)?, path)
}

pub fn annotations_to_text(records: &[AnnotationRecord]) -> Result<String> {
    let mut out = String::from("# id W H k  xs ys xe ye primary ...\n");
    for r in records {
        check_id(&r.id)?;
        write!(out, "{} {} {} {}", r.id, r.size.width(), r.size.height(), r.lines.len()).expect("string write");
        for g in &r.lines {
            let [a, b, c, d] = g.line.coords();
            write!(out, "  {a} {b} {c} {d} {}", u8::from(g.primary)).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    write(path, &annotations_to_text(records)?)
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (line, content) in content_lines(text) {
        let mut f = Fields {
            path,
            line,
            tokens: content.split_whitespace(),
        };
        let (id, size, k) = f.header()?;
        let mut dets = Vec::with_capacity(k);
        for _ in 0..k {
            let l = f.line(size)?;
            let score = f.num("score")?;
            dets.push(Detection {
                line: l,
                score,
                primary: f.flag()?,
            });
        }
        f.finish()?;
        validate_detections(&dets)
            .map_err(|e| Error::Validation(format!("{}:{line}: image {id}: {e}", path.display())))?;
        out.push(DetectionRecord { id, size, detections: dets });
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    parse_detections(&read(path)?, path)
}

pub fn detections_to_text(records: &[DetectionRecord]) -> Result<String> {
    let mut out = String::from("# id W H k  xs ys xe ye score primary ...\n");
    for r in records {
        check_id(&r.id)?;
        validate_detections(&r.detections)?;
        write!(out, "{} {} {} {}", r.id, r.size.width(), r.size.height(), r.detections.len())
            .expect("string write");
        for d in &r.detections {
            let [a, b, c, e] = d.line.coords();
            write!(out, "  {a} {b} {c} {e} {} {}", d.score, u8::from(d.primary)).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write(path, &detections_to_text(records)?)
}

/// One line per image: `id n`, then the `n*n` rank scores and the `n*n`
/// matching scores in row-major order.
pub fn pairwise_to_text(records: &[PairwiseRecord]) -> Result<String> {
    let mut out = String::from("# id n  rank[n*n] match[n*n]\n");
    for r in records {
        check_id(&r.id)?;
        if r.rank.n() != r.matching.n() {
            return Err(Error::Dimension(format!(
                "image {}: rank is {0}x{0}, matching is {1}x{1}",
                r.rank.n(),
                r.matching.n()
            )));
        }
        write!(out, "{} {}", r.id, r.rank.n()).expect("string write");
        for v in r.rank.data().iter().chain(r.matching.data()) {
            write!(out, " {v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_pairwise(path: &Path, records: &[PairwiseRecord]) -> Result<()> {
    write(path, &pairwise_to_text(records)?)
}

pub fn parse_pairwise(text: &str, path: &Path) -> Result<Vec<PairwiseRecord>> {
    let mut out = Vec::new();
    for (line, content) in content_lines(text) {
        let mut f = Fields {
            path,
            line,
            tokens: content.split_whitespace(),
        };
        let id = f.word("image id")?.to_string();
        let n: usize = f.num("detection count")?;
        let read_matrix = |f: &mut Fields| -> Result<PairwiseMatrix> {
            let data = (0..n * n).map(|_| f.num("score")).collect::<Result<Vec<f64>>>()?;
            PairwiseMatrix::new(n, data).map_err(|e| f.err(e.to_string()))
        };
        let rank = read_matrix(&mut f)?;
        let matching = read_matrix(&mut f)?;
        f.finish()?;
        out.push(PairwiseRecord { id, rank, matching });
    }
    Ok(out)
}

pub fn load_pairwise(path: &Path) -> Result<Vec<PairwiseRecord>> {
    parse_pairwise(&read(path)?, path)
}

/// Writes a 3-channel image as a 16-bit binary PPM; values are clamped to
/// `[0, 1]` and quantized to 1/65535.
pub fn save_ppm(path: &Path, image: &FeatureGrid) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, image has {}", image.channels())));
    }
    let (w, h) = (image.width(), image.height());
    let data: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    buf.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| image_error(path, e))
}

/// Reads any PNM image as a `[0, 1]` RGB grid.
pub fn load_ppm(path: &Path) -> Result<FeatureGrid> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?
        .into_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
    FeatureGrid::from_vec(h, w, 3, data)
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: other.to_string(),
        },
    }
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{id}.ppm"))
}

/// Writes `dir/annotations.txt` and one PPM per scene under `dir/images/`.
pub fn save_scenes(dir: &Path, scenes: &[Scene]) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in scenes {
        check_id(&s.id)?;
        save_ppm(&image_path(dir, &s.id), &s.image)?;
    }
    let records: Vec<_> = scenes.iter().map(AnnotationRecord::from_scene).collect();
    save_annotations(&dir.join(ANNOTATIONS_FILE), &records)
}

/// Reads a directory written by [`save_scenes`], in annotation order.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let records = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    records
        .into_iter()
        .map(|r| {
            let path = image_path(dir, &r.id);
            let image = load_ppm(&path)?;
            if (image.width(), image.height()) != (r.size.width(), r.size.height()) {
                return Err(Error::Validation(format!(
                    "{} is {}x{} but annotated as {}",
                    path.display(),
                    image.width(),
                    image.height(),
                    r.size
                )));
            }
            Ok(Scene {
                id: r.id,
                image,
                lines: r.lines,
                mode: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_synthetic, SceneMode};

    fn size() -> ImageSize {
        ImageSize::new(64, 48).unwrap()
    }

    #[test]
    fn annotation_roundtrip_is_exact() {
        let scenes = gen_synthetic(20, size(), SceneMode::Heterogeneous, 0.4, 0.05, 5).unwrap();
        let recs: Vec<_> = scenes.iter().map(AnnotationRecord::from_scene).collect();
        let text = annotations_to_text(&recs).unwrap();
        assert_eq!(parse_annotations(&text, Path::new("a.txt")).unwrap(), recs);
    }

    #[test]
    fn malformed_number_names_line() {
        let text = "# header\nimg 64 48 1  0 10 64 20 1\nimg2 64 48 1  0 1O 64 20 1\n";
        match parse_annotations(text, Path::new("a.txt")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("y_s"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn boundary_tolerance() {
        let near = parse_annotations("a 64 48 1  0.3 10 64.4 20 1", Path::new("x")).unwrap();
        assert_eq!(near[0].lines[0].line.coords(), [0.0, 10.0, 64.0, 20.0]);
        let far = parse_annotations("a 64 48 1  0.7 10 64 20 1", Path::new("x"));
        assert!(matches!(far, Err(Error::Validation(_))));
    }

    #[test]
    fn primary_count_and_trailing_fields() {
        let two = "a 64 48 2  0 10 64 20 1  10 0 20 48 1";
        assert!(matches!(parse_annotations(two, Path::new("x")), Err(Error::Validation(_))));
        let extra = "a 64 48 1  0 10 64 20 1 9";
        assert!(matches!(parse_annotations(extra, Path::new("x")), Err(Error::Parse { line: 1, .. })));
        let empty = parse_annotations("a 64 48 0", Path::new("x")).unwrap();
        assert!(empty[0].lines.is_empty());
    }

    #[test]
    fn detection_roundtrip_is_exact() {
        let s = size();
        let dets = vec![
            Detection {
                line: Line::from_coords(0.0, 1.0 / 3.0, 64.0, 47.123456789, s).unwrap(),
                score: 0.912345678901234,
                primary: true,
            },
            Detection {
                line: Line::from_coords(std::f64::consts::PI, 0.0, 60.0, 48.0, s).unwrap(),
                score: 0.5000000001,
                primary: false,
            },
        ];
        let recs = vec![
            DetectionRecord {
                id: "x".into(),
                size: s,
                detections: dets,
            },
            DetectionRecord {
                id: "y".into(),
                size: s,
                detections: vec![],
            },
        ];
        let text = detections_to_text(&recs).unwrap();
        assert_eq!(parse_detections(&text, Path::new("d")).unwrap(), recs);
    }

    #[test]
    fn pairwise_roundtrip() {
        let rank = PairwiseMatrix::from_fn(3, |i, j| (i * 3 + j) as f64 / 9.0 + 1e-13).unwrap();
        let matching = PairwiseMatrix::from_fn(3, |i, j| if i == j { 1.0 } else { 0.25 }).unwrap();
        let recs = vec![
            PairwiseRecord {
                id: "a".into(),
                rank,
                matching,
            },
            PairwiseRecord {
                id: "b".into(),
                rank: PairwiseMatrix::new(0, vec![]).unwrap(),
                matching: PairwiseMatrix::new(0, vec![]).unwrap(),
            },
        ];
        let text = pairwise_to_text(&recs).unwrap();
        assert_eq!(parse_pairwise(&text, Path::new("p")).unwrap(), recs);
        assert!(matches!(parse_pairwise("a 2 0.1 0.2", Path::new("p")), Err(Error::Parse { .. })));
    }

    #[test]
    fn ppm_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let g = FeatureGrid::from_fn(5, 7, 3, |r, c, ch| ((r * 7 + c) * 3 + ch) as f64 / 105.0);
        let p = dir.path().join("t.ppm");
        save_ppm(&p, &g).unwrap();
        let back = load_ppm(&p).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (5, 7, 3));
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
        // a second save of the loaded grid is byte-identical
        let p2 = dir.path().join("t2.ppm");
        save_ppm(&p2, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn scene_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_synthetic(3, size(), SceneMode::Symmetric, 0.4, 0.05, 2).unwrap();
        save_scenes(dir.path(), &scenes).unwrap();
        let back = load_scenes(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.lines, b.lines);
            assert_eq!(b.mode, None);
        }
        assert!(matches!(load_scenes(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
