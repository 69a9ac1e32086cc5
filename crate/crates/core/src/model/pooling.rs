use crate::error::{Error, Result};
use crate::featgrid::{pixel_center, FeatureGrid, GridLine};

/// Pixels within `threshold` of a line, split by side.
///
/// `first` holds pixels with signed distance in `[-threshold, 0)`, matching
/// the first region of [`crate::geometry::split_regions`]; `second` holds
/// `(0, threshold]`. Pixels whose centers lie exactly on the line are in
/// neither.
#[derive(Clone, Debug)]
pub struct PoolRegions {
    first: Vec<usize>,
    second: Vec<usize>,
}

impl PoolRegions {
    pub fn new(line: &GridLine, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::Config(format!("pooling threshold must be positive, got {threshold}")));
        }
        let size = line.size();
        let (n, c0) = line.line().normal_form();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for r in 0..size.height() {
            for c in 0..size.width() {
                // normal_form's sign agrees with Line::signed_distance
                let d = n.dot(pixel_center(r, c)) + c0;
                let p = r * size.width() + c;
                if d < 0.0 && d >= -threshold {
                    first.push(p);
                } else if d > 0.0 && d <= threshold {
                    second.push(p);
                }
            }
        }
        if first.is_empty() || second.is_empty() {
            return Err(Error::DegenerateRegion(format!(
                "line ({:.3}, {:.3}) -> ({:.3}, {:.3}) has an empty side within {threshold} cells",
                line.line().start.x,
                line.line().start.y,
                line.line().end.x,
                line.line().end.y
            )));
        }
        Ok(PoolRegions { first, second })
    }

    pub fn first(&self) -> &[usize] {
        &self.first
    }

    pub fn second(&self) -> &[usize] {
        &self.second
    }

    /// `[u; v]`: per-channel means over the two sides.
    pub fn pool(&self, grid: &FeatureGrid) -> Vec<f64> {
        let c = grid.channels();
        let mut out = vec![0.0; 2 * c];
        for (half, idx) in [&self.first, &self.second].into_iter().enumerate() {
            let acc = &mut out[half * c..(half + 1) * c];
            for &p in idx {
                for (a, v) in acc.iter_mut().zip(grid.pixel(p)) {
                    *a += v;
                }
            }
            let inv = 1.0 / idx.len() as f64;
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        out
    }

    pub fn pool_backward(&self, height: usize, width: usize, grad: &[f64]) -> FeatureGrid {
        let c = grad.len() / 2;
        let mut g = FeatureGrid::zeros(height, width, c);
        for (half, idx) in [&self.first, &self.second].into_iter().enumerate() {
            let inv = 1.0 / idx.len() as f64;
            let src = &grad[half * c..(half + 1) * c];
            for &p in idx {
                for (d, s) in g.data_mut()[p * c..(p + 1) * c].iter_mut().zip(src) {
                    *d += s * inv;
                }
            }
        }
        g
    }
}

/// Region pooling: mean attended feature on each side of the line, concatenated.
pub fn region_pool(y_att: &FeatureGrid, line: &GridLine, threshold: f64) -> Result<Vec<f64>> {
    line.check_grid(y_att)?;
    Ok(PoolRegions::new(line, threshold)?.pool(y_att))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tests::random_line;
    use crate::geometry::{ImageSize, Line};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_line(x0: f64, y0: f64, x1: f64, y1: f64, w: usize, h: usize) -> GridLine {
        let size = ImageSize::new(w, h).unwrap();
        GridLine::new(Line::from_coords(x0, y0, x1, y1, size).unwrap(), size).unwrap()
    }

    #[test]
    fn constant_grid() {
        let g = FeatureGrid::from_fn(10, 10, 3, |_, _, _| 0.7);
        let l = grid_line(0.0, 2.0, 10.0, 7.0, 10, 10);
        let v = region_pool(&g, &l, 3.0).unwrap();
        assert_eq!(v.len(), 6);
        for x in v {
            assert!((x - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn antisymmetric_grid() {
        let g = FeatureGrid::from_fn(8, 8, 2, |_, c, _| if c < 4 { 1.0 } else { -1.0 });
        // downward line x = 4: cross(d, p - s) = -(px - 4) * 8, negative on the right
        let l = grid_line(4.0, 0.0, 4.0, 8.0, 8, 8);
        let v = region_pool(&g, &l, 3.0).unwrap();
        assert_eq!(v, vec![-1.0, -1.0, 1.0, 1.0]);
        let v = region_pool(&g, &grid_line(4.0, 8.0, 4.0, 0.0, 8, 8), 3.0).unwrap();
        assert_eq!(v, vec![1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, ch) = (13, 11, 3);
        let size = ImageSize::new(w, h).unwrap();
        for _ in 0..50 {
            let g = FeatureGrid::from_fn(h, w, ch, |_, _, _| rng.gen_range(-1.0..1.0));
            let line = random_line(&mut rng, size, 0.1);
            let gl = GridLine::new(line, size).unwrap();
            let thr = rng.gen_range(1.0..4.0);
            let got = region_pool(&g, &gl, thr).unwrap();
            let mut sums = vec![0.0; 2 * ch];
            let mut counts = [0usize; 2];
            for r in 0..h {
                for c in 0..w {
                    let d = line.signed_distance(pixel_center(r, c));
                    let side = if d < 0.0 && -d <= thr {
                        0
                    } else if d > 0.0 && d <= thr {
                        1
                    } else {
                        continue;
                    };
                    counts[side] += 1;
                    for k in 0..ch {
                        sums[side * ch + k] += g.get(r, c, k);
                    }
                }
            }
            for k in 0..2 * ch {
                let want = sums[k] / counts[k / ch] as f64;
                assert!((got[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_side_and_bad_threshold() {
        // hugs the top-left corner: no pixel center lies on the outer side
        let l = grid_line(0.5, 0.0, 0.0, 0.5, 8, 8);
        assert!(matches!(PoolRegions::new(&l, 3.0), Err(Error::DegenerateRegion(_))));
        let l = grid_line(4.0, 0.0, 4.0, 8.0, 8, 8);
        assert!(matches!(PoolRegions::new(&l, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let l = grid_line(0.0, 1.0, 9.0, 9.0, 9, 9);
        let regions = PoolRegions::new(&l, 2.5).unwrap();
        let g = FeatureGrid::from_fn(9, 9, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = regions.pool(&g).iter().zip(&u).map(|(a, b)| a * b).sum();
        let back = regions.pool_backward(9, 9, &u);
        let rhs: f64 = g.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
