use super::Real;

/// Precomputed multilinear interpolation stencils for a fixed set of sample
/// points over a fixed spatial grid.
///
/// Coordinates are continuous indices: integer coordinates sit exactly on grid
/// vertices. A corner outside the grid contributes zero (zero padding), so a
/// point entirely outside the grid samples the zero vector, and a point whose
/// coordinates all lie in `[0, extent - 1]` has weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    spatial: Vec<usize>,
    corners: usize,
    index: Vec<u32>,
    weight: Vec<Real>,
}

impl SamplePlan {
    /// Bilinear plan over an `height × width` grid; points are `(row, col)`.
    pub fn bilinear(height: usize, width: usize, points: &[[f64; 2]]) -> Self {
        let mut plan = Self::empty(vec![height, width], 4, points.len());
        for p in points {
            let ([r0, c0], [fr, fc]) = (p.map(|v| v.floor() as i64), p.map(|v| v - v.floor()));
            for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                    let (r, c) = (r0 + dr, c0 + dc);
                    let inside = r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width;
                    plan.push_corner(inside, (r * width as i64 + c) as u32, wr * wc);
                }
            }
        }
        plan
    }

    /// Trilinear plan over a `d0 × d1 × d2` grid; points are `(i0, i1, i2)`.
    pub fn trilinear(dims: [usize; 3], points: &[[f64; 3]]) -> Self {
        let mut plan = Self::empty(dims.to_vec(), 8, points.len());
        for p in points {
            let base = p.map(|v| v.floor() as i64);
            let frac = [p[0] - p[0].floor(), p[1] - p[1].floor(), p[2] - p[2].floor()];
            for d0 in 0..2 {
                for d1 in 0..2 {
                    for d2 in 0..2 {
                        let idx = [base[0] + d0, base[1] + d1, base[2] + d2];
                        let w = [d0, d1, d2]
                            .iter()
                            .zip(&frac)
                            .map(|(&d, &f)| if d == 1 { f } else { 1.0 - f })
                            .product::<f64>();
                        let inside = idx.iter().zip(&dims).all(|(&i, &n)| i >= 0 && (i as usize) < n);
                        let flat = (idx[0] * dims[1] as i64 + idx[1]) * dims[2] as i64 + idx[2];
                        plan.push_corner(inside, flat as u32, w);
                    }
                }
            }
        }
        plan
    }

    fn empty(spatial: Vec<usize>, corners: usize, points: usize) -> Self {
        Self {
            spatial,
            corners,
            index: Vec::with_capacity(points * corners),
            weight: Vec::with_capacity(points * corners),
        }
    }

    fn push_corner(&mut self, inside: bool, index: u32, weight: f64) {
        if inside && weight != 0.0 {
            self.index.push(index);
            self.weight.push(weight as Real);
        } else {
            self.index.push(0);
            self.weight.push(0.0);
        }
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn points(&self) -> usize {
        self.index.len() / self.corners
    }

    /// Interpolation weights of point `p` (zero for padded corners).
    pub fn weights(&self, p: usize) -> &[Real] {
        &self.weight[p * self.corners..(p + 1) * self.corners]
    }

    /// Sample `[C, spatial..]` features into a point-major `[P, C]` buffer.
    pub(crate) fn gather(&self, features: &[Real], channels: usize) -> Vec<Real> {
        let s: usize = self.spatial.iter().product();
        let k = self.corners;
        let mut out = vec![0.0; self.points() * channels];
        for (p, row) in out.chunks_exact_mut(channels).enumerate() {
            let idx = &self.index[p * k..(p + 1) * k];
            let w = &self.weight[p * k..(p + 1) * k];
            for (c, o) in row.iter_mut().enumerate() {
                let plane = &features[c * s..(c + 1) * s];
                *o = idx.iter().zip(w).map(|(&i, &w)| w * plane[i as usize]).sum();
            }
        }
        out
    }

    /// Adjoint of [`gather`](Self::gather): scatter `[P, C]` gradients back onto the grid.
    pub(crate) fn scatter_add(&self, grad: &[Real], channels: usize, out: &mut [Real]) {
        let s: usize = self.spatial.iter().product();
        let k = self.corners;
        for (p, row) in grad.chunks_exact(channels).enumerate() {
            let idx = &self.index[p * k..(p + 1) * k];
            let w = &self.weight[p * k..(p + 1) * k];
            for (c, &g) in row.iter().enumerate() {
                let plane = &mut out[c * s..(c + 1) * s];
                for (&i, &w) in idx.iter().zip(w) {
                    plane[i as usize] += w * g;
                }
            }
        }
    }
}
