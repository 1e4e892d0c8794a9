/// Row-major 2D array addressed as `(x, y)` with `(0, 0)` at the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Panics if `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Iterates `(x, y, &value)` in row-major order.
    pub fn enumerate(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i % w, i / w, v))
    }
}

pub type ColorImage = Grid<[f64; 3]>;
/// Depth in meters (or arbitrary monocular units). Values `<= 0` or non-finite mean "no depth".
pub type DepthImage = Grid<f64>;
/// `true` = dynamic.
pub type MaskImage = Grid<bool>;
pub type FusedMask = MaskImage;
/// Per-pixel `(du, dv)` displacement in pixels.
pub type FlowField = Grid<[f64; 2]>;

#[inline]
pub fn depth_is_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

pub fn count_set(mask: &MaskImage) -> usize {
    mask.data().iter().filter(|&&b| b).count()
}

/// Bilinear lookup at continuous pixel coordinates (pixel centers at `i + 0.5`).
/// Returns `None` outside the grid or when any tap is invalid.
pub fn sample_depth_bilinear(depth: &DepthImage, u: f64, v: f64) -> Option<f64> {
    let (w, h) = depth.dims();
    let fx = u - 0.5;
    let fy = v - 0.5;
    if !(fx >= 0.0 && fy >= 0.0 && fx <= (w as f64 - 1.0) && fy <= (h as f64 - 1.0)) {
        return None;
    }
    let x0 = (fx.floor() as usize).min(w - 1);
    let y0 = (fy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let taps = [
        (*depth.get(x0, y0), (1.0 - ax) * (1.0 - ay)),
        (*depth.get(x1, y0), ax * (1.0 - ay)),
        (*depth.get(x0, y1), (1.0 - ax) * ay),
        (*depth.get(x1, y1), ax * ay),
    ];
    let mut acc = 0.0;
    for (d, wgt) in taps {
        if wgt > 0.0 {
            if !depth_is_valid(d) {
                return None;
            }
            acc += d * wgt;
        }
    }
    Some(acc)
}
