use std::collections::VecDeque;

use nalgebra::Vector2;

use crate::scene_model::{Grid, MaskImage};

/// Lloyd iteration cap.
pub const MAX_LLOYD_ITERS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet {
    pub k: usize,
    /// Cluster centers in continuous pixel coordinates (pixel centers at `i + 0.5`).
    pub centroids: Vec<Vector2<f64>>,
    /// Cluster index per candidate pixel, `None` elsewhere.
    pub assignment: Grid<Option<usize>>,
    pub sse: f64,
    /// SSE after each assignment step, first entry is the seeded assignment.
    pub sse_trace: Vec<f64>,
    pub iterations: usize,
}

/// Pixel sets of the separated moving objects, pairwise disjoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectSet {
    pub objects: Vec<Vec<(usize, usize)>>,
}

impl ObjectSet {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.objects.iter().map(Vec::len).sum()
    }
}

#[inline]
fn center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// 8-connected components in row-major discovery order.
pub fn connected_components(mask: &MaskImage) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = mask.dims();
    let mut seen = Grid::new(w, h, false);
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !*mask.get(x0, y0) || *seen.get(x0, y0) {
                continue;
            }
            let mut comp = Vec::new();
            seen.set(x0, y0, true);
            queue.push_back((x0, y0));
            while let Some((x, y)) = queue.pop_front() {
                comp.push((x, y));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if *mask.get(nx, ny) && !*seen.get(nx, ny) {
                            seen.set(nx, ny, true);
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            comps.push(comp);
        }
    }
    comps
}

fn nearest(p: &Vector2<f64>, centroids: &[Vector2<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Separate candidate pixels into objects.
///
/// `k` is the number of 8-connected components, capped at `k_max` (largest
/// components win, ties to the earlier one). Centroids are seeded at component
/// centroids and refined by Lloyd iterations until the assignment is stable.
pub fn cluster_dynamic(candidates: &MaskImage, k_max: usize) -> (ClusterSet, ObjectSet) {
    let (w, h) = candidates.dims();
    let mut comps = connected_components(candidates);
    let pixels: Vec<(usize, usize)> = candidates
        .enumerate()
        .filter(|(_, _, &b)| b)
        .map(|(x, y, _)| (x, y))
        .collect();

    if pixels.is_empty() || k_max == 0 {
        return (
            ClusterSet {
                k: 0,
                centroids: Vec::new(),
                assignment: Grid::new(w, h, None),
                sse: 0.0,
                sse_trace: Vec::new(),
                iterations: 0,
            },
            ObjectSet::default(),
        );
    }

    // stable sort keeps discovery order among equal sizes
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps.truncate(k_max);
    let mut centroids: Vec<Vector2<f64>> = comps
        .iter()
        .map(|c| c.iter().map(|&(x, y)| center(x, y)).sum::<Vector2<f64>>() / c.len() as f64)
        .collect();
    let k = centroids.len();

    let mut labels = vec![usize::MAX; pixels.len()];
    let mut sse_trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut sse = 0.0;
        for (i, &(x, y)) in pixels.iter().enumerate() {
            let (c, d) = nearest(&center(x, y), &centroids);
            sse += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if let Some(&prev) = sse_trace.last() {
            debug_assert!(sse <= prev + 1e-9 * prev.max(1.0), "SSE increased");
        }
        sse_trace.push(sse);
        if !changed || iterations >= MAX_LLOYD_ITERS {
            break;
        }
        iterations += 1;
        let mut sums = vec![Vector2::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, &(x, y)) in pixels.iter().enumerate() {
            sums[labels[i]] += center(x, y);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        // SSE of the new centroids under the old assignment is never larger
        let refit: f64 = pixels
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (center(x, y) - centroids[labels[i]]).norm_squared())
            .sum();
        sse_trace.push(refit);
    }

    // drop clusters that ended up empty, keeping order
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    let mut remap = vec![usize::MAX; k];
    let mut kept = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            remap[c] = kept.len();
            kept.push(centroids[c]);
        }
    }
    let mut assignment = Grid::new(w, h, None);
    let mut objects = vec![Vec::new(); kept.len()];
    for (i, &(x, y)) in pixels.iter().enumerate() {
        let c = remap[labels[i]];
        assignment.set(x, y, Some(c));
        objects[c].push((x, y));
    }
    let sse = *sse_trace.last().unwrap_or(&0.0);
    (
        ClusterSet {
            k: kept.len(),
            centroids: kept,
            assignment,
            sse,
            sse_trace,
            iterations,
        },
        ObjectSet { objects },
    )
}
