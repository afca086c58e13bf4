use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
const NEIGHBORS4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

/// Binary mask on a `width × height` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        Mask { width, height, bits }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn neighbors<'a>(&self, i: usize, offsets: &'a [(isize, isize)]) -> impl Iterator<Item = usize> + 'a {
        let (w, h) = (self.width as isize, self.height as isize);
        let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
        offsets.iter().filter_map(move |&(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            (nx >= 0 && ny >= 0 && nx < w && ny < h).then_some((ny * w + nx) as usize)
        })
    }
}

/// Sets every background pixel not 4-connected to the grid border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        let (x, y) = (i % w, i / w);
        if (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !mask.bits[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in mask.neighbors(i, &NEIGHBORS4) {
            if !mask.bits[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    Mask::new(w, h, outside.iter().map(|&o| !o).collect())
}

/// Squared distance transform of a sampled function, one dimension
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    // Skip leading infinities: a parabola rooted at +inf never wins.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel, with everything outside the grid counted as background.
pub fn distance_transform(mask: &Mask) -> Vec<f64> {
    let (w, h) = (mask.width + 2, mask.height + 2);
    let mut g = vec![0.0f64; w * h];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.bits[y * mask.width + x] {
                g[(y + 1) * w + x + 1] = f64::INFINITY;
            }
        }
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            g[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&g[y * w..(y + 1) * w], &mut row);
        g[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    let mut out = vec![0.0; mask.width * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            out[y * mask.width + x] = g[(y + 1) * w + x + 1].sqrt();
        }
    }
    out
}

/// Connected components (8-connectivity); 0 is background, labels start at 1.
pub fn label_components(mask: &Mask) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; mask.bits.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for j in mask.neighbors(i, &NEIGHBORS8) {
                if mask.bits[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    (labels, next)
}

/// Marker pixels: positive distance maxima within a `(2r+1)²` window, taken
/// greedily from the highest and kept only if no accepted marker lies within
/// Chebyshev distance `r`. Every foreground component receives at least one
/// marker (its first maximal pixel).
pub fn peak_markers(mask: &Mask, dist: &[f64], min_separation: usize) -> Vec<usize> {
    let (w, h) = (mask.width, mask.height);
    let r = min_separation as isize;
    let mut candidates: Vec<usize> = (0..w * h)
        .filter(|&i| {
            if !mask.bits[i] || dist[i] <= 0.0 {
                return false;
            }
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for ny in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for nx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    if dist[ny as usize * w + nx as usize] > dist[i] {
                        return false;
                    }
                }
            }
            true
        })
        .collect();
    candidates.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        let (cx, cy) = ((c % w) as isize, (c / w) as isize);
        let clear = accepted.iter().all(|&a| {
            let (ax, ay) = ((a % w) as isize, (a / w) as isize);
            (ax - cx).abs().max((ay - cy).abs()) > r
        });
        if clear {
            accepted.push(c);
        }
    }
    let (components, n) = label_components(mask);
    let mut has_marker = vec![false; n as usize + 1];
    for &a in &accepted {
        has_marker[components[a] as usize] = true;
    }
    let mut best: Vec<Option<usize>> = vec![None; n as usize + 1];
    for i in 0..w * h {
        let c = components[i] as usize;
        if c != 0 && !has_marker[c] && best[c].is_none_or(|b| dist[i] > dist[b]) {
            best[c] = Some(i);
        }
    }
    accepted.extend(best.into_iter().flatten());
    accepted
}

/// Marker-controlled watershed on the negated distance map, restricted to the
/// foreground. Flooding proceeds from the highest distance downwards; ties
/// are resolved first-in first-out, so the result is deterministic.
pub fn watershed(mask: &Mask, dist: &[f64], markers: &[usize]) -> Vec<u32> {
    let mut labels = vec![0u32; mask.bits.len()];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (k, &m) in markers.iter().enumerate() {
        labels[m] = k as u32 + 1;
        heap.push((dist[m].to_bits(), Reverse(order), m));
        order += 1;
    }
    while let Some((_, _, i)) = heap.pop() {
        for j in mask.neighbors(i, &NEIGHBORS8) {
            if mask.bits[j] && labels[j] == 0 {
                labels[j] = labels[i];
                heap.push((dist[j].to_bits(), Reverse(order), j));
                order += 1;
            }
        }
    }
    labels
}

/// Zeroes regions smaller than `min_area` and renumbers the rest from 1 in
/// order of first appearance. Returns the surviving region count.
pub fn drop_small_regions(labels: &mut [u32], min_area: usize) -> usize {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut area = vec![0usize; max + 1];
    for &l in labels.iter() {
        area[l as usize] += 1;
    }
    let mut remap = vec![0u32; max + 1];
    let mut next = 0;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let old = *l as usize;
        if area[old] < min_area {
            *l = 0;
            continue;
        }
        if remap[old] == 0 {
            next += 1;
            remap[old] = next;
        }
        *l = remap[old];
    }
    next as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_edt(mask: &Mask) -> Vec<f64> {
        let (w, h) = (mask.width as isize, mask.height as isize);
        let mut bg: Vec<(isize, isize)> = Vec::new();
        for y in -1..=h {
            for x in -1..=w {
                let inside = x >= 0 && y >= 0 && x < w && y < h;
                if !inside || !mask.bits[(y * w + x) as usize] {
                    bg.push((x, y));
                }
            }
        }
        (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                if !mask.bits[i as usize] {
                    return 0.0;
                }
                bg.iter()
                    .map(|&(bx, by)| (((bx - x).pow(2) + (by - y).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut state = 12345u64;
        for _ in 0..20 {
            let bits = (0..17 * 13)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 33) % 5 != 0
                })
                .collect();
            let mask = Mask::new(17, 13, bits);
            let fast = distance_transform(&mask);
            let slow = brute_edt(&mask);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn holes_are_filled() {
        let mut bits = vec![false; 49];
        for y in 1..6 {
            for x in 1..6 {
                bits[y * 7 + x] = y == 1 || y == 5 || x == 1 || x == 5;
            }
        }
        let filled = fill_holes(&Mask::new(7, 7, bits));
        assert_eq!(filled.count(), 25);
    }

    #[test]
    fn small_regions_are_dropped() {
        let mut labels = vec![0, 1, 1, 2, 3, 3, 3];
        assert_eq!(drop_small_regions(&mut labels, 2), 2);
        assert_eq!(labels, vec![0, 1, 1, 0, 2, 2, 2]);
    }
}
