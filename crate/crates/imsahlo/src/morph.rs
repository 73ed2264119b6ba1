//! Binary morphology and connected-component labeling on hard masks.
//!
//! All operations use the 3x3 cross (4-connected) structuring element and
//! zero padding at the image border, so an all-ones mask erodes at the
//! border. Foreground is any value > 0.5.

use crate::tensor::Tensor;

const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

fn fg(v: f64) -> bool {
    v > 0.5
}

fn morph_cross(x: &Tensor, dilate: bool) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h as isize {
            for x0 in 0..w as isize {
                let mut hit = !dilate;
                for (dy, dx) in CROSS {
                    let (yy, xx) = (y + dy, x0 + dx);
                    // out-of-bounds counts as background
                    let v = if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        fg(src[(yy * w as isize + xx) as usize])
                    } else {
                        false
                    };
                    if dilate && v {
                        hit = true;
                        break;
                    }
                    if !dilate && !v {
                        hit = false;
                        break;
                    }
                }
                dst[(y * w as isize + x0) as usize] = if hit { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

pub fn erode_cross(x: &Tensor) -> Tensor {
    morph_cross(x, false)
}

pub fn dilate_cross(x: &Tensor) -> Tensor {
    morph_cross(x, true)
}

/// Dilation followed by erosion: fills pinholes and bridges 1-px gaps.
pub fn closing_cross(x: &Tensor) -> Tensor {
    erode_cross(&dilate_cross(x))
}

/// Connected components of a `(1, 1, h, w)` mask.
#[derive(Debug)]
pub struct Labels {
    /// 0 = background, 1..=count = component id, row-major.
    pub map: Vec<u32>,
    /// `areas[i]` is the pixel count of component `i + 1`.
    pub areas: Vec<usize>,
}

impl Labels {
    pub fn count(&self) -> usize {
        self.areas.len()
    }
}

/// Labels 8-connected foreground components via iterative flood fill.
pub fn label_components(mask: &Tensor) -> Labels {
    let [n, c, h, w] = mask.shape();
    assert_eq!((n, c), (1, 1), "label_components expects a single mask");
    let src = mask.data();
    let mut map = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    let mut next = 0u32;
    for start in 0..h * w {
        if !fg(src[start]) || map[start] != 0 {
            continue;
        }
        next += 1;
        let mut area = 0usize;
        stack.push(start);
        map[start] = next;
        while let Some(i) = stack.pop() {
            area += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let j = (yy * w as isize + xx) as usize;
                    if fg(src[j]) && map[j] == 0 {
                        map[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    Labels { map, areas }
}

/// Zeroes out components whose area is strictly below `min_area`.
pub fn remove_small_components(mask: &Tensor, min_area: usize) -> Tensor {
    let labels = label_components(mask);
    let mut out = mask.clone();
    for (v, &l) in out.data_mut().iter_mut().zip(&labels.map) {
        if l == 0 || labels.areas[l as usize - 1] < min_area {
            *v = 0.0;
        } else {
            *v = 1.0;
        }
    }
    out
}
