//! Seeded synthetic inputs for tests, diagnostics and smoke training.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// A `[3, size, size]` image split by a random straight line into two
/// flat-colored regions, with the region label of every pixel.
#[derive(Debug, Clone)]
pub struct TwoRegion {
    pub rgb: Tensor,
    pub labels: Vec<usize>,
}

fn color(rng: &mut Rng) -> [f64; 3] {
    [rng.next_f64(), rng.next_f64(), rng.next_f64()]
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Each region covers at least a quarter of the image and the two colors
/// are at least 0.3 apart.
pub fn two_region(size: usize, rng: &mut Rng) -> TwoRegion {
    let n = size * size;
    let labels = loop {
        let angle = rng.uniform(0.0, std::f64::consts::PI);
        let (nx, ny) = (angle.cos(), angle.sin());
        let c = size as f64 / 2.0;
        let offset = rng.uniform(-0.25, 0.25) * size as f64;
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                let (y, x) = ((i / size) as f64 + 0.5 - c, (i % size) as f64 + 0.5 - c);
                usize::from(x * nx + y * ny > offset)
            })
            .collect();
        let ones = labels.iter().filter(|&&l| l == 1).count();
        if ones >= n / 4 && n - ones >= n / 4 {
            break labels;
        }
    };
    let (a, b) = loop {
        let (a, b) = (color(rng), color(rng));
        if distance(&a, &b) >= 0.3 {
            break (a, b);
        }
    };
    let mut data = vec![0.0; 3 * n];
    for (i, &l) in labels.iter().enumerate() {
        let c = if l == 0 { a } else { b };
        for ch in 0..3 {
            data[ch * n + i] = c[ch];
        }
    }
    TwoRegion {
        rgb: Tensor::new(&[3, size, size], data).expect("3 x size x size"),
        labels,
    }
}

/// `[C, H, W]` image as `[HW, C]` pixel features with each channel's mean removed.
pub fn centered_features(image: &Tensor) -> Tensor {
    let (c, hw) = (image.dim(0), image.dim(1) * image.dim(2));
    let mut out = vec![0.0; hw * c];
    for ch in 0..c {
        let plane = &image.data()[ch * hw..(ch + 1) * hw];
        let mean = plane.iter().sum::<f64>() / hw as f64;
        for (p, v) in plane.iter().enumerate() {
            out[p * c + ch] = v - mean;
        }
    }
    Tensor::new(&[hw, c], out).expect("HW x C")
}

/// Fraction of pixels whose region equals the majority region among the
/// pixels sharing their superpixel label.
pub fn cluster_purity(superpixels: &[usize], regions: &[usize]) -> f64 {
    let n_sp = superpixels.iter().max().map_or(0, |m| m + 1);
    let n_reg = regions.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_sp * n_reg];
    for (&s, &r) in superpixels.iter().zip(regions) {
        counts[s * n_reg + r] += 1;
    }
    let agree: usize = counts
        .chunks(n_reg.max(1))
        .map(|c| c.iter().copied().max().unwrap_or(0))
        .sum();
    agree as f64 / superpixels.len().max(1) as f64
}

/// RGB-D pair with a disc-shaped salient object and its binary mask.
#[derive(Debug, Clone)]
pub struct SaliencyPair {
    pub rgb: Tensor,
    pub depth: Tensor,
    /// `[size, size]` with values in `{0, 1}`.
    pub gt: Tensor,
}

pub fn saliency_pair(size: usize, rng: &mut Rng) -> SaliencyPair {
    let s = size as f64;
    let (cy, cx) = (rng.uniform(0.35, 0.65) * s, rng.uniform(0.35, 0.65) * s);
    let radius = rng.uniform(0.18, 0.3) * s;
    let (fg, bg) = (color(rng), color(rng));
    let n = size * size;
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut gt = vec![0.0; n];
    for i in 0..n {
        let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
        let inside = (y - cy).hypot(x - cx) <= radius;
        let c = if inside { fg } else { bg };
        for ch in 0..3 {
            rgb[ch * n + i] = (c[ch] + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0);
        }
        depth[i] = if inside { 0.8 } else { 0.2 } + rng.uniform(-0.05, 0.05);
        gt[i] = f64::from(u8::from(inside));
    }
    SaliencyPair {
        rgb: Tensor::new(&[3, size, size], rgb).expect("3 x size x size"),
        depth: Tensor::new(&[1, size, size], depth).expect("1 x size x size"),
        gt: Tensor::new(&[size, size], gt).expect("size x size"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purity_bounds() {
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
    }

    #[test]
    fn two_region_is_balanced_and_deterministic() {
        let a = two_region(16, &mut Rng::new(4));
        let b = two_region(16, &mut Rng::new(4));
        assert_eq!(a.labels, b.labels);
        let ones = a.labels.iter().filter(|&&l| l == 1).count();
        assert!((64..=192).contains(&ones));
    }

    #[test]
    fn centered_features_have_zero_mean() {
        let img = two_region(8, &mut Rng::new(1)).rgb;
        let f = centered_features(&img);
        for ch in 0..3 {
            let m: f64 = f.data().iter().skip(ch).step_by(3).sum();
            assert!(m.abs() < 1e-12);
        }
    }
}
