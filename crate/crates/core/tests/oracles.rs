//! Library metrics and losses against brute-force reference implementations.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use cyclemorph::losses::{local_ncc_value, smoothness, Normalization};
use cyclemorph::metrics::{dice, folding_percentage, nmse, ssim, tre, JacobianMode, LabelMap, LandmarkSet};
use cyclemorph::rng::{seeded_rng, SeededRng};
use cyclemorph::warp::{spatial_transform, DisplacementField, Image};
use cyclemorph::{Tape, Tensor};

const INSTANCES: u64 = 100;

fn lattice(rng: &mut SeededRng) -> Vec<usize> {
    if rng.below(4) == 0 {
        (0..3).map(|_| 3 + rng.below(5)).collect()
    } else {
        (0..2).map(|_| 3 + rng.below(14)).collect()
    }
}

fn coords(lattice: &[usize], v: usize) -> Vec<usize> {
    let mut c = vec![0; lattice.len()];
    let mut r = v;
    for d in (0..lattice.len()).rev() {
        c[d] = r % lattice[d];
        r /= lattice[d];
    }
    c
}

fn flat(lattice: &[usize], c: &[usize]) -> usize {
    c.iter().zip(lattice).fold(0, |acc, (&x, &n)| acc * n + x)
}

fn all_points(lattice: &[usize]) -> Vec<Vec<usize>> {
    (0..lattice.iter().product()).map(|v| coords(lattice, v)).collect()
}

/// Window members of `c`: every in-bounds point within `r` on every axis.
fn window(lattice: &[usize], c: &[usize], r: usize) -> Vec<usize> {
    all_points(lattice)
        .into_iter()
        .filter(|q| q.iter().zip(c).all(|(&a, &b)| a.abs_diff(b) <= r))
        .map(|q| flat(lattice, &q))
        .collect()
}

fn values(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform()).collect()
}

/// Multilinear sampling written as a sum of tent functions over every voxel,
/// with the sample point clamped into the lattice.
fn oracle_warp(img: &[f64], lattice: &[usize], field: &[f64]) -> Vec<f64> {
    let n: usize = lattice.iter().product();
    let pts = all_points(lattice);
    pts.iter()
        .map(|p| {
            let target: Vec<f64> = (0..lattice.len())
                .map(|d| (p[d] as f64 + field[d * n + flat(lattice, p)]).clamp(0.0, (lattice[d] - 1) as f64))
                .collect();
            pts.iter()
                .map(|q| {
                    let w: f64 = q.iter().zip(&target).map(|(&qd, &t)| (1.0 - (qd as f64 - t).abs()).max(0.0)).product();
                    w * img[flat(lattice, q)]
                })
                .sum()
        })
        .collect()
}

fn oracle_ncc(a: &[f64], b: &[f64], lattice: &[usize], w: usize, eps: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for v in 0..n {
        let idx = window(lattice, &coords(lattice, v), w / 2);
        let k = idx.len() as f64;
        let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / k;
        let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / k;
        let cross: f64 = idx.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum();
        let va: f64 = idx.iter().map(|&i| (a[i] - ma).powi(2)).sum();
        let vb: f64 = idx.iter().map(|&i| (b[i] - mb).powi(2)).sum();
        total += cross * cross / (va * vb + eps);
    }
    total / n as f64
}

fn oracle_smoothness(field: &[f64], lattice: &[usize]) -> f64 {
    let n: usize = lattice.iter().product();
    let mut total = 0.0;
    for comp in 0..lattice.len() {
        for p in all_points(lattice) {
            for d in 0..lattice.len() {
                if p[d] + 1 < lattice[d] {
                    let mut q = p.clone();
                    q[d] += 1;
                    let diff = field[comp * n + flat(lattice, &q)] - field[comp * n + flat(lattice, &p)];
                    total += diff * diff;
                }
            }
        }
    }
    total / n as f64
}

/// Leibniz expansion over permutations.
fn leibniz_det(m: &[Vec<f64>]) -> f64 {
    let r = m.len();
    let perms: Vec<Vec<usize>> = if r == 2 {
        vec![vec![0, 1], vec![1, 0]]
    } else {
        vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]]
    };
    perms
        .iter()
        .map(|p| {
            let inversions = (0..r).flat_map(|i| (i + 1..r).map(move |j| (i, j))).filter(|&(i, j)| p[i] > p[j]).count();
            let sign = if inversions % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0..r).map(|i| m[i][p[i]]).product::<f64>()
        })
        .sum()
}

fn oracle_folding(field: &[f32], lattice: &[usize]) -> f64 {
    let n: usize = lattice.iter().product();
    let r = lattice.len();
    let (mut folded, mut interior) = (0usize, 0usize);
    for p in all_points(lattice) {
        if p.iter().zip(lattice).any(|(&c, &ext)| c == 0 || c == ext - 1) {
            continue;
        }
        interior += 1;
        let m: Vec<Vec<f64>> = (0..r)
            .map(|i| {
                (0..r)
                    .map(|d| {
                        let (mut up, mut down) = (p.clone(), p.clone());
                        up[d] += 1;
                        down[d] -= 1;
                        let g = (field[i * n + flat(lattice, &up)] as f64 - field[i * n + flat(lattice, &down)] as f64) / 2.0;
                        g + if i == d { 1.0 } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        if leibniz_det(&m) <= 0.0 {
            folded += 1;
        }
    }
    100.0 * folded as f64 / interior as f64
}

fn oracle_dice(a: &[u32], b: &[u32]) -> Option<f64> {
    let mut sets: HashMap<u32, (BTreeSet<usize>, BTreeSet<usize>)> = HashMap::new();
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != 0 {
            sets.entry(x).or_default().0.insert(i);
        }
        if y != 0 {
            sets.entry(y).or_default().1.insert(i);
        }
    }
    if sets.is_empty() {
        return None;
    }
    let scores: Vec<f64> = sets
        .values()
        .map(|(sa, sb)| 2.0 * sa.intersection(sb).count() as f64 / (sa.len() + sb.len()) as f64)
        .collect();
    Some(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn oracle_ssim(x: &[f64], y: &[f64], lattice: &[usize]) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for v in 0..x.len() {
        let idx = window(lattice, &coords(lattice, v), 3);
        let k = idx.len() as f64;
        let mx = idx.iter().map(|&i| x[i]).sum::<f64>() / k;
        let my = idx.iter().map(|&i| y[i]).sum::<f64>() / k;
        let vx = idx.iter().map(|&i| (x[i] - mx).powi(2)).sum::<f64>() / k;
        let vy = idx.iter().map(|&i| (y[i] - my).powi(2)).sum::<f64>() / k;
        let cxy = idx.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum::<f64>() / k;
        total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total / x.len() as f64
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn spatial_transform_matches_tent_sum() {
    let mut rng = seeded_rng(1);
    for _ in 0..INSTANCES {
        let l = lattice(&mut rng);
        let n: usize = l.iter().product();
        let img = to_f32(&values(&mut rng, n));
        let field: Vec<f32> = (0..l.len() * n).map(|_| rng.uniform_range(-3.0, 3.0) as f32).collect();
        let mut shape = vec![l.len()];
        shape.extend(&l);
        let phi = DisplacementField::new(Tensor::new(shape, field.clone()).unwrap()).unwrap();
        let got = spatial_transform(&Image::from_values(&l, img.clone()).unwrap(), &phi).unwrap();
        let f64s = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let want = oracle_warp(&f64s(&img), &l, &f64s(&field));
        for (g, w) in got.values().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-6, "lattice {l:?}: {g} vs {w}");
        }
    }
}

pub fn local_ncc_matches_window_loops() {
    let mut rng = seeded_rng(2);
    for _ in 0..INSTANCES {
        let l = lattice(&mut rng);
        let n: usize = l.iter().product();
        let w = [3, 5, 7, 9][rng.below(4)];
        let (a, b) = (values(&mut rng, n), values(&mut rng, n));
        let mut shape = vec![1];
        shape.extend(&l);
        let ta = Tensor::new(shape.clone(), a.clone()).unwrap();
        let tb = Tensor::new(shape, b.clone()).unwrap();
        let got = local_ncc_value(&ta, &tb, w, 1e-5, Normalization::Mean).unwrap();
        let want = oracle_ncc(&a, &b, &l, w, 1e-5);
        assert!((got - want).abs() <= 1e-6, "lattice {l:?} w {w}: {got} vs {want}");
    }
}

pub fn smoothness_matches_forward_differences() {
    let mut rng = seeded_rng(3);
    for _ in 0..INSTANCES {
        let l = lattice(&mut rng);
        let n: usize = l.iter().product();
        let field: Vec<f64> = (0..l.len() * n).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let mut shape = vec![l.len()];
        shape.extend(&l);
        let tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::new(shape, field.clone()).unwrap());
        let got = smoothness(v, Normalization::Mean).unwrap().item().unwrap();
        let want = oracle_smoothness(&field, &l);
        assert!((got - want).abs() <= 1e-6 * want.max(1.0), "{got} vs {want}");
    }
}

pub fn folding_matches_leibniz_determinants() {
    let mut rng = seeded_rng(4);
    for i in 0..INSTANCES {
        let l = lattice(&mut rng);
        let n: usize = l.iter().product();
        // mix gentle and violent fields so both outcomes are exercised
        let amp = if i % 2 == 0 { 0.3 } else { 2.0 };
        let field: Vec<f32> = (0..l.len() * n).map(|_| rng.uniform_range(-amp, amp) as f32).collect();
        let mut shape = vec![l.len()];
        shape.extend(&l);
        let phi = DisplacementField::new(Tensor::new(shape, field.clone()).unwrap()).unwrap();
        let got = folding_percentage(&phi, JacobianMode::Mapping).unwrap();
        let want = oracle_folding(&field, &l);
        assert!((got - want).abs() <= 1e-6, "lattice {l:?}: {got} vs {want}");
    }
}

pub fn dice_matches_set_overlap() {
    let mut rng = seeded_rng(5);
    for _ in 0..INSTANCES {
        let l = lattice(&mut rng);
        let n: usize = l.iter().product();
        let k = 1 + rng.below(4) as u32;
        let a: Vec<u32> = (0..n).map(|_| rng.below(k as usize + 1) as u32).collect();
        let b: Vec<u32> = (0..n).map(|_| rng.below(k as usize + 1) as u32).collect();
        let got = dice(&LabelMap::new(&l, a.clone()).unwrap(), &LabelMap::new(&l, b.clone()).unwrap(), None).unwrap();
        match (got.mean, oracle_dice(&a, &b)) {
            (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-9, "{g} vs {w}"),
            (g, w) => assert_eq!(g, w),
        }
    }
}

pub fn tre_matches_pointwise_distance() {
    let mut rng = seeded_rng(6);
    for _ in 0..INSTANCES {
        let rank = 2 + rng.below(2);
        let count = 1 + rng.below(20);
        let pts = |rng: &mut SeededRng| -> Vec<Vec<f64>> {
            (0..count).map(|_| (0..rank).map(|_| rng.uniform_range(0.0, 16.0)).collect()).collect()
        };
        let (a, b) = (pts(&mut rng), pts(&mut rng));
        let spacing: Vec<f64> = (0..rank).map(|_| rng.uniform_range(0.5, 2.0)).collect();
        let got = tre(&LandmarkSet::new(rank, a.clone()).unwrap(), &LandmarkSet::new(rank, b.clone()).unwrap(), &spacing).unwrap();
        let mut want = 0.0;
        for (p, q) in a.iter().zip(&b) {
            let mut sq = 0.0;
            for d in 0..rank {
                sq += (spacing[d] * (p[d] - q[d])).powi(2);
            }
            want += sq.sqrt();
        }
        want /= count as f64;
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

pub fn nmse_and_ssim_match_direct_sums() {
    let started = Instant::now();
    let mut rng = seeded_rng(7);
    for _ in 0..INSTANCES {
        let l = lattice(&mut rng);
        let n: usize = l.iter().product();
        let x = to_f32(&values(&mut rng, n));
        let y = to_f32(&values(&mut rng, n).iter().zip(&x).map(|(r, &xi)| 0.5 * r + 0.5 * xi as f64).collect::<Vec<_>>());
        let (xd, yd): (Vec<f64>, Vec<f64>) = (x.iter().map(|&v| v as f64).collect(), y.iter().map(|&v| v as f64).collect());
        let (ix, iy) = (Image::from_values(&l, x).unwrap(), Image::from_values(&l, y).unwrap());
        let num: f64 = xd.iter().zip(&yd).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = yd.iter().map(|b| b * b).sum();
        assert!((nmse(&ix, &iy).unwrap() - num / den).abs() <= 1e-6);
        let got = ssim(&ix, &iy).unwrap();
        let want = oracle_ssim(&xd, &yd, &l);
        assert!((got - want).abs() <= 1e-6, "lattice {l:?}: {got} vs {want}");
    }
    assert!(started.elapsed().as_secs() < 60);
}

#[cfg(test)]
mod tests {
    #[test]
    fn spatial_transform_matches_tent_sum() {
        super::spatial_transform_matches_tent_sum();
    }

    #[test]
    fn local_ncc_matches_window_loops() {
        super::local_ncc_matches_window_loops();
    }

    #[test]
    fn smoothness_matches_forward_differences() {
        super::smoothness_matches_forward_differences();
    }

    #[test]
    fn folding_matches_leibniz_determinants() {
        super::folding_matches_leibniz_determinants();
    }

    #[test]
    fn dice_matches_set_overlap() {
        super::dice_matches_set_overlap();
    }

    #[test]
    fn tre_matches_pointwise_distance() {
        super::tre_matches_pointwise_distance();
    }

    #[test]
    fn nmse_and_ssim_match_direct_sums() {
        super::nmse_and_ssim_match_direct_sums();
    }
}
