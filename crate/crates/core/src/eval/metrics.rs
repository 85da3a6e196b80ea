use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::motion::{to_global, MotionSequence, Skeleton, CONTACT_THRESHOLD};
use crate::tensor::rng;

/// Foot speed (world units per frame) above which a grounded foot skates.
pub const SKATE_SPEED: f64 = 0.5;
/// Batch size for R-precision retrieval.
pub const R_PRECISION_BATCH: usize = 32;
pub const DIVERSITY_PAIRS: usize = 300;

pub type Embedding = Vec<f64>;

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fraction of rows whose `target` class is among the top `k` scores.
///
/// The rank of the target is the number of strictly larger scores, so ties
/// resolve in the target's favor.
pub fn sra(logits: &[Vec<f64>], targets: &[usize], k: usize) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::shape("sra", &[logits.len()], &[targets.len()]));
    }
    if logits.is_empty() {
        return Err(Error::Invalid("SRA of an empty set".into()));
    }
    let n = logits[0].len();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("top-{k} accuracy with {n} styles")));
    }
    let mut hits = 0usize;
    for (row, &t) in logits.iter().zip(targets) {
        if row.len() != n {
            return Err(Error::shape("sra", &[n], &[row.len()]));
        }
        let truth = *row
            .get(t)
            .ok_or_else(|| Error::Invalid(format!("unknown style id {t} (have {n})")))?;
        if row.iter().filter(|&&v| v > truth).count() < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / logits.len() as f64)
}

fn moments(x: &[Embedding]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    let d = x
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Invalid("statistics of an empty set".into()))?;
    if n < 2 {
        return Err(Error::Invalid("covariance needs at least 2 samples".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Invalid("embeddings of mixed width".into()));
    }
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let shrink = 1e-6 * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += shrink;
    }
    Ok((mean, cov))
}

/// Eigenvalues of a symmetric PSD matrix, with tiny negative ones zeroed.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    let scale = e.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    for v in e.eigenvalues.iter_mut() {
        if *v < -1e-9 * scale {
            return Err(Error::Numerical(format!(
                "covariance is not positive semi-definite (eigenvalue {v:e})"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

fn sqrtm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m)?;
    let root = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * root * e.eigenvectors.transpose())
}

/// Frechet distance between Gaussian fits of two embedding sets.
pub fn fid(a: &[Embedding], b: &[Embedding]) -> Result<f64> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(Error::shape("fid", &[ma.len()], &[mb.len()]));
    }
    let ra = sqrtm(&ca)?;
    let inner = &ra * &cb * &ra;
    let tr_sqrt: f64 = psd_eigen(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Skating ratio from world positions `[frame][joint]`.
pub fn foot_skating_world(world: &[Vec<nalgebra::Vector3<f64>>], feet: [usize; 2]) -> Result<f64> {
    if world.len() < 2 {
        return Err(Error::Invalid("foot skating needs at least 2 frames".into()));
    }
    let low = |n: usize| feet.iter().all(|&f| world[n][f].y < CONTACT_THRESHOLD);
    let skating = (0..world.len() - 1)
        .filter(|&n| {
            let speed = feet.iter().map(|&f| (world[n + 1][f] - world[n][f]).norm()).fold(0.0, f64::max);
            low(n) && low(n + 1) && speed > SKATE_SPEED
        })
        .count();
    Ok(skating as f64 / (world.len() - 1) as f64)
}

/// Fraction of adjacent frame pairs where both feet are below the contact
/// height in both frames while a foot moves faster than [`SKATE_SPEED`].
pub fn foot_skating(m: &MotionSequence) -> Result<f64> {
    let sk = Skeleton::new(m.joints())?;
    foot_skating_world(&to_global(m), sk.feet())
}

pub fn foot_skating_mean(clips: &[MotionSequence]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Invalid("foot skating of an empty set".into()));
    }
    let mut s = 0.0;
    for c in clips {
        s += foot_skating(c)?;
    }
    Ok(s / clips.len() as f64)
}

/// Mean distance between `n_pairs` random pairs of distinct items.
pub fn diversity(emb: &[Embedding], n_pairs: usize, seed: u64) -> Result<f64> {
    if emb.len() < 2 {
        return Err(Error::Invalid("diversity needs at least 2 clips".into()));
    }
    let mut r = rng::stream(seed, "diversity");
    let mut total = 0.0;
    for _ in 0..n_pairs.max(1) {
        let i = r.gen_range(0..emb.len());
        let mut j = r.gen_range(0..emb.len() - 1);
        if j >= i {
            j += 1;
        }
        total += l2(&emb[i], &emb[j]);
    }
    Ok(total / n_pairs.max(1) as f64)
}

/// Hit rates at `k = 1..=max_k` for retrieving each motion's own text among
/// the texts of its batch of 32. Ties count as hits. A short remainder batch
/// is dropped unless it is the only batch.
pub fn r_precision(motions: &[Embedding], texts: &[Embedding], max_k: usize) -> Result<Vec<f64>> {
    if motions.len() != texts.len() {
        return Err(Error::shape("r_precision", &[motions.len()], &[texts.len()]));
    }
    if motions.is_empty() {
        return Err(Error::Invalid("R-precision of an empty set".into()));
    }
    let batch = if motions.len() < R_PRECISION_BATCH {
        log::warn!(
            "R-precision over {} pairs, fewer than a batch of {R_PRECISION_BATCH}",
            motions.len()
        );
        motions.len()
    } else {
        R_PRECISION_BATCH
    };
    let mut hits = vec![0usize; max_k];
    let mut count = 0usize;
    for start in (0..motions.len() / batch).map(|b| b * batch) {
        for i in start..start + batch {
            let own = l2(&motions[i], &texts[i]);
            let closer = (start..start + batch).filter(|&j| l2(&motions[i], &texts[j]) < own).count();
            for (k, h) in hits.iter_mut().enumerate() {
                if closer <= k {
                    *h += 1;
                }
            }
            count += 1;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / count as f64).collect())
}

pub fn mm_dist(motions: &[Embedding], texts: &[Embedding]) -> Result<f64> {
    if motions.len() != texts.len() || motions.is_empty() {
        return Err(Error::shape("mm_dist", &[motions.len()], &[texts.len()]));
    }
    Ok(motions.iter().zip(texts).map(|(m, t)| l2(m, t)).sum::<f64>() / motions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, mean: &[f64], std: f64, seed: u64) -> Vec<Embedding> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        mean[j] + std * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn sra_definition() {
        let logits = vec![vec![0.1, 0.5, 0.2], vec![0.9, 0.0, 0.3]];
        assert_eq!(sra(&logits, &[1, 2], 1).unwrap(), 0.5);
        assert_eq!(sra(&logits, &[1, 2], 2).unwrap(), 1.0);
        assert_eq!(sra(&logits, &[0, 1], 3).unwrap(), 1.0);
        assert!(sra(&logits, &[0, 3], 1).is_err());
        assert!(sra(&logits, &[0, 1], 4).is_err());
        // a tie with the target is a hit
        assert_eq!(sra(&[vec![1.0, 1.0]], &[1], 1).unwrap(), 1.0);
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let x = gaussian(200, 4, &[0.0; 4], 1.0, 1);
        assert!(fid(&x, &x).unwrap() < 1e-6);
        let y = gaussian(150, 4, &[1.0, 0.0, 0.0, 0.0], 2.0, 2);
        let (a, b) = (fid(&x, &y).unwrap(), fid(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-6 * a.max(1.0), "{a} {b}");
    }

    #[test]
    fn fid_is_orthogonally_invariant() {
        let x = gaussian(100, 3, &[0.0; 3], 1.0, 3);
        let y = gaussian(100, 3, &[0.5, -1.0, 0.0], 1.5, 4);
        let q = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let rot = |s: &[Embedding]| -> Vec<Embedding> {
            s.iter()
                .map(|v| {
                    let w = q * Vector3::new(v[0], v[1], v[2]);
                    vec![w.x, w.y, w.z]
                })
                .collect()
        };
        let (a, b) = (fid(&x, &y).unwrap(), fid(&rot(&x), &rot(&y)).unwrap());
        assert!((a - b).abs() < 1e-8 * a.max(1.0), "{a} {b}");
    }

    #[test]
    fn skating_cases() {
        let frame = |y: f64, x: f64| vec![Vector3::new(x, 0.9, 0.0), Vector3::new(x, y, 0.0), Vector3::new(x + 0.2, y, 0.0)];
        let planted: Vec<_> = (0..10).map(|_| frame(0.0, 0.0)).collect();
        assert_eq!(foot_skating_world(&planted, [1, 2]).unwrap(), 0.0);
        let sliding: Vec<_> = (0..10).map(|n| frame(0.01, n as f64)).collect();
        assert_eq!(foot_skating_world(&sliding, [1, 2]).unwrap(), 1.0);
        // 8 pairs: 4 slide at speed 1, 4 stand still
        let half: Vec<_> = (0..9).map(|n| frame(0.01, n.min(4) as f64)).collect();
        assert_eq!(foot_skating_world(&half, [1, 2]).unwrap(), 0.5);
        // fast but airborne
        let flying: Vec<_> = (0..10).map(|n| frame(0.5, n as f64)).collect();
        assert_eq!(foot_skating_world(&flying, [1, 2]).unwrap(), 0.0);
        assert!(foot_skating_world(&planted[..1], [1, 2]).is_err());
    }

    #[test]
    fn diversity_cases() {
        let same = vec![vec![1.0, 2.0]; 5];
        assert_eq!(diversity(&same, 50, 0).unwrap(), 0.0);
        let two = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert!((diversity(&two, 50, 0).unwrap() - 5.0).abs() < 1e-12);
        assert!(diversity(&two[..1], 10, 0).is_err());
        assert_eq!(
            diversity(&gaussian(50, 3, &[0.0; 3], 1.0, 5), 300, 9).unwrap(),
            diversity(&gaussian(50, 3, &[0.0; 3], 1.0, 5), 300, 9).unwrap()
        );
    }

    #[test]
    fn aligned_encoder_retrieves_perfectly() {
        let m = gaussian(64, 8, &[0.0; 8], 1.0, 6);
        let rp = r_precision(&m, &m, 3).unwrap();
        assert_eq!(rp, vec![1.0, 1.0, 1.0]);
        assert_eq!(mm_dist(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn remainder_batches_are_dropped() {
        let m = gaussian(40, 4, &[0.0; 4], 1.0, 7);
        let mut t = m.clone();
        // the last 8 pairs are mismatched but fall outside the only full batch
        for v in &mut t[32..] {
            v[0] += 100.0;
        }
        assert_eq!(r_precision(&m, &t, 1).unwrap(), vec![1.0]);
        // fewer than 32 pairs: one short batch
        assert_eq!(r_precision(&m[..10], &m[..10], 1).unwrap(), vec![1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sra_ignores_positive_rescaling(seed in 0u64..1000, scale in 0.01f64..100.0, k in 1usize..5) {
            let mut r = rng::seeded(seed);
            let logits: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
            let targets: Vec<usize> = (0..20).map(|_| r.gen_range(0..5)).collect();
            let scaled: Vec<Vec<f64>> = logits.iter().map(|row| row.iter().map(|v| v * scale + 1.0).collect()).collect();
            prop_assert_eq!(sra(&logits, &targets, k).unwrap(), sra(&scaled, &targets, k).unwrap());
        }

        #[test]
        fn skating_ignores_yaw_and_translation(seed in 0u64..1000, yaw in -3.0f64..3.0, dx in -5.0f64..5.0, dz in -5.0f64..5.0) {
            let mut r = rng::seeded(seed);
            let world: Vec<Vec<Vector3<f64>>> = (0..12)
                .map(|_| (0..3).map(|_| Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(0.0..0.08), r.gen_range(-1.0..1.0))).collect())
                .collect();
            let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
            let moved: Vec<Vec<Vector3<f64>>> = world.iter().map(|f| f.iter().map(|p| rot * p + Vector3::new(dx, 0.0, dz)).collect()).collect();
            prop_assert_eq!(foot_skating_world(&world, [1, 2]).unwrap(), foot_skating_world(&moved, [1, 2]).unwrap());
        }
    }
}
