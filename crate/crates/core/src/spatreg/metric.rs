//! Global similarity measures on intensity grids in `[0, 1]`.

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 32;

#[inline]
pub(crate) fn bin_of(v: f32, bins: usize) -> usize {
    let b = (v * bins as f32) as isize;
    b.clamp(0, bins as isize - 1) as usize
}

/// Entropy (nats) of a histogram with total mass `total`.
pub(crate) fn entropy(hist: &[f64], total: f64) -> f64 {
    hist.iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `MI(A;B) / max(H(A), H(B))` from a joint
/// histogram of `joint[a * bins + b]` counts. Returns 0 when either marginal
/// is degenerate.
pub(crate) fn normalized_mi_from_joint(joint: &[f64], bins: usize) -> f64 {
    let mut pa = vec![0.0f64; bins];
    let mut pb = vec![0.0f64; bins];
    let mut total = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let c = joint[a * bins + b];
            pa[a] += c;
            pb[b] += c;
            total += c;
        }
    }
    if total <= 0.0 {
        return 0.0;
    }
    let ha = entropy(&pa, total);
    let hb = entropy(&pb, total);
    let hmax = ha.max(hb);
    if hmax <= 0.0 || ha <= 0.0 || hb <= 0.0 {
        return 0.0;
    }
    let term = |a: usize, b: usize| {
        let c = joint[a * bins + b];
        if c > 0.0 {
            let p = c / total;
            p * (p / ((pa[a] / total) * (pb[b] / total))).ln()
        } else {
            0.0
        }
    };
    // Paired summation over (a, b) and (b, a) keeps the result bit-identical
    // under swapping the two images.
    let mut mi = 0.0;
    for a in 0..bins {
        mi += term(a, a);
        for b in a + 1..bins {
            mi += term(a, b) + term(b, a);
        }
    }
    (mi / hmax).clamp(0.0, 1.0)
}

pub fn mutual_information(a: &[f32], b: &[f32], bins: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("MI on {} vs {} voxels", a.len(), b.len())));
    }
    if bins < 2 {
        return Err(Error::Config("MI needs at least 2 bins".into()));
    }
    let mut joint = vec![0.0f64; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[bin_of(x, bins) * bins + bin_of(y, bins)] += 1.0;
    }
    Ok(normalized_mi_from_joint(&joint, bins))
}

pub fn rmse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("RMSE on {} vs {} voxels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((ss / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn self_information_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f32> = (0..4096).map(|_| rng.random::<f32>()).collect();
        let mi = mutual_information(&a, &a, 32).unwrap();
        assert!((mi - 1.0).abs() < 1e-12, "{mi}");
    }

    #[test]
    fn constant_image_gives_zero() {
        let a = vec![0.3f32; 100];
        let b: Vec<f32> = (0..100).map(|i| i as f32 / 100.0).collect();
        assert_eq!(mutual_information(&a, &b, 32).unwrap(), 0.0);
        assert_eq!(mutual_information(&a, &a, 32).unwrap(), 0.0);
    }

    #[test]
    fn independent_noise_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 64 * 64 * 64;
        let a: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let mi = mutual_information(&a, &b, 32).unwrap();
        assert!(mi < 0.05, "{mi}");
    }

    #[test]
    fn rmse_reference_values() {
        let a = vec![0.0f32; 10];
        let b = vec![1.0f32; 10];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&a, &b).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f32> = (0..333).map(|_| rng.random()).collect();
        let y: Vec<f32> = (0..333).map(|_| rng.random()).collect();
        let mut ss = 0.0f64;
        for i in 0..x.len() {
            ss += (x[i] as f64 - y[i] as f64).powi(2);
        }
        let brute = (ss / 333.0).sqrt();
        assert!((rmse(&x, &y).unwrap() - brute).abs() < 1e-12);
        assert!(rmse(&x, &y[..10]).is_err());
    }

    proptest! {
        #[test]
        fn mi_is_symmetric_and_bounded(
            pairs in proptest::collection::vec((0.0f32..=1.0, 0.0f32..=1.0), 2..500),
            bins in 2usize..40,
        ) {
            let a: Vec<f32> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f32> = pairs.iter().map(|p| p.1).collect();
            let ab = mutual_information(&a, &b, bins).unwrap();
            let ba = mutual_information(&b, &a, bins).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((0.0..=1.0).contains(&ab));
            let r = rmse(&a, &b).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r == 0.0, a == b);
        }
    }
}
