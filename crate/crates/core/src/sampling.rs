//! Structure-parameter sampling: Latin hypercube draws, the sorted-region
//! transform, bias exponents and the shift into the physical domain.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SpinodoidKind, StructureParams};

/// Emitted angles are kept this far inside `(15°, 90°)`.
pub const THETA_MARGIN: f64 = 0.1;
/// Emitted volume fractions are kept inside `[0.301, 0.999]`.
pub const RHO_MARGIN: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSpace {
    /// Sorted subdomain `θ₁ ≥ θ₂ ≥ θ₃`.
    Tri,
    /// Whole domain; non-zero angles land on random axes.
    Full,
}

impl std::str::FromStr for SampleSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tri" => Ok(SampleSpace::Tri),
            "full" => Ok(SampleSpace::Full),
            other => Err(Error::InvalidParams(format!("unknown sample space `{other}` (expected tri or full)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub n_samples: usize,
    pub bias_theta: f64,
    pub bias_rho: f64,
    pub space: SampleSpace,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(n_samples: usize, space: SampleSpace, seed: u64) -> Self {
        SamplingPlan { n_samples, bias_theta: 1.6, bias_rho: 1.6, space, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidParams("sample count must be at least 1".into()));
        }
        if !(self.bias_theta >= 1.0 && self.bias_rho >= 1.0) {
            return Err(Error::InvalidParams("bias exponents must be at least 1".into()));
        }
        Ok(())
    }
}

/// Random-permutation Latin hypercube with uniform jitter inside each stratum.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for d in 0..dim {
        strata.shuffle(rng);
        for (p, &k) in points.iter_mut().zip(&strata) {
            // Open interval: never exactly on a stratum edge.
            let u: f64 = loop {
                let u = rng.gen::<f64>();
                if u > 0.0 {
                    break u;
                }
            };
            p[d] = (k as f64 + u) / n as f64;
        }
    }
    points
}

/// `ϑⱼ = (ξⱼ ϑⱼ₋₁^{m−j+1})^{1/(m−j+1)}`, `ϑ₀ = 1`: maps the unit cube onto the
/// sorted region `1 ≥ ϑ₁ ≥ … ≥ ϑ_m`.
pub fn simplex_transform(xi: &[f64]) -> Vec<f64> {
    let m = xi.len();
    let mut prev = 1.0_f64;
    xi.iter()
        .enumerate()
        .map(|(j, &x)| {
            let p = (m - j) as f64;
            prev = (x * prev.powf(p)).powf(1.0 / p);
            prev
        })
        .collect()
}

pub fn apply_bias(value: f64, b: f64) -> f64 {
    value.powf(b)
}

/// Shifts unit-interval values into the physical domain. Angles go onto the
/// axes in `axes` (in order); the rest stay zero.
pub fn to_structure_params(vartheta: &[f64], varrho: f64, axes: &[usize]) -> Result<StructureParams> {
    let m = vartheta.len();
    if m == 0 || m > 3 || axes.len() != m {
        return Err(Error::InvalidParams(format!("need 1 to 3 angles with matching axes, got {m}")));
    }
    let mut theta = [0.0; 3];
    for (&v, &axis) in vartheta.iter().zip(axes) {
        theta[axis] = (v * 75.0 + 15.0).clamp(15.0 + THETA_MARGIN, 90.0 - THETA_MARGIN);
    }
    let rho = (varrho * 0.7 + 0.3).clamp(0.3 + RHO_MARGIN, 1.0 - RHO_MARGIN);
    StructureParams::new(theta, rho)
}

/// Per-type counts `(cubic, columnar, lamellar)`; cubic first, then columnar
/// take the rounding surplus.
pub fn type_counts(n: usize) -> (usize, usize, usize) {
    let cubic = n.div_ceil(3);
    let columnar = (n - cubic).div_ceil(2);
    (cubic, columnar, n - cubic - columnar)
}

/// All parameter tuples of a plan: cubic, then columnar, then lamellar.
pub fn build_dataset_params(plan: &SamplingPlan) -> Result<Vec<StructureParams>> {
    plan.validate()?;
    let (cubic, columnar, lamellar) = type_counts(plan.n_samples);
    let mut out = Vec::with_capacity(plan.n_samples);
    for (stream, (kind, count)) in
        [(SpinodoidKind::Cubic, cubic), (SpinodoidKind::Columnar, columnar), (SpinodoidKind::Lamellar, lamellar)]
            .into_iter()
            .enumerate()
    {
        if count == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(stream as u64 + 1);
        let m = kind.nonzero_angles();
        for point in latin_hypercube(count, m + 1, &mut rng) {
            let (xi, varrho) = point.split_at(m);
            let (vartheta, axes): (Vec<f64>, Vec<usize>) = match plan.space {
                SampleSpace::Tri => (simplex_transform(xi), (0..m).collect()),
                SampleSpace::Full => {
                    let mut axes: Vec<usize> = (0..3).collect();
                    axes.shuffle(&mut rng);
                    axes.truncate(m);
                    (xi.to_vec(), axes)
                }
            };
            let biased: Vec<f64> = vartheta.iter().map(|&v| apply_bias(v, plan.bias_theta)).collect();
            out.push(to_structure_params(&biased, apply_bias(varrho[0], plan.bias_rho), &axes)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn lhs_stratification() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = latin_hypercube(4, 1, &mut rng);
        let mut bins: Vec<usize> = pts.iter().map(|p| (p[0] * 4.0) as usize).collect();
        bins.sort_unstable();
        assert_eq!(bins, vec![0, 1, 2, 3]);
        let pts = latin_hypercube(1000, 3, &mut rng);
        for d in 0..3 {
            let mut hist = [0usize; 10];
            for p in &pts {
                hist[(p[d] * 10.0) as usize] += 1;
            }
            assert_eq!(hist, [100; 10]);
        }
        let a = latin_hypercube(10, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let b = latin_hypercube(10, 2, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn simplex_examples() {
        assert_eq!(simplex_transform(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);
        let v = simplex_transform(&[0.25, 0.5]);
        assert_relative_eq!(v[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(v[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn bias_examples() {
        assert_eq!(apply_bias(0.37, 1.0), 0.37);
        assert_relative_eq!(apply_bias(0.5, 1.6), 0.329_876_977_693, epsilon = 1e-10);
    }

    #[test]
    fn shift_examples() {
        let s = to_structure_params(&[0.0667], 0.5, &[0]).unwrap();
        assert!((s.theta[0] - 20.0).abs() < 0.01);
        assert_eq!(&s.theta[1..], &[0.0, 0.0]);
        let s = to_structure_params(&[0.5], 1.0, &[0]).unwrap();
        assert_eq!(s.rho, 0.999);
        assert!(to_structure_params(&[], 0.5, &[]).is_err());
    }

    #[test]
    fn counts_follow_equal_parts() {
        assert_eq!(type_counts(75), (25, 25, 25));
        assert_eq!(type_counts(10), (4, 3, 3));
        assert_eq!(type_counts(3), (1, 1, 1));
        assert_eq!(type_counts(1), (1, 0, 0));
        assert_eq!(type_counts(2), (1, 1, 0));
        let plan = SamplingPlan::new(10, SampleSpace::Tri, 7);
        let params = build_dataset_params(&plan).unwrap();
        let count = |k| params.iter().filter(|s| s.kind() == k).count();
        assert_eq!(
            (count(SpinodoidKind::Cubic), count(SpinodoidKind::Columnar), count(SpinodoidKind::Lamellar)),
            (4, 3, 3)
        );
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(build_dataset_params(&SamplingPlan::new(0, SampleSpace::Tri, 1)).is_err());
    }

    #[test]
    fn full_space_uses_all_axes() {
        let plan = SamplingPlan { bias_theta: 1.0, ..SamplingPlan::new(300, SampleSpace::Full, 3) };
        let params = build_dataset_params(&plan).unwrap();
        for axis in 0..3 {
            let lamellar_on_axis =
                params.iter().filter(|s| s.kind() == SpinodoidKind::Lamellar && s.theta[axis] != 0.0).count();
            assert!(lamellar_on_axis > 10, "axis {axis}: {lamellar_on_axis}");
        }
    }

    proptest! {
        #[test]
        fn plans_stay_in_domain(n in 1usize..60, seed in any::<u64>(), full in any::<bool>(),
                                bt in 1.0f64..3.0, br in 1.0f64..3.0) {
            let space = if full { SampleSpace::Full } else { SampleSpace::Tri };
            let plan = SamplingPlan { n_samples: n, bias_theta: bt, bias_rho: br, space, seed };
            let params = build_dataset_params(&plan).unwrap();
            prop_assert_eq!(params.len(), n);
            for s in &params {
                prop_assert!(s.validate().is_ok());
                if !full {
                    prop_assert!(s.theta[0] >= s.theta[1] && s.theta[1] >= s.theta[2]);
                }
            }
        }

        #[test]
        fn simplex_is_descending(xi in proptest::collection::vec(1e-9f64..1.0, 1..5)) {
            let v = simplex_transform(&xi);
            prop_assert!(v[0] <= 1.0 && *v.last().unwrap() > 0.0);
            for w in v.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn bias_keeps_order(a in 1e-6f64..1.0, b in 1e-6f64..1.0, e in 1.0f64..4.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(apply_bias(lo, e) <= apply_bias(hi, e));
            prop_assert!(apply_bias(a, e) <= a && apply_bias(a, e) > 0.0);
        }
    }
}
