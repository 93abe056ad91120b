//! Joint and vertex error metrics.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelTemplate, PartTag};
use crate::rotation::{Mat3, Vec3};

/// `x ↦ scale·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            scale: 1.0,
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn check_pair(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dims(format!("{} predicted points vs {} ground truth", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::dims("no points to compare"));
    }
    Ok(())
}

fn mean_distance(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / pred.len() as f64)
}

/// Mean per-joint Euclidean error.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance(pred, gt)
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Least-squares similarity transform taking `pred` onto `gt`, without
/// reflections, and the transformed `pred`.
pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3]) -> Result<(SimilarityTransform, Vec<Vec3>)> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let (mp, mg) = (centroid(pred), centroid(gt));
    let var_p = pred.iter().map(|p| (p - mp).norm_squared()).sum::<f64>() / n;
    let var_g = gt.iter().map(|g| (g - mg).norm_squared()).sum::<f64>() / n;
    for (var, mean, what) in [(var_p, mp, "prediction"), (var_g, mg, "ground truth")] {
        if !(var > f64::EPSILON * (1.0 + mean.norm_squared())) {
            return Err(Error::Degenerate(format!("{what} points have no spread")));
        }
    }
    let cov = pred
        .iter()
        .zip(gt)
        .fold(Mat3::zeros(), |acc, (p, g)| acc + (g - mg) * (p - mp).transpose())
        / n;
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut signs = Vec3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        signs.z = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.dot(&signs) / var_p;
    let tf = SimilarityTransform {
        rotation,
        scale,
        translation: mg - scale * (rotation * mp),
    };
    let aligned = pred.iter().map(|p| tf.apply(p)).collect();
    Ok((tf, aligned))
}

pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let (_, aligned) = procrustes_align(pred, gt)?;
    mpjpe(&aligned, gt)
}

/// Mean vertex-to-vertex distance; meshes must share a topology.
pub fn v2v(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance(pred, gt)
}

pub fn pa_v2v(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let (_, aligned) = procrustes_align(pred, gt)?;
    v2v(&aligned, gt)
}

/// Thresholds at which PCK curves are sampled by default.
pub const DEFAULT_PCK_STEPS: usize = 100;

/// PCK at `steps` evenly spaced thresholds over `[lo, hi]` as
/// `(threshold, fraction)` pairs, and the trapezoidal area under the curve
/// divided by `hi − lo`.
pub fn pck_auc(errors: &[f64], lo: f64, hi: f64, steps: usize) -> Result<(Vec<(f64, f64)>, f64)> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("no errors to score".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) || steps < 2 {
        return Err(Error::InvalidInput(format!(
            "need lo < hi and at least 2 steps, got [{lo}, {hi}] with {steps}"
        )));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::InvalidInput("error values contain NaN".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let curve: Vec<(f64, f64)> = (0..steps)
        .map(|i| {
            let tau = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
            (tau, sorted.partition_point(|&e| e <= tau) as f64 / n)
        })
        .collect();
    let area: f64 = curve.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum();
    Ok((curve, area / (hi - lo)))
}

/// One row of a per-part mesh error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartErrors {
    pub part: String,
    pub v2v: f64,
    pub pa_v2v: f64,
}

/// Row labels of [`mesh_error_rows`], in order.
pub const TABLE_ROWS: [&str; 5] = ["All", "Body", "L-Hand", "R-Hand", "Face"];

/// V2V and PA-V2V over the whole mesh and over each part's vertices, each
/// part aligned on its own.
pub fn mesh_error_rows(template: &ModelTemplate, pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<PartErrors>> {
    if pred.len() != template.num_vertices() || gt.len() != template.num_vertices() {
        return Err(Error::dims("meshes do not match the template's vertex count"));
    }
    let masks = template.part_vertices();
    let all: Vec<usize> = (0..pred.len()).collect();
    let sets = [
        &all[..],
        masks.get(PartTag::Body),
        masks.get(PartTag::LeftHand),
        masks.get(PartTag::RightHand),
        masks.get(PartTag::Face),
    ];
    TABLE_ROWS
        .iter()
        .zip(sets)
        .map(|(name, ids)| {
            let p: Vec<Vec3> = ids.iter().map(|&i| pred[i]).collect();
            let g: Vec<Vec3> = ids.iter().map(|&i| gt[i]).collect();
            Ok(PartErrors {
                part: name.to_string(),
                v2v: v2v(&p, &g)?,
                pa_v2v: pa_v2v(&p, &g)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::rodrigues;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> SimilarityTransform {
        let aa = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        SimilarityTransform {
            rotation: rodrigues(&aa),
            scale: rng.random_range(0.2..5.0),
            translation: Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)),
        }
    }

    fn residual(a: &[Vec3], b: &[Vec3]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum()
    }

    #[test]
    fn mpjpe_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(&mut rng, 20);
        assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        let d = Vec3::new(0.3, -0.4, 1.2);
        let b: Vec<Vec3> = a.iter().map(|p| p + d).collect();
        assert!((mpjpe(&a, &b).unwrap() - d.norm()).abs() < 1e-12);
        assert!((v2v(&a, &b).unwrap() - d.norm()).abs() < 1e-12);
        let c = cloud(&mut rng, 20);
        let mut oracle = 0.0;
        for i in 0..20 {
            oracle += ((a[i].x - c[i].x).powi(2) + (a[i].y - c[i].y).powi(2) + (a[i].z - c[i].z).powi(2)).sqrt();
        }
        assert!((mpjpe(&a, &c).unwrap() - oracle / 20.0).abs() < 1e-12);
        assert!(matches!(v2v(&a, &c[..5]), Err(Error::DimensionMismatch(_))));
        assert!(mpjpe(&[], &[]).is_err());
    }

    #[test]
    fn procrustes_recovers_exact_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = cloud(&mut rng, 15);
            let tf = random_similarity(&mut rng);
            let g: Vec<Vec3> = p.iter().map(|x| tf.apply(x)).collect();
            let (est, aligned) = procrustes_align(&p, &g).unwrap();
            assert!(residual(&aligned, &g) < 1e-8);
            assert!((est.scale - tf.scale).abs() < 1e-9);
            assert!((est.rotation - tf.rotation).norm() < 1e-9);
            assert!(pa_mpjpe(&p, &g).unwrap() < 1e-8);
            assert!(pa_v2v(&p, &g).unwrap() < 1e-8);
        }
    }

    #[test]
    fn procrustes_of_identical_sets_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = cloud(&mut rng, 10);
        let (tf, _) = procrustes_align(&p, &p).unwrap();
        assert!((tf.rotation - Mat3::identity()).norm() < 1e-12);
        assert!((tf.scale - 1.0).abs() < 1e-12);
        assert!(tf.translation.norm() < 1e-12);
    }

    #[test]
    fn procrustes_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let p = cloud(&mut rng, 12);
            let g = cloud(&mut rng, 12);
            let (_, aligned) = procrustes_align(&p, &g).unwrap();
            let best = residual(&aligned, &g);
            for _ in 0..1000 {
                let tf = random_similarity(&mut rng);
                let other: Vec<Vec3> = p.iter().map(|x| tf.apply(x)).collect();
                assert!(best <= residual(&other, &g) + 1e-12);
            }
        }
    }

    #[test]
    fn procrustes_excludes_reflections() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = cloud(&mut rng, 10);
        let g: Vec<Vec3> = p.iter().map(|x| Vec3::new(-x.x, x.y, x.z)).collect();
        let (tf, _) = procrustes_align(&p, &g).unwrap();
        assert!((tf.rotation.determinant() - 1.0).abs() < 1e-12);
        assert!((tf.rotation.transpose() * tf.rotation - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn procrustes_rejects_collapsed_sets() {
        let p = vec![Vec3::new(1.0, 2.0, 3.0); 5];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = cloud(&mut rng, 5);
        assert!(matches!(procrustes_align(&p, &g), Err(Error::Degenerate(_))));
        assert!(matches!(procrustes_align(&g, &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn table_rows_follow_part_masks() {
        let t = crate::toy::make_toy_model(&Default::default(), 2).unwrap();
        let rest = t.rest_vertices().to_vec();
        let rows = mesh_error_rows(&t, &rest, &rest).unwrap();
        assert_eq!(rows.iter().map(|r| r.part.as_str()).collect::<Vec<_>>(), TABLE_ROWS);
        assert!(rows.iter().all(|r| r.v2v == 0.0 && r.pa_v2v < 1e-12));
        // moving only the left hand leaves the other parts at zero
        let d = Vec3::new(0.0, 0.01, 0.0);
        let mut moved = rest.clone();
        for &v in t.part_vertices().get(PartTag::LeftHand) {
            moved[v] += d;
        }
        let rows = mesh_error_rows(&t, &moved, &rest).unwrap();
        assert!((rows[2].v2v - 0.01).abs() < 1e-12);
        assert!(rows[2].pa_v2v < 1e-9);
        assert_eq!(rows[3].v2v, 0.0);
        assert!(rows[0].v2v > 0.0 && rows[0].v2v < 0.01);
        assert!(mesh_error_rows(&t, &moved[1..], &rest).is_err());
    }

    #[test]
    fn pck_auc_cases() {
        assert_eq!(pck_auc(&[0.0; 10], 20.0, 50.0, 100).unwrap().1, 1.0);
        assert_eq!(pck_auc(&[60.0; 10], 20.0, 50.0, 100).unwrap().1, 0.0);
        let steps = 100;
        let errors: Vec<f64> = (0..1000).map(|i| 20.0 + 30.0 * (i as f64 + 0.5) / 1000.0).collect();
        let (curve, auc) = pck_auc(&errors, 20.0, 50.0, steps).unwrap();
        assert!((auc - 0.5).abs() <= 1.0 / steps as f64, "{auc}");
        assert_eq!(curve.len(), steps);
        assert_eq!(curve[0].0, 20.0);
        assert_eq!(curve[steps - 1], (50.0, 1.0));
        // trapezoid oracle on the same samples
        let mut area = 0.0;
        for w in curve.windows(2) {
            area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
        }
        assert!((auc - area / 30.0).abs() < 1e-12);
        assert!(pck_auc(&[], 0.0, 1.0, 10).is_err());
        assert!(pck_auc(&[1.0], 1.0, 1.0, 10).is_err());
        assert!(pck_auc(&[1.0], 0.0, 1.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn pa_mpjpe_never_exceeds_mpjpe(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = cloud(&mut rng, 8);
            let g = cloud(&mut rng, 8);
            prop_assert!(pa_mpjpe(&p, &g).unwrap() <= mpjpe(&p, &g).unwrap() + 1e-12);
        }

        #[test]
        fn pa_mpjpe_ignores_similarity_of_pred(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = cloud(&mut rng, 8);
            let g = cloud(&mut rng, 8);
            let tf = random_similarity(&mut rng);
            let moved: Vec<Vec3> = p.iter().map(|x| tf.apply(x)).collect();
            prop_assert!((pa_mpjpe(&moved, &g).unwrap() - pa_mpjpe(&p, &g).unwrap()).abs() < 1e-8);
        }

        #[test]
        fn auc_is_monotone(errs in proptest::collection::vec(0.0f64..80.0, 1..50), shrink in proptest::collection::vec(0.0f64..1.0, 50)) {
            let smaller: Vec<f64> = errs.iter().zip(&shrink).map(|(e, s)| e * s).collect();
            let (_, a) = pck_auc(&errs, 20.0, 50.0, 100).unwrap();
            let (_, b) = pck_auc(&smaller, 20.0, 50.0, 100).unwrap();
            prop_assert!(b >= a);
        }
    }
}
