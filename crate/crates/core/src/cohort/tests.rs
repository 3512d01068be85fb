use super::*;
use crate::bdvae::{Architecture, ModelConfig};
use crate::datamodel::Modality;
use crate::maskspec::{MaskEntry, MaskSet, Role};
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rec(time: f64, event: bool) -> SurvivalRecord {
    SurvivalRecord { time, event }
}

fn sample(id: &str, response: u8, pfs: f64) -> SampleRecord {
    SampleRecord {
        sample_id: id.to_string(),
        response,
        tissue: "t".into(),
        tissue_code: 0,
        pfs_time: Some(pfs),
        pfs_event: Some(1),
        split: None,
    }
}

/// Direct product over event times at or before `t`.
fn km_oracle(records: &[SurvivalRecord], t: f64) -> f64 {
    let mut times: Vec<f64> = records.iter().filter(|r| r.event && r.time <= t).map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut s = 1.0;
    for u in times {
        let n = records.iter().filter(|r| r.time >= u).count() as f64;
        let d = records.iter().filter(|r| r.time == u && r.event).count() as f64;
        s *= (n - d) / n;
    }
    s
}

#[test]
fn km_examples() {
    let c = km_estimator(&[rec(1.0, true), rec(2.0, true), rec(3.0, true)]).unwrap();
    let s: Vec<f64> = c.points.iter().map(|p| p.survival).collect();
    assert!(close(s[0], 2.0 / 3.0, 1e-15) && close(s[1], 1.0 / 3.0, 1e-15) && s[2] == 0.0);

    let c = km_estimator(&[rec(1.0, false), rec(4.0, false)]).unwrap();
    assert!(c.points.is_empty());
    assert_eq!(c.survival_at(10.0), 1.0);

    let c = km_estimator(&[rec(4.0, false), rec(5.0, true)]).unwrap();
    assert_eq!(c.points[0].at_risk, 1);
    assert_eq!(c.survival_at(5.0), 0.0);
    assert_eq!(c.survival_at(4.99), 1.0);
}

#[test]
fn logrank_examples() {
    let g: Vec<SurvivalRecord> = (1..=10).map(|t| rec(t as f64, t % 3 != 0)).collect();
    let r = logrank_test(&[g.clone(), g]).unwrap();
    assert!(r.chi2.abs() < 1e-12 && close(r.p, 1.0, 1e-12));

    let early: Vec<SurvivalRecord> = (1..=20).map(|t| rec(t as f64, true)).collect();
    let late: Vec<SurvivalRecord> = (21..=40).map(|t| rec(t as f64, true)).collect();
    assert!(logrank_test(&[early, late]).unwrap().p < 0.01);

    let censored = vec![rec(1.0, false), rec(2.0, false)];
    let r = logrank_test(&[censored.clone(), censored]).unwrap();
    assert_eq!((r.chi2, r.p), (0.0, 1.0));
}

#[test]
fn logrank_matches_hand_tabulation() {
    // Group A: 1 event, 3 event, 5 censored. Group B: 2 event, 4 event, 6 event.
    let a = vec![rec(1.0, true), rec(3.0, true), rec(5.0, false)];
    let b = vec![rec(2.0, true), rec(4.0, true), rec(6.0, true)];
    // t=1: n=6 nA=3 d=1 → E_A=1/2, V=1·5/5·(3/6)(3/6)=1/4
    // t=2: n=5 nA=2 d=1 → E_A=2/5, V=(2/5)(3/5)=6/25
    // t=3: n=4 nA=2 d=1 → E_A=1/2, V=1/4
    // t=4: n=3 nA=1 d=1 → E_A=1/3, V=(1/3)(2/3)=2/9
    // t=6: n=1 nA=0 d=1 → E_A=0, V=0
    let e = 0.5 + 0.4 + 0.5 + 1.0 / 3.0;
    let v = 0.25 + 6.0 / 25.0 + 0.25 + 2.0 / 9.0;
    let chi2 = (2.0 - e) * (2.0 - e) / v;
    let r = logrank_test(&[a, b]).unwrap();
    assert!(close(r.chi2, chi2, 1e-12));
    assert!(close(r.expected[0], e, 1e-12));
    assert_eq!(r.observed, vec![2.0, 3.0]);
}

#[test]
fn logrank_three_groups_detects_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut draw = |rate: f64| -> Vec<SurvivalRecord> {
        (0..40)
            .map(|_| {
                let u: f64 = rng.random();
                rec(-u.ln() / rate, rng.random::<f64>() < 0.8)
            })
            .collect()
    };
    let r = logrank_test(&[draw(1.0), draw(1.0), draw(4.0)]).unwrap();
    assert_eq!(r.df, 2);
    assert!(r.p < 0.01);
}

#[test]
fn mds_collinear_points() {
    let d = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]];
    let m = classical_mds(&d, 2).unwrap();
    assert!(relative_stress(&d, &m.coords) < 1e-9);
    assert!(m.eigenvalues[1].abs() < 1e-9);
    let fitted = euclidean_distances(&m.coords);
    assert!(close(fitted[0][2], 2.0, 1e-9));
}

#[test]
fn mds_zero_distances_at_origin() {
    let d = vec![vec![0.0; 4]; 4];
    let m = classical_mds(&d, 2).unwrap();
    assert!(m.coords.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn mds_recovers_planar_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let pts = Tensor::matrix(25, 2, (0..50).map(|_| normal(&mut rng) * 3.0).collect()).unwrap();
        let d = euclidean_distances(&pts);
        let m = classical_mds(&d, 2).unwrap();
        assert!(relative_stress(&d, &m.coords) < 1e-9);
        assert_eq!(m.clamped, 0);
    }
}

#[test]
fn mds_on_correlation_distance_is_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = Tensor::matrix(30, 4, (0..120).map(|_| normal(&mut rng)).collect()).unwrap();
    let (d, _) = correlation_distance(&standardize_columns(&v));
    let m = classical_mds(&d, 2).unwrap();
    assert!(m.coords.all_finite());
    let full = classical_mds(&d, 30).unwrap();
    assert!(full.clamped > 0);
    assert!(full.coords.all_finite());
}

fn blobs(rng: &mut ChaCha8Rng, centers: &[Vec<f64>], per: usize, sd: f64) -> (Tensor, Vec<usize>) {
    let d = centers[0].len();
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            for &m in center {
                data.push(m + sd * normal(rng));
            }
            truth.push(c);
        }
    }
    (Tensor::matrix(truth.len(), d, data).unwrap(), truth)
}

#[test]
fn two_anticorrelated_blobs_split_at_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = vec![1.0, -1.0, 2.0, -2.0, 0.5];
    let neg: Vec<f64> = c.iter().map(|v| -v).collect();
    let (x, truth) = blobs(&mut rng, &[c, neg], 10, 0.01);
    let a = correlation_cluster(&x, 1.0).unwrap();
    assert_eq!(a.n_clusters(), 2);
    assert_eq!(adjusted_rand_index(&a.labels, &truth), 1.0);
}

#[test]
fn identical_samples_form_one_cluster() {
    let row = [0.3, -1.2, 2.0];
    let x = Tensor::from_rows(&vec![row.to_vec(); 5]).unwrap();
    let a = correlation_cluster(&x, 1e-6).unwrap();
    assert_eq!(a.n_clusters(), 1);
    assert_eq!(a.constant_samples.len(), 5);
    let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0]]).unwrap();
    let d = correlation_distance(&x).0;
    let m = average_linkage(&d);
    assert_eq!(cut_tree(4, &m, 1e-9)[..3], [1, 1, 1]);
}

#[test]
fn three_blobs_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let centers = vec![
        vec![2.0, 0.0, 0.0, -1.0, 0.0, 1.0],
        vec![0.0, 2.0, 0.0, 0.0, -1.0, -1.0],
        vec![0.0, 0.0, 2.0, 1.0, 1.0, 0.0],
    ];
    let (x, truth) = blobs(&mut rng, &centers, 30, 0.4);
    let a = correlation_cluster(&x, 1.0).unwrap();
    assert!(adjusted_rand_index(&a.labels, &truth) > 0.9, "{:?}", a.labels);
}

#[test]
fn average_linkage_matches_direct_cluster_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts = Tensor::matrix(12, 2, (0..24).map(|_| normal(&mut rng)).collect()).unwrap();
    let d = euclidean_distances(&pts);
    let merges = average_linkage(&d);
    let mut members: Vec<Vec<usize>> = (0..12).map(|i| vec![i]).collect();
    for m in &merges {
        let (a, b) = (&members[m.left], &members[m.right]);
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += d[i][j];
            }
        }
        assert!(close(m.distance, s / (a.len() * b.len()) as f64, 1e-12));
        let mut joined = a.clone();
        joined.extend(b);
        assert_eq!(m.size, joined.len());
        members.push(joined);
    }
    for w in merges.windows(2) {
        assert!(w[1].distance >= w[0].distance - 1e-12);
    }
}

#[test]
fn ari_basics() {
    assert_eq!(adjusted_rand_index(&[1, 1, 2, 2], &[5, 5, 9, 9]), 1.0);
    assert!(adjusted_rand_index(&[1, 2, 1, 2], &[1, 1, 2, 2]) < 0.0);
}

fn embedding(values: Tensor) -> LatentEmbedding {
    let n = values.rows();
    let k = values.cols();
    LatentEmbedding::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        (0..k).map(|j| format!("f{j}.0")).collect(),
        values,
    )
    .unwrap()
}

#[test]
fn screening_keeps_planted_and_drops_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<u8> = (0..80).map(|i| (i % 2) as u8).collect();
    let mut data = Vec::new();
    for &y in &labels {
        data.push(1.0);
        data.push(normal(&mut rng) + 1.5 * y as f64);
        data.push(normal(&mut rng));
    }
    let emb = embedding(Tensor::matrix(80, 3, data).unwrap());
    let s = screen_latents(&emb, &labels, 0.05).unwrap();
    assert!(!s[0].retained && s[0].p == 1.0);
    assert!(s[1].retained);
    assert!(!s[2].retained);
    assert_eq!(s[0].latent, "f0.0");
    assert!(screen_latents(&emb, &[1; 80], 0.05).is_err());
}

#[test]
fn pathway_activity_rules() {
    let th = AnalysisThresholds::default();
    let zeros = embedding(Tensor::zeros(&[6, 2]));
    let clusters = [1, 1, 1, 2, 2, 2];
    let map = vec![("p0".to_string(), vec![0]), ("p1".to_string(), vec![1])];
    let rows = pathway_activity(&zeros, &map, &clusters, &th).unwrap();
    assert!(rows.iter().all(|r| r.medians == vec![0.0, 0.0] && !r.retained));

    let mut shifted = Tensor::zeros(&[6, 2]);
    for i in 3..6 {
        shifted.set2(i, 1, 0.1);
    }
    let rows = pathway_activity(&embedding(shifted), &map, &clusters, &th).unwrap();
    assert!(!rows[0].retained);
    assert!(rows[1].retained && rows[1].star && rows[1].delta == 1.0);
    assert_eq!((rows[1].high_cluster, rows[1].low_cluster), (2, 1));
}

#[test]
fn misaligned_quantile_rule() {
    let mut recs: Vec<SampleRecord> = (1..=100).map(|t| sample(&format!("r{t}"), 1, t as f64)).collect();
    recs.extend((1..=20).map(|t| sample(&format!("n{t}"), 0, t as f64)));
    let rep = misaligned_samples(&recs, 0.05, 0.95).unwrap();
    assert!(close(rep.responder_threshold.unwrap(), 5.95, 1e-12));
    assert_eq!(rep.responders, vec!["r1", "r2", "r3", "r4", "r5"]);
    assert!(close(rep.nonresponder_threshold.unwrap(), 19.05, 1e-12));
    assert_eq!(rep.nonresponders, vec!["n20"]);
    let t = rep.responder_test.unwrap();
    assert_eq!((t.u, t.n_flagged, t.n_rest), (0.0, 5, 95));

    let flat: Vec<SampleRecord> = (0..10).map(|i| sample(&format!("s{i}"), (i % 2) as u8, 7.0)).collect();
    let rep = misaligned_samples(&flat, 0.05, 0.95).unwrap();
    assert!(rep.responders.is_empty() && rep.nonresponders.is_empty());
    assert!(rep.responder_test.is_none());

    let tiny = vec![sample("a", 1, 1.0), sample("b", 0, 2.0)];
    assert_eq!(misaligned_samples(&tiny, 0.05, 0.95).unwrap().warnings.len(), 2);
}

fn masks(n_features: usize, sets: &[Vec<usize>]) -> MaskSet {
    MaskSet {
        entries: sets
            .iter()
            .enumerate()
            .map(|(i, s)| MaskEntry {
                name: format!("f{i}"),
                modality: Modality::Rna,
                role: Role::Specified,
                indices: s.clone(),
            })
            .collect(),
        n_features,
        feature_names: (0..n_features).map(|j| format!("x{j}")).collect(),
    }
}

/// Classifier reads latent 0 only; factor 0 encodes feature 0 linearly.
fn latent0_model() -> BdvaeModel {
    let m = masks(3, &[vec![0], vec![1], vec![2]]);
    let cfg = ModelConfig {
        leaky_slope: 1.0,
        classifier_hidden: Some(1),
        ..ModelConfig::default()
    };
    let mut model = BdvaeModel::init(Architecture::new(&m, &[1, 1, 1], &cfg).unwrap(), 1);
    let w = model.param_mut("cls.w1").unwrap();
    w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0]);
    model.param_mut("cls.w2").unwrap().data_mut()[0] = 1.0;
    for i in 0..3 {
        model.param_mut(&format!("enc.{i}.w_h")).unwrap().data_mut()[0] = 1.0;
        model.param_mut(&format!("enc.{i}.w_mu")).unwrap().data_mut()[0] = 1.0;
    }
    model
}

#[test]
fn permutation_importance_ranks_planted_latent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 400;
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let data: Vec<f64> = labels
        .iter()
        .flat_map(|&y| [normal(&mut rng) + 2.0 * y as f64, normal(&mut rng), normal(&mut rng)])
        .collect();
    let x = Tensor::matrix(n, 3, data).unwrap();
    let model = latent0_model();
    let imp = permutation_importance(&model, &x, &labels, 10, 3).unwrap();
    assert!(imp.base_auc > 0.85);
    assert!(imp.drops[0] > 0.3);
    assert!(imp.drops[1].abs() < 0.02 && imp.drops[2].abs() < 0.02);
    let again = permutation_importance(&model, &x, &labels, 10, 3).unwrap();
    assert_eq!(imp, again);
    assert!(close(all_latents_permuted_auc(&model, &x, &labels, 1).unwrap(), 0.5, 0.1));
}

#[test]
fn attribution_tests_flag_cluster_specific_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clusters: Vec<usize> = (0..90).map(|i| 1 + i % 3).collect();
    let data: Vec<f64> = clusters
        .iter()
        .flat_map(|&c| [normal(&mut rng) + if c == 2 { 3.0 } else { 0.0 }, normal(&mut rng)])
        .collect();
    let attr = Tensor::matrix(90, 2, data).unwrap();
    let names = vec!["g0".to_string(), "g1".to_string()];
    let rows = attribution_tests(&attr, &names, &clusters, &AnalysisThresholds::default()).unwrap();
    assert!(rows[0].large && rows[0].high_cluster == 2);
    assert!(!rows[1].large);
}

#[test]
fn thresholds_validate() {
    assert!(AnalysisThresholds::default().validate().is_ok());
    let bad = AnalysisThresholds {
        fdr: 1.5,
        ..AnalysisThresholds::default()
    };
    assert!(matches!(bad.validate(), Err(CohortError::Threshold { name: "fdr", .. })));
}

proptest! {
    #[test]
    fn km_matches_oracle_and_is_monotone(
        raw in prop::collection::vec((1u8..12, prop::bool::ANY), 1..25),
    ) {
        let recs: Vec<SurvivalRecord> = raw.iter().map(|&(t, e)| rec(t as f64, e)).collect();
        let c = km_estimator(&recs).unwrap();
        let mut prev = 1.0;
        for p in &c.points {
            prop_assert!(p.survival <= prev);
            prev = p.survival;
            prop_assert!(p.events > 0);
        }
        for t in 0..14 {
            let t = t as f64 + 0.5 * (t % 2) as f64;
            prop_assert!(close(c.survival_at(t), km_oracle(&recs, t), 1e-12));
        }
        prop_assert_eq!(c.survival_at(0.0), 1.0);
    }

    #[test]
    fn clustering_invariant_to_latent_affine_rescaling(
        seed in 0u64..500,
        scales in prop::collection::vec(0.1f64..10.0, 4),
        shifts in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(15, 4, (0..60).map(|_| normal(&mut rng)).collect()).unwrap();
        let mut y = x.clone();
        for i in 0..15 {
            for j in 0..4 {
                y.set2(i, j, x.get2(i, j) * scales[j] + shifts[j]);
            }
        }
        let a = correlation_cluster(&x, 0.8).unwrap();
        let b = correlation_cluster(&y, 0.8).unwrap();
        prop_assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn misaligned_flags_unit_invariant(pfs in prop::collection::vec(1.0f64..1000.0, 6..30), scale in 0.01f64..100.0) {
        let recs: Vec<SampleRecord> = pfs.iter().enumerate().map(|(i, &t)| sample(&format!("s{i}"), (i % 2) as u8, t)).collect();
        let scaled: Vec<SampleRecord> = pfs.iter().enumerate().map(|(i, &t)| sample(&format!("s{i}"), (i % 2) as u8, t * scale)).collect();
        let a = misaligned_samples(&recs, 0.05, 0.95).unwrap();
        let b = misaligned_samples(&scaled, 0.05, 0.95).unwrap();
        prop_assert_eq!(a.responders, b.responders);
        prop_assert_eq!(a.nonresponders, b.nonresponders);
    }

    #[test]
    fn pathway_medians_within_range(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::matrix(12, 3, (0..36).map(|_| normal(&mut rng)).collect()).unwrap();
        let emb = embedding(v.clone());
        let clusters: Vec<usize> = (0..12).map(|i| 1 + i % 3).collect();
        let map = vec![("p".to_string(), vec![0, 2])];
        let rows = pathway_activity(&emb, &map, &clusters, &AnalysisThresholds::default()).unwrap();
        let z = standardize_columns(&v);
        for c in 1..=3 {
            let vals: Vec<f64> = (0..12).filter(|&i| clusters[i] == c).flat_map(|i| [z.get2(i, 0), z.get2(i, 2)]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(rows[0].medians[c - 1] >= lo && rows[0].medians[c - 1] <= hi);
        }
    }
}
