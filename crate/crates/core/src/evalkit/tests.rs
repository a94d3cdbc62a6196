use super::*;
use crate::nets::{NetConfig, Precision};
use crate::testutil::random_image;

fn model() -> Model {
    Model::new(NetConfig::tiny(), Precision::F64).unwrap()
}

fn solid(rgb: [f64; 3], h: usize, w: usize) -> ImageTensor {
    let data = rgb.iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect();
    ImageTensor::new(3, h, w, data).unwrap()
}

#[test]
fn chamfer_of_identical_images_is_zero() {
    let a = random_image(1, 12, 9);
    assert_eq!(chamfer_color(&a, &a, None, 0).unwrap(), 0.0);
}

#[test]
fn chamfer_single_pixel_hand_case() {
    let red = solid([1.0, 0.0, 0.0], 1, 1);
    let blue = solid([0.0, 0.0, 1.0], 1, 1);
    // 255² + 255² in each direction.
    assert_eq!(chamfer_color(&red, &blue, None, 0).unwrap(), 260_100.0);
}

#[test]
fn chamfer_matches_brute_force_and_ignores_pixel_order() {
    let (a, b) = (random_image(2, 6, 7), random_image(3, 5, 4));
    let pts = |img: &ImageTensor| -> Vec<[f64; 3]> {
        (0..img.pixel_count()).map(|i| [0, 1, 2].map(|c| img.plane(c)[i] * 255.0)).collect()
    };
    let nn = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    };
    let (pa, pb) = (pts(&a), pts(&b));
    let oracle = pa.iter().map(|p| nn(p, &pb)).sum::<f64>() / pa.len() as f64
        + pb.iter().map(|p| nn(p, &pa)).sum::<f64>() / pb.len() as f64;
    let got = chamfer_color(&a, &b, None, 0).unwrap();
    assert!((got - oracle).abs() < 1e-9 * oracle.max(1.0));
    assert!((got - chamfer_color(&b, &a, None, 0).unwrap()).abs() < 1e-9 * got);

    let t = a.transpose();
    assert!((chamfer_color(&t, &b, None, 0).unwrap() - got).abs() < 1e-9 * got);
    let up = a.upscale_nearest(3);
    assert!((chamfer_color(&up, &b, None, 0).unwrap() - got).abs() < 1e-9 * got);
}

#[test]
fn chamfer_subsampling_is_seeded() {
    let (a, b) = (random_image(4, 20, 20), random_image(5, 20, 20));
    let x = chamfer_color(&a, &b, Some(50), 7).unwrap();
    assert_eq!(x, chamfer_color(&a, &b, Some(50), 7).unwrap());
    assert!(x.is_finite() && x > 0.0);
    assert!(chamfer_color(&a, &b, Some(0), 7).is_err());
}

fn diag_stats(mean: &[f64], var: &[f64]) -> FeatureStats {
    FeatureStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
    }
}

#[test]
fn frechet_diagonal_closed_form() {
    let a = diag_stats(&[0.1, -0.4, 2.0], &[1.0, 0.25, 4.0]);
    let b = diag_stats(&[0.3, 0.6, 1.0], &[0.5, 1.5, 0.1]);
    let expected: f64 = (0..3)
        .map(|i| {
            let (va, vb) = (a.cov[(i, i)], b.cov[(i, i)]);
            (a.mean[i] - b.mean[i]).powi(2) + (va.sqrt() - vb.sqrt()).powi(2)
        })
        .sum();
    let got = frechet_distance(&a, &b).unwrap();
    assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
    assert!((frechet_distance(&b, &a).unwrap() - got).abs() < 1e-4);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    assert!(frechet_distance(&a, &diag_stats(&[0.0], &[1.0])).is_err());
}

#[test]
fn feature_stats_use_unbiased_covariance() {
    // Two channels over three positions.
    let t = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
    let s = FeatureStats::from_feature_map(&t).unwrap();
    assert_eq!(s.mean.as_slice(), &[2.0, 4.0]);
    assert_eq!(s.cov[(0, 0)], 1.0);
    assert_eq!(s.cov[(0, 1)], 2.0);
    assert_eq!(s.cov[(1, 1)], 4.0);

    let single = Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
    assert!(FeatureStats::from_feature_map(&single).is_err());
}

#[test]
fn sifid_is_zero_for_identical_and_symmetric() {
    let m = model();
    let (a, b) = (random_image(6, 32, 32), random_image(7, 32, 32));
    assert!(sifid(&m, &a, &a).unwrap().abs() < 1e-6);
    let ab = sifid(&m, &a, &b).unwrap();
    assert!((ab - sifid(&m, &b, &a).unwrap()).abs() < 1e-4 * ab.max(1.0));
    assert!(sifid(&m, &solid([0.5; 3], 4, 4), &a).is_err());
}

#[test]
fn content_proxy_grows_with_distortion() {
    let m = model();
    let c = random_image(8, 32, 32);
    let noise = random_image(9, 32, 32);
    assert_eq!(content_proxy(&m, &c, &c).unwrap(), 0.0);
    let scores: Vec<f64> = [0.05, 0.1, 0.2, 0.4, 0.8]
        .iter()
        .map(|&k| {
            let data = c.data().iter().zip(noise.data()).map(|(x, n)| x + k * (n - 0.5)).collect();
            let d = ImageTensor::new(3, 32, 32, data).unwrap();
            content_proxy(&m, &c, &d).unwrap()
        })
        .collect();
    assert!(scores.iter().all(|s| s.is_finite() && *s > 0.0));
    assert!(scores.windows(2).all(|w| w[0] < w[1]), "{scores:?}");
}

#[test]
fn report_csv_and_table_shapes() {
    let pair = |label: &str, x: f64| PairMetrics {
        label: label.into(),
        chamfer: x,
        sifid: 2.0 * x,
        content_proxy: 3.0 * x,
    };
    let r = MetricReport {
        pairs: vec![pair("a", 1.0), pair("b,c", 3.0)],
    };
    assert_eq!(r.means(), Some((2.0, 4.0, 6.0)));
    let csv = r.to_csv();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "pair,chamfer,sifid,content_proxy");
    assert_eq!(lines[2], "\"b,c\",3,6,9");
    assert_eq!(lines[3], "mean,2,4,6");
    let table = r.to_table("ours");
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("ours") && table.contains("2.00"));
    assert_eq!(MetricReport::default().means(), None);
}

#[test]
fn evaluate_pair_fills_every_metric() {
    let m = model();
    let (c, s) = (random_image(10, 16, 16), random_image(11, 16, 16));
    let p = evaluate_pair(&m, "x", &c, &s, &c, Some(64), 0).unwrap();
    assert_eq!(p.content_proxy, 0.0);
    assert!(p.chamfer > 0.0 && p.sifid > 0.0);
}

#[test]
fn median_of_stub_timings() {
    let mut calls = 0;
    let t = median_seconds(2, 5, || {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 7);
    assert!((0.0..0.01).contains(&t));
    assert!(median_seconds(0, 0, || Ok(())).is_err());
}

#[test]
fn bench_report_layout() {
    let m = model();
    let opts = BenchOptions {
        warmup: 0,
        runs: 1,
        ..BenchOptions::default()
    };
    let r = bench(&m, &[(16, 16), (16, 24), (4, 4)], &opts);
    assert_eq!(r.rows.len(), 2);
    for (_, cells) in &r.rows {
        assert_eq!(cells.len(), 3);
        assert!(cells[0].is_some() && cells[1].is_some());
        assert!(cells[2].is_none());
    }
    let table = r.to_table();
    assert!(table.contains("24x16") && table.contains("unavailable"));
    assert_eq!(r.to_csv().lines().next().unwrap(), "Model,16x16,24x16,4x4");
    assert_eq!(DEFAULT_RESOLUTIONS.len(), 3);
}
