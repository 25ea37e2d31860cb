use alignfield_core::fixtures::centered_sphere;
use alignfield_core::render::{render_view, LatentSource};
use alignfield_core::toy::*;
use alignfield_core::train::*;
use alignfield_core::{LatentCode, LightSample, NeuralField};

#[test]
fn fitted_field_ignores_the_latent_code() {
    let scene = centered_sphere();
    let bounds = toy_bounds();
    let one = LatentCode::vertex(1, 0);
    let views = ring_views(&scene, &one, bounds.center(), 2.0 * bounds.radius(), &[0.0, 20.0], 12, 24, &toy_ray_march(false)).unwrap();
    let mut field = NeuralField::new(toy_field_config(2), 1).unwrap();
    fit_to_views(&views, &mut field, &toy_fit_config(300, 1)).unwrap();
    let mut worst = 0.0f64;
    for k in 0..4 {
        let camera = toy_orbit(0.3 + 1.5 * k as f64, 0.2, 24);
        let render = |u: &LatentCode| render_view(&field, &camera, LatentSource::Fixed(u), &LightSample::ambient_only(), &toy_ray_march(false), 0).unwrap();
        let (a, b) = (render(&LatentCode::vertex(2, 0)), render(&LatentCode::vertex(2, 1)));
        worst = worst.max(a.rgb.max_abs_diff(&b.rgb));
    }
    assert!(worst <= 1e-3, "vertex renders differ by {worst:.3e}");
}

#[test]
fn same_seed_gives_identical_training() {
    let config = toy_generation_config(8, 0.5, 21);
    let (mut log_a, mut log_b) = (RecordLog::default(), RecordLog::default());
    let a = train_toy(&config, &mut log_a).unwrap();
    let b = train_toy(&config, &mut log_b).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(log_a.0, log_b.0);
    let c = train_toy(&toy_generation_config(8, 0.5, 22), &mut ()).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let mut log = RecordLog::default();
    train_toy(&toy_generation_config(10, 0.5, 3), &mut log).unwrap();
    assert_eq!(log.0.len(), 10);
    for record in &log.0 {
        let sum: f64 = record.losses.terms.iter().map(|t| t.weight * t.value).sum();
        assert!((record.losses.total - sum).abs() <= 1e-6, "{record:?}");
        let names: Vec<&str> = record.losses.terms.iter().map(|t| t.name.as_str()).collect();
        for expected in ["sds", "orientation", "normal_smoothness"] {
            assert!(names.contains(&expected), "missing {expected} in {names:?}");
        }
        match record.site {
            Site::Vertex(i) => assert_eq!(record.u[i], 1.0),
            Site::Edge(i, j) => assert!((record.u[i] + record.u[j] - 1.0).abs() < 1e-12),
        }
    }
}
