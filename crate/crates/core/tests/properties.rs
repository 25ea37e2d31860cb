use alignfield_core::diffrender::{backprop_rays, render_rays, Reduction, RayAdjoint};
use alignfield_core::fixtures::DensityFn;
use alignfield_core::guidance::{blend_embeddings, EmbeddingSet, PromptEmbedding};
use alignfield_core::hybrid::{Anchor, AnchorSet};
use alignfield_core::metrics::{dift_distance_features, FeatureMap, Mask};
use alignfield_core::optim::{adam_step, AdamState};
use alignfield_core::render::{generate_rays, render_ray, LatentSource, Ray};
use alignfield_core::toy::{tiny_field_config, toy_orbit, toy_ray_march};
use alignfield_core::train::{sample_latent, uniform_simplex, Site};
use alignfield_core::{LatentCode, LightSample, NeuralField, RayMarchConfig, Vec3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn on_simplex(u: &LatentCode) -> bool {
    let s = u.as_slice();
    (s.iter().sum::<f64>() - 1.0).abs() <= LatentCode::SUM_TOLERANCE && s.iter().all(|&x| x >= -LatentCode::NEG_TOLERANCE)
}

fn simplex_point(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("non-zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_latents_stay_on_the_simplex(seed in any::<u64>(), n in 1usize..6, p in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let (u, site) = sample_latent(p, n, &mut rng);
            prop_assert!(on_simplex(&u));
            match site {
                Site::Vertex(i) => prop_assert_eq!(u.vertex_index(), Some(i)),
                Site::Edge(i, j) => {
                    prop_assert!(i < j && j < n);
                    for (k, &x) in u.as_slice().iter().enumerate() {
                        if k != i && k != j {
                            prop_assert_eq!(x, 0.0);
                        }
                    }
                }
            }
            prop_assert!(on_simplex(&uniform_simplex(n, &mut rng)));
        }
    }

    #[test]
    fn edge_codes_interpolate_vertices(n in 2usize..6, t in 0.0f64..=1.0, a in 0usize..6, b in 0usize..6) {
        let (i, j) = (a % n, b % n);
        prop_assume!(i != j);
        let u = LatentCode::edge(n, i, j, t);
        prop_assert!(on_simplex(&u));
        prop_assert_eq!(u.as_slice()[i], t);
    }

    #[test]
    fn blended_embeddings_stay_in_the_hull(u in simplex_point(3), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vertices: Vec<PromptEmbedding> = (0..3).map(|_| PromptEmbedding((0..5).map(|_| rng.random_range(-2.0..2.0)).collect())).collect();
        let set = EmbeddingSet::new(vertices.clone(), None).unwrap();
        let code = LatentCode::new(u).unwrap();
        let y = blend_embeddings(&code, &set).unwrap();
        for d in 0..5 {
            let lo = vertices.iter().map(|v| v.0[d]).fold(f64::INFINITY, f64::min);
            let hi = vertices.iter().map(|v| v.0[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(y.0[d] >= lo - 1e-12 && y.0[d] <= hi + 1e-12);
        }
        for (i, v) in vertices.iter().enumerate() {
            prop_assert_eq!(&blend_embeddings(&LatentCode::vertex(3, i), &set).unwrap().0, &v.0);
        }
    }

    #[test]
    fn dift_distance_is_symmetric(seed in any::<u64>(), w in 3usize..12, h in 3usize..12, stride in 1usize..3) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = || {
            let v: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureMap::from_fn(w, h, 3, |r, c| v[(r * w + c) * 3..(r * w + c + 1) * 3].to_vec())
        };
        let (fa, fb) = (features(), features());
        let ma = Mask::new(w, h, (0..w * h).map(|_| rng.random::<f64>() < 0.5).collect()).unwrap();
        let mb = Mask::new(w, h, (0..w * h).map(|_| rng.random::<f64>() < 0.5).collect()).unwrap();
        let ab = dift_distance_features(&fa, &ma, &fb, &mb, stride);
        let ba = dift_distance_features(&fb, &mb, &fa, &ma, stride);
        match (ab, ba) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x.distance - y.distance).abs() <= 1e-12);
                prop_assert!(x.distance >= 0.0);
            }
            (Err(_), Err(_)) => {}
            (x, y) => prop_assert!(false, "one direction failed: {x:?} / {y:?}"),
        }
    }

    #[test]
    fn more_density_never_lets_more_light_through(seed in any::<u64>(), scale in 1.0f64..5.0, n in 2usize..64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<(f64, f64)> = (0..4).map(|_| (rng.random_range(0.5..4.0), rng.random_range(0.0..3.0))).collect();
        let blobs = move |z: f64| centers.iter().map(|&(c, d)| d * (-(z - c).powi(2) * 8.0).exp()).sum::<f64>();
        let b2 = blobs.clone();
        let thin = DensityFn::new(move |p: Vec3| blobs(p.z));
        let thick = DensityFn::new(move |p: Vec3| scale * b2(p.z));
        let ray = Ray { origin: Vec3::ZERO, dir: Vec3::Z };
        let u = LatentCode::vertex(1, 0);
        let light = LightSample::ambient_only();
        for far in [1.0, 2.0, 3.0, 4.5] {
            let config = RayMarchConfig { n_samples: n, near: 0.1, far, stratified_jitter: false, background: [0.0; 3] };
            let a = render_ray(&thin, &ray, LatentSource::Fixed(&u), &light, &config, 0);
            let b = render_ray(&thick, &ray, LatentSource::Fixed(&u), &light, &config, 0);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a.opacity));
            prop_assert!(b.opacity >= a.opacity - 1e-12);
        }
    }

    #[test]
    fn adam_commutes_with_permutation(seed in any::<u64>(), len in 1usize..40, steps in 1usize..5) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng);
        let mut permuted: Vec<f64> = perm.iter().map(|&i| params[i]).collect();
        let mut sa = AdamState::new(len, 1e-2, 0.9, 0.99, 1e-15);
        let mut sb = sa.clone();
        for _ in 0..steps {
            let grads: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pg: Vec<f64> = perm.iter().map(|&i| grads[i]).collect();
            adam_step(&mut params, &grads, &mut sa).unwrap();
            adam_step(&mut permuted, &pg, &mut sb).unwrap();
        }
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted[k].to_bits(), params[i].to_bits());
        }
    }

    #[test]
    fn anchors_own_their_neighbourhood(seed in any::<u64>(), count in 2usize..6) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors: Vec<Anchor> = (0..count)
            .map(|k| Anchor {
                position: Vec3::new(k as f64, rng.random_range(-0.2..0.2), 0.0),
                code: uniform_simplex(3, &mut rng),
            })
            .collect();
        let set = AnchorSet::new(anchors.clone(), 0.0).unwrap();
        for a in &anchors {
            prop_assert_eq!(set.latent_at(a.position), a.code.clone());
            let near = a.position + Vec3::new(0.0, 0.0, 1e-9);
            let got = set.latent_at(near);
            for (x, y) in got.as_slice().iter().zip(a.code.as_slice()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
        let mid = (anchors[0].position + anchors[1].position) * 0.5 + Vec3::new(0.0, 0.0, 0.3);
        prop_assert!(on_simplex(&set.latent_at(mid)));
    }
}

fn batch_grads(field: &NeuralField, rays: &[Ray], u: &LatentCode, adjoints: &[RayAdjoint]) -> Vec<f64> {
    let mut g = vec![0.0; field.param_count()];
    backprop_rays(field, rays, LatentSource::Fixed(u), &LightSample::ambient_only(), &toy_ray_march(false), 0, adjoints, &mut g, Reduction::Sequential).unwrap();
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradients_are_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = NeuralField::new(tiny_field_config(2), seed).unwrap();
        let rays = generate_rays(&toy_orbit(0.4, 0.2, 6)).unwrap();
        let u = LatentCode::new(vec![0.35, 0.65]).unwrap();
        let out = render_rays(&field, &rays, LatentSource::Fixed(&u), &LightSample::ambient_only(), &toy_ray_march(false), 0);
        prop_assert_eq!(out.len(), rays.len());
        let mut adj = || -> Vec<RayAdjoint> {
            (0..rays.len()).map(|_| RayAdjoint { d_color: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], d_opacity: rng.random_range(-1.0..1.0) }).collect()
        };
        let (l1, l2) = (adj(), adj());
        let combined: Vec<RayAdjoint> = l1.iter().zip(&l2).map(|(x, y)| RayAdjoint {
            d_color: [a * x.d_color[0] + b * y.d_color[0], a * x.d_color[1] + b * y.d_color[1], a * x.d_color[2] + b * y.d_color[2]],
            d_opacity: a * x.d_opacity + b * y.d_opacity,
        }).collect();
        let (g1, g2, g) = (batch_grads(&field, &rays, &u, &l1), batch_grads(&field, &rays, &u, &l2), batch_grads(&field, &rays, &u, &combined));
        let scale = g.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
        for i in 0..g.len() {
            let want = a * g1[i] + b * g2[i];
            prop_assert!((g[i] - want).abs() <= 1e-6 * scale, "param {i}: {} vs {want}", g[i]);
        }
    }
}
