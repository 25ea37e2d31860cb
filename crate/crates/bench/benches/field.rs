use std::hint::black_box;

use alignfield_core::diffrender::{backprop_rays, Reduction, RayAdjoint};
use alignfield_core::render::{generate_rays, render_ray, render_view, LatentSource};
use alignfield_core::toy::{toy_field_config, toy_orbit, toy_ray_march};
use alignfield_core::{LatentCode, LightSample, NeuralField, Vec3};
use criterion::{criterion_group, criterion_main, Criterion};

fn field() -> NeuralField {
    NeuralField::new(toy_field_config(2), 0).unwrap()
}

fn encode(c: &mut Criterion) {
    let f = field();
    let p = Vec3::new(0.11, -0.23, 0.31);
    c.bench_function("encode_position", |b| b.iter(|| f.encode_position(black_box(p)).unwrap()));
}

fn eval(c: &mut Criterion) {
    let f = field();
    let p = Vec3::new(0.11, -0.23, 0.31);
    let u = LatentCode::new(vec![0.4, 0.6]).unwrap();
    c.bench_function("eval_field", |b| b.iter(|| f.eval_field(black_box(p), &u).unwrap()));
}

fn render(c: &mut Criterion) {
    let f = field();
    let u = LatentCode::new(vec![0.4, 0.6]).unwrap();
    let camera = toy_orbit(0.5, 0.2, 32);
    let rays = generate_rays(&camera).unwrap();
    let ray = rays[rays.len() / 2 + 16];
    let light = LightSample::ambient_only();
    let march = toy_ray_march(false);
    c.bench_function("render_ray", |b| b.iter(|| render_ray(&f, black_box(&ray), LatentSource::Fixed(&u), &light, &march, 0)));
    c.bench_function("render_view_32", |b| b.iter(|| render_view(&f, &camera, LatentSource::Fixed(&u), &light, &march, 0).unwrap()));
}

fn backward(c: &mut Criterion) {
    let f = field();
    let u = LatentCode::new(vec![0.4, 0.6]).unwrap();
    let rays = generate_rays(&toy_orbit(0.5, 0.2, 16)).unwrap();
    let adjoints = vec![
        RayAdjoint {
            d_color: [0.1, -0.2, 0.3],
            d_opacity: 0.05,
        };
        rays.len()
    ];
    let light = LightSample::ambient_only();
    let march = toy_ray_march(false);
    let mut grads = vec![0.0; f.param_count()];
    c.bench_function("backprop_rays_256", |b| {
        b.iter(|| {
            grads.fill(0.0);
            backprop_rays(&f, &rays, LatentSource::Fixed(&u), &light, &march, 0, &adjoints, &mut grads, Reduction::Sequential).unwrap();
        })
    });
}

criterion_group!(benches, encode, eval, render, backward);
criterion_main!(benches);
